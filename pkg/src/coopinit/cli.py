"""Experiment runner.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckptlib
from . import gradcheck
from .config import ConfigError, RunConfig, load
from .data import DatasetPair, load_dataset
from .trainer import (PHASE2_ACTIVATIONS, TrainPlan, evaluate, export_features,
                      read_metrics_csv, run_plan, write_metrics_csv)

log = logging.getLogger("coopinit")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# shared helpers ---------------------------------------------------------------------

def load_data(cfg: RunConfig) -> DatasetPair:
    dtype = np.float64 if cfg["dtype"] == "f64" else np.float32
    name = cfg["dataset"]
    if name == "xor":
        data = load_dataset("xor", dtype=dtype, n=cfg["xor.n"], sigma=cfg["xor.sigma"],
                            weights=cfg["xor.weights"], seed=0)
    else:
        data = load_dataset(name, cfg["data_dir"] or None, dtype)
    return data.limit(cfg["train_limit"], cfg["test_limit"])


def run_dir(out: Path, cfg: RunConfig, plan: TrainPlan, group: Optional[str] = None) -> Path:
    parts = [cfg["experiment"]] + ([group] if group else []) + [plan.label, f"seed{plan.seed}"]
    return out.joinpath(*parts)


def run_one(raw: dict, directory: str, data: Optional[DatasetPair] = None) -> dict:
    """Run one configured plan into ``directory``; returns the final metrics."""
    cfg = RunConfig(raw)
    plan = cfg.plan()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved.cfg").write_text(cfg.dumps())
    if data is None:
        data = load_data(cfg)
    ckpt, records = run_plan(plan, data)
    write_metrics_csv(d / "metrics.csv", records)
    ckptlib.save(d / "final.ckpt", ckpt)
    last = records[-1] if records else None
    log.info("%s: test_acc=%s", d, f"{last.test_acc:.2f}" if last else "n/a")
    return {"dir": str(d), "train_acc": last.train_acc if last else float("nan"),
            "test_acc": last.test_acc if last else float("nan")}


def run_many(jobs: list[tuple[dict, str]], threads: int, data: Optional[DatasetPair]) -> list[dict]:
    if threads <= 1 or len(jobs) <= 1:
        return [run_one(raw, d, data) for raw, d in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_one, raw, d) for raw, d in jobs]
        return [f.result() for f in futures]


def final_accuracies(metrics_path) -> tuple[float, float]:
    recs = read_metrics_csv(metrics_path)
    if not recs:
        return float("nan"), float("nan")
    return recs[-1].train_acc, recs[-1].test_acc


def mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def _write_resolved(path: Path, cfg: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dumps())


# subcommands ------------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    plan = cfg.plan()
    d = run_dir(Path(args.out), cfg, plan)
    run_one(cfg.raw, str(d))
    print(d)
    return EXIT_OK


def ablation_grid(cfg: RunConfig) -> list[RunConfig]:
    """The 14 configurations: baseline and baseline-TPT per activation, WNLA,
    the full mixture, and the two-phase mixture with each Phase-2 activation."""
    grid = []
    for g in PHASE2_ACTIVATIONS:
        grid.append(cfg.with_values(mode="baseline", gamma=g))
    for g in PHASE2_ACTIVATIONS:
        grid.append(cfg.with_values(mode="baseline-tpt", gamma=g))
    grid.append(cfg.with_values(mode="wnla"))
    grid.append(cfg.with_values(mode="mixture-full"))
    for g in PHASE2_ACTIVATIONS:
        grid.append(cfg.with_values(mode="mix", gamma=g))
    return grid


def _row_activation(plan: TrainPlan) -> str:
    if plan.mode == "wnla":
        return "none"
    if plan.mode == "mixture-full":
        return "mixture"
    return plan.gamma.kind


def summarize_ablation(root: Path, cells: list[tuple[str, str, str]], seeds: list[int], path: Path) -> list[dict]:
    """Aggregate per-run metrics files into the summary table."""
    rows = []
    for mode, activation, label in cells:
        finals = [final_accuracies(root / label / f"seed{s}" / "metrics.csv") for s in seeds]
        tr_m, tr_s = mean_std([f[0] for f in finals])
        te_m, te_s = mean_std([f[1] for f in finals])
        rows.append({"mode": mode, "activation": activation, "label": label, "seeds": len(seeds),
                     "test_acc_mean": te_m, "test_acc_std": te_s,
                     "train_acc_mean": tr_m, "train_acc_std": tr_s})
    with open(path, "w", newline="") as fh:
        fh.write("mode,activation,label,seeds,test_acc_mean,test_acc_std,train_acc_mean,train_acc_std\n")
        for r in rows:
            fh.write(f"{r['mode']},{r['activation']},{r['label']},{r['seeds']},{r['test_acc_mean']:.6f},"
                     f"{r['test_acc_std']:.6f},{r['train_acc_mean']:.6f},{r['train_acc_std']:.6f}\n")
    return rows


def cmd_ablate(args, cfg: RunConfig) -> int:
    root = Path(args.out) / cfg["experiment"]
    _write_resolved(root / "resolved.cfg", cfg)
    seeds = cfg["seeds"]
    grid = ablation_grid(cfg)
    plans = [c.plan() for c in grid]
    data = load_data(cfg) if args.threads <= 1 else None
    jobs = []
    for c, plan in zip(grid, plans):
        for s in seeds:
            sc = c.with_values(seed=s)
            jobs.append((sc.raw, str(root / plan.label / f"seed{s}")))
    run_many(jobs, args.threads, data)
    cells = [(p.mode, _row_activation(p), p.label) for p in plans]
    rows = summarize_ablation(root, cells, seeds, root / "ablation_summary.csv")
    for r in rows:
        print(f"{r['label']:<22} {r['test_acc_mean']:7.2f} +- {r['test_acc_std']:.2f}")
    return EXIT_OK


def _parse_fractions(text: Optional[str], cfg: RunConfig) -> list[float]:
    if text is None:
        fractions = cfg["sweep.fractions"]
    else:
        try:
            fractions = [float(p) for p in text.split(",") if p.strip()]
        except ValueError:
            raise ConfigError(f"bad --fractions value {text!r}") from None
    if not fractions:
        raise ConfigError("no sweep fractions given")
    for f in fractions:
        if not 0 < f <= 1:
            raise ConfigError(f"sweep fraction {f} outside (0, 1]; a zero Phase-1 is mode=baseline")
    return fractions


def cmd_sweep_phase1(args, cfg: RunConfig) -> int:
    fractions = _parse_fractions(args.fractions, cfg)
    cfg = cfg.with_values(sweep__fractions=",".join(repr(f) for f in fractions))
    if cfg["mode"] == "baseline":
        raise ConfigError("sweep-phase1 needs a two-phase mode, got mode=baseline")
    root = Path(args.out) / cfg["experiment"]
    _write_resolved(root / "resolved.cfg", cfg)
    seeds = cfg["seeds"]
    data = load_data(cfg) if args.threads <= 1 else None
    jobs, cells = [], []
    for f in fractions:
        fc = cfg.with_values(phase1__fraction=f)
        label = fc.plan().label
        group = f"fraction{f:.2f}"
        cells.append((f, root / group / label))
        for s in seeds:
            jobs.append((fc.with_values(seed=s).raw, str(root / group / label / f"seed{s}")))
    run_many(jobs, args.threads, data)
    path = root / "sweep_phase1.csv"
    with open(path, "w", newline="") as fh:
        fh.write("fraction,test_acc_mean,test_acc_std\n")
        for f, d in cells:
            m, s = mean_std([final_accuracies(d / f"seed{k}" / "metrics.csv")[1] for k in seeds])
            fh.write(f"{f:.6f},{m:.6f},{s:.6f}\n")
            print(f"{f:.2f} {m:7.2f} +- {s:.2f}")
    return EXIT_OK


def cmd_overfit_study(args, cfg: RunConfig) -> int:
    fraction = cfg["overfit.fraction"] if args.fraction is None else args.fraction
    if not 0 < fraction <= 1:
        raise ConfigError(f"overfit fraction {fraction} outside (0, 1]")
    cfg = cfg.with_values(overfit__fraction=fraction, dataset_fraction=fraction)
    root = Path(args.out) / cfg["experiment"]
    _write_resolved(root / "resolved.cfg", cfg)
    seeds = cfg["seeds"]
    variants = [cfg.with_values(mode="baseline"), cfg.with_values(mode="mix")]
    data = load_data(cfg) if args.threads <= 1 else None
    jobs = []
    for v in variants:
        label = v.plan().label
        for s in seeds:
            jobs.append((v.with_values(seed=s).raw, str(root / label / f"seed{s}")))
    run_many(jobs, args.threads, data)
    rows = []
    for v in variants:
        plan = v.plan()
        for s in seeds:
            tr, te = final_accuracies(root / plan.label / f"seed{s}" / "metrics.csv")
            rows.append((s, plan.mode, plan.gamma.kind, tr, te, tr - te))
    with open(root / "overfit_study.csv", "w", newline="") as fh:
        fh.write("seed,mode,activation,train_acc,test_acc,gap\n")
        for s, mode, act, tr, te, gap in rows:
            fh.write(f"{s},{mode},{act},{tr:.6f},{te:.6f},{gap:.6f}\n")
    for mode in ("baseline", "mix"):
        sel = [r for r in rows if r[1] == mode]
        print(f"{mode:<9} train {mean_std([r[3] for r in sel])[0]:6.2f} "
              f"test {mean_std([r[4] for r in sel])[0]:6.2f} gap {mean_std([r[5] for r in sel])[0]:6.2f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    ops = [o for o in (args.ops or "").split(",") if o.strip()]
    try:
        results = gradcheck.run(ops, seeds=args.seeds)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:<22} seeds={r.seeds:<3} checked={r.checked:<6} skipped={r.skipped:<5} "
              f"max_rel={r.max_rel_error:.3e} max_abs={r.max_abs_error:.3e} {status}")
        if not r.passed:
            failed.append(r.op)
    if failed:
        print(f"failing ops: {', '.join(failed)}")
        return EXIT_RUNTIME
    return EXIT_OK


def _load_checkpoint(path: Optional[str]) -> ckptlib.Checkpoint:
    if not path:
        raise ConfigError("--checkpoint is required")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    return ckptlib.load(path)


def cmd_export_features(args, cfg: RunConfig) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    net = ckpt.to_network()
    data = load_data(cfg)
    x, y = (data.x_test, data.y_test) if args.split == "test" else (data.x_train, data.y_train)
    if args.n is not None:
        x, y = x[:args.n], y[:args.n]
    if args.layer not in net.site_ids():
        print(f"unknown layer {args.layer!r}; valid ids: {', '.join(net.site_ids())}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = export_features(net, x, y, args.layer, out)
    print(f"wrote {rows} rows to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    net = ckpt.to_network()
    data = load_data(cfg).astype(net.dtype)
    loss, acc = evaluate(net, data.x_test, data.y_test, cfg["eval_batch_size"])
    print(f"test_loss={loss:.6f} test_acc={acc:.2f}")
    return EXIT_OK


# entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable, last wins)")
    common.add_argument("--out", default="runs", help="output root directory")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--threads", type=int, default=1, help="parallel independent runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="coopinit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="run one training plan")
    sub.add_parser("ablate", parents=[common], help="run the 14-configuration ablation grid")
    p = sub.add_parser("sweep-phase1", parents=[common], help="sweep the Phase-1 epoch fraction")
    p.add_argument("--fractions", help="comma-separated fractions in (0, 1]")
    p = sub.add_parser("overfit-study", parents=[common], help="baseline vs mix on a training subset")
    p.add_argument("--fraction", type=float)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--ops", help="comma-separated op filter (empty checks everything)")
    p.add_argument("--seeds", type=int, default=20)
    p = sub.add_parser("export-features", parents=[common], help="dump layer features as TSV")
    p.add_argument("--checkpoint")
    p.add_argument("--layer", default="flatten")
    p.add_argument("--output", default="features.tsv")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n", type=int, help="limit the number of rows")
    p = sub.add_parser("eval", parents=[common], help="report test accuracy of a checkpoint")
    p.add_argument("--checkpoint")
    return parser


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep-phase1": cmd_sweep_phase1,
    "overfit-study": cmd_overfit_study,
    "gradcheck": cmd_gradcheck,
    "export-features": cmd_export_features,
    "eval": cmd_eval,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load(args.config, tuple(overrides))
        if args.command not in ("train", "ablate", "sweep-phase1", "overfit-study"):
            _write_resolved(Path(args.out) / cfg["experiment"] / f"{args.command}.resolved.cfg", cfg)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level runner reports and exits 1
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
