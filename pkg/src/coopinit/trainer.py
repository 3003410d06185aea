"""Two-phase training: a mixture-activation warm-up, then single-activation training.

Each plan expands into stages. A stage has a phase number, an epoch count,
its own step schedule and the activation installed at every slot. Epoch
counters and learning rates restart at each stage, and momentum buffers are
cleared, because the parameter set may change when slots are swapped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckptlib
from .activations import ActivationSpec, MixedActivation, default_mixture, parse_activation
from .data import DatasetPair, augment, subset
from .network import Network, build, init_weights, set_all_slots
from .optim import SGD, StepSchedule
from .tensor import DTYPES, Tensor, backward, no_grad, softmax_cross_entropy

MODES = ("baseline", "baseline-tpt", "mixture-full", "mix", "wnla")
PHASE2_ACTIVATIONS = ("relu", "prelu", "elu", "softplus")
METRICS_HEADER = ("epoch", "phase", "lr", "train_loss", "train_acc", "test_loss", "test_acc")


class PlanError(ValueError):
    pass


@dataclass
class TrainPlan:
    mode: str = "mix"
    gamma: ActivationSpec = field(default_factory=lambda: ActivationSpec("relu"))
    mixture: MixedActivation = field(default_factory=default_mixture)
    arch: str = "lenet-mnist"
    phase2_epochs: int = 10
    phase1_fraction: float = 0.2
    phase1_schedule: StepSchedule = field(default_factory=lambda: StepSchedule(0.1, 5, 1))
    phase2_schedule: StepSchedule = field(default_factory=lambda: StepSchedule(0.1, 5, 4))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    dataset_fraction: float = 1.0
    augment: bool = False
    init: str = "kaiming-normal"
    dtype: str = "f32"
    lr_chain: str = "restart"
    baseline_schedule: str = "single"
    reset_momentum: bool = True
    eval_batch_size: int = 1000

    @property
    def phase1_epochs(self) -> int:
        if self.mode == "baseline" and self.baseline_schedule == "single":
            return 0
        return int(math.floor(self.phase1_fraction * self.phase2_epochs + 0.5))

    @property
    def label(self) -> str:
        if self.mode in ("wnla", "mixture-full"):
            return self.mode
        return f"{self.mode}-{self.gamma.kind}"

    def validate(self) -> "TrainPlan":
        if self.mode not in MODES:
            raise PlanError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "wnla":
            if self.gamma.kind == "identity":
                raise PlanError("identity activation is only allowed in wnla mode")
            if any(b.kind == "identity" for b in self.mixture.branches):
                raise PlanError("identity mixture branches are only allowed in wnla mode")
        if self.phase2_epochs < 0:
            raise PlanError(f"phase2.epochs must be >= 0, got {self.phase2_epochs}")
        if not 0 <= self.phase1_fraction <= 1:
            raise PlanError(f"phase1.fraction must be in [0, 1], got {self.phase1_fraction}")
        if self.batch_size < 1:
            raise PlanError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.dataset_fraction <= 1:
            raise PlanError(f"dataset_fraction must be in (0, 1], got {self.dataset_fraction}")
        if self.dtype not in DTYPES:
            raise PlanError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.lr_chain not in ("restart", "chain"):
            raise PlanError(f"lr_chain must be restart or chain, got {self.lr_chain!r}")
        if self.baseline_schedule not in ("single", "concatenated"):
            raise PlanError(f"baseline_schedule must be single or concatenated, got {self.baseline_schedule!r}")
        if self.init not in ("kaiming-normal", "uniform-range"):
            raise PlanError(f"init must be kaiming-normal or uniform-range, got {self.init!r}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise PlanError("momentum must be in [0, 1) and weight_decay >= 0")
        return self

    def stages(self) -> list["Stage"]:
        e1, e2 = self.phase1_epochs, self.phase2_epochs
        s1, s2 = self.phase1_schedule, self.phase2_schedule
        g, mix = self.gamma, self.mixture
        if self.mode == "baseline":
            if self.baseline_schedule == "single":
                return [Stage(2, e2, s2, g, swap=False)]
            return [Stage(1, e1, s1, g, swap=False), Stage(2, e2, s2, g, swap=False)]
        if self.mode == "baseline-tpt":
            return [Stage(1, e1, s1, g), Stage(2, e2, s2, g)]
        if self.mode == "mix":
            return [Stage(1, e1, s1, mix), Stage(2, e2, s2, g)]
        if self.mode == "mixture-full":
            return [Stage(1, e1, s1, mix), Stage(2, e2, s2, mix, swap=False)]
        identity = ActivationSpec("identity")
        return [Stage(1, e1, s1, identity), Stage(2, e2, s2, identity, swap=False)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma"] = self.gamma.encode()
        d["mixture"] = self.mixture.encode()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        d = dict(d)
        d["gamma"] = parse_activation(d["gamma"])
        d["mixture"] = parse_activation(d["mixture"])
        d["phase1_schedule"] = StepSchedule(**d["phase1_schedule"])
        d["phase2_schedule"] = StepSchedule(**d["phase2_schedule"])
        return cls(**d)

    def fingerprint(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class Stage:
    phase: int
    epochs: int
    schedule: StepSchedule
    act: object
    swap: bool = True


@dataclass
class MetricsRecord:
    epoch: int
    phase: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


# metrics files -----------------------------------------------------------------

def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for r in records:
            fh.write(f"{r.epoch},{r.phase},{r.lr:.6f},{r.train_loss:.6f},{r.train_acc:.6f},"
                     f"{r.test_loss:.6f},{r.test_acc:.6f}\n")


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRecord(int(r["epoch"]), int(r["phase"]),
                              *(float(r[k]) for k in METRICS_HEADER[2:])) for r in reader]


# training --------------------------------------------------------------------------

def phase_swap(net: Network, gamma: ActivationSpec) -> Network:
    """Replace every slot with the single activation ``gamma``.

    Mixture-private slopes are dropped; a PReLU ``gamma`` gets fresh slopes at
    its initial value rather than inheriting any branch's learned ones.
    """
    return set_all_slots(net, gamma)


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 1000) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy (percent) over a split."""
    if len(y) == 0:
        return 0.0, 0.0
    loss_sum, correct = 0.0, 0
    with no_grad():
        for start in range(0, len(y), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            logits = net.forward(Tensor(xb))
            loss_sum += float(softmax_cross_entropy(logits, yb).data) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return loss_sum / len(y), 100.0 * correct / len(y)


def _epoch_rng(seed: int, global_epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, global_epoch])


def train_epoch(net: Network, opt: SGD, x: np.ndarray, y: np.ndarray, lr: float,
                batch_size: int, rng: np.random.Generator, do_augment: bool = False) -> tuple[float, float]:
    """One pass over shuffled minibatches; returns running mean loss and accuracy."""
    n = len(y)
    order = rng.permutation(n)
    loss_sum, correct = 0.0, 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb, yb = x[idx], y[idx]
        if do_augment:
            xb = augment(xb, rng)
        logits = net.forward(Tensor(xb))
        loss = softmax_cross_entropy(logits, yb)
        grads = backward(loss)
        opt.step(net.params, grads, lr)
        loss_sum += float(loss.data) * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return loss_sum / max(n, 1), 100.0 * correct / max(n, 1)


def _stage_lrs(plan: TrainPlan, stages: list[Stage]) -> list[Callable[[int], float]]:
    fns = []
    prev_final = None
    for st in stages:
        sched = st.schedule
        if plan.lr_chain == "chain" and prev_final is not None:
            sched = replace(sched, base_lr=prev_final)
        fns.append(sched.lr_at)
        if st.epochs:
            prev_final = sched.lr_at(st.epochs - 1)
    return fns


def prepare_data(plan: TrainPlan, data: DatasetPair) -> DatasetPair:
    data = data.astype(DTYPES[plan.dtype])
    return subset(data, plan.dataset_fraction, plan.seed)


def initial_network(plan: TrainPlan) -> Network:
    stages = plan.stages()
    net = build(plan.arch, act=stages[0].act, dtype=DTYPES[plan.dtype])
    return init_weights(net, plan.seed, plan.init)


def run_plan(plan: TrainPlan, data: DatasetPair, resume: Optional[ckptlib.Checkpoint] = None,
             stop_after: Optional[int] = None,
             on_epoch: Optional[Callable[[MetricsRecord, Callable[[], ckptlib.Checkpoint]], None]] = None,
             ) -> tuple[ckptlib.Checkpoint, list[MetricsRecord]]:
    """Train according to ``plan``; one metrics record per epoch.

    ``resume`` continues from a checkpoint written by this function.
    ``stop_after`` ends the call after that many epochs in total (counted
    across both phases), which is how a run is interrupted for resumption.
    """
    plan.validate()
    stages = plan.stages()
    net_probe = build(plan.arch, dtype=DTYPES[plan.dtype])
    if data.image_shape != net_probe.input_shape:
        raise PlanError(f"dataset images {data.image_shape} do not fit {plan.arch} input {net_probe.input_shape}")
    if data.num_classes != net_probe.trace_shapes()[net_probe.layers[-1].id][0]:
        raise PlanError(f"dataset has {data.num_classes} classes but {plan.arch} emits "
                        f"{net_probe.trace_shapes()[net_probe.layers[-1].id][0]} logits")
    data = prepare_data(plan, data)
    lr_fns = _stage_lrs(plan, stages)
    opt = SGD(plan.momentum, plan.weight_decay)

    if resume is None:
        net = initial_network(plan)
        stage_idx, done = 0, 0
    else:
        if resume.meta.get("plan_fingerprint") != plan.fingerprint():
            raise PlanError("checkpoint was written by a different plan")
        net = resume.to_network()
        opt.velocity = {n: v.copy() for n, v in resume.velocity.items()}
        stage_idx, done = resume.meta["cursor"]["stage"], resume.meta["cursor"]["epoch"]

    records: list[MetricsRecord] = []
    budget = math.inf if stop_after is None else stop_after

    def snapshot() -> ckptlib.Checkpoint:
        g = sum(s.epochs for s in stages[:stage_idx]) + done
        return ckptlib.Checkpoint.from_network(
            net, opt.velocity, plan_fingerprint=plan.fingerprint(), plan=plan.to_dict(),
            rng={"seed": plan.seed, "next_epoch": g},
            cursor={"stage": stage_idx, "epoch": done, "phase": stages[min(stage_idx, len(stages) - 1)].phase})

    while stage_idx < len(stages) and budget > 0:
        st = stages[stage_idx]
        if done >= st.epochs:
            stage_idx, done = stage_idx + 1, 0
            continue
        if done == 0 and stage_idx > 0:
            if st.swap:
                phase_swap(net, st.act)
            if plan.reset_momentum:
                opt.reset()
        g = sum(s.epochs for s in stages[:stage_idx]) + done
        lr = lr_fns[stage_idx](done)
        rng = _epoch_rng(plan.seed, g)
        tr_loss, tr_acc = train_epoch(net, opt, data.x_train, data.y_train, lr, plan.batch_size,
                                      rng, plan.augment)
        te_loss, te_acc = evaluate(net, data.x_test, data.y_test, plan.eval_batch_size)
        rec = MetricsRecord(done, st.phase, lr, tr_loss, tr_acc, te_loss, te_acc)
        records.append(rec)
        done += 1
        budget -= 1
        if on_epoch is not None:
            on_epoch(rec, snapshot)
    return snapshot(), records


# experiments ----------------------------------------------------------------------

def epoch_fraction_sweep(base: TrainPlan, data: DatasetPair, fractions) -> dict[float, float]:
    """Final test accuracy per Phase-1 epoch fraction, shared seed."""
    table = {}
    for f in fractions:
        if not 0 < f <= 1:
            raise PlanError(f"sweep fractions must be in (0, 1], got {f}")
        _, recs = run_plan(replace(base, phase1_fraction=f), data)
        table[f] = recs[-1].test_acc if recs else float("nan")
    return table


def reduced_data_study(plan: TrainPlan, data: DatasetPair, fraction: float) -> dict[str, float]:
    """Train on a stratified subset of the training split and report the accuracy gap."""
    if not 0 < fraction <= 1:
        raise PlanError(f"fraction must be in (0, 1], got {fraction}")
    _, recs = run_plan(replace(plan, dataset_fraction=fraction), data)
    if not recs:
        raise PlanError("plan trains for zero epochs")
    last = recs[-1]
    return {"train_acc": last.train_acc, "test_acc": last.test_acc, "gap": last.train_acc - last.test_acc}


def export_features(model, x: np.ndarray, y: np.ndarray, layer: str, path, batch_size: int = 500) -> int:
    """Write ``label<TAB>f0<TAB>f1...`` rows for the activations at ``layer``.

    ``model`` is a Network or a Checkpoint. Returns the number of rows.
    """
    net = model.to_network() if isinstance(model, ckptlib.Checkpoint) else model
    shapes = net.trace_shapes()
    if layer not in shapes:
        raise KeyError(f"unknown layer id {layer!r}; valid ids: {', '.join(shapes)}")
    width = int(np.prod(shapes[layer]))
    x = np.asarray(x, dtype=net.dtype)
    fmt = "%.9g" if net.dtype == np.float32 else "%.17g"
    with open(path, "w", newline="") as fh:
        fh.write("label\t" + "\t".join(f"f{i}" for i in range(width)) + "\n")
        with no_grad():
            for start in range(0, len(y), batch_size):
                feats = net.forward(Tensor(x[start:start + batch_size]), capture=layer).data
                feats = feats.reshape(len(feats), -1)
                for label, row in zip(y[start:start + batch_size], feats):
                    fh.write(f"{int(label)}\t" + "\t".join(fmt % v for v in row) + "\n")
    return len(y)
