"""Line-based ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Keys are dotted
(``phase2.lr.step_every``). Unknown keys are errors. ``--set`` overrides are
applied after the file, last one winning.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .activations import ActivationError, MixedActivation, parse_activation
from .optim import StepSchedule
from .trainer import MODES, TrainPlan


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _ints(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _mixture(text: str) -> str:
    act = parse_activation(text)
    if not isinstance(act, MixedActivation):
        raise ValueError("expected a mix(...) encoding")
    return text


def _single(text: str) -> str:
    act = parse_activation(text)
    if isinstance(act, MixedActivation):
        raise ValueError("expected a single activation")
    return text


def _auto_bool(text: str):
    return "auto" if text.strip().lower() == "auto" else _bool(text)


@dataclass(frozen=True)
class Key:
    default: str
    parse: Callable[[str], object]
    help: str = ""


KEYS: dict[str, Key] = {
    "experiment": Key("run", str, "top-level output directory name"),
    "arch": Key("lenet-mnist", _choice("lenet-mnist", "small-cifar-10", "small-cifar-100", "xor-mlp")),
    "dataset": Key("mnist", _choice("mnist", "cifar10", "cifar100", "xor")),
    "data_dir": Key("", str, "dataset directory; empty means $COOPINIT_DATA/<dataset>"),
    "mode": Key("mix", _choice(*MODES)),
    "gamma": Key("relu", _single, "Phase-2 activation"),
    "phase1.mixture": Key("mix(relu,prelu:0.25,elu:1.0,softplus;equal)", _mixture),
    "phase1.fraction": Key("0.2", float, "Phase-1 epochs as a fraction of Phase-2 epochs"),
    "phase1.lr.base": Key("0.1", float),
    "phase1.lr.factor": Key("5", float),
    "phase1.lr.step_every": Key("1", int),
    "phase2.epochs": Key("10", int),
    "phase2.lr.base": Key("0.1", float),
    "phase2.lr.factor": Key("5", float),
    "phase2.lr.step_every": Key("4", int),
    "lr_chain": Key("restart", _choice("restart", "chain")),
    "reset_momentum": Key("true", _bool),
    "baseline_schedule": Key("single", _choice("single", "concatenated")),
    "sgd.momentum": Key("0.9", float),
    "sgd.weight_decay": Key("0.0001", float),
    "batch_size": Key("64", int),
    "eval_batch_size": Key("1000", int),
    "seed": Key("0", int),
    "seeds": Key("1,2,3,4,5", _ints, "seed list for ablate / sweep / overfit-study"),
    "dataset_fraction": Key("1.0", float),
    "augment": Key("auto", _auto_bool, "auto: on for CIFAR, off otherwise"),
    "init": Key("kaiming-normal", _choice("kaiming-normal", "uniform-range")),
    "dtype": Key("f32", _choice("f32", "f64")),
    "train_limit": Key("0", int, "keep only the first n training samples (0 = all)"),
    "test_limit": Key("0", int, "keep only the first n test samples (0 = all)"),
    "xor.n": Key("4000", int),
    "xor.sigma": Key("0.2", float),
    "xor.weights": Key("0.3,0.2,0.25,0.25", _floats, "blob proportions for (1,1), (-1,-1), (1,-1), (-1,1)"),
    "sweep.fractions": Key("0.1,0.2,0.3,0.4", _floats),
    "overfit.fraction": Key("0.25", float),
}


class RunConfig:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, raw: Optional[dict[str, str]] = None):
        self.raw = {k: v.default for k, v in KEYS.items()}
        self.explicit: dict[str, str] = {}
        for k, v in (raw or {}).items():
            self.set(k, v)

    def set(self, key: str, value: str) -> None:
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        value = value.strip()
        try:
            KEYS[key].parse(value)
        except (ValueError, ActivationError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
        self.raw[key] = value
        self.explicit[key] = value

    def __getitem__(self, key: str):
        return KEYS[key].parse(self.raw[key])

    def copy(self) -> "RunConfig":
        other = RunConfig()
        other.raw = dict(self.raw)
        other.explicit = dict(self.explicit)
        return other

    def with_values(self, **values) -> "RunConfig":
        other = self.copy()
        for k, v in values.items():
            other.set(k.replace("__", "."), str(v))
        return other

    def dumps(self) -> str:
        lines = ["# resolved configuration"]
        lines += [f"{k} = {self.raw[k]}" for k in KEYS]
        return "\n".join(lines) + "\n"

    def augment(self) -> bool:
        value = self["augment"]
        if value == "auto":
            return self["dataset"] in ("cifar10", "cifar100")
        return value

    def plan(self) -> TrainPlan:
        try:
            return TrainPlan(
                mode=self["mode"],
                gamma=parse_activation(self["gamma"]),
                mixture=parse_activation(self["phase1.mixture"]),
                arch=self["arch"],
                phase2_epochs=self["phase2.epochs"],
                phase1_fraction=self["phase1.fraction"],
                phase1_schedule=StepSchedule(self["phase1.lr.base"], self["phase1.lr.factor"],
                                             self["phase1.lr.step_every"]),
                phase2_schedule=StepSchedule(self["phase2.lr.base"], self["phase2.lr.factor"],
                                             self["phase2.lr.step_every"]),
                momentum=self["sgd.momentum"],
                weight_decay=self["sgd.weight_decay"],
                batch_size=self["batch_size"],
                seed=self["seed"],
                dataset_fraction=self["dataset_fraction"],
                augment=self.augment(),
                init=self["init"],
                dtype=self["dtype"],
                lr_chain=self["lr_chain"],
                baseline_schedule=self["baseline_schedule"],
                reset_momentum=self["reset_momentum"],
                eval_batch_size=self["eval_batch_size"],
            ).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override must be key=value, got {text!r}")
    return key.strip(), value.strip()


def load(path: Optional[str], overrides: tuple = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        for k, v in parse_text(p.read_text(), str(p)).items():
            cfg.set(k, v)
    for item in overrides:
        cfg.set(*parse_override(item))
    return cfg
