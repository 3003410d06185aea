import os
from pathlib import Path

import numpy as np
import pytest

from coopinit.data import DATA_ENV, DatasetPair, write_idx


def mnist_like(n_train=256, n_test=128, seed=0, dtype=np.float32, noise=0.3) -> DatasetPair:
    """Small ten-class 1x28x28 problem scaled like normalized MNIST.

    Each class is a sparse binary stroke template; samples add random
    intensity and sparse speckle, then get the MNIST mean/std normalization.
    """
    rng = np.random.default_rng(seed)
    templates = (rng.random((10, 1, 28, 28)) < 0.15).astype(np.float64)

    def split(n):
        y = np.arange(n) % 10
        rng.shuffle(y)
        speckle = noise * rng.random((n, 1, 28, 28)) * (rng.random((n, 1, 28, 28)) < 0.2)
        x = np.clip(templates[y] * rng.uniform(0.6, 1.0, (n, 1, 1, 1)) + speckle, 0, 1)
        return ((x - 0.1307) / 0.3081).astype(dtype), y.astype(np.int64)

    xtr, ytr = split(n_train)
    xte, yte = split(n_test)
    return DatasetPair(xtr, ytr, xte, yte, num_classes=10, mean=(0.1307,), std=(0.3081,), name="mnist-like")


def write_mnist_dir(directory: Path, n_train: int, n_test: int, seed: int = 0, gz: bool = False) -> Path:
    rng = np.random.default_rng(seed)
    ext = ".gz" if gz else ""
    directory.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        write_idx(directory / f"{prefix}-images-idx3-ubyte{ext}", rng.integers(0, 256, (n, 28, 28)))
        write_idx(directory / f"{prefix}-labels-idx1-ubyte{ext}", np.arange(n) % 10)
    return directory


def cifar_records(n: int, seed: int = 0, label=None) -> bytes:
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, 256, (n, 3073), dtype=np.uint8)
    rows[:, 0] = np.arange(n) % 10 if label is None else label
    return rows.tobytes()


def write_cifar10_dir(directory: Path, per_batch: int, n_test: int) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(1, 6):
        (directory / f"data_batch_{i}.bin").write_bytes(cifar_records(per_batch, seed=i))
    (directory / "test_batch.bin").write_bytes(cifar_records(n_test, seed=99))
    return directory


def real_data_dir(name: str):
    root = os.environ.get(DATA_ENV)
    if not root:
        return None
    d = Path(root) / name
    return d if d.is_dir() else None


@pytest.fixture
def mnist_small():
    return mnist_like()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
