"""Dataset readers (MNIST IDX, CIFAR binary), augmentation and subsampling."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

CIFAR_RECORD = 3073
CIFAR100_RECORD = 3074

DATA_ENV = "COOPINIT_DATA"


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetPair:
    """Train and test splits as (N, C, H, W) arrays plus integer labels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    mean: tuple = (0.0,)
    std: tuple = (1.0,)
    name: str = ""

    def __post_init__(self):
        for x, y, split in ((self.x_train, self.y_train, "train"), (self.x_test, self.y_test, "test")):
            if len(x) != len(y):
                raise DataFormatError(f"{split}: {len(x)} images but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataFormatError(f"{split}: labels outside [0, {self.num_classes})")
        if self.x_train.shape[1:] != self.x_test.shape[1:]:
            raise DataFormatError(f"train images {self.x_train.shape[1:]} vs test {self.x_test.shape[1:]}")

    @property
    def image_shape(self) -> tuple:
        return self.x_train.shape[1:]

    def astype(self, dtype) -> "DatasetPair":
        return replace(self, x_train=self.x_train.astype(dtype, copy=False),
                       x_test=self.x_test.astype(dtype, copy=False))

    def limit(self, n_train: int = 0, n_test: int = 0) -> "DatasetPair":
        """Keep the first n samples of each split (0 keeps everything)."""
        tr = slice(None) if not n_train else slice(0, n_train)
        te = slice(None) if not n_test else slice(0, n_test)
        return replace(self, x_train=self.x_train[tr], y_train=self.y_train[tr],
                       x_test=self.x_test[te], y_test=self.y_test[te])


def _channel_shape(values, x: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape((1, -1) + (1,) * (x.ndim - 2))


def normalize(x: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` on an (N, C, H, W) array of [0, 1] values.

    Arithmetic happens in ``dtype`` to keep full CIFAR splits within memory.
    """
    out = np.array(x, dtype=dtype)
    out -= _channel_shape(mean, x).astype(dtype)
    out /= _channel_shape(std, x).astype(dtype)
    return out


def _pixels(raw: np.ndarray, mean, std, dtype) -> np.ndarray:
    """uint8 images to normalized floats, in place on one buffer."""
    x = raw.astype(dtype)
    x /= 255
    x -= _channel_shape(mean, x).astype(dtype)
    x /= _channel_shape(std, x).astype(dtype)
    return x


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    return x * _channel_shape(std, x) + _channel_shape(mean, x)


# MNIST --------------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX file holding unsigned bytes."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise DataFormatError(f"{path}: truncated file, expected {n} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = directory / candidate
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, dtype=np.float32) -> DatasetPair:
    """Read the four MNIST IDX files (optionally gzipped) from ``directory``."""
    d = Path(directory)
    splits = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = read_idx(_find(d, f"{prefix}-images-idx3-ubyte"), IDX_IMAGES_MAGIC)
        labels = read_idx(_find(d, f"{prefix}-labels-idx1-ubyte"), IDX_LABELS_MAGIC)
        if len(images) != len(labels):
            raise DataFormatError(f"{split}: {len(images)} images but {len(labels)} labels")
        splits[split] = (_pixels(images[:, None, :, :], MNIST_MEAN, MNIST_STD, dtype), labels.astype(np.int64))
    return DatasetPair(*splits["train"], *splits["test"], num_classes=10,
                       mean=MNIST_MEAN, std=MNIST_STD, name="mnist")


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (gzipped when the name ends in .gz)."""
    array = np.asarray(array, dtype=np.uint8)
    head = struct.pack(">I", 0x800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = head + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


# CIFAR --------------------------------------------------------------------------

def read_cifar_batch(path, record: int = CIFAR_RECORD) -> tuple[np.ndarray, np.ndarray]:
    """Parse fixed-size CIFAR binary records: label byte(s) then 3x1024 planar pixels."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) % record:
        raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {record}")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, record - 3072 - 1].astype(np.int64)
    images = rows[:, record - 3072:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, dtype=np.float32) -> DatasetPair:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    parts = [read_cifar_batch(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = read_cifar_batch(d / "test_batch.bin")
    return DatasetPair(_pixels(x_train, CIFAR10_MEAN, CIFAR10_STD, dtype), y_train,
                       _pixels(x_test, CIFAR10_MEAN, CIFAR10_STD, dtype), y_test,
                       num_classes=10, mean=CIFAR10_MEAN, std=CIFAR10_STD, name="cifar10")


def load_cifar100(directory, dtype=np.float32) -> DatasetPair:
    """CIFAR-100 binary (coarse byte, fine byte, pixels); fine labels are used."""
    d = Path(directory)
    if (d / "cifar-100-binary").is_dir():
        d = d / "cifar-100-binary"
    x_train, y_train = read_cifar_batch(d / "train.bin", CIFAR100_RECORD)
    x_test, y_test = read_cifar_batch(d / "test.bin", CIFAR100_RECORD)
    return DatasetPair(_pixels(x_train, CIFAR100_MEAN, CIFAR100_STD, dtype), y_train,
                       _pixels(x_test, CIFAR100_MEAN, CIFAR100_STD, dtype), y_test,
                       num_classes=100, mean=CIFAR100_MEAN, std=CIFAR100_STD, name="cifar100")


def data_root(explicit: Optional[str] = None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(DATA_ENV, "data"))


# augmentation ------------------------------------------------------------------

def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad, random crop back to the original size, random horizontal flip.

    Accepts one (C, H, W) image or an (N, C, H, W) batch.
    """
    single = images.ndim == 3
    batch = images[None] if single else images
    n, _, h, w = batch.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        out[i] = crop_flip(batch[i], int(offsets[i, 0]), int(offsets[i, 1]), bool(flips[i]), pad)
    return out[0] if single else out


def crop_flip(image: np.ndarray, top: int, left: int, flip: bool, pad: int = 4) -> np.ndarray:
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    out = padded[:, top:top + h, left:left + w]
    return out[:, :, ::-1] if flip else out


# subsets and synthetic data ------------------------------------------------------

def stratified_indices(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """floor(fraction * n_c) indices per class, chosen by seed, in dataset order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        take = int(np.floor(fraction * len(members)))
        if take == 0:
            raise ValueError(f"fraction {fraction} leaves class {c} empty ({len(members)} samples)")
        keep.append(rng.permutation(members)[:take])
    return np.sort(np.concatenate(keep))


def subset(data: DatasetPair, fraction: float, seed: int) -> DatasetPair:
    """Stratified subsample of the training split; the test split is untouched."""
    if fraction == 1:
        return data
    idx = stratified_indices(data.y_train, fraction, seed)
    return replace(data, x_train=data.x_train[idx], y_train=data.y_train[idx])


XOR_CENTERS = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
# Unequal blob sizes give the XOR problem a unique best linear separator,
# so linear models fit by different procedures land on the same boundary.
XOR_WEIGHTS = (0.3, 0.2, 0.25, 0.25)


def _blob_counts(n: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (4,) or (w < 0).any() or abs(w.sum() - 1) > 1e-9:
        raise ValueError(f"need four non-negative blob weights summing to 1, got {tuple(weights)}")
    # largest-remainder rounding, ties to the earlier blob
    raw = w * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:n - counts.sum()]] += 1
    return counts


def _xor_split(n: int, sigma: float, weights, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    blob = np.repeat(np.arange(4), _blob_counts(n, weights))
    blob = blob[rng.permutation(n)]
    pts = XOR_CENTERS[blob] + sigma * rng.standard_normal((n, 2))
    labels = (XOR_CENTERS[blob, 0] * XOR_CENTERS[blob, 1] < 0).astype(np.int64)
    return pts, labels


def make_synthetic_xor(n: int, seed: int, sigma: float = 0.2, dtype=np.float32,
                       weights=XOR_WEIGHTS) -> DatasetPair:
    """Four Gaussian blobs at (+-1, +-1); label 1 where the coordinates differ in sign.

    Blob sizes follow ``weights`` (ordered as ``XOR_CENTERS``). Each point is
    rendered as a 2x1x1 image. Train and test both hold n points.
    """
    if n < 4:
        raise ValueError(f"need n >= 4, got {n}")
    rng = np.random.default_rng(seed)
    xtr, ytr = _xor_split(n, sigma, weights, rng)
    xte, yte = _xor_split(n, sigma, weights, rng)
    return DatasetPair(xtr.reshape(n, 2, 1, 1).astype(dtype), ytr,
                       xte.reshape(n, 2, 1, 1).astype(dtype), yte, num_classes=2, name="xor")


def load_dataset(name: str, directory=None, dtype=np.float32, **synthetic) -> DatasetPair:
    if name == "xor":
        return make_synthetic_xor(synthetic.get("n", 4000), synthetic.get("seed", 0),
                                  synthetic.get("sigma", 0.2), dtype,
                                  synthetic.get("weights", XOR_WEIGHTS))
    root = data_root(directory)
    if name == "mnist":
        d = root / "mnist" if directory is None and (root / "mnist").is_dir() else root
        return load_mnist(d, dtype)
    if name == "cifar10":
        d = root / "cifar10" if directory is None and (root / "cifar10").is_dir() else root
        return load_cifar10(d, dtype)
    if name == "cifar100":
        d = root / "cifar100" if directory is None and (root / "cifar100").is_dir() else root
        return load_cifar100(d, dtype)
    raise ValueError(f"unknown dataset {name!r}")
