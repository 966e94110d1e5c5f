"""Dataset ingestion: IDX files (MNIST layout) and seeded synthetic tasks."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

DEFAULT_MNIST_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist"


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, h, w, c] float32
    labels: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


@dataclass
class Split:
    train: Dataset
    test: Dataset
    num_classes: int

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train.images.shape[1:])


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string: 0, 0, dtype code, rank, big-endian dims, payload."""
    if len(raw) < 4:
        raise IdxError(f"truncated header: {len(raw)} bytes at offset 0")
    if raw[0] != 0 or raw[1] != 0:
        raise IdxError(f"bad magic at byte 0: {raw[:2].hex()}")
    code, rank = raw[2], raw[3]
    if code not in IDX_DTYPES:
        raise IdxError(f"unknown dtype code 0x{code:02x} at byte 2")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise IdxError(f"truncated dimension list at byte 4: need {header} bytes, have {len(raw)}")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=rank, offset=4))
    dtype = IDX_DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(raw) - header
    if have < need:
        raise IdxError(f"truncated payload at byte {header}: expected {need} bytes, found {have}")
    if have > need:
        raise IdxError(f"trailing data at byte {header + need}: {have - need} extra bytes")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as an uncompressed IDX file (used for fixtures)."""
    array = np.asarray(array)
    code = {v.str[1:]: k for k, v in IDX_DTYPES.items()}[array.dtype.str[1:]]
    header = bytes([0, 0, code, array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    Path(path).write_bytes(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def load_idx(images_path, labels_path=None) -> tuple[np.ndarray, np.ndarray]:
    """Paired image/label IDX files -> (float32 [n,h,w,1] in [0,1], int64 labels)."""
    if labels_path is None:
        name = os.path.basename(str(images_path)).replace("images-idx3", "labels-idx1")
        labels_path = Path(images_path).with_name(name)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[..., None]
    if labels.ndim != 1:
        raise IdxError(f"labels must be rank 1, got shape {labels.shape}")
    if len(images) != len(labels):
        raise IdxError(f"{len(images)} images but {len(labels)} labels")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    return (images.astype(np.float32) / np.float32(scale)), labels.astype(np.int64)


def mnist_dir(path: Optional[str] = None) -> Path:
    return Path(path or os.environ.get("CSGD_MNIST_DIR", DEFAULT_MNIST_DIR))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(path: Optional[str] = None, n_train: Optional[int] = 10000,
               n_test: Optional[int] = None) -> Split:
    """The first ``n_train`` training and ``n_test`` test digits."""
    d = mnist_dir(path)
    tr = load_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    te = load_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    train = Dataset(*tr)
    test = Dataset(*te)
    if n_train:
        train = train.subset(n_train)
    if n_test:
        test = test.subset(n_test)
    return Split(train, test, 10)


# --------------------------------------------------------------------------
# synthetic


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    base, extra = divmod(n, classes)
    return np.concatenate([np.full(base + (k < extra), k) for k in range(classes)]).astype(np.int64)


def synth_dataset(kind: str, n: int, classes: int = 2, seed: int = 0,
                  shape: tuple = (8, 8, 1), separation: float = 4.0, noise: float = 1.0) -> Dataset:
    """Seeded toy classification data shaped as images.

    ``blobs``: Gaussian clusters around random class centres, linearly separable
    for large ``separation``. ``rings``: 2-D concentric rings (radius encodes
    the class) linearly embedded in the image space, so no linear probe
    separates them.
    """
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    labels = _balanced_labels(n, classes)
    if kind == "blobs":
        centers = rng.standard_normal((classes, dim))
        centers *= separation * np.sqrt(dim) / np.linalg.norm(centers, axis=1, keepdims=True)
        x = centers[labels] + noise * rng.standard_normal((n, dim))
    elif kind == "rings":
        theta = rng.uniform(0, 2 * np.pi, n)
        radius = 1.0 + labels + 0.1 * noise * rng.standard_normal(n)
        pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        proj = rng.standard_normal((2, dim)) / np.sqrt(2)
        x = pts @ proj
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    order = rng.permutation(n)
    images = x[order].reshape((n, *shape)).astype(np.float32)
    return Dataset(images, labels[order])


def synth_split(kind: str, n_train: int, n_test: int, classes: int = 2, seed: int = 0,
                shape: tuple = (8, 8, 1), **kw) -> Split:
    full = synth_dataset(kind, n_train + n_test, classes, seed, shape, **kw)
    return Split(Dataset(full.images[:n_train], full.labels[:n_train]),
                 Dataset(full.images[n_train:], full.labels[n_train:]), classes)
