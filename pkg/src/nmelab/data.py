"""Synthetic datasets and IDX (MNIST-format) files."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationSpec
from .nn import Model, model_forward

SYNTHETIC_KINDS = ("blobs", "spirals", "teacher_mlp")

# IDX type byte -> big-endian dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    """Inputs (N, d), targets (N, k) and a train/test tag per row."""

    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    kind: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.x.ndim != 2 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("x and y must be 2-D with one row per example")
        if len(self.split) != len(self.x):
            raise ValueError("need one split tag per example")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains NaN or Inf")
        if not set(np.unique(self.split)) <= {"train", "test"}:
            raise ValueError("split tags must be 'train' or 'test'")

    @property
    def classification(self) -> bool:
        return self.meta.get("task") == "classification"

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == name
        return self.x[mask], self.y[mask]

    def train(self):
        return self.part("train")

    def test(self):
        return self.part("test")

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.x, self.y, self.split):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def _split_tags(n: int, test_fraction: float, rng) -> np.ndarray:
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    tags = np.full(n, "train", dtype="<U5")
    n_test = int(round(n * test_fraction))
    tags[rng.permutation(n)[:n_test]] = "test"
    return tags


def make_synthetic(kind: str, n: int, d: int, k: int, seed: int, test_fraction: float = 0.0,
                   noise: float = 0.1, separation: float = 4.0, teacher_hidden: int = 8,
                   teacher_activation: ActivationSpec | None = None) -> Dataset:
    """Deterministic toy data.

    ``blobs``: k unit-variance Gaussian classes with means at distance
    ``separation`` from the origin. ``spirals``: k interleaved arms in the first
    two coordinates (d >= 2; extra coordinates are noise). ``teacher_mlp``:
    regression targets from a frozen random d-h-h-k network, available as
    ``meta["teacher"]``.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic dataset {kind!r}; choose from {SYNTHETIC_KINDS}")
    if min(n, d, k) <= 0:
        raise ValueError(f"n, d and k must be positive, got n={n}, d={d}, k={k}")
    rng = np.random.default_rng(seed)
    meta = {"kind": kind, "n": n, "d": d, "k": k, "seed": seed}
    if kind == "blobs":
        dirs = rng.standard_normal((k, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        labels = rng.integers(0, k, n)
        x = separation * dirs[labels] + rng.standard_normal((n, d))
        y = np.eye(k)[labels]
        meta["task"] = "classification"
    elif kind == "spirals":
        if d < 2:
            raise ValueError("spirals need d >= 2")
        labels = rng.integers(0, k, n)
        r = rng.uniform(0.1, 1.0, n)
        angle = 3.0 * np.pi * r + 2.0 * np.pi * labels / k
        x = noise * rng.standard_normal((n, d))
        x[:, 0] += r * np.cos(angle)
        x[:, 1] += r * np.sin(angle)
        y = np.eye(k)[labels]
        meta["task"] = "classification"
    else:
        teacher = Model.init((d, teacher_hidden, teacher_hidden, k), teacher_activation or ActivationSpec("gelu"),
                             seed=seed + 1)
        x = rng.standard_normal((n, d))
        y, _, _ = model_forward(teacher, x)
        meta.update(task="regression", teacher=teacher)
    return Dataset(x, y, _split_tags(n, test_fraction, rng), kind, meta)


# ---------------------------------------------------------------------------
# IDX


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_TYPES:
        raise ValueError(f"{path}: bad IDX magic {raw[:4].hex()} (expected 0000<type><ndim>)")
    dtype, ndim = IDX_TYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header, expected {header} bytes, got {len(raw)}")
    shape = tuple(int(s) for s in np.frombuffer(raw, ">u4", ndim, 4))
    expected = header + int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise ValueError(f"{path}: {kind} IDX file, expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype, offset=header).reshape(shape)


def write_idx(path, array) -> Path:
    array = np.asarray(array)
    codes = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}
    native = array.dtype.newbyteorder("=")
    if native not in codes:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    code = codes[native]
    path = Path(path)
    head = bytes([0, 0, code, array.ndim]) + np.asarray(array.shape, ">u4").tobytes()
    path.write_bytes(head + np.ascontiguousarray(array, IDX_TYPES[code]).tobytes())
    return path


def load_idx(images, labels, test_images=None, test_labels=None, n_classes: int = 10) -> Dataset:
    """Images flattened and scaled to [0, 1]; labels one-hot."""
    parts = [(images, labels, "train")]
    if test_images is not None:
        parts.append((test_images, test_labels, "test"))
    xs, ys, tags = [], [], []
    for img_path, lab_path, tag in parts:
        img = read_idx(img_path)
        lab = read_idx(lab_path).astype(np.int64).reshape(-1)
        if len(img) != len(lab):
            raise ValueError(f"{img_path} has {len(img)} images but {lab_path} has {len(lab)} labels")
        if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
            raise ValueError(f"{lab_path}: labels must lie in [0, {n_classes})")
        scale = 255.0 if img.dtype.kind == "u" else 1.0
        xs.append(img.reshape(len(img), -1).astype(np.float64) / scale)
        ys.append(np.eye(n_classes)[lab])
        tags.append(np.full(len(img), tag))
    return Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(tags), "idx",
                   {"task": "classification", "images": str(images), "labels": str(labels)})
