"""Frozen feature sources: a Gaussian-cluster generator and a binary embedding-file loader.

Both produce per-sample token matrices (T x D) and a visual query equal to the
token row-mean. Arrays are marked read-only once built.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HEPC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_LABEL = struct.Struct("<I")


class EmbeddingFormatError(ValueError):
    code = "format"


class BadMagicError(EmbeddingFormatError):
    code = "bad-magic"


class UnsupportedVersionError(EmbeddingFormatError):
    code = "bad-version"


class TruncatedFileError(EmbeddingFormatError):
    code = "truncated"


class LabelRangeError(EmbeddingFormatError):
    code = "label-range"


@dataclass(frozen=True)
class EncodedSample:
    tokens: np.ndarray  # (T, D)
    query: np.ndarray  # (D,)
    label: int


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64) if a.dtype.kind == "f" else np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable labelled collection of encoded samples."""

    def __init__(self, tokens: np.ndarray, labels: np.ndarray, n_classes: int, train_mask: np.ndarray | None = None):
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 3:
            raise ValueError("tokens must have shape (N, T, D)")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (tokens.shape[0],):
            raise ValueError("one label per sample required")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError("label outside [0, n_classes)")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("non-finite token values")
        self.tokens = _freeze(tokens)
        self.queries = _freeze(tokens.mean(axis=1))
        self.labels = _freeze(labels)
        self.n_classes = int(n_classes)
        mask = np.ones(labels.shape, dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
        self.train_mask = _freeze(mask)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> EncodedSample:
        return EncodedSample(self.tokens[i], self.queries[i], int(self.labels[i]))

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    def split(self, test_fraction: float, seed: int) -> "Dataset":
        """Copy with a per-class, seeded train/test split."""
        from .seeding import substream

        rng = substream(seed, "train-test-split")
        mask = np.ones(len(self), dtype=bool)
        for y in range(self.n_classes):
            idx = np.flatnonzero(self.labels == y)
            n_test = int(round(test_fraction * idx.size))
            if n_test:
                mask[rng.choice(idx, size=n_test, replace=False)] = False
        return Dataset(self.tokens, self.labels, self.n_classes, mask)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 20
    samples_per_class: int = 100
    dim: int = 32
    n_tokens: int = 4
    center_scale: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0
    test_per_class: int = 50

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if self.n_classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        if self.test_per_class < 0 or self.center_scale <= 0 or self.noise_scale < 0:
            raise ValueError("invalid scale or test count")


def synth_generate(spec: SyntheticSpec) -> Dataset:
    """Gaussian clusters: tokens = class centre + independent per-token noise.

    Values are rounded to float32 precision so the dataset survives the binary
    file format unchanged.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.center_scale, size=(spec.n_classes, spec.dim))
    per = spec.samples_per_class + spec.test_per_class
    labels = np.repeat(np.arange(spec.n_classes), per)
    noise = rng.normal(0.0, 1.0, size=(labels.size, spec.n_tokens, spec.dim)) * spec.noise_scale
    tokens = (centers[labels][:, None, :] + noise).astype(np.float32).astype(np.float64)
    train = np.tile(np.arange(per) < spec.samples_per_class, spec.n_classes)
    return Dataset(tokens, labels, spec.n_classes, train)


def encode_embeddings(ds: Dataset) -> bytes:
    n, t, d = ds.tokens.shape
    parts = [_HEADER.pack(MAGIC, VERSION, n, t, d, ds.n_classes)]
    toks = ds.tokens.astype("<f4")
    for i in range(n):
        parts.append(_LABEL.pack(int(ds.labels[i])))
        parts.append(toks[i].tobytes())
    return b"".join(parts)


def decode_embeddings(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("file shorter than header")
    magic, version, n, t, d, n_classes = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    rec = _LABEL.size + 4 * t * d
    expected = _HEADER.size + n * rec
    if len(buf) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise EmbeddingFormatError(f"{len(buf) - expected} trailing bytes after {n} records")
    dt = np.dtype([("label", "<u4"), ("tokens", "<f4", (t, d))])
    recs = np.frombuffer(buf, dtype=dt, count=n, offset=_HEADER.size)
    labels = recs["label"].astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise LabelRangeError(f"label {labels.max()} >= n_classes {n_classes}")
    return Dataset(recs["tokens"].astype(np.float64), labels, n_classes)


def load_embeddings(path) -> Dataset:
    return decode_embeddings(Path(path).read_bytes())


def write_embeddings(path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_embeddings(ds))
