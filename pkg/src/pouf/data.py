"""Synthetic shifted-domain benchmark and bit-exact dataset file formats.

The generator plants class means on the unit sphere (rejection-sampled so no
pair exceeds cosine 0.5), draws features as Gaussian clusters around the
means, and derives prototypes from the *same* means pushed through a small
random rotation, a bias, and noise. That offset between each cluster and its
prototype is the controllable stand-in for a real domain shift: zero-shot
accuracy degrades smoothly with the shift scales, and adaptation can earn it
back.

Files are exchanged in two formats:

* embeddings: a little-endian binary layout — magic ``POUF``, u32 version 1,
  u64 count, u64 dim, u32 dtype code (1 = float32), then the row-major
  float32 payload. 28-byte header; stored 32-bit, computed 64-bit.
* labels / class names: plain text, one record per line; label ``-1`` means
  unlabeled.

Readers raise `FormatError` with the failing byte offset (or line number)
on any malformed input; writers refuse non-finite values.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ValidationError

MAGIC = b"POUF"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
HEADER_BYTES = 28

# Mean-separation rejection threshold and the try budget scaling.
MAX_PAIRWISE_COSINE = 0.5
REJECTION_TRIES_PER_CLASS = 10 * 100


@dataclass(frozen=True)
class SyntheticSpec:
    """Benchmark recipe; every run is a pure function of these fields."""

    num_classes: int = 10
    dim: int = 64
    num_samples: int = 2000
    class_proportions: tuple | None = None
    cluster_spread: float = 0.35
    rotation_angle_scale: float = 0.35
    bias_scale: float = 0.30
    prototype_noise: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1 or self.num_samples < 1:
            raise ValidationError("num_classes, dim, and num_samples must be >= 1")
        if self.num_classes > self.num_samples:
            raise ValidationError(
                f"need at least one sample per class: K={self.num_classes} "
                f"> M={self.num_samples}"
            )
        for name in ("cluster_spread", "rotation_angle_scale", "bias_scale", "prototype_noise"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.class_proportions is not None:
            p = np.asarray(self.class_proportions, dtype=np.float64)
            if p.shape != (self.num_classes,):
                raise ValidationError(
                    f"class_proportions must have {self.num_classes} entries, "
                    f"got shape {p.shape}"
                )
            if np.any(p < 0) or not np.all(np.isfinite(p)):
                raise ValidationError("class_proportions must be finite and >= 0")
            if abs(float(p.sum()) - 1.0) > 1e-9:
                raise ValidationError(
                    f"class_proportions must sum to 1, got {float(p.sum())!r}"
                )
            object.__setattr__(self, "class_proportions", tuple(float(x) for x in p))

    def proportions(self):
        if self.class_proportions is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.class_proportions, dtype=np.float64)


def _sample_separated_means(rng, k, dim):
    """Unit vectors with pairwise cosine below the threshold, by rejection."""
    budget = REJECTION_TRIES_PER_CLASS * k
    means = []
    for _ in range(budget):
        if len(means) == k:
            break
        v = rng.standard_normal(dim)
        norm = math.sqrt(float(np.dot(v, v)))
        if norm < 1e-9:
            continue
        v = v / norm
        if all(float(np.dot(v, m)) < MAX_PAIRWISE_COSINE for m in means):
            means.append(v)
    if len(means) < k:
        raise ValidationError(
            f"could not place {k} class means with pairwise cosine < "
            f"{MAX_PAIRWISE_COSINE} in {dim} dimensions after {budget} tries; "
            "reduce num_classes or raise dim"
        )
    return np.array(means)


def _random_rotation(rng, dim, angle_scale):
    """Product of Givens rotations on disjoint random coordinate planes.

    Exactly orthogonal by construction; `angle_scale` 0 yields the identity.
    """
    rotation = np.eye(dim)
    perm = rng.permutation(dim)
    for a, b in zip(perm[0::2], perm[1::2]):
        theta = angle_scale * rng.standard_normal()
        givens = np.eye(dim)
        c, s = math.cos(theta), math.sin(theta)
        givens[a, a] = givens[b, b] = c
        givens[a, b] = -s
        givens[b, a] = s
        rotation = ad.matmul_values(givens, rotation)
    return rotation


def generate_synthetic(spec):
    """Build (raw_prototypes K x d, raw_features M x d, labels M).

    Deterministic per spec (including the seed). The draw order is fixed:
    means, labels, feature noise, rotation, bias, prototype noise.
    """
    rng = np.random.default_rng(spec.seed)
    means = _sample_separated_means(rng, spec.num_classes, spec.dim)
    labels = rng.choice(spec.num_classes, size=spec.num_samples, p=spec.proportions())
    features = means[labels] + spec.cluster_spread * rng.standard_normal(
        (spec.num_samples, spec.dim)
    )
    rotation = _random_rotation(rng, spec.dim, spec.rotation_angle_scale)
    bias = spec.bias_scale * rng.standard_normal(spec.dim)
    prototypes = (
        ad.matmul_values(means, rotation.T)
        + bias
        + spec.prototype_noise * rng.standard_normal((spec.num_classes, spec.dim))
    )
    return prototypes, features, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Embedding binary format
# ---------------------------------------------------------------------------


def write_embeddings(path, matrix):
    """Store a 2-D matrix as float32 in the binary embedding format."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"embeddings must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("embeddings must be finite")
    with np.errstate(over="ignore"):
        payload = arr.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise ValidationError("embeddings overflow 32-bit float storage")
    header = MAGIC + struct.pack(
        "<IQQI", FORMAT_VERSION, arr.shape[0], arr.shape[1], DTYPE_FLOAT32
    )
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def read_embeddings(path):
    """Read a matrix back as float64; validates the header byte by byte."""
    data = Path(path).read_bytes()
    if len(data) < HEADER_BYTES:
        raise FormatError(
            f"file too short for a {HEADER_BYTES}-byte header ({len(data)} bytes)",
            offset=len(data),
        )
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    version, count, dim, dtype_code = struct.unpack_from("<IQQI", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported version {version}, expected {FORMAT_VERSION}", offset=4
        )
    if dtype_code != DTYPE_FLOAT32:
        raise FormatError(
            f"unsupported dtype code {dtype_code}, expected {DTYPE_FLOAT32}", offset=24
        )
    expected = count * dim * 4
    actual = len(data) - HEADER_BYTES
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: header implies {expected} bytes "
            f"({count} x {dim} float32), found {actual}",
            offset=HEADER_BYTES,
        )
    flat = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise FormatError(
            "non-finite value in payload",
            offset=HEADER_BYTES + int(bad[0]) * 4,
        )
    return flat.reshape(int(count), int(dim)).astype(np.float64)


# ---------------------------------------------------------------------------
# Label and class-name text formats
# ---------------------------------------------------------------------------


def write_labels(path, labels):
    """One integer per line; -1 marks an unlabeled record."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValidationError(f"labels must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise ValidationError("labels must be integers")
        arr = as_int
    Path(path).write_text(
        "".join(f"{int(v)}\n" for v in arr), encoding="utf-8"
    )


def read_labels(path):
    text = Path(path).read_text(encoding="utf-8")
    values = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        try:
            values.append(int(stripped))
        except ValueError:
            raise FormatError(
                f"line {lineno}: {stripped!r} is not an integer", offset=lineno
            ) from None
    return np.asarray(values, dtype=np.int64)


def write_class_names(path, names):
    """One class name per line, index order."""
    cleaned = []
    for name in names:
        text = str(name).strip()
        if not text or "\n" in text:
            raise ValidationError(f"invalid class name {name!r}")
        cleaned.append(text)
    Path(path).write_text("".join(f"{n}\n" for n in cleaned), encoding="utf-8")


def read_class_names(path):
    text = Path(path).read_text(encoding="utf-8")
    names = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            raise FormatError(f"line {lineno}: empty class name", offset=lineno)
        names.append(stripped)
    return names
