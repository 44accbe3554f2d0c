"""The adapted model: a linear feature adapter, prototype offsets, and a
learned temperature on top of frozen embeddings.

Two tuning modes mirror how much of the stack is trainable:

* model-tuning: adapter matrix, prototype offsets, and log-temperature;
* prompt-tuning: prototype offsets and log-temperature only (the adapter
  stays frozen at identity), a deliberately tiny parameter set.

All paths exist twice: as plain float64 evaluations and as autodiff node
builders, so the training step differentiates exactly what inference runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

ADAPTER = "adapter"
PROTO_OFFSETS = "proto_offsets"
LOG_TEMPERATURE = "log_temperature"

TUNING_MODES = ("model-tuning", "prompt-tuning")

# CLIP-style softmax sharpness; configurable per run.
DEFAULT_TEMPERATURE = 0.01


def trainable_set(tuning_mode):
    """Names of the parameters a tuning mode is allowed to modify."""
    if tuning_mode == "model-tuning":
        return {ADAPTER, PROTO_OFFSETS, LOG_TEMPERATURE}
    if tuning_mode == "prompt-tuning":
        return {PROTO_OFFSETS, LOG_TEMPERATURE}
    raise ValidationError(
        f"unknown tuning mode {tuning_mode!r}; expected one of {TUNING_MODES}"
    )


def trainable_count(tuning_mode, dim, num_classes):
    """Total scalar degrees of freedom for a tuning mode."""
    counts = {
        ADAPTER: dim * dim,
        PROTO_OFFSETS: num_classes * dim,
        LOG_TEMPERATURE: 1,
    }
    return sum(counts[name] for name in trainable_set(tuning_mode))


@dataclass(frozen=True)
class ModelParams:
    """adapter: (d, d); proto_offsets: (K, d); log_temperature: scalar."""

    adapter: np.ndarray
    proto_offsets: np.ndarray
    log_temperature: float

    def __post_init__(self):
        a = np.asarray(self.adapter, dtype=np.float64)
        o = np.asarray(self.proto_offsets, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"adapter must be square, got shape {a.shape}")
        if o.ndim != 2 or o.shape[1] != a.shape[0]:
            raise ValidationError(
                f"proto_offsets shape {o.shape} does not match adapter dim {a.shape[0]}"
            )
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(o))):
            raise ValidationError("model parameters must be finite")
        if not np.isfinite(self.log_temperature):
            raise ValidationError("log_temperature must be finite")
        object.__setattr__(self, "adapter", a)
        object.__setattr__(self, "proto_offsets", o)
        object.__setattr__(self, "log_temperature", float(self.log_temperature))

    @property
    def dim(self):
        return self.adapter.shape[0]

    @property
    def num_classes(self):
        return self.proto_offsets.shape[0]

    @property
    def temperature(self):
        return float(np.exp(self.log_temperature))

    def as_bindings(self):
        return {
            ADAPTER: self.adapter,
            PROTO_OFFSETS: self.proto_offsets,
            LOG_TEMPERATURE: np.asarray(self.log_temperature),
        }

    def updated(self, bindings):
        return ModelParams(
            adapter=bindings[ADAPTER],
            proto_offsets=bindings[PROTO_OFFSETS],
            log_temperature=float(bindings[LOG_TEMPERATURE]),
        )


def init_params(dim, num_classes, temperature=DEFAULT_TEMPERATURE):
    """Identity adapter, zero offsets: the zero-shot model."""
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    return ModelParams(
        adapter=np.eye(dim),
        proto_offsets=np.zeros((num_classes, dim)),
        log_temperature=float(np.log(temperature)),
    )


@dataclass(frozen=True)
class FeatureBatch:
    """A 2-D float64 feature matrix (raw or encoded) plus stable record ids."""

    matrix: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        ids = np.asarray(self.ids, dtype=np.int64)
        if m.ndim != 2:
            raise ValidationError(f"feature matrix must be 2-D, got shape {m.shape}")
        if ids.shape != (m.shape[0],):
            raise ValidationError("ids must have one entry per feature row")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "ids", ids)


def parameter_nodes(dim, num_classes):
    return {
        ADAPTER: ad.parameter(ADAPTER, (dim, dim)),
        PROTO_OFFSETS: ad.parameter(PROTO_OFFSETS, (num_classes, dim)),
        LOG_TEMPERATURE: ad.parameter(LOG_TEMPERATURE, ()),
    }


def encode_node(raw_features_node, adapter_node):
    """row-l2-normalize(raw @ adapter^T)."""
    return (raw_features_node @ adapter_node.T).row_normalize()


def effective_prototypes_node(raw_prototypes_node, offsets_node):
    """row-l2-normalize(raw + offsets)."""
    return (raw_prototypes_node + offsets_node).row_normalize()


def inv_temperature_node(log_temperature_node):
    return (-log_temperature_node).exp()


def predict_node(sim_node, inv_temp_node):
    """Rows of softmax(similarity / T)."""
    return ad.scalar_mul(inv_temp_node, sim_node).softmax(axis=1)


def encode(raw_features, params, ids=None):
    """Apply the adapter and normalize rows; returns a FeatureBatch."""
    raw = np.asarray(raw_features, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != params.dim:
        raise ValidationError(
            f"raw features must be (n, {params.dim}), got {raw.shape}"
        )
    projected = ad.matmul_values(raw, params.adapter.T)
    matrix = ad.row_normalize_values(projected)
    if ids is None:
        ids = np.arange(raw.shape[0], dtype=np.int64)
    return FeatureBatch(matrix=matrix, ids=ids)


def effective_prototypes(raw_prototypes, params):
    """Shift raw prototypes by the learned offsets and normalize rows."""
    raw = np.asarray(raw_prototypes, dtype=np.float64)
    if raw.shape != params.proto_offsets.shape:
        raise ValidationError(
            f"raw prototypes shape {raw.shape} does not match offsets "
            f"{params.proto_offsets.shape}"
        )
    return ad.row_normalize_values(raw + params.proto_offsets)


def predict(features, prototypes, temperature):
    """Class probabilities: per-row softmax of cosine similarity over T."""
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    from . import losses  # local import: losses builds on autodiff only

    sim = losses.similarity(features, prototypes)
    return ad.softmax_values(sim / temperature, axis=1)


@dataclass(frozen=True)
class LabelWordMap:
    """Injective map from class index to a row of a decoder/vocab matrix."""

    class_to_row: tuple

    def __post_init__(self):
        rows = tuple(int(r) for r in self.class_to_row)
        if len(set(rows)) != len(rows):
            raise ValidationError("label-word map must be injective")
        if any(r < 0 for r in rows):
            raise ValidationError("label-word rows must be nonnegative")
        object.__setattr__(self, "class_to_row", rows)


def select_decoder_rows(vocab_matrix, label_map):
    """Gather and normalize the vocab rows acting as class prototypes."""
    vocab = np.asarray(vocab_matrix, dtype=np.float64)
    if vocab.ndim != 2:
        raise ValidationError(f"vocab matrix must be 2-D, got shape {vocab.shape}")
    rows = np.asarray(label_map.class_to_row, dtype=np.int64)
    if rows.size and rows.max() >= vocab.shape[0]:
        raise ValidationError(
            f"label-word row {int(rows.max())} out of bounds for vocab of "
            f"{vocab.shape[0]} rows"
        )
    return ad.row_normalize_values(vocab[rows])
