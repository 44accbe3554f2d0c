"""Prediction quality metrics and figure-data exports (CSV / JSON).

All functions are pure and deterministic; ties anywhere break toward the
lowest index. Rendering is deliberately out of scope — these exports are
the plain-data side of the report, consumed by the CLI's figure step.

`mean_correct_cosine` is the average cosine between each record and the
prototype of its *true* class — the quantity whose distribution the
histogram export bins. It needs the similarity matrix, which a probability
matrix alone cannot recover (softmax discards a per-row constant), so
`evaluate` takes similarities as an optional argument and reports NaN
without them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .errors import ValidationError


@dataclass(frozen=True)
class EvalResult:
    """Aggregate metrics; confusion rows are true classes, columns predicted."""

    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    mean_correct_cosine: float


def _check_eval_labels(labels, m, k):
    lab = np.asarray(labels)
    if lab.shape != (m,):
        raise ValidationError(f"labels must have shape ({m},), got {lab.shape}")
    if lab.size and not np.issubdtype(lab.dtype, np.integer):
        as_int = lab.astype(np.int64)
        if not np.array_equal(as_int, lab):
            raise ValidationError("labels must be integers")
        lab = as_int
    lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValidationError(
            f"labels must lie in [0, {k}); unlabeled (-1) records are not evaluable"
        )
    return lab


def evaluate(probs, labels, similarities=None):
    """Score argmax predictions against true labels.

    Ties in a row of `probs` predict the lowest class index. When
    `similarities` (same shape as `probs`) is given, `mean_correct_cosine`
    averages sim[i, labels[i]] over all records; otherwise it is NaN.
    """
    p = losses.check_probability_matrix(probs)
    m, k = p.shape
    lab = _check_eval_labels(labels, m, k)
    predictions = p.argmax(axis=1)

    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (lab, predictions), 1)
    accuracy = float(np.trace(confusion)) / float(m)

    row_totals = confusion.sum(axis=1)
    per_class = np.full(k, np.nan)
    seen = row_totals > 0
    per_class[seen] = np.diag(confusion)[seen] / row_totals[seen]

    mean_correct = float("nan")
    if similarities is not None:
        sim = np.asarray(similarities, dtype=np.float64)
        if sim.shape != (m, k):
            raise ValidationError(
                f"similarities must have shape ({m}, {k}), got {sim.shape}"
            )
        mean_correct = float(np.mean(sim[np.arange(m), lab]))

    return EvalResult(
        accuracy=accuracy,
        per_class_accuracy=per_class,
        confusion=confusion,
        mean_correct_cosine=mean_correct,
    )


def _unit_rows(matrix, name):
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    return ad.row_normalize_values(arr)


def correct_class_cosines(features, prototypes, labels):
    """cos(f_i, w_{label_i}) for every record, as a 1-D array."""
    f = _unit_rows(features, "features")
    w = _unit_rows(prototypes, "prototypes")
    if f.shape[1] != w.shape[1]:
        raise ValidationError(
            f"feature dim {f.shape[1]} != prototype dim {w.shape[1]}"
        )
    lab = _check_eval_labels(labels, f.shape[0], w.shape[0])
    return np.sum(f * w[lab], axis=1)


def cosine_histogram(features, prototypes, labels, bins):
    """Counts of per-record correct-class cosines over [-1, 1].

    Edges are the exact linear partition of [-1, 1] into `bins` intervals.
    Intervals are right-closed — with two bins, 0 falls in [-1, 0] and 1 in
    (0, 1] — and counts always sum to the number of records.
    """
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    values = correct_class_cosines(features, prototypes, labels)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    idx = np.searchsorted(edges, values, side="left") - 1
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.int64)
    return edges, counts


def knn_of_prototypes(features, prototypes, k):
    """For each prototype, the `k` feature ids with highest cosine.

    Columns are ordered by descending cosine; equal cosines order by lower
    feature id (stable sort).
    """
    f = _unit_rows(features, "features")
    w = _unit_rows(prototypes, "prototypes")
    if f.shape[1] != w.shape[1]:
        raise ValidationError(
            f"feature dim {f.shape[1]} != prototype dim {w.shape[1]}"
        )
    if not 1 <= k <= f.shape[0]:
        raise ValidationError(
            f"k must lie in [1, {f.shape[0]}] (number of features), got {k}"
        )
    cosines = ad.matmul_values(w, f.T)
    order = np.argsort(-cosines, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def pca_projection(features):
    """Centered 2-D principal-component coordinates.

    Component signs are fixed so each component's largest-magnitude loading
    is positive; datasets with fewer than two effective dimensions get zero
    columns for the missing components.
    """
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValidationError(f"features must be a nonempty 2-D array, got {arr.shape}")
    centered = arr - arr.mean(axis=0, keepdims=True)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((arr.shape[0], 2))
    for j in range(min(2, vt.shape[0])):
        if singular[j] <= 0:
            continue
        component = vt[j]
        if component[np.argmax(np.abs(component))] < 0:
            component = -component
        coords[:, j] = np.einsum("ij,j->i", centered, component, optimize=False)
    return coords


# ---------------------------------------------------------------------------
# Plain-data exports
# ---------------------------------------------------------------------------


def _csv_writer(handle):
    return csv.writer(handle, lineterminator="\n")


def write_histogram_csv(path, edges, counts):
    """Rows of (edge, count): each bin's left edge and its count."""
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.asarray(counts)
    if edges.shape != (counts.shape[0] + 1,):
        raise ValidationError("edges must have exactly one more entry than counts")
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["edge", "count"])
        for edge, count in zip(edges[:-1], counts):
            writer.writerow([str(float(edge)), int(count)])


def write_knn_csv(path, features, prototypes, k):
    """Rows of (prototype_id, rank, feature_id, cosine), rank 0 = nearest."""
    ids = knn_of_prototypes(features, prototypes, k)
    f = _unit_rows(features, "features")
    w = _unit_rows(prototypes, "prototypes")
    cosines = ad.matmul_values(w, f.T)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["prototype_id", "rank", "feature_id", "cosine"])
        for proto_id in range(ids.shape[0]):
            for rank in range(ids.shape[1]):
                feature_id = int(ids[proto_id, rank])
                writer.writerow(
                    [
                        proto_id,
                        rank,
                        feature_id,
                        str(float(cosines[proto_id, feature_id])),
                    ]
                )
    return ids


def write_pca_csv(path, coords, labels=None):
    """Rows of (id, x, y, label); label is -1 for unlabeled records."""
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"coords must be (n, 2), got {arr.shape}")
    if labels is None:
        lab = np.full(arr.shape[0], -1, dtype=np.int64)
    else:
        lab = np.asarray(labels, dtype=np.int64)
        if lab.shape != (arr.shape[0],):
            raise ValidationError("labels must have one entry per coordinate row")
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = _csv_writer(handle)
        writer.writerow(["id", "x", "y", "label"])
        for i in range(arr.shape[0]):
            writer.writerow(
                [i, str(float(arr[i, 0])), str(float(arr[i, 1])), int(lab[i])]
            )


def _json_safe(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_metrics_json(path, result):
    """EvalResult as a JSON document; NaN fields serialize as null."""
    document = {
        "accuracy": _json_safe(result.accuracy),
        "per_class_accuracy": [
            _json_safe(float(x)) for x in result.per_class_accuracy
        ],
        "confusion": [[int(c) for c in row] for row in result.confusion],
        "mean_correct_cosine": _json_safe(result.mean_correct_cosine),
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2)
        handle.write("\n")
    return document
