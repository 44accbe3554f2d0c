"""Finite-difference audit of the analytic gradients, pipeline by pipeline.

Each pipeline is the real training wiring — encode the batch, shift the
prototypes, take similarities — capped by one of the objectives (both
conditional-transport cost kinds, mutual information, conditional entropy,
cross entropy, and a random linear probe of the prediction matrix). For
every random instance the reverse-mode gradient of every trainable
parameter is compared against central differences; the report carries the
worst relative error seen per pipeline.

The `sign_flip_pipeline` hook deliberately corrupts one pipeline's analytic
gradient so the harness itself can be shown to catch a wrong gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses, model
from .errors import ValidationError

DEFAULT_TOLERANCE = 1e-4
DEFAULT_INSTANCES = 100
FD_STEP = 1e-5
# Relative-error denominator floor: keeps near-zero gradients comparable
# without drowning genuine sign errors.
SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class PipelineResult:
    name: str
    instances: int
    worst_rel_error: float
    worst_parameter: str
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    pipelines: tuple
    tolerance: float
    passed: bool

    @property
    def worst(self):
        return max(self.pipelines, key=lambda p: p.worst_rel_error)


def _random_instance(rng):
    """Random batch/prototype geometry plus off-init model bindings."""
    m = int(rng.integers(2, 7))
    k = int(rng.integers(2, 5))
    d = int(rng.integers(3, 7))
    features = rng.normal(size=(m, d))
    features += 0.3 * np.sign(features.sum(axis=1, keepdims=True))  # keep norms up
    prototypes = rng.normal(size=(k, d))
    prototypes += 0.3 * np.sign(prototypes.sum(axis=1, keepdims=True))
    bindings = {
        model.ADAPTER: np.eye(d) + 0.3 * rng.normal(size=(d, d)),
        model.PROTO_OFFSETS: 0.3 * rng.normal(size=(k, d)),
        model.LOG_TEMPERATURE: np.asarray(np.log(rng.uniform(0.3, 1.5))),
    }
    return features, prototypes, bindings, m, k


def _pipeline_output(name, sim, inv_t, prior, labels, probe):
    if name == "ct-cosine-distance":
        total, _, _ = losses.ct_loss_nodes(sim, inv_t, prior, "cosine-distance")
        return total
    if name == "ct-exp-neg-dot":
        total, _, _ = losses.ct_loss_nodes(sim, inv_t, prior, "exp-neg-dot")
        return total
    if name == "mi":
        total, _, _ = losses.mi_loss_nodes(model.predict_node(sim, inv_t))
        return total
    if name == "conditional-entropy":
        return losses.conditional_entropy_nodes(model.predict_node(sim, inv_t))
    if name == "cross-entropy":
        return losses.cross_entropy_nodes(model.predict_node(sim, inv_t), labels)
    if name == "predict-probe":
        # The prediction matrix itself, scalarized through a fixed random
        # direction so the whole Jacobian is exercised.
        return (model.predict_node(sim, inv_t) * ad.constant(probe)).sum()
    raise ValidationError(f"unknown gradcheck pipeline {name!r}")


PIPELINES = (
    "ct-cosine-distance",
    "ct-exp-neg-dot",
    "mi",
    "conditional-entropy",
    "cross-entropy",
    "predict-probe",
)


def _check_pipeline(name, rng, instances, tolerance, flip_sign):
    worst = 0.0
    worst_param = "none"
    for _ in range(instances):
        features, prototypes, bindings, m, k = _random_instance(rng)
        prior = rng.uniform(0.2, 1.0, size=k)
        prior = prior / prior.sum()
        labels = rng.integers(0, k, size=m)
        probe = rng.normal(size=(m, k))

        nodes = model.parameter_nodes(features.shape[1], k)
        encoded = model.encode_node(ad.constant(features), nodes[model.ADAPTER])
        protos = model.effective_prototypes_node(
            ad.constant(prototypes), nodes[model.PROTO_OFFSETS]
        )
        sim = encoded @ protos.T
        inv_t = model.inv_temperature_node(nodes[model.LOG_TEMPERATURE])
        graph = ad.Graph(_pipeline_output(name, sim, inv_t, prior, labels, probe))

        grads = graph.gradient(bindings)
        for param_name in sorted(grads):
            analytic = grads[param_name] * (-1.0 if flip_sign else 1.0)
            fd = ad.finite_difference(
                lambda b: float(graph.evaluate(b)), bindings, param_name, h=FD_STEP
            )
            scale = max(float(np.max(np.abs(fd))), SCALE_FLOOR)
            rel = float(np.max(np.abs(analytic - fd))) / scale
            if rel > worst:
                worst = rel
                worst_param = param_name
    return PipelineResult(
        name=name,
        instances=instances,
        worst_rel_error=worst,
        worst_parameter=worst_param,
        passed=worst <= tolerance,
    )


def run_gradcheck(
    seed=0,
    instances=DEFAULT_INSTANCES,
    tolerance=DEFAULT_TOLERANCE,
    sign_flip_pipeline=None,
):
    """Audit all pipelines; returns a GradCheckReport."""
    if instances < 1:
        raise ValidationError(f"instances must be >= 1, got {instances}")
    if sign_flip_pipeline is not None and sign_flip_pipeline not in PIPELINES:
        raise ValidationError(
            f"unknown pipeline {sign_flip_pipeline!r}; expected one of {PIPELINES}"
        )
    results = []
    for name in PIPELINES:
        rng = np.random.default_rng(np.random.SeedSequence([seed, PIPELINES.index(name)]))
        results.append(
            _check_pipeline(
                name, rng, instances, tolerance, flip_sign=(name == sign_flip_pipeline)
            )
        )
    return GradCheckReport(
        pipelines=tuple(results),
        tolerance=tolerance,
        passed=all(r.passed for r in results),
    )
