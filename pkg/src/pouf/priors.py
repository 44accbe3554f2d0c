"""Running estimate of target-domain class proportions.

The model's row-normalized transport plan doubles as a posterior over
classes; averaging it over a batch gives a plug-in estimate of the class
marginal, which is blended into a running prior with a half-cosine-annealed
EMA weight. Training consumes the prior as a constant (its gradient path is
deliberately severed: estimates are made from evaluated similarities, never
through graph nodes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import losses
from .errors import ValidationError


@dataclass(frozen=True)
class PriorState:
    """Current class-proportion estimate plus the annealing clock."""

    weights: np.ndarray
    step: int = 0
    horizon: int = 1

    def __post_init__(self):
        object.__setattr__(
            self, "weights", losses.validate_distribution(self.weights, name="prior")
        )
        if self.horizon < 1:
            raise ValidationError(f"prior horizon must be >= 1, got {self.horizon}")
        if not 0 <= self.step <= self.horizon:
            raise ValidationError(
                f"prior step must lie in [0, {self.horizon}], got {self.step}"
            )


def uniform_prior(k, horizon=1):
    return PriorState(weights=losses.uniform_distribution(k), step=0, horizon=horizon)


def ema_weight(step, horizon):
    """Half-cosine annealing from 1 at step 0 down to 0 at the horizon."""
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    clamped = min(max(step, 0), horizon)
    return 0.5 * (1.0 + math.cos(math.pi * clamped / horizon))


def batch_prior_estimate(sim, temperature, state):
    """Mean over batch rows of the plan over classes under the current prior."""
    plan = losses.plan_over_classes(sim, temperature=temperature, prior=state.weights)
    return plan.mean(axis=0)


def ema_update(state, batch_estimate):
    """Blend a fresh batch estimate into the prior and advance the clock.

    weights <- alpha * batch_estimate + (1 - alpha) * weights, with alpha
    the half-cosine weight at the state's current step.
    """
    estimate = losses.validate_distribution(
        batch_estimate, size=state.weights.shape[0], name="batch estimate", tol=1e-6
    )
    alpha = ema_weight(state.step, state.horizon)
    mixed = alpha * estimate + (1.0 - alpha) * state.weights
    mixed = mixed / mixed.sum()  # renormalize away float drift
    return replace(state, weights=mixed, step=min(state.step + 1, state.horizon))
