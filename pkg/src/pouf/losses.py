"""Alignment objectives between feature batches and class prototypes.

Two families:

* Conditional-transport costs: each sample spreads its mass over classes
  (row-normalized plan) and each prototype spreads its mass over the batch
  (column-normalized plan); both directions are charged under a pointwise
  cost derived from cosine similarity.
* Classical optimal transport on the same cost, solved exactly (LP) or
  entropically (log-domain Sinkhorn), used in two-stage mode: the plan is a
  constant and only the cost is differentiated.

Plus mutual-information style objectives over predicted class probabilities.

Value-level functions take plain float64 arrays and return result records;
the `*_nodes` builders emit the same computation as autodiff graphs for use
inside a training step. Orientation everywhere: rows index the batch (M),
columns index classes/prototypes (K).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from . import autodiff as ad
from .errors import ValidationError

# Added inside every log(p + eps) so hard zeros in probability matrices are safe.
NUMERIC_EPSILON = 1e-8

# Largest per-side instance the exact LP solver accepts.
OT_SIZE_CAP = 64

COST_KINDS = ("cosine-distance", "exp-neg-dot")


def validate_distribution(weights, size=None, name="distribution", tol=1e-9):
    """Check a nonnegative weight vector sums to 1; returns it as float64."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ValidationError(f"{name} must be a 1-D weight vector, got shape {w.shape}")
    if size is not None and w.shape[0] != size:
        raise ValidationError(f"{name} has {w.shape[0]} weights, expected {size}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError(f"{name} weights must be finite and >= 0")
    total = float(np.sum(w))
    if abs(total - 1.0) > tol:
        raise ValidationError(f"{name} weights sum to {total!r}, expected 1 within {tol:g}")
    return w


def uniform_distribution(size):
    return np.full(size, 1.0 / size, dtype=np.float64)


def _check_matrix(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or 0 in arr.shape:
        raise ValidationError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_probability_matrix(probs, name="probs", tol=1e-9):
    """Rows must be probability vectors: entries >= 0, each row summing to 1."""
    p = _check_matrix(probs, name)
    if np.any(p < 0):
        raise ValidationError(f"{name} has negative entries")
    rowsums = np.sum(p, axis=1)
    worst = float(np.max(np.abs(rowsums - 1.0)))
    if worst > tol:
        raise ValidationError(f"{name} rows must sum to 1 (worst deviation {worst:g})")
    return p


def similarity(features, prototypes, norm_tol=1e-6):
    """Cosine similarity matrix (M x K) between unit-row features and prototypes."""
    f = _check_matrix(features, "features")
    w = _check_matrix(prototypes, "prototypes")
    if f.shape[1] != w.shape[1]:
        raise ValidationError(
            f"feature dim {f.shape[1]} != prototype dim {w.shape[1]}"
        )
    for name, mat in (("features", f), ("prototypes", w)):
        norms = np.sqrt(np.sum(mat * mat, axis=1))
        if np.max(np.abs(norms - 1.0)) > norm_tol:
            raise ValidationError(f"{name} rows must be l2-normalized")
    return ad.matmul_values(f, w.T)


def cost_from_similarity(sim, kind="cosine-distance"):
    """Pointwise transport cost from similarities: 1 - s, or exp(-s)."""
    s = _check_matrix(sim, "similarities")
    if kind == "cosine-distance":
        return 1.0 - s
    if kind == "exp-neg-dot":
        return np.exp(-s)
    raise ValidationError(f"unknown cost kind {kind!r}; expected one of {COST_KINDS}")


def cost_from_similarity_node(sim_node, kind="cosine-distance"):
    if kind == "cosine-distance":
        return ad.sub(ad.constant(np.ones(sim_node.shape)), sim_node)
    if kind == "exp-neg-dot":
        return (-sim_node).exp()
    raise ValidationError(f"unknown cost kind {kind!r}; expected one of {COST_KINDS}")


# ---------------------------------------------------------------------------
# Conditional transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CTLossResult:
    """total = forward_cost + backward_cost.

    forward_cost: prior-weighted expected cost under the column-normalized
    plan (every prototype spreads its mass over the batch). backward_cost:
    mean expected cost under the row-normalized plan (every sample spreads
    its mass over classes).
    """

    total: float
    forward_cost: float
    backward_cost: float


def _check_prior(prior, k):
    if prior is None:
        return uniform_distribution(k)
    p = validate_distribution(prior, k, name="class prior")
    if np.any(p <= 0.0):
        raise ValidationError("class prior must be strictly positive")
    return p


def plan_over_classes_node(sim_node, inv_temperature, prior):
    """Row-normalized plan: softmax over classes of s/T shifted by log prior."""
    m = sim_node.shape[0]
    scaled = ad.scalar_mul(ad.as_node(inv_temperature), sim_node)
    log_prior_rows = ad.constant(np.tile(np.log(prior), (m, 1)))
    return (scaled + log_prior_rows).softmax(axis=1)


def plan_over_batch_node(sim_node, inv_temperature):
    """Column-normalized plan: softmax over the batch of s/T (no prior term)."""
    scaled = ad.scalar_mul(ad.as_node(inv_temperature), sim_node)
    return scaled.softmax(axis=0)


def ct_loss_nodes(sim_node, inv_temperature, prior, cost_kind="cosine-distance"):
    """Graph form of the bidirectional conditional-transport objective.

    Returns (total, forward_cost, backward_cost) nodes.
    """
    cost = cost_from_similarity_node(sim_node, cost_kind)
    plan_rows = plan_over_classes_node(sim_node, inv_temperature, prior)
    plan_cols = plan_over_batch_node(sim_node, inv_temperature)
    backward = (cost * plan_rows).sum(axis=1).mean()
    forward = ((cost * plan_cols).sum(axis=0) * ad.constant(prior)).sum()
    return forward + backward, forward, backward


def ct_loss(sim, temperature=1.0, prior=None, cost_kind="cosine-distance"):
    """Bidirectional conditional-transport cost of a similarity matrix."""
    s = _check_matrix(sim, "similarities")
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    prior = _check_prior(prior, s.shape[1])
    total_n, fwd_n, bwd_n = ct_loss_nodes(
        ad.constant(s), 1.0 / float(temperature), prior, cost_kind
    )
    forward = float(ad.Graph(fwd_n).evaluate())
    backward = float(ad.Graph(bwd_n).evaluate())
    return CTLossResult(total=forward + backward, forward_cost=forward, backward_cost=backward)


def plan_over_classes(sim, temperature=1.0, prior=None):
    """Value form of the row-normalized plan; rows sum to 1."""
    s = _check_matrix(sim, "similarities")
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    prior = _check_prior(prior, s.shape[1])
    node = plan_over_classes_node(ad.constant(s), 1.0 / float(temperature), prior)
    return ad.Graph(node).evaluate()


# ---------------------------------------------------------------------------
# Classical optimal transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OTResult:
    plan: np.ndarray
    value: float


def _check_marginals(cost, u, v):
    c = _check_matrix(cost, "cost")
    m, k = c.shape
    u = uniform_distribution(m) if u is None else validate_distribution(u, m, "row marginal u")
    v = uniform_distribution(k) if v is None else validate_distribution(v, k, "column marginal v")
    return c, u, v


def ot_exact(cost, u=None, v=None, size_cap=OT_SIZE_CAP):
    """Exact optimal transport between the row and column marginals of `cost`.

    Solves the transportation LP min <plan, cost> with plan row sums u and
    column sums v. Instances over `size_cap` per side are rejected; this
    solver exists as a small-scale reference, not a scalable path.
    """
    c, u, v = _check_marginals(cost, u, v)
    m, k = c.shape
    if m > size_cap or k > size_cap:
        raise ValidationError(
            f"ot_exact instance {m}x{k} exceeds the {size_cap}x{size_cap} cap"
        )

    # Equality constraints: row sums then column sums (one is redundant;
    # HiGHS tolerates consistent redundancy).
    a_eq = np.zeros((m + k, m * k))
    for i in range(m):
        a_eq[i, i * k : (i + 1) * k] = 1.0
    for j in range(k):
        a_eq[m + j, j::k] = 1.0
    b_eq = np.concatenate([u, v])

    res = optimize.linprog(c.reshape(-1), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(m, k), 0.0)
    value = float(np.einsum("ij,ij->", plan, c, optimize=False))
    return OTResult(plan=plan, value=value)


@dataclass(frozen=True)
class SinkhornResult:
    plan: np.ndarray
    value: float
    iterations: int
    converged: bool
    marginal_error: float


def _solve_pivoted(a, b):
    """Gaussian elimination with partial pivoting (deterministic, no BLAS)."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = a.shape[0]
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot, col]) < 1e-300:
            raise np.linalg.LinAlgError("singular system")
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        factors = a[col + 1 :, col] / a[col, col]
        a[col + 1 :, col:] -= factors[:, None] * a[col, col:]
        b[col + 1 :] -= factors * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


def sinkhorn(cost, u=None, v=None, epsilon=None, max_iter=1000, tol=1e-6):
    """Entropic optimal transport via log-domain marginal scalings.

    `epsilon` defaults to 0.1 * mean(cost). Stops when the worst absolute
    marginal violation drops below `tol`; otherwise returns the best iterate
    seen with `converged=False` rather than pretending success.

    Plain alternating scalings slow to a crawl for epsilon far below the
    cost scale (near-deterministic plans exchange leftover mass between
    competing assignments harmonically). When that stall is detected, an
    iteration spends its turn on a damped Newton step on the reduced dual
    potential instead; both step types monotonically increase the dual
    objective and share the same fixed point, so the returned plan is the
    ordinary epsilon-regularized optimum either way. `iterations` counts
    dual sweeps of either kind.
    """
    c, u, v = _check_marginals(cost, u, v)
    if epsilon is None:
        epsilon = 0.1 * float(np.mean(c))
    if not epsilon > 0:
        raise ValidationError(f"sinkhorn epsilon must be > 0, got {epsilon!r}")
    if max_iter < 1:
        raise ValidationError("sinkhorn max_iter must be >= 1")

    m, k = c.shape
    # The plan is invariant to shifting the cost by a constant; shifting to a
    # nonnegative range keeps every exp() bounded (entries never exceed the
    # column marginal after a g-update, and never exceed 1 at the start).
    c_work = c - float(np.min(c))
    with np.errstate(divide="ignore"):
        log_u, log_v = np.log(u), np.log(v)
    u_pos, v_pos = u > 0, v > 0
    v_safe = np.where(v_pos, v, 1.0)

    def f_update(g):
        return epsilon * (log_u - logsumexp((g[None, :] - c_work) / epsilon, axis=1))

    def g_update(f):
        return epsilon * (log_v - logsumexp((f[:, None] - c_work) / epsilon, axis=0))

    def plan_of(f, g):
        return np.exp((f[:, None] + g[None, :] - c_work) / epsilon)

    def dual_value(f, g):
        return float(u[u_pos] @ f[u_pos] + v[v_pos] @ g[v_pos])

    f = np.zeros(m)
    g = np.zeros(k)
    best = (np.inf, plan_of(f, g), f, g)
    errs = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        stepped = False
        if len(errs) >= 20 and errs[-1] > 0.5 * errs[-20]:
            plan = plan_of(f, g)
            r = plan.sum(axis=1)
            hess = (np.diag(r) - np.einsum("ij,kj->ik", plan / v_safe[None, :], plan)) / epsilon
            ridge = 1e-12 * max(1.0, float(np.max(np.diag(hess))))
            try:
                direction = _solve_pivoted(hess + ridge * np.eye(m), u - r)
            except np.linalg.LinAlgError:
                direction = None
            if direction is not None:
                direction = direction - direction.mean()
                base = dual_value(f, g)
                alpha = 1.0
                for _ in range(30):
                    f_try = f + alpha * direction
                    g_try = g_update(f_try)
                    if np.all(np.isfinite(f_try[u_pos])) and dual_value(f_try, g_try) > base:
                        f, g = f_try, g_try
                        stepped = True
                        break
                    alpha *= 0.5
        if not stepped:
            f = f_update(g)
            g = g_update(f)
        plan = plan_of(f, g)
        err = max(
            float(np.max(np.abs(plan.sum(axis=1) - u))),
            float(np.max(np.abs(plan.sum(axis=0) - v))),
        )
        errs.append(err)
        if err < best[0]:
            best = (err, plan, f, g)
        if err < tol:
            break

    err, plan = best[0], best[1]
    value = float(np.einsum("ij,ij->", plan, c, optimize=False))
    return SinkhornResult(
        plan=plan,
        value=value,
        iterations=iterations,
        converged=bool(err < tol),
        marginal_error=err,
    )


# ---------------------------------------------------------------------------
# Mutual information and cross entropy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MILossResult:
    """total = conditional_entropy - marginal_entropy (lower is better)."""

    total: float
    marginal_entropy: float
    conditional_entropy: float


def _log_shifted_node(node):
    eps = ad.constant(np.full(node.shape, NUMERIC_EPSILON))
    return (node + eps).log()


def conditional_entropy_nodes(probs_node):
    """Mean over rows of h(p) = -sum p*log(p + eps)."""
    row_ent = -((probs_node * _log_shifted_node(probs_node)).sum(axis=1))
    return row_ent.mean()


def marginal_entropy_nodes(probs_node):
    marginal = probs_node.mean(axis=0)
    return -((marginal * _log_shifted_node(marginal)).sum())


def mi_loss_nodes(probs_node):
    """Graph form; returns (total, marginal_entropy, conditional_entropy)."""
    conditional = conditional_entropy_nodes(probs_node)
    marginal = marginal_entropy_nodes(probs_node)
    return conditional - marginal, marginal, conditional


def mi_loss(probs):
    """Negated mutual information of a batch of class probabilities.

    Minimizing pushes rows toward confident predictions while keeping the
    batch-level class marginal spread out. Bounded by [-log K, log K].
    """
    p = check_probability_matrix(probs)
    _, marg_n, cond_n = mi_loss_nodes(ad.constant(p))
    marginal = float(ad.Graph(marg_n).evaluate())
    conditional = float(ad.Graph(cond_n).evaluate())
    return MILossResult(
        total=conditional - marginal,
        marginal_entropy=marginal,
        conditional_entropy=conditional,
    )


def conditional_entropy(probs):
    p = check_probability_matrix(probs)
    return float(ad.Graph(conditional_entropy_nodes(ad.constant(p))).evaluate())


def _check_labels(labels, m, k):
    lab = np.asarray(labels)
    if lab.shape != (m,):
        raise ValidationError(f"labels must have shape ({m},), got {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.floor(lab)):
            raise ValidationError("labels must be integers")
        lab = lab.astype(np.int64)
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValidationError(f"labels must lie in [0, {k})")
    return lab.astype(np.int64)


def one_hot(labels, k):
    m = len(labels)
    out = np.zeros((m, k), dtype=np.float64)
    out[np.arange(m), labels] = 1.0
    return out


def cross_entropy_nodes(probs_node, labels):
    m, k = probs_node.shape
    lab = _check_labels(labels, m, k)
    picked = (_log_shifted_node(probs_node) * ad.constant(one_hot(lab, k))).sum(axis=1)
    return -(picked.mean())


def cross_entropy(probs, labels):
    """Mean negative log probability of the given labels."""
    p = check_probability_matrix(probs)
    return float(ad.Graph(cross_entropy_nodes(ad.constant(p), labels)).evaluate())
