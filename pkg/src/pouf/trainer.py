"""Unsupervised adaptation loop over frozen features and prototypes.

Each step builds one differentiable graph — encode the batch, shift the
prototypes, take cosine similarities — and minimizes a weighted sum of:

* a transport term: the bidirectional conditional-transport cost, or an
  entropic optimal-transport cost solved in two stages (the plan is computed
  with gradients blocked, then the model is differentiated only through the
  cost matrix under that fixed plan);
* a mutual-information term on the batch predictions (confident rows,
  diverse batch marginal);
* an optional bare conditional-entropy term (entropy-only baseline).

Parameters are updated with classical-momentum SGD under a polynomial
learning-rate decay. When the class prior is learned, each step re-estimates
it from that step's similarities *after* the gradient update, so the loss
always consumes the pre-update prior as a constant.

A self-training baseline is included: pseudo-label the whole dataset once
with the zero-shot model (top-k most confident per class, without
replacement), then fit the prompt parameters with cross-entropy.

Everything is deterministic given the config seed: batches come from a
seeded generator, and all array math routes through the fixed-order einsum
paths, so identical runs are bitwise identical regardless of thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses, model, priors
from .errors import DivergenceError, ValidationError

TRANSPORT_KINDS = ("ct", "ot-sinkhorn", "none")
PRIOR_MODES = ("uniform", "learned")
METHODS = ("pouf", "upl")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; validated on construction."""

    transport_kind: str = "ct"
    transport_weight: float = 1.0
    lambda_mi: float = 0.3
    entropy_only_weight: float = 0.0
    cost_kind: str = "cosine-distance"
    prior_mode: str = "uniform"
    tuning_mode: str = "model-tuning"
    batch_size: int = 96
    iterations: int = 200
    eta0: float = 0.015
    gamma: float = 2e-4
    alpha: float = 0.75
    momentum: float = 0.9
    seed: int = 0
    # Training temperature for the synthetic benchmark scale; the zero-shot
    # model default (model.DEFAULT_TEMPERATURE) is much sharper.
    temperature: float = 0.05
    sinkhorn_epsilon: float | None = None
    sinkhorn_max_iter: int = 1000
    sinkhorn_tol: float = 1e-6
    upl_topk: int = 16
    method: str = "pouf"

    def __post_init__(self):
        def _require(cond, message):
            if not cond:
                raise ValidationError(message)

        _require(
            self.transport_kind in TRANSPORT_KINDS,
            f"transport_kind {self.transport_kind!r} not in {TRANSPORT_KINDS}",
        )
        _require(
            self.cost_kind in losses.COST_KINDS,
            f"cost_kind {self.cost_kind!r} not in {losses.COST_KINDS}",
        )
        _require(
            self.prior_mode in PRIOR_MODES,
            f"prior_mode {self.prior_mode!r} not in {PRIOR_MODES}",
        )
        _require(self.method in METHODS, f"method {self.method!r} not in {METHODS}")
        model.trainable_set(self.tuning_mode)  # raises on unknown mode
        for name in ("transport_weight", "lambda_mi", "entropy_only_weight"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0")
        _require(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        _require(self.iterations >= 0, f"iterations must be >= 0, got {self.iterations}")
        _require(self.eta0 > 0, f"eta0 must be > 0, got {self.eta0}")
        _require(self.gamma >= 0, f"gamma must be >= 0, got {self.gamma}")
        _require(self.alpha >= 0, f"alpha must be >= 0, got {self.alpha}")
        _require(
            0 <= self.momentum < 1, f"momentum must lie in [0, 1), got {self.momentum}"
        )
        _require(self.temperature > 0, f"temperature must be > 0, got {self.temperature}")
        _require(
            self.sinkhorn_epsilon is None or self.sinkhorn_epsilon > 0,
            "sinkhorn_epsilon must be > 0 (or None for the solver default)",
        )
        _require(self.sinkhorn_max_iter >= 1, "sinkhorn_max_iter must be >= 1")
        _require(self.sinkhorn_tol > 0, "sinkhorn_tol must be > 0")
        _require(self.upl_topk >= 1, f"upl_topk must be >= 1, got {self.upl_topk}")
        if self.method == "upl":
            _require(
                self.tuning_mode == "prompt-tuning",
                "the pseudo-label baseline trains prompt parameters only; "
                "set tuning_mode='prompt-tuning'",
            )


@dataclass(frozen=True)
class OptimizerState:
    """Per-parameter momentum buffers plus the global step counter."""

    velocity: dict
    iteration: int = 0


@dataclass(frozen=True)
class RunReport:
    """Per-iteration metric records plus the final snapshots."""

    records: tuple
    final_params: model.ModelParams
    final_prior: priors.PriorState
    extras: dict = field(default_factory=dict)


def lr_schedule(iteration, eta0, gamma, alpha):
    """Polynomial decay eta0 * (1 + gamma * iteration) ** (-alpha)."""
    if not eta0 > 0:
        raise ValidationError(f"eta0 must be > 0, got {eta0!r}")
    if iteration < 0:
        raise ValidationError(f"iteration must be >= 0, got {iteration}")
    return float(eta0 * (1.0 + gamma * iteration) ** (-alpha))


def init_optimizer(params, tuning_mode):
    """Zero velocity for every trainable parameter of the mode."""
    bindings = params.as_bindings()
    velocity = {
        name: np.zeros_like(np.asarray(bindings[name], dtype=np.float64))
        for name in sorted(model.trainable_set(tuning_mode))
    }
    return OptimizerState(velocity=velocity, iteration=0)


def sgd_momentum_step(params, grads, state, lr, momentum):
    """Classical momentum: v <- momentum*v + g; p <- p - lr*v.

    Only parameters with a velocity buffer (the trainable set captured at
    optimizer init) are touched; supplying a gradient for anything else is
    a contract breach and raises.
    """
    foreign = sorted(set(grads) - set(state.velocity))
    if foreign:
        raise ValidationError(f"gradients supplied for non-trainable parameters: {foreign}")
    bindings = params.as_bindings()
    new_velocity = {}
    for name in sorted(state.velocity):
        grad = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        old_v = state.velocity[name]
        if grad.shape not in ((), old_v.shape):
            raise ValidationError(
                f"gradient for '{name}' has shape {grad.shape}, expected {old_v.shape}"
            )
        new_v = momentum * old_v + grad
        new_velocity[name] = new_v
        bindings[name] = np.asarray(bindings[name], dtype=np.float64) - lr * new_v
    return (
        params.updated(bindings),
        OptimizerState(velocity=new_velocity, iteration=state.iteration + 1),
    )


def _loss_graph(batch_matrix, raw_prototypes, params_dim, num_classes):
    """Shared forward wiring: returns (parameter nodes, sim node, inv-T node)."""
    nodes = model.parameter_nodes(params_dim, num_classes)
    encoded = model.encode_node(ad.constant(batch_matrix), nodes[model.ADAPTER])
    protos = model.effective_prototypes_node(
        ad.constant(raw_prototypes), nodes[model.PROTO_OFFSETS]
    )
    sim = encoded @ protos.T
    inv_t = model.inv_temperature_node(nodes[model.LOG_TEMPERATURE])
    return nodes, sim, inv_t


def _weighted_total(terms):
    """Left-associated sum of weight*node products, in the given order."""
    total = None
    for weight, node in terms:
        weighted = ad.scalar_mul(ad.constant(weight), node)
        total = weighted if total is None else total + weighted
    return total


def _check_shapes(batch, raw_prototypes, params):
    raw_protos = np.asarray(raw_prototypes, dtype=np.float64)
    if batch.matrix.shape[0] == 0:
        raise ValidationError("batch must be nonempty")
    if batch.matrix.shape[1] != params.dim:
        raise ValidationError(
            f"batch feature dim {batch.matrix.shape[1]} != model dim {params.dim}"
        )
    if raw_protos.shape != (params.num_classes, params.dim):
        raise ValidationError(
            f"raw prototypes shape {raw_protos.shape} does not match model "
            f"({params.num_classes}, {params.dim})"
        )
    return raw_protos


def pouf_step(batch, raw_prototypes, params, prior_state, opt_state, config):
    """One gradient step of the adaptation objective on one batch.

    Returns (params, prior_state, opt_state, metrics). The prior update, if
    enabled, runs after the parameter update and uses this step's
    similarities with the pre-update prior, so the gradient never flows
    through the prior.
    """
    raw_protos = _check_shapes(batch, raw_prototypes, params)
    lr = lr_schedule(opt_state.iteration, config.eta0, config.gamma, config.alpha)
    metrics = {
        "iter": opt_state.iteration,
        "lr": lr,
        "loss_total": 0.0,
        "loss_transport": 0.0,
        "loss_mi": 0.0,
        "loss_entropy": 0.0,
        "loss_ce": 0.0,
    }

    nodes, sim, inv_t = _loss_graph(
        batch.matrix, raw_protos, params.dim, params.num_classes
    )
    bindings = params.as_bindings()

    terms = []
    probe_names = []
    transport_node = None
    if config.transport_weight > 0 and config.transport_kind == "ct":
        transport_node, _, _ = losses.ct_loss_nodes(
            sim, inv_t, prior_state.weights, config.cost_kind
        )
    elif config.transport_weight > 0 and config.transport_kind == "ot-sinkhorn":
        cost_node = losses.cost_from_similarity_node(sim, config.cost_kind)
        cost_graph = ad.Graph(cost_node)
        cost_values = cost_graph.evaluate(
            {k: bindings[k] for k in cost_graph.parameters}
        )
        result = losses.sinkhorn(
            cost_values,
            v=prior_state.weights,
            epsilon=config.sinkhorn_epsilon,
            max_iter=config.sinkhorn_max_iter,
            tol=config.sinkhorn_tol,
        )
        # Two-stage: the plan is a constant; gradients flow only through C.
        transport_node = (ad.constant(result.plan) * cost_node).sum()
        metrics["sinkhorn_iterations"] = result.iterations
        metrics["sinkhorn_converged"] = result.converged
    if transport_node is not None:
        terms.append((config.transport_weight, transport_node))
        probe_names.append("loss_transport")
    if config.lambda_mi > 0:
        mi_node, _, _ = losses.mi_loss_nodes(model.predict_node(sim, inv_t))
        terms.append((config.lambda_mi, mi_node))
        probe_names.append("loss_mi")
    if config.entropy_only_weight > 0:
        ent_node = losses.conditional_entropy_nodes(model.predict_node(sim, inv_t))
        terms.append((config.entropy_only_weight, ent_node))
        probe_names.append("loss_entropy")

    if not terms:
        # Zero objective: nothing to differentiate; the step is a no-op on
        # the parameters but still advances the clocks.
        new_opt = replace(opt_state, iteration=opt_state.iteration + 1)
        new_prior = prior_state
        if config.prior_mode == "learned":
            encoded = model.encode(batch.matrix, params)
            protos = model.effective_prototypes(raw_protos, params)
            sim_values = losses.similarity(encoded.matrix, protos)
            estimate = priors.batch_prior_estimate(
                sim_values, params.temperature, prior_state
            )
            new_prior = priors.ema_update(prior_state, estimate)
        return params, new_prior, new_opt, metrics

    total_node = _weighted_total(terms)
    graph = ad.Graph(total_node)
    # A parameter can be absent from the graph (e.g. the temperature under a
    # pure two-stage transport objective); its gradient is exactly zero, so
    # it is simply left out of the bindings and the gradient request.
    graph_bindings = {k: v for k, v in bindings.items() if k in graph.parameters}
    wrt = [
        name
        for name in sorted(model.trainable_set(config.tuning_mode))
        if name in graph.parameters
    ]
    try:
        values = graph.evaluate_many(
            graph_bindings, [total_node, sim] + [node for _, node in terms]
        )
        loss_total = float(values[0])
        if not np.isfinite(loss_total):
            raise ad.NumericDomainError("total loss is non-finite")
        grads = graph.gradient(graph_bindings, wrt=wrt)
    except ad.NumericDomainError as err:
        raise DivergenceError(
            f"non-finite loss at iteration {opt_state.iteration}: {err}",
            iteration=opt_state.iteration,
            batch_ids=batch.ids.tolist(),
        ) from err

    metrics["loss_total"] = loss_total
    sim_values = values[1]
    for name, value in zip(probe_names, values[2:]):
        metrics[name] = float(value)

    new_params, new_opt = sgd_momentum_step(
        params, grads, opt_state, lr, config.momentum
    )

    new_prior = prior_state
    if config.prior_mode == "learned":
        estimate = priors.batch_prior_estimate(
            sim_values, params.temperature, prior_state
        )
        new_prior = priors.ema_update(prior_state, estimate)

    return new_params, new_prior, new_opt, metrics


class _BatchSampler:
    """Seeded uniform shuffling with wrap-around across epoch boundaries.

    When the pool is smaller than the batch size, sampling reshuffles and
    continues, so a batch may visit the same record twice in that case.
    """

    def __init__(self, size, batch_size, rng):
        if size < 1:
            raise ValidationError("dataset must contain at least one record")
        self._size = size
        self._batch = batch_size
        self._rng = rng
        self._order = rng.permutation(size)
        self._cursor = 0

    def next_indices(self):
        picked = np.empty(self._batch, dtype=np.int64)
        filled = 0
        while filled < self._batch:
            if self._cursor >= self._size:
                self._order = self._rng.permutation(self._size)
                self._cursor = 0
            take = min(self._batch - filled, self._size - self._cursor)
            picked[filled : filled + take] = self._order[
                self._cursor : self._cursor + take
            ]
            self._cursor += take
            filled += take
        return picked


def _dataset_predictions(features, raw_prototypes, params):
    """Argmax class predictions of the current model over the full dataset."""
    encoded = model.encode(features, params)
    protos = model.effective_prototypes(raw_prototypes, params)
    probs = model.predict(encoded.matrix, protos, params.temperature)
    return probs.argmax(axis=1)


def _check_dataset(features, raw_prototypes, labels):
    feats = np.asarray(features, dtype=np.float64)
    protos = np.asarray(raw_prototypes, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValidationError(f"features must be a nonempty 2-D array, got {feats.shape}")
    if protos.ndim != 2 or protos.shape[0] < 1:
        raise ValidationError(
            f"prototypes must be a nonempty 2-D array, got {protos.shape}"
        )
    if feats.shape[1] != protos.shape[1]:
        raise ValidationError(
            f"feature dim {feats.shape[1]} != prototype dim {protos.shape[1]}"
        )
    lab = None
    if labels is not None:
        lab = np.asarray(labels, dtype=np.int64)
        if lab.shape != (feats.shape[0],):
            raise ValidationError("labels must have one entry per feature row")
    return feats, protos, lab


def train(features, raw_prototypes, config, labels=None):
    """Run the adaptation loop; returns (final params, run report).

    `labels`, when given, are used only to record accuracy per iteration —
    they never influence the optimization. Deterministic per config seed.
    """
    feats, protos, lab = _check_dataset(features, raw_prototypes, labels)
    params = model.init_params(
        protos.shape[1], protos.shape[0], temperature=config.temperature
    )
    prior_state = priors.uniform_prior(
        protos.shape[0], horizon=max(config.iterations, 1)
    )
    opt_state = init_optimizer(params, config.tuning_mode)
    rng = np.random.default_rng(config.seed)
    sampler = _BatchSampler(feats.shape[0], config.batch_size, rng)

    records = []
    for _ in range(config.iterations):
        idx = sampler.next_indices()
        batch = model.FeatureBatch(matrix=feats[idx], ids=idx)
        params, prior_state, opt_state, metrics = pouf_step(
            batch, protos, params, prior_state, opt_state, config
        )
        if lab is not None:
            predicted = _dataset_predictions(feats, protos, params)
            metrics["accuracy"] = float(np.mean(predicted == lab))
        records.append(metrics)

    report = RunReport(
        records=tuple(records), final_params=params, final_prior=prior_state
    )
    return params, report


@dataclass(frozen=True)
class PseudoLabelSelection:
    """Chosen records and their pseudo labels, sorted by record index."""

    indices: np.ndarray
    labels: np.ndarray
    per_class_counts: np.ndarray
    shortfall: bool


def upl_pseudo_label(probs, topk):
    """Top-k most confident records per class, without replacement.

    Candidates (record, class) pairs with positive probability are ranked
    globally by probability (ties: lower class, then lower record index,
    first), and greedily assigned while the record is unused and the class
    has fewer than `topk` picks. Classes that end up with fewer than `topk`
    records — too few positive-probability candidates survive the
    competition — are flagged via `shortfall`.
    """
    if topk < 1:
        raise ValidationError(f"topk must be >= 1, got {topk}")
    p = losses.check_probability_matrix(probs)
    m, k = p.shape
    candidates = sorted(
        ((-p[i, c], c, i) for i in range(m) for c in range(k) if p[i, c] > 0.0)
    )
    counts = np.zeros(k, dtype=np.int64)
    used = set()
    chosen = []
    for neg_prob, cls, idx in candidates:
        if idx in used or counts[cls] >= topk:
            continue
        used.add(idx)
        counts[cls] += 1
        chosen.append((idx, cls))
    chosen.sort()
    indices = np.array([i for i, _ in chosen], dtype=np.int64)
    labels = np.array([c for _, c in chosen], dtype=np.int64)
    return PseudoLabelSelection(
        indices=indices,
        labels=labels,
        per_class_counts=counts,
        shortfall=bool(np.any(counts < topk)),
    )


def _ce_step(batch, pseudo_labels, raw_prototypes, params, opt_state, config):
    """One cross-entropy gradient step on a pseudo-labeled batch."""
    raw_protos = _check_shapes(batch, raw_prototypes, params)
    lr = lr_schedule(opt_state.iteration, config.eta0, config.gamma, config.alpha)
    _, sim, inv_t = _loss_graph(batch.matrix, raw_protos, params.dim, params.num_classes)
    ce_node = losses.cross_entropy_nodes(model.predict_node(sim, inv_t), pseudo_labels)
    graph = ad.Graph(ce_node)
    bindings = params.as_bindings()
    try:
        loss_ce = float(graph.evaluate(bindings))
        if not np.isfinite(loss_ce):
            raise ad.NumericDomainError("cross-entropy loss is non-finite")
        grads = graph.gradient(
            bindings, wrt=sorted(model.trainable_set(config.tuning_mode))
        )
    except ad.NumericDomainError as err:
        raise DivergenceError(
            f"non-finite loss at iteration {opt_state.iteration}: {err}",
            iteration=opt_state.iteration,
            batch_ids=batch.ids.tolist(),
        ) from err
    new_params, new_opt = sgd_momentum_step(params, grads, opt_state, lr, config.momentum)
    metrics = {
        "iter": opt_state.iteration,
        "lr": lr,
        "loss_total": loss_ce,
        "loss_transport": 0.0,
        "loss_mi": 0.0,
        "loss_entropy": 0.0,
        "loss_ce": loss_ce,
    }
    return new_params, new_opt, metrics


def upl_train(features, raw_prototypes, config, labels=None):
    """Self-training baseline: pseudo-label once, then fit prompts with CE.

    The zero-shot model labels the full dataset; the `config.upl_topk` most
    confident records per class become the training set for prompt-tuning
    under cross-entropy. True labels, when given, are only used to record
    accuracy. Deterministic per config seed.
    """
    if config.tuning_mode != "prompt-tuning":
        raise ValidationError(
            "the pseudo-label baseline trains prompt parameters only; "
            "set tuning_mode='prompt-tuning'"
        )
    feats, protos, lab = _check_dataset(features, raw_prototypes, labels)
    params = model.init_params(
        protos.shape[1], protos.shape[0], temperature=config.temperature
    )
    encoded = model.encode(feats, params)
    zero_shot_protos = model.effective_prototypes(protos, params)
    probs = model.predict(encoded.matrix, zero_shot_protos, params.temperature)
    selection = upl_pseudo_label(probs, config.upl_topk)
    if selection.indices.size == 0:
        raise ValidationError("pseudo-labeling selected no records")

    subset = feats[selection.indices]
    prior_state = priors.uniform_prior(
        protos.shape[0], horizon=max(config.iterations, 1)
    )
    opt_state = init_optimizer(params, config.tuning_mode)
    rng = np.random.default_rng(config.seed)
    sampler = _BatchSampler(subset.shape[0], config.batch_size, rng)

    records = []
    for _ in range(config.iterations):
        local = sampler.next_indices()
        batch = model.FeatureBatch(matrix=subset[local], ids=selection.indices[local])
        params, opt_state, metrics = _ce_step(
            batch, selection.labels[local], protos, params, opt_state, config
        )
        if lab is not None:
            predicted = _dataset_predictions(feats, protos, params)
            metrics["accuracy"] = float(np.mean(predicted == lab))
        records.append(metrics)

    report = RunReport(
        records=tuple(records),
        final_params=params,
        final_prior=prior_state,
        extras={
            "pseudo_label_count": int(selection.indices.size),
            "pseudo_label_shortfall": selection.shortfall,
        },
    )
    return params, report
