"""Prototype-oriented unsupervised fitting.

Aligns a batch of target-domain embeddings with class prototypes, without
source data or labels, by minimizing a transport-style alignment cost plus a
mutual-information objective. Ships a deterministic autodiff core, exact and
entropic transport solvers, a synthetic drift benchmark, evaluation exports,
and a CLI.
"""

__version__ = "0.1.0"
