"""JSON configuration: one document covering training, data synthesis, and
the ablation grid.

A config file is a single JSON object with up to three sections::

    {
      "train":     { ... TrainConfig fields ... },
      "synthetic": { ... SyntheticSpec fields ... },
      "ablate":    { "seeds": [0, 1, 2], "variants": [ ... ] }
    }

Any section may be omitted (defaults apply); unknown keys anywhere are a
validation error so typos never pass silently. A run manifest written by the
CLI embeds the full resolved snapshot under its "config" key, and passing a
manifest where a config is expected loads that snapshot — which is what
makes re-running from a manifest reproduce a run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .data import SyntheticSpec
from .errors import ValidationError
from .trainer import TrainConfig

# Ablation grid: the shipped configuration plus single-axis departures from
# it (transport family, loss removals, and the alternative pointwise cost).
ABLATION_VARIANTS = (
    "default",
    "ct",
    "ot-sinkhorn",
    "no-transport",
    "no-mi",
    "exp-neg-dot",
)
DEFAULT_ABLATION_SEEDS = (0, 1, 2)

_SECTIONS = ("train", "synthetic", "ablate")


@dataclass(frozen=True)
class Config:
    """Fully resolved configuration document."""

    train: TrainConfig = TrainConfig()
    synthetic: SyntheticSpec = SyntheticSpec()
    ablate_seeds: tuple = DEFAULT_ABLATION_SEEDS
    ablate_variants: tuple = ABLATION_VARIANTS


def _check_keys(section, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ValidationError(
            f"unknown keys in {section!r} config section: {unknown}"
        )


def _dataclass_from_dict(cls, section, values):
    if not isinstance(values, dict):
        raise ValidationError(f"config section {section!r} must be a JSON object")
    allowed = [f.name for f in dataclasses.fields(cls)]
    _check_keys(section, values, allowed)
    converted = dict(values)
    # JSON arrays arrive as lists; the dataclasses expect sequences and
    # normalize internally, so lists pass straight through.
    try:
        return cls(**converted)
    except TypeError as exc:  # e.g. nested objects where scalars belong
        raise ValidationError(f"invalid {section!r} config section: {exc}") from exc


def _ablate_from_dict(values):
    if not isinstance(values, dict):
        raise ValidationError("config section 'ablate' must be a JSON object")
    _check_keys("ablate", values, ("seeds", "variants"))
    seeds = values.get("seeds", list(DEFAULT_ABLATION_SEEDS))
    variants = values.get("variants", list(ABLATION_VARIANTS))
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ValidationError("'ablate.seeds' must be a non-empty list of integers")
    clean_seeds = []
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, int):
            raise ValidationError(f"'ablate.seeds' entries must be integers, got {s!r}")
        clean_seeds.append(int(s))
    if not isinstance(variants, (list, tuple)) or not variants:
        raise ValidationError("'ablate.variants' must be a non-empty list")
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValidationError(
                f"unknown ablation variant {v!r}; expected one of {ABLATION_VARIANTS}"
            )
    return tuple(clean_seeds), tuple(variants)


def config_from_document(doc):
    """Validate a parsed JSON document and resolve it into a Config."""
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    _check_keys("top-level", doc, _SECTIONS)
    train = _dataclass_from_dict(TrainConfig, "train", doc.get("train", {}))
    synthetic = _dataclass_from_dict(SyntheticSpec, "synthetic", doc.get("synthetic", {}))
    seeds, variants = _ablate_from_dict(doc.get("ablate", {}))
    return Config(
        train=train, synthetic=synthetic, ablate_seeds=seeds, ablate_variants=variants
    )


def config_to_document(config):
    """Full JSON-ready snapshot; inverse of config_from_document."""
    train = dataclasses.asdict(config.train)
    synthetic = dataclasses.asdict(config.synthetic)
    if synthetic["class_proportions"] is not None:
        synthetic["class_proportions"] = list(synthetic["class_proportions"])
    return {
        "train": train,
        "synthetic": synthetic,
        "ablate": {
            "seeds": list(config.ablate_seeds),
            "variants": list(config.ablate_variants),
        },
    }


def load_config(path):
    """Load a config file, or the config snapshot embedded in a manifest."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if isinstance(doc, dict) and "command" in doc and "config" in doc:
        doc = doc["config"]  # manifest: reuse its embedded snapshot
    return config_from_document(doc)


def with_seed(config, seed):
    """Copy of the config with every seed field overridden."""
    return Config(
        train=dataclasses.replace(config.train, seed=seed),
        synthetic=dataclasses.replace(config.synthetic, seed=seed),
        ablate_seeds=(seed,),
        ablate_variants=config.ablate_variants,
    )


def apply_variant(train_config, variant):
    """TrainConfig for one ablation-grid variant of the given base config."""
    if variant == "default":
        return train_config
    if variant == "ct":
        return dataclasses.replace(
            train_config, transport_kind="ct", cost_kind="cosine-distance"
        )
    if variant == "ot-sinkhorn":
        return dataclasses.replace(train_config, transport_kind="ot-sinkhorn")
    if variant == "no-transport":
        return dataclasses.replace(train_config, transport_kind="none")
    if variant == "no-mi":
        return dataclasses.replace(train_config, lambda_mi=0.0)
    if variant == "exp-neg-dot":
        return dataclasses.replace(train_config, cost_kind="exp-neg-dot")
    raise ValidationError(
        f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}"
    )
