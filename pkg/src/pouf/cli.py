"""Command-line driver: generate | adapt | eval | ablate | gradcheck.

Exit codes are a stable contract: 0 success, 1 check failure, 2 validation
error (bad flags, bad config, bad files), 3 training divergence.

Every command that writes artifacts also writes a ``manifest.json`` holding
the resolved config snapshot, the seed, input/output paths, the package
version, and wall-clock time. Passing a manifest to ``--config`` reuses its
embedded config snapshot, so a run can be reproduced from its manifest alone
(bit for bit, given the same input files).

The ``POUF_THREADS`` environment variable caps the linear-algebra thread
pools; it is applied before numpy is imported, which is why this module must
be imported before anything that pulls numpy in.
"""

from __future__ import annotations

import os
import sys

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _thread_cap():
    raw = os.environ.get("POUF_THREADS")
    if raw is None:
        return None
    try:
        count = int(raw)
    except ValueError:
        return None
    return count if count >= 1 else None


_cap = _thread_cap()
if _cap is not None:
    for _var in _THREAD_ENV_VARS:
        os.environ[_var] = str(_cap)

import argparse  # noqa: E402
import csv  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import time  # noqa: E402

import numpy as np  # noqa: E402  (imported after the thread cap)

from . import __version__  # noqa: E402
from . import config as config_mod  # noqa: E402
from . import data, evaluation, figures, gradcheck, model, trainer  # noqa: E402
from .errors import DivergenceError, FormatError, ValidationError  # noqa: E402

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3

HISTOGRAM_BINS = 20
KNN_NEIGHBORS = 5

_PARAM_FILES = ("adapter", "proto_offsets", "log_temperature")


# ---------------------------------------------------------------------------
# Shared plumbing


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _write_json(path, document):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(_jsonable(document), handle, indent=2, sort_keys=True)
        handle.write("\n")


def _ensure_out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _resolve_config(args):
    cfg = config_mod.load_config(args.config) if args.config else config_mod.Config()
    if getattr(args, "seed", None) is not None:
        cfg = config_mod.with_seed(cfg, args.seed)
    return cfg


def _write_manifest(out_dir, command, seed, cfg, inputs, outputs, started):
    document = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "wall_clock_seconds": round(time.time() - started, 3),
        "config": None if cfg is None else config_mod.config_to_document(cfg),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = os.path.join(out_dir, "manifest.json")
    _write_json(path, document)
    return path


def _save_params(out_dir, params):
    matrices = {
        "adapter": params.adapter,
        "proto_offsets": params.proto_offsets,
        "log_temperature": np.array([[params.log_temperature]]),
    }
    paths = {}
    for name in _PARAM_FILES:
        path = os.path.join(out_dir, f"{name}.pouf")
        data.write_embeddings(path, matrices[name])
        paths[name] = path
    return paths


def _load_params(params_dir):
    loaded = {}
    for name in _PARAM_FILES:
        path = os.path.join(params_dir, f"{name}.pouf")
        if not os.path.isfile(path):
            raise ValidationError(f"missing parameter file: {path}")
        loaded[name] = data.read_embeddings(path)
    if loaded["log_temperature"].shape != (1, 1):
        raise ValidationError(
            f"log_temperature.pouf must be a 1x1 matrix, got shape "
            f"{loaded['log_temperature'].shape}"
        )
    return model.ModelParams(
        adapter=loaded["adapter"],
        proto_offsets=loaded["proto_offsets"],
        log_temperature=float(loaded["log_temperature"][0, 0]),
    )


def _load_dataset(data_dir):
    """Read features/prototypes (required) and labels (optional) from a dir.

    Labels containing negative entries (the unlabeled marker) are treated as
    absent for metric purposes; a warning is emitted.
    """
    paths = {
        "features": os.path.join(data_dir, "features.pouf"),
        "prototypes": os.path.join(data_dir, "prototypes.pouf"),
    }
    for name, path in paths.items():
        if not os.path.isfile(path):
            raise ValidationError(f"missing {name} file: {path}")
    features = data.read_embeddings(paths["features"])
    prototypes = data.read_embeddings(paths["prototypes"])
    labels_path = os.path.join(data_dir, "labels.txt")
    labels = None
    if os.path.isfile(labels_path):
        labels = data.read_labels(labels_path)
        if labels.size != features.shape[0]:
            raise ValidationError(
                f"labels.txt has {labels.size} entries for {features.shape[0]} "
                "feature rows"
            )
        if labels.size and labels.min() < 0:
            print(
                "warning: labels.txt contains unlabeled entries (-1); "
                "label-based metrics are skipped",
                file=sys.stderr,
            )
            labels = None
    return features, prototypes, labels


def _check_params_match(params, features, prototypes):
    if params.dim != features.shape[1]:
        raise ValidationError(
            f"parameter dimension {params.dim} does not match feature "
            f"dimension {features.shape[1]}"
        )
    if params.proto_offsets.shape != prototypes.shape:
        raise ValidationError(
            f"parameter offsets shape {params.proto_offsets.shape} does not "
            f"match prototypes shape {prototypes.shape}"
        )


def _model_accuracy(features, prototypes, params, labels):
    encoded = model.encode(features, params)
    protos = model.effective_prototypes(prototypes, params)
    probs = model.predict(encoded.matrix, protos, params.temperature)
    return evaluation.evaluate(probs, labels).accuracy


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args):
    started = time.time()
    cfg = _resolve_config(args)
    spec = cfg.synthetic
    prototypes, features, labels = data.generate_synthetic(spec)
    out_dir = _ensure_out_dir(args.out)

    outputs = {
        "prototypes": os.path.join(out_dir, "prototypes.pouf"),
        "features": os.path.join(out_dir, "features.pouf"),
        "labels": os.path.join(out_dir, "labels.txt"),
        "classes": os.path.join(out_dir, "classes.txt"),
    }
    data.write_embeddings(outputs["prototypes"], prototypes)
    data.write_embeddings(outputs["features"], features)
    data.write_labels(outputs["labels"], labels)
    data.write_class_names(
        outputs["classes"], [f"class-{k}" for k in range(spec.num_classes)]
    )
    outputs["manifest"] = _write_manifest(
        out_dir,
        "generate",
        spec.seed,
        cfg,
        inputs={"config": args.config or "<defaults>"},
        outputs=outputs,
        started=started,
    )
    print(
        f"generated {spec.num_samples} samples, {spec.num_classes} classes, "
        f"dim {spec.dim} -> {out_dir}"
    )
    return EXIT_OK


def cmd_adapt(args):
    started = time.time()
    cfg = _resolve_config(args)
    train_cfg = cfg.train
    features, prototypes, labels = _load_dataset(args.data)
    out_dir = _ensure_out_dir(args.out)

    run = trainer.upl_train if train_cfg.method == "upl" else trainer.train
    try:
        params, report = run(features, prototypes, train_cfg, labels=labels)
    except DivergenceError as exc:
        diagnostics = os.path.join(out_dir, "diagnostics.json")
        _write_json(
            diagnostics,
            {
                "error": str(exc),
                "iteration": exc.iteration,
                "batch_ids": exc.batch_ids,
            },
        )
        print(f"error: {exc}", file=sys.stderr)
        print(f"diagnostics written to {diagnostics}", file=sys.stderr)
        return EXIT_DIVERGENCE

    outputs = _save_params(out_dir, params)
    outputs["report"] = os.path.join(out_dir, "report.jsonl")
    with open(outputs["report"], "w", encoding="utf-8") as handle:
        for record in report.records:
            handle.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
    if report.records:
        outputs["training_curves"] = figures.render_training_curves(
            os.path.join(out_dir, "training_curves.png"), report.records
        )

    summary = {
        "method": train_cfg.method,
        "iterations": train_cfg.iterations,
        "seed": train_cfg.seed,
        "final_prior": report.final_prior.weights,
        "loss_total": report.records[-1]["loss_total"] if report.records else None,
    }
    summary.update(report.extras)
    if labels is not None:
        zero_shot = model.init_params(
            features.shape[1], prototypes.shape[0], temperature=train_cfg.temperature
        )
        summary["zero_shot_accuracy"] = _model_accuracy(
            features, prototypes, zero_shot, labels
        )
        summary["accuracy"] = _model_accuracy(features, prototypes, params, labels)
    outputs["summary"] = os.path.join(out_dir, "summary.json")
    _write_json(outputs["summary"], summary)

    outputs["manifest"] = _write_manifest(
        out_dir,
        "adapt",
        train_cfg.seed,
        cfg,
        inputs={"config": args.config or "<defaults>", "data": args.data},
        outputs=outputs,
        started=started,
    )
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    started = time.time()
    features, prototypes, labels = _load_dataset(args.data)
    if args.params:
        params = _load_params(args.params)
    else:
        params = model.init_params(features.shape[1], prototypes.shape[0])
    _check_params_match(params, features, prototypes)
    out_dir = _ensure_out_dir(args.out)

    encoded = model.encode(features, params)
    protos = model.effective_prototypes(prototypes, params)
    probs = model.predict(encoded.matrix, protos, params.temperature)

    outputs = {}
    k = min(KNN_NEIGHBORS, features.shape[0])
    outputs["knn"] = os.path.join(out_dir, "knn.csv")
    evaluation.write_knn_csv(outputs["knn"], encoded.matrix, protos, k)
    coords = evaluation.pca_projection(encoded.matrix)
    outputs["pca"] = os.path.join(out_dir, "pca.csv")
    evaluation.write_pca_csv(outputs["pca"], coords, labels)
    outputs["pca_figure"] = figures.render_pca(
        os.path.join(out_dir, "pca.png"), coords, labels
    )

    if labels is None:
        print(
            "warning: no labels available; metrics and histogram omitted",
            file=sys.stderr,
        )
    else:
        similarities = encoded.matrix @ protos.T  # rows/protos are unit norm
        result = evaluation.evaluate(probs, labels, similarities=similarities)
        outputs["metrics"] = os.path.join(out_dir, "metrics.json")
        evaluation.write_metrics_json(outputs["metrics"], result)
        edges, counts = evaluation.cosine_histogram(
            encoded.matrix, protos, labels, bins=HISTOGRAM_BINS
        )
        outputs["histogram"] = os.path.join(out_dir, "histogram.csv")
        evaluation.write_histogram_csv(outputs["histogram"], edges, counts)
        outputs["histogram_figure"] = figures.render_histogram(
            os.path.join(out_dir, "histogram.png"), edges, counts
        )
        print(
            f"accuracy {result.accuracy:.4f} "
            f"mean_correct_cosine {result.mean_correct_cosine:.4f}"
        )

    outputs["manifest"] = _write_manifest(
        out_dir,
        "eval",
        None,
        None,
        inputs={"params": args.params or "<zero-shot>", "data": args.data},
        outputs=outputs,
        started=started,
    )
    return EXIT_OK


def cmd_ablate(args):
    started = time.time()
    cfg = _resolve_config(args)
    features, prototypes, labels = _load_dataset(args.data)
    if labels is None:
        raise ValidationError("ablation requires labels.txt in the data directory")
    out_dir = _ensure_out_dir(args.out)

    rows = []
    worst_exit = EXIT_OK
    for variant in cfg.ablate_variants:
        for seed in cfg.ablate_seeds:
            run_cfg = dataclasses.replace(
                config_mod.apply_variant(cfg.train, variant), seed=seed
            )
            row = {"variant": variant, "seed": seed}
            try:
                zero_shot = model.init_params(
                    features.shape[1],
                    prototypes.shape[0],
                    temperature=run_cfg.temperature,
                )
                row["zero_shot_accuracy"] = _model_accuracy(
                    features, prototypes, zero_shot, labels
                )
                params, _ = trainer.train(features, prototypes, run_cfg)
                row["accuracy"] = _model_accuracy(features, prototypes, params, labels)
                row["status"] = "ok"
            except DivergenceError as exc:
                worst_exit = max(worst_exit, EXIT_DIVERGENCE)
                row.setdefault("zero_shot_accuracy", None)
                row["accuracy"] = None
                row["status"] = f"divergence: {exc}"
            except (ValidationError, FormatError) as exc:
                worst_exit = max(worst_exit, EXIT_VALIDATION)
                row.setdefault("zero_shot_accuracy", None)
                row["accuracy"] = None
                row["status"] = f"invalid: {exc}"
            rows.append(row)
    rows.sort(key=lambda r: (r["variant"], r["seed"]))

    outputs = {"table": os.path.join(out_dir, "ablation.csv")}
    with open(outputs["table"], "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["variant", "seed", "zero_shot_accuracy", "accuracy", "status"])
        for row in rows:
            writer.writerow(
                [
                    row["variant"],
                    row["seed"],
                    "" if row["zero_shot_accuracy"] is None
                    else f"{row['zero_shot_accuracy']:.6f}",
                    "" if row["accuracy"] is None else f"{row['accuracy']:.6f}",
                    row["status"],
                ]
            )

    summary_rows = []
    for variant in sorted(set(r["variant"] for r in rows)):
        accs = [r["accuracy"] for r in rows if r["variant"] == variant and r["status"] == "ok"]
        if not accs:
            continue
        mean = float(np.mean(accs))
        std = float(np.std(accs))
        summary_rows.append((variant, mean, std))
    outputs["summary"] = os.path.join(out_dir, "ablation_summary.csv")
    with open(outputs["summary"], "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["variant", "mean_accuracy", "std_accuracy", "mean_std"])
        for variant, mean, std in summary_rows:
            writer.writerow(
                [variant, f"{mean:.6f}", f"{std:.6f}", f"{mean:.4f}({std:.4f})"]
            )
    if summary_rows:
        outputs["figure"] = figures.render_ablation(
            os.path.join(out_dir, "ablation.png"),
            [r[0] for r in summary_rows],
            [r[1] for r in summary_rows],
            [r[2] for r in summary_rows],
        )

    outputs["manifest"] = _write_manifest(
        out_dir,
        "ablate",
        None,
        cfg,
        inputs={"config": args.config or "<defaults>", "data": args.data},
        outputs=outputs,
        started=started,
    )
    for variant, mean, std in summary_rows:
        print(f"{variant}: {mean:.4f}({std:.4f})")
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} of {len(rows)} runs failed", file=sys.stderr)
    return worst_exit


def cmd_gradcheck(args):
    started = time.time()
    report = gradcheck.run_gradcheck(
        seed=args.seed,
        instances=args.instances,
        sign_flip_pipeline=args.sign_flip,
    )
    worst = report.worst
    print(
        f"worst relative error {worst.worst_rel_error:.3e} "
        f"(pipeline {worst.name}, parameter {worst.worst_parameter}, "
        f"tolerance {report.tolerance:.1e})"
    )
    if args.out:
        out_dir = _ensure_out_dir(args.out)
        outputs = {"report": os.path.join(out_dir, "gradcheck_report.json")}
        _write_json(
            outputs["report"],
            {
                "tolerance": report.tolerance,
                "passed": report.passed,
                "pipelines": [dataclasses.asdict(p) for p in report.pipelines],
            },
        )
        outputs["manifest"] = _write_manifest(
            out_dir,
            "gradcheck",
            args.seed,
            None,
            inputs={"instances": args.instances, "sign_flip": args.sign_flip or ""},
            outputs=outputs,
            started=started,
        )
    if not report.passed:
        failing = ", ".join(p.name for p in report.pipelines if not p.passed)
        print(f"gradient check failed for: {failing}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pouf",
        description=(
            "Prototype-oriented unsupervised fitting: synthesize drifted "
            "benchmarks, adapt a prototype classifier without labels, and "
            "report the results."
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a drifted benchmark dataset")
    p.add_argument("--config", help="config JSON (or a manifest to replay)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("adapt", help="fit the model to unlabeled features")
    p.add_argument("--config", help="config JSON (or a manifest to replay)")
    p.add_argument("--data", required=True, help="directory with features/prototypes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.set_defaults(handler=cmd_adapt)

    p = sub.add_parser("eval", help="score parameters against a dataset")
    p.add_argument("--params", help="directory with adapted parameters (default: zero-shot)")
    p.add_argument("--data", required=True, help="directory with features/prototypes")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="run the variant-by-seed accuracy grid")
    p.add_argument("--config", help="config JSON (or a manifest to replay)")
    p.add_argument("--data", required=True, help="directory with features/prototypes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="replace the seed list with one seed")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", help="audit analytic gradients numerically")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--instances", type=int, default=gradcheck.DEFAULT_INSTANCES,
        help="random instances per pipeline",
    )
    p.add_argument(
        "--sign-flip", metavar="PIPELINE", default=None,
        help="test hook: negate one pipeline's analytic gradient",
    )
    p.add_argument("--out", help="optional directory for the JSON report")
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None):
    raw_threads = os.environ.get("POUF_THREADS")
    if raw_threads is not None and _thread_cap() is None:
        print(
            f"error: POUF_THREADS must be a positive integer, got {raw_threads!r}",
            file=sys.stderr,
        )
        return EXIT_VALIDATION
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
