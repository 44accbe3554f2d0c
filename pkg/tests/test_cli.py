import json
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from pouf import cli, data, evaluation, model
from pouf.errors import ValidationError

SMALL_CONFIG = {
    "train": {
        "iterations": 4,
        "batch_size": 16,
        "temperature": 0.25,
        "eta0": 0.01,
        "lambda_mi": 0.3,
    },
    "synthetic": {"num_classes": 3, "dim": 8, "num_samples": 60, "seed": 5},
}


def write_config(tmp_path, document, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(document))
    return str(path)


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """A small generated dataset shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("bench")
    config = write_config(root, SMALL_CONFIG)
    out = str(root / "data")
    assert run_cli("generate", "--config", config, "--out", out) == 0
    return {"config": config, "data": out, "root": root}


class TestGenerate:
    def test_writes_all_artifacts(self, bench):
        for name in ("prototypes.pouf", "features.pouf", "labels.txt", "classes.txt", "manifest.json"):
            assert os.path.isfile(os.path.join(bench["data"], name))

    def test_same_seed_gives_identical_bytes(self, bench, tmp_path):
        out = tmp_path / "again"
        assert run_cli("generate", "--config", bench["config"], "--out", str(out)) == 0
        for name in ("prototypes.pouf", "features.pouf", "labels.txt", "classes.txt"):
            a = (out / name).read_bytes()
            b = open(os.path.join(bench["data"], name), "rb").read()
            assert a == b, name

    def test_seed_flag_changes_output(self, bench, tmp_path):
        out = tmp_path / "other"
        assert run_cli(
            "generate", "--config", bench["config"], "--out", str(out), "--seed", "6"
        ) == 0
        a = (out / "features.pouf").read_bytes()
        b = open(os.path.join(bench["data"], "features.pouf"), "rb").read()
        assert a != b

    def test_invalid_proportions_exit_2(self, tmp_path, capsys):
        config = write_config(
            tmp_path,
            {"synthetic": {"num_classes": 2, "class_proportions": [0.6, 0.3]}},
        )
        assert run_cli("generate", "--config", config, "--out", str(tmp_path / "x")) == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        config = write_config(tmp_path, {"synthetic": {"n_samples": 10}})
        assert run_cli("generate", "--config", config, "--out", str(tmp_path / "x")) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_replay_from_manifest_is_bitwise(self, bench, tmp_path):
        manifest = os.path.join(bench["data"], "manifest.json")
        out = tmp_path / "replay"
        assert run_cli("generate", "--config", manifest, "--out", str(out)) == 0
        for name in ("prototypes.pouf", "features.pouf", "labels.txt"):
            assert (out / name).read_bytes() == open(
                os.path.join(bench["data"], name), "rb"
            ).read()

    def test_manifest_contents(self, bench):
        manifest = json.load(open(os.path.join(bench["data"], "manifest.json")))
        assert manifest["command"] == "generate"
        assert manifest["seed"] == 5
        assert manifest["config"]["synthetic"]["num_samples"] == 60
        assert "features" in manifest["outputs"]
        assert "wall_clock_seconds" in manifest


class TestAdapt:
    def test_writes_params_report_and_curves(self, bench, tmp_path):
        out = tmp_path / "adapted"
        assert run_cli(
            "adapt", "--config", bench["config"], "--data", bench["data"], "--out", str(out)
        ) == 0
        for name in (
            "adapter.pouf",
            "proto_offsets.pouf",
            "log_temperature.pouf",
            "report.jsonl",
            "summary.json",
            "training_curves.png",
            "manifest.json",
        ):
            assert (out / name).is_file(), name
        lines = (out / "report.jsonl").read_text().splitlines()
        assert len(lines) == SMALL_CONFIG["train"]["iterations"]
        record = json.loads(lines[0])
        assert {"iter", "lr", "loss_total", "accuracy"} <= set(record)

    def test_prints_final_metrics_line(self, bench, tmp_path, capsys):
        out = tmp_path / "adapted"
        run_cli("adapt", "--config", bench["config"], "--data", bench["data"], "--out", str(out))
        line = capsys.readouterr().out.strip().splitlines()[-1]
        summary = json.loads(line)
        assert {"accuracy", "zero_shot_accuracy", "loss_total"} <= set(summary)

    def test_zero_objective_keeps_initial_params(self, bench, tmp_path):
        document = json.loads(open(bench["config"]).read())
        document["train"].update(
            {"transport_kind": "none", "transport_weight": 0.0, "lambda_mi": 0.0}
        )
        config = write_config(tmp_path, document)
        out = tmp_path / "noop"
        assert run_cli("adapt", "--config", config, "--data", bench["data"], "--out", str(out)) == 0
        adapter = data.read_embeddings(out / "adapter.pouf")
        offsets = data.read_embeddings(out / "proto_offsets.pouf")
        log_t = data.read_embeddings(out / "log_temperature.pouf")
        dim = SMALL_CONFIG["synthetic"]["dim"]
        np.testing.assert_array_equal(adapter, np.eye(dim))
        np.testing.assert_array_equal(offsets, np.zeros_like(offsets))
        assert log_t[0, 0] == np.float32(np.log(0.25))

    def test_divergence_exit_3_with_diagnostics(self, bench, tmp_path, capsys):
        document = json.loads(open(bench["config"]).read())
        document["train"]["temperature"] = 1e-320  # exp(-log T) overflows
        config = write_config(tmp_path, document)
        out = tmp_path / "diverged"
        assert run_cli("adapt", "--config", config, "--data", bench["data"], "--out", str(out)) == 3
        err = capsys.readouterr().err
        assert "diagnostics" in err
        diagnostics = json.load(open(out / "diagnostics.json"))
        assert diagnostics["iteration"] == 0
        assert len(diagnostics["batch_ids"]) > 0

    def test_upl_method(self, bench, tmp_path):
        document = json.loads(open(bench["config"]).read())
        document["train"].update(
            {"method": "upl", "tuning_mode": "prompt-tuning", "upl_topk": 4}
        )
        config = write_config(tmp_path, document)
        out = tmp_path / "upl"
        assert run_cli("adapt", "--config", config, "--data", bench["data"], "--out", str(out)) == 0
        summary = json.load(open(out / "summary.json"))
        assert summary["method"] == "upl"
        assert summary["pseudo_label_count"] == 12  # 3 classes * topk 4
        dim = SMALL_CONFIG["synthetic"]["dim"]
        adapter = data.read_embeddings(out / "adapter.pouf")
        np.testing.assert_array_equal(adapter, np.eye(dim))  # prompt mode

    def test_replay_from_manifest_is_bitwise(self, bench, tmp_path):
        first = tmp_path / "first"
        run_cli("adapt", "--config", bench["config"], "--data", bench["data"], "--out", str(first))
        replay = tmp_path / "replay"
        assert run_cli(
            "adapt",
            "--config", str(first / "manifest.json"),
            "--data", bench["data"],
            "--out", str(replay),
        ) == 0
        for name in ("adapter.pouf", "proto_offsets.pouf", "log_temperature.pouf", "report.jsonl"):
            assert (replay / name).read_bytes() == (first / name).read_bytes(), name

    def test_missing_data_dir_exit_2(self, bench, tmp_path, capsys):
        assert run_cli(
            "adapt", "--config", bench["config"],
            "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"),
        ) == 2
        assert "missing" in capsys.readouterr().err


class TestEval:
    def test_zero_shot_on_unshifted_data_is_perfect(self, tmp_path, capsys):
        config = write_config(
            tmp_path,
            {
                "synthetic": {
                    "num_classes": 3,
                    "dim": 8,
                    "num_samples": 60,
                    "seed": 1,
                    "rotation_angle_scale": 0.0,
                    "bias_scale": 0.0,
                    "prototype_noise": 0.0,
                    "cluster_spread": 0.05,
                }
            },
        )
        data_dir = tmp_path / "clean"
        run_cli("generate", "--config", config, "--out", str(data_dir))
        out = tmp_path / "report"
        assert run_cli("eval", "--data", str(data_dir), "--out", str(out)) == 0
        metrics = json.load(open(out / "metrics.json"))
        assert metrics["accuracy"] == 1.0
        assert "accuracy 1.0000" in capsys.readouterr().out

    def test_writes_all_reports_and_figures(self, bench, tmp_path):
        out = tmp_path / "report"
        assert run_cli("eval", "--data", bench["data"], "--out", str(out)) == 0
        for name in (
            "metrics.json", "histogram.csv", "histogram.png",
            "knn.csv", "pca.csv", "pca.png", "manifest.json",
        ):
            assert (out / name).is_file(), name
        assert (out / "histogram.png").read_bytes().startswith(b"\x89PNG")

    def test_matches_library_evaluation(self, bench, tmp_path):
        out = tmp_path / "report"
        run_cli("eval", "--data", bench["data"], "--out", str(out))
        metrics = json.load(open(out / "metrics.json"))

        features = data.read_embeddings(os.path.join(bench["data"], "features.pouf"))
        prototypes = data.read_embeddings(os.path.join(bench["data"], "prototypes.pouf"))
        labels = data.read_labels(os.path.join(bench["data"], "labels.txt"))
        params = model.init_params(features.shape[1], prototypes.shape[0])
        encoded = model.encode(features, params)
        protos = model.effective_prototypes(prototypes, params)
        probs = model.predict(encoded.matrix, protos, params.temperature)
        expected = evaluation.evaluate(
            probs, labels, similarities=encoded.matrix @ protos.T
        )
        assert metrics["accuracy"] == expected.accuracy
        assert metrics["mean_correct_cosine"] == pytest.approx(
            expected.mean_correct_cosine, rel=0, abs=0
        )

    def test_adapted_params_are_used(self, bench, tmp_path):
        adapted = tmp_path / "adapted"
        run_cli("adapt", "--config", bench["config"], "--data", bench["data"], "--out", str(adapted))
        out = tmp_path / "report"
        assert run_cli(
            "eval", "--params", str(adapted), "--data", bench["data"], "--out", str(out)
        ) == 0
        metrics = json.load(open(out / "metrics.json"))
        summary = json.load(open(adapted / "summary.json"))
        # Params go through 32-bit storage, so scores match loosely, not bitwise.
        assert metrics["accuracy"] == pytest.approx(summary["accuracy"], abs=0.05)

    def test_missing_labels_still_exports(self, bench, tmp_path, capsys):
        data_dir = tmp_path / "unlabeled"
        data_dir.mkdir()
        for name in ("features.pouf", "prototypes.pouf"):
            (data_dir / name).write_bytes(
                open(os.path.join(bench["data"], name), "rb").read()
            )
        out = tmp_path / "report"
        assert run_cli("eval", "--data", str(data_dir), "--out", str(out)) == 0
        assert "metrics and histogram omitted" in capsys.readouterr().err
        assert not (out / "metrics.json").exists()
        assert not (out / "histogram.csv").exists()
        for name in ("knn.csv", "pca.csv", "pca.png", "manifest.json"):
            assert (out / name).is_file(), name

    def test_unlabeled_markers_skip_metrics(self, bench, tmp_path, capsys):
        data_dir = tmp_path / "partial"
        data_dir.mkdir()
        for name in ("features.pouf", "prototypes.pouf"):
            (data_dir / name).write_bytes(
                open(os.path.join(bench["data"], name), "rb").read()
            )
        labels = data.read_labels(os.path.join(bench["data"], "labels.txt"))
        labels[0] = -1
        data.write_labels(data_dir / "labels.txt", labels)
        out = tmp_path / "report"
        assert run_cli("eval", "--data", str(data_dir), "--out", str(out)) == 0
        assert "unlabeled" in capsys.readouterr().err
        assert not (out / "metrics.json").exists()

    def test_shape_mismatch_exit_2(self, bench, tmp_path, capsys):
        config = write_config(
            tmp_path, {"synthetic": {"num_classes": 3, "dim": 6, "num_samples": 30}},
            name="other.json",
        )
        other = tmp_path / "other-data"
        run_cli("generate", "--config", config, "--out", str(other))
        adapted = tmp_path / "adapted"
        run_cli("adapt", "--config", bench["config"], "--data", bench["data"], "--out", str(adapted))
        assert run_cli(
            "eval", "--params", str(adapted), "--data", str(other), "--out", str(tmp_path / "x")
        ) == 2
        assert "does not match" in capsys.readouterr().err

    def test_missing_param_file_exit_2(self, bench, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run_cli(
            "eval", "--params", str(empty), "--data", bench["data"], "--out", str(tmp_path / "x")
        ) == 2
        assert "missing parameter file" in capsys.readouterr().err


@pytest.fixture(scope="module")
def grid(bench, tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    document = json.loads(open(bench["config"]).read())
    document["ablate"] = {"seeds": [0, 1], "variants": ["default", "no-mi"]}
    config = write_config(root, document)
    out = root / "ablation"
    code = run_cli("ablate", "--config", config, "--data", bench["data"], "--out", str(out))
    return {"code": code, "out": out}


class TestAblate:
    def test_exit_0_and_artifacts(self, grid):
        assert grid["code"] == 0
        for name in ("ablation.csv", "ablation_summary.csv", "ablation.png", "manifest.json"):
            assert (grid["out"] / name).is_file(), name

    def test_row_count_and_order(self, grid):
        lines = (grid["out"] / "ablation.csv").read_text().splitlines()
        assert lines[0] == "variant,seed,zero_shot_accuracy,accuracy,status"
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 4  # 2 variants x 2 seeds
        assert [(r[0], r[1]) for r in rows] == [
            ("default", "0"), ("default", "1"), ("no-mi", "0"), ("no-mi", "1"),
        ]
        assert all(r[4] == "ok" for r in rows)

    def test_summary_format(self, grid):
        lines = (grid["out"] / "ablation_summary.csv").read_text().splitlines()
        assert lines[0] == "variant,mean_accuracy,std_accuracy,mean_std"
        assert len(lines) == 3
        for line in lines[1:]:
            cells = line.split(",")
            assert re.fullmatch(r"0\.\d{4}\(0\.\d{4}\)", cells[3])
            mean = float(cells[1])
            assert float(cells[3].split("(")[0]) == pytest.approx(mean, abs=1e-4)

    def test_requires_labels(self, bench, tmp_path, capsys):
        data_dir = tmp_path / "unlabeled"
        data_dir.mkdir()
        for name in ("features.pouf", "prototypes.pouf"):
            (data_dir / name).write_bytes(
                open(os.path.join(bench["data"], name), "rb").read()
            )
        assert run_cli(
            "ablate", "--config", bench["config"], "--data", str(data_dir),
            "--out", str(tmp_path / "x"),
        ) == 2
        assert "requires labels" in capsys.readouterr().err

    def test_per_variant_isolation(self, bench, tmp_path, capsys):
        document = json.loads(open(bench["config"]).read())
        document["train"]["eta0"] = 1e150  # every variant diverges after one step
        document["ablate"] = {"seeds": [0], "variants": ["default", "no-mi"]}
        config = write_config(tmp_path, document)
        out = tmp_path / "ablation"
        code = run_cli("ablate", "--config", config, "--data", bench["data"], "--out", str(out))
        assert code == 3
        lines = (out / "ablation.csv").read_text().splitlines()
        assert len(lines) == 3  # header + both rows present despite failures
        assert all("divergence" in line for line in lines[1:])
        assert "2 of 2 runs failed" in capsys.readouterr().err

    def test_seed_flag_restricts_grid(self, bench, tmp_path):
        document = json.loads(open(bench["config"]).read())
        document["ablate"] = {"seeds": [0, 1, 2], "variants": ["default"]}
        config = write_config(tmp_path, document)
        out = tmp_path / "ablation"
        assert run_cli(
            "ablate", "--config", config, "--data", bench["data"],
            "--out", str(out), "--seed", "7",
        ) == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("default,7,")


class TestGradcheck:
    def test_passes_and_prints_worst(self, capsys):
        assert run_cli("gradcheck", "--instances", "2") == 0
        out = capsys.readouterr().out
        assert "worst relative error" in out
        assert "tolerance 1.0e-04" in out

    def test_sign_flip_fails_and_names_pipeline(self, capsys):
        assert run_cli("gradcheck", "--instances", "1", "--sign-flip", "mi") == 1
        assert "failed for: mi" in capsys.readouterr().err

    def test_unknown_pipeline_exit_2(self, capsys):
        assert run_cli("gradcheck", "--instances", "1", "--sign-flip", "bogus") == 2
        assert "unknown pipeline" in capsys.readouterr().err

    def test_report_written_with_out(self, tmp_path):
        out = tmp_path / "gc"
        assert run_cli("gradcheck", "--instances", "1", "--out", str(out)) == 0
        report = json.load(open(out / "gradcheck_report.json"))
        assert report["passed"] is True
        assert len(report["pipelines"]) == 6
        manifest = json.load(open(out / "manifest.json"))
        assert manifest["command"] == "gradcheck"


class TestThreadEnvironment:
    def test_bad_pouf_threads_exit_2(self, bench, monkeypatch, capsys):
        monkeypatch.setenv("POUF_THREADS", "many")
        assert run_cli("eval", "--data", bench["data"], "--out", "/tmp/unused") == 2
        assert "POUF_THREADS" in capsys.readouterr().err

    def test_thread_cap_parses_valid_values(self, monkeypatch):
        monkeypatch.setenv("POUF_THREADS", "4")
        assert cli._thread_cap() == 4
        monkeypatch.setenv("POUF_THREADS", "0")
        assert cli._thread_cap() is None
        monkeypatch.delenv("POUF_THREADS")
        assert cli._thread_cap() is None


class TestSubprocessEntry:
    def test_console_script_version(self):
        result = subprocess.run(
            [sys.executable, "-m", "pouf.cli", "--version"],
            capture_output=True, text=True,
        )
        assert result.returncode == 0
        assert "pouf" in result.stdout

    def test_reports_identical_across_thread_caps(self, bench, tmp_path):
        outs = {}
        for threads in ("1", "2"):
            out = tmp_path / f"threads-{threads}"
            env = dict(os.environ, POUF_THREADS=threads)
            result = subprocess.run(
                [
                    sys.executable, "-m", "pouf.cli", "adapt",
                    "--config", bench["config"],
                    "--data", bench["data"],
                    "--out", str(out),
                ],
                capture_output=True, text=True, env=env,
            )
            assert result.returncode == 0, result.stderr
            outs[threads] = (out / "report.jsonl").read_bytes()
        assert outs["1"] == outs["2"]

    def test_missing_subcommand_exit_2(self):
        result = subprocess.run(
            [sys.executable, "-m", "pouf.cli"], capture_output=True, text=True
        )
        assert result.returncode == 2
