import dataclasses
import json

import pytest

from pouf import config as config_mod
from pouf.data import SyntheticSpec
from pouf.errors import ValidationError
from pouf.trainer import TrainConfig


class TestConfigFromDocument:
    def test_empty_document_gives_defaults(self):
        cfg = config_mod.config_from_document({})
        assert cfg.train == TrainConfig()
        assert cfg.synthetic == SyntheticSpec()
        assert cfg.ablate_seeds == config_mod.DEFAULT_ABLATION_SEEDS
        assert cfg.ablate_variants == config_mod.ABLATION_VARIANTS

    def test_sections_override_fields(self):
        cfg = config_mod.config_from_document(
            {
                "train": {"lambda_mi": 0.6, "batch_size": 8},
                "synthetic": {"num_classes": 3, "dim": 16},
                "ablate": {"seeds": [4, 5], "variants": ["default", "no-mi"]},
            }
        )
        assert cfg.train.lambda_mi == 0.6
        assert cfg.train.batch_size == 8
        assert cfg.train.momentum == 0.9  # untouched default
        assert cfg.synthetic.num_classes == 3
        assert cfg.ablate_seeds == (4, 5)
        assert cfg.ablate_variants == ("default", "no-mi")

    @pytest.mark.parametrize(
        "doc",
        [
            {"trian": {}},
            {"train": {"lambda_im": 0.3}},
            {"synthetic": {"n_classes": 4}},
            {"ablate": {"seed": [0]}},
            {"train": []},
            {"synthetic": "none"},
            {"ablate": {"seeds": []}},
            {"ablate": {"seeds": [0.5]}},
            {"ablate": {"seeds": [True]}},
            {"ablate": {"variants": []}},
            {"ablate": {"variants": ["bogus"]}},
            [],
        ],
    )
    def test_malformed_documents_rejected(self, doc):
        with pytest.raises(ValidationError):
            config_mod.config_from_document(doc)

    def test_field_validation_still_applies(self):
        with pytest.raises(ValidationError, match="lambda_mi"):
            config_mod.config_from_document({"train": {"lambda_mi": -0.1}})
        with pytest.raises(ValidationError):
            config_mod.config_from_document(
                {"synthetic": {"class_proportions": [0.5, 0.4], "num_classes": 2}}
            )


class TestDocumentRoundTrip:
    def test_to_document_then_back_is_identity(self):
        cfg = config_mod.config_from_document(
            {
                "train": {"transport_kind": "ot-sinkhorn", "sinkhorn_epsilon": 0.2},
                "synthetic": {"class_proportions": [0.6, 0.3, 0.1], "num_classes": 3},
                "ablate": {"seeds": [0, 1, 2, 3, 4]},
            }
        )
        document = config_mod.config_to_document(cfg)
        rebuilt = config_mod.config_from_document(json.loads(json.dumps(document)))
        assert rebuilt == cfg

    def test_document_is_json_serializable(self):
        document = config_mod.config_to_document(config_mod.Config())
        text = json.dumps(document)
        assert json.loads(text) == document


class TestLoadConfig:
    def test_loads_plain_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"train": {"iterations": 7}}')
        cfg = config_mod.load_config(path)
        assert cfg.train.iterations == 7

    def test_loads_snapshot_from_manifest(self, tmp_path):
        inner = config_mod.config_to_document(
            config_mod.config_from_document({"train": {"seed": 11}})
        )
        manifest = {"command": "adapt", "config": inner, "outputs": {}}
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(manifest))
        cfg = config_mod.load_config(path)
        assert cfg.train.seed == 11

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError, match="not valid JSON"):
            config_mod.load_config(path)

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            config_mod.load_config(tmp_path / "absent.json")


class TestWithSeed:
    def test_overrides_every_seed(self):
        cfg = config_mod.config_from_document(
            {"train": {"seed": 1}, "synthetic": {"seed": 2}, "ablate": {"seeds": [3, 4]}}
        )
        seeded = config_mod.with_seed(cfg, 9)
        assert seeded.train.seed == 9
        assert seeded.synthetic.seed == 9
        assert seeded.ablate_seeds == (9,)
        assert seeded.ablate_variants == cfg.ablate_variants


class TestApplyVariant:
    BASE = TrainConfig()

    def test_default_is_identity(self):
        assert config_mod.apply_variant(self.BASE, "default") is self.BASE

    def test_ct_forces_transport_and_cost(self):
        base = dataclasses.replace(
            self.BASE, transport_kind="ot-sinkhorn", cost_kind="exp-neg-dot"
        )
        out = config_mod.apply_variant(base, "ct")
        assert out.transport_kind == "ct"
        assert out.cost_kind == "cosine-distance"

    def test_ot_sinkhorn(self):
        out = config_mod.apply_variant(self.BASE, "ot-sinkhorn")
        assert out.transport_kind == "ot-sinkhorn"
        assert out.lambda_mi == self.BASE.lambda_mi

    def test_no_transport(self):
        assert config_mod.apply_variant(self.BASE, "no-transport").transport_kind == "none"

    def test_no_mi(self):
        out = config_mod.apply_variant(self.BASE, "no-mi")
        assert out.lambda_mi == 0.0
        assert out.transport_kind == self.BASE.transport_kind

    def test_exp_neg_dot(self):
        out = config_mod.apply_variant(self.BASE, "exp-neg-dot")
        assert out.cost_kind == "exp-neg-dot"
        assert out.transport_kind == "ct"

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValidationError, match="unknown ablation variant"):
            config_mod.apply_variant(self.BASE, "none-of-these")

    def test_every_listed_variant_is_applicable(self):
        for variant in config_mod.ABLATION_VARIANTS:
            out = config_mod.apply_variant(self.BASE, variant)
            assert isinstance(out, TrainConfig)
