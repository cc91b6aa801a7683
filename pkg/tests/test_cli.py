"""End-to-end command-line tests.

A small two-material pipeline (synth -> ingest -> featurize -> filter ->
train -> fuse -> finetune -> eval/predict) runs once per module via
in-process dispatch; the remaining tests pin exit codes, clobber
refusal, config override precedence, and manifest hygiene.
"""
from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from clamp.cli import config_sha256, dispatch, load_pipeline_config, PipelineConfig
from clamp.materials import TRAIN_LABELS


def run(*argv: str) -> int:
    return dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny pipeline run; every step must exit 0."""
    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "raw": root / "raw",
        "aligned": root / "aligned",
        "feats": root / "feats",
        "filt": root / "filt",
        "enc": root / "enc",
        "forest": root / "forest",
        "fus": root / "fus",
        "ft": root / "ft",
        "comp": root / "comp",
        "preds": root / "preds.csv",
    }
    steps = [
        ("synth", "--seed", 7, "--objects", 6, "--trials", 3,
         "--materials", "steel,foam", "--out", paths["raw"]),
        ("ingest", "--seed", 7, "--in", paths["raw"], "--out",
         paths["aligned"]),
        ("featurize", "--seed", 7, "--in", paths["raw"], "--out",
         paths["feats"]),
        ("filter", "--seed", 7, "--in", paths["raw"], "--out",
         paths["filt"]),
        ("train-haptic", "--seed", 7, "--in", paths["feats"], "--out",
         paths["enc"], "--epochs", 2),
        ("train-forest", "--seed", 7, "--in", paths["feats"], "--out",
         paths["forest"], "--trees", 8),
        ("train-fusion", "--seed", 7, "--in", paths["feats"], "--encoder",
         paths["enc"] / "encoder.bin", "--out", paths["fus"],
         "--epochs", 2),
        ("finetune", "--seed", 7, "--in", paths["feats"], "--encoder",
         paths["enc"] / "encoder.bin", "--fusion",
         paths["fus"] / "fusion.json", "--priors",
         paths["fus"] / "priors.json", "--out", paths["ft"],
         "--fraction", 0.30, "--epochs", 1),
        ("compliance-head", "--seed", 7, "--in", paths["feats"],
         "--checkpoint", paths["enc"] / "encoder.bin", "--out",
         paths["comp"], "--epochs", 2),
        ("predict", "--seed", 7, "--in", paths["feats"], "--checkpoint",
         paths["enc"] / "encoder.bin", "--out", paths["preds"]),
    ]
    for argv in steps:
        assert run(*argv) == 0, f"step {argv[0]} failed"
    return paths


class TestPipelineArtifacts:
    def test_synth_writes_sessions_and_manifest(self, pipeline):
        sessions = sorted(
            p.name for p in pipeline["raw"].iterdir() if p.is_dir()
        )
        assert sessions == [f"obj_{i:04d}" for i in range(6)]
        manifest = json.loads(
            (pipeline["raw"] / "run_manifest.json").read_text()
        )
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 7
        assert manifest["parameters"]["materials"] == ["steel", "foam"]

    def test_manifest_is_reproducibility_clean(self, pipeline):
        manifest = json.loads(
            (pipeline["feats"] / "run_manifest.json").read_text()
        )
        assert sorted(manifest) == [
            "command", "config_sha256", "embodiment", "parameters",
            "profile", "seed", "versions",
        ]
        blob = json.dumps(manifest)
        assert "/" not in manifest["config_sha256"]
        assert "time" not in blob and "date" not in blob
        assert str(pipeline["feats"]) not in blob

    def test_ingest_reports_full_grids(self, pipeline):
        with open(pipeline["aligned"] / "alignment.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 18
        assert all(r["gap_sensors"] == "0" for r in rows)
        assert all(int(r["samples"]) == 500 for r in rows)

    def test_featurize_outputs(self, pipeline):
        with open(pipeline["feats"] / "labels.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 18
        assert {r["material"] for r in rows} == {"steel", "foam"}
        assert {r["compliance"] for r in rows} == {"hard", "soft"}
        for r in rows:
            assert (pipeline["feats"] / r["tensor_file"]).is_file()
            assert int(r["valid_len"]) > 0

    def test_filter_report(self, pipeline):
        with open(pipeline["filt"] / "exclusions.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 18
        assert all(r["retained"] == "yes" for r in rows)
        assert all(r["rules"] == "" for r in rows)

    def test_training_artifacts(self, pipeline):
        assert (pipeline["enc"] / "encoder.bin").is_file()
        assert (pipeline["enc"] / "history.csv").read_text().startswith(
            "epoch,train_loss,val_acc,val_nmcc"
        )
        forest = json.loads((pipeline["forest"] / "forest.json").read_text())
        assert forest["format"] == "clamp-forest-v1"
        fusion = json.loads((pipeline["fus"] / "fusion.json").read_text())
        assert fusion["format"] == "clamp-fusion-v1"
        priors = json.loads((pipeline["fus"] / "priors.json").read_text())
        assert priors["format"] == "clamp-priors-v1"
        assert sorted(priors["priors"]) == [f"obj_{i:04d}" for i in range(6)]

    def test_finetune_artifacts(self, pipeline):
        manifest = json.loads(
            (pipeline["ft"] / "run_manifest.json").read_text()
        )
        assert manifest["parameters"]["fraction"] == 0.30
        # 0.30 of 3 objects per class rounds to one object each: 6 trials.
        assert manifest["parameters"]["subset_trials"] == 6
        assert (pipeline["ft"] / "encoder.bin").is_file()
        assert (pipeline["ft"] / "fusion.json").is_file()

    def test_prediction_csv_schema(self, pipeline):
        with open(pipeline["preds"], newline="") as fh:
            reader = csv.DictReader(fh)
            assert reader.fieldnames == [
                "object_id", "trial", "prediction", "max_prob", "margin",
                "decision",
            ]
            rows = list(reader)
        assert len(rows) == 18
        for r in rows:
            assert r["prediction"] in TRAIN_LABELS
            assert 0.0 < float(r["max_prob"]) <= 1.0
            assert 0.0 <= float(r["margin"]) <= 1.0
            assert r["decision"] in ("accept", "reject")

    def test_eval_checkpoint_mode(self, pipeline, capsys):
        assert run(
            "eval", "--seed", 7, "--in", pipeline["feats"],
            "--checkpoint", pipeline["enc"] / "encoder.bin",
            "--uncertainty", "eval",
        ) == 0
        out = capsys.readouterr().out
        assert "accuracy " in out
        assert "nmcc " in out
        assert "retention " in out

    def test_eval_fused_mode(self, pipeline, capsys):
        assert run(
            "eval", "--seed", 7, "--in", pipeline["feats"],
            "--checkpoint", pipeline["enc"] / "encoder.bin",
            "--fusion", pipeline["fus"] / "fusion.json",
            "--priors", pipeline["fus"] / "priors.json",
        ) == 0
        assert "accuracy " in capsys.readouterr().out

    def test_predict_single_tensor(self, pipeline, capsys):
        with open(pipeline["feats"] / "labels.csv", newline="") as fh:
            first = next(csv.DictReader(fh))
        tensor = pipeline["feats"] / first["tensor_file"]
        assert run(
            "predict", "--seed", 7, "--tensor", tensor,
            "--checkpoint", pipeline["enc"] / "encoder.bin",
        ) == 0
        line = capsys.readouterr().out.strip()
        assert line == "UNCERTAIN" or line in TRAIN_LABELS

    def test_compliance_head_artifacts(self, pipeline):
        head = json.loads(
            (pipeline["comp"] / "compliance_head.json").read_text()
        )
        assert head["format"] == "clamp-head-v1"


class TestFileScoring:
    def write_csv(self, path, header, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    def test_perfect_predictions_score_one(self, tmp_path, capsys):
        preds = tmp_path / "preds.csv"
        labels = tmp_path / "labels.csv"
        rows = [("a", 0, "steel"), ("a", 1, "foam"), ("b", 0, "glass")]
        self.write_csv(
            preds, ["object_id", "trial", "prediction"], rows
        )
        self.write_csv(
            labels, ["object_id", "trial", "material"], rows
        )
        assert run("eval", "--seed", 0, "--preds", preds,
                   "--labels", labels) == 0
        out = capsys.readouterr().out
        assert "accuracy 1.000" in out
        assert "nmcc 1.000" in out

    def test_keyed_join_tolerates_row_order(self, tmp_path, capsys):
        preds = tmp_path / "p.csv"
        labels = tmp_path / "l.csv"
        self.write_csv(preds, ["object_id", "trial", "prediction"],
                       [("a", 0, "steel"), ("b", 0, "foam")])
        self.write_csv(labels, ["object_id", "trial", "material"],
                       [("b", 0, "foam"), ("a", 0, "glass")])
        assert run("eval", "--seed", 0, "--preds", preds,
                   "--labels", labels) == 0
        assert "accuracy 0.500" in capsys.readouterr().out

    def test_key_mismatch_fails(self, tmp_path, capsys):
        preds = tmp_path / "p.csv"
        labels = tmp_path / "l.csv"
        self.write_csv(preds, ["object_id", "trial", "prediction"],
                       [("a", 0, "steel")])
        self.write_csv(labels, ["object_id", "trial", "material"],
                       [("zzz", 9, "steel")])
        assert run("eval", "--seed", 0, "--preds", preds,
                   "--labels", labels) == 1
        assert "error:" in capsys.readouterr().err


class TestExitCodes:
    def test_no_command_prints_usage(self, capsys):
        assert run() == 1
        assert "usage" in capsys.readouterr().err

    def test_version_exits_zero(self, capsys):
        assert run("--version") == 0

    def test_missing_seed_is_a_validation_error(self, tmp_path, capsys):
        code = run("synth", "--objects", 2, "--out", tmp_path / "x")
        assert code == 1
        assert "seed" in capsys.readouterr().err

    def test_missing_input_dir(self, tmp_path, capsys):
        assert run("featurize", "--seed", 0, "--in", tmp_path / "nope",
                   "--out", tmp_path / "out") == 1

    def test_clobber_refused_without_overwrite(self, tmp_path, capsys):
        out = tmp_path / "raw"
        assert run("synth", "--seed", 0, "--objects", 1, "--trials", 1,
                   "--materials", "steel", "--out", out) == 0
        capsys.readouterr()
        assert run("synth", "--seed", 0, "--objects", 1, "--trials", 1,
                   "--materials", "steel", "--out", out) == 1
        assert "--overwrite" in capsys.readouterr().err
        assert run("synth", "--seed", 0, "--objects", 1, "--trials", 1,
                   "--materials", "steel", "--out", out, "--overwrite") == 0

    def test_eval_flag_combinations(self, tmp_path, capsys):
        assert run("eval", "--seed", 0, "--preds", tmp_path / "p.csv") == 1
        assert run("eval", "--seed", 0) == 1

    def test_predict_needs_exactly_one_source(self, tmp_path, capsys):
        assert run("predict", "--seed", 0, "--checkpoint",
                   tmp_path / "enc.bin") == 1

    def test_runtime_failure_maps_to_two(self, pipeline, tmp_path, capsys):
        # A priors file that lacks the needed objects only explodes once
        # training dereferences it: exit 2, not a validation error.
        bad = tmp_path / "priors.json"
        bad.write_text(json.dumps({"format": "clamp-priors-v1",
                                   "priors": {}}))
        code = run(
            "finetune", "--seed", 7, "--in", pipeline["feats"],
            "--encoder", pipeline["enc"] / "encoder.bin",
            "--fusion", pipeline["fus"] / "fusion.json",
            "--priors", bad, "--out", tmp_path / "ft",
            "--fraction", 0.30, "--epochs", 1,
        )
        assert code == 2
        assert "runtime failure" in capsys.readouterr().err


class TestConfigHandling:
    def test_config_file_supplies_defaults(self, tmp_path):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text("seed: 11\nprofile: tiny\n")
        out = tmp_path / "raw"
        assert run("synth", "--config", cfg_path, "--objects", 1,
                   "--trials", 1, "--materials", "steel", "--out", out) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["seed"] == 11

    def test_flags_override_config(self, tmp_path):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text("seed: 11\nembodiment: clamp_device\n")
        out = tmp_path / "raw"
        assert run("synth", "--config", cfg_path, "--seed", 5,
                   "--embodiment", "franka_pj", "--objects", 1,
                   "--trials", 1, "--materials", "steel", "--out", out) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["seed"] == 5
        assert manifest["embodiment"] == "franka_pj"

    def test_unknown_config_keys_rejected(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text("seed: 1\nlearning_rate: 0.1\n")
        assert run("synth", "--config", cfg_path, "--objects", 1,
                   "--out", tmp_path / "x") == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_invalid_yaml_rejected(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text("seed: [unclosed\n")
        assert run("synth", "--config", cfg_path, "--objects", 1,
                   "--out", tmp_path / "x") == 1

    def test_bad_preset_values_rejected(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text("seed: 1\nuncertainty: bogus\n")
        assert run("synth", "--config", cfg_path, "--objects", 1,
                   "--out", tmp_path / "x") == 1
        cfg_path.write_text("seed: 1\nfinetune_fraction: 0.5\n")
        assert run("synth", "--config", cfg_path, "--objects", 1,
                   "--out", tmp_path / "x") == 1

    def test_data_root_env_resolves_relative_paths(self, tmp_path,
                                                   monkeypatch):
        monkeypatch.setenv("CLAMP_DATA_ROOT", str(tmp_path))
        assert run("synth", "--seed", 3, "--objects", 1, "--trials", 1,
                   "--materials", "steel", "--out", "rel_out") == 0
        assert (tmp_path / "rel_out" / "run_manifest.json").is_file()

    def test_config_hash_ignores_data_root(self):
        a = PipelineConfig(data_root="/a", seed=1)
        b = PipelineConfig(data_root="/b", seed=1)
        c = PipelineConfig(data_root="/a", seed=2)
        assert config_sha256(a) == config_sha256(b)
        assert config_sha256(a) != config_sha256(c)
