"""CLI plumbing: configs, exit codes, artifact gating, determinism."""

import json

import pytest

from edgeai.cli import (ConfigError, DEFAULT_CONFIG, config_hash, load_config,
                        main, preset_from_config)

TINY = {
    "dataset": {"num_classes": 3, "image_size": 16, "per_class_train": 20,
                "per_class_test": 8},
    "teacher": {"widths": [8, 12], "strides": [2, 2], "epochs": 2,
                "decay_epochs": []},
    "student": {"widths": [4, 8], "strides": [2, 2], "epochs": 1,
                "decay_epochs": []},
    "dream": {"k": 2, "targets_per_cluster": 2, "steps": 3},
    "nonn": {"hidden_widths": [6]},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


class TestConfig:
    def test_defaults_when_no_file(self):
        cfg = load_config(None)
        assert cfg == DEFAULT_CONFIG

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"dataset": {"image_sizee": 24}}))
        with pytest.raises(ConfigError, match="image_sizee"):
            load_config(str(path))

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"datasets": {}}))
        with pytest.raises(ConfigError, match="datasets"):
            load_config(str(path))

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/config.json")

    def test_invalid_json_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(str(path))

    def test_seed_override_changes_hash(self, tiny_config):
        a = load_config(tiny_config)
        b = load_config(tiny_config, seed_override=5)
        assert config_hash(a) != config_hash(b)
        assert b["seed"] == 5

    def test_hash_stable_across_key_order(self):
        a = config_hash({"seed": 1, "dataset": {"noise": 0.1}})
        b = config_hash({"dataset": {"noise": 0.1}, "seed": 1})
        assert a == b

    def test_preset_reflects_config(self, tiny_config):
        preset = preset_from_config(load_config(tiny_config))
        assert preset.num_classes == 3
        assert preset.teacher_widths == (8, 12)
        assert preset.teacher_train.epochs == 2


class TestExitCodes:
    def test_bad_config_exits_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"bogus_section": 1}))
        assert main(["gen-data", "--config", str(path),
                     "--out", str(tmp_path / "run")]) == 2

    def test_missing_artifact_exits_3(self, tiny_config, tmp_path):
        code = main(["train-teacher", "--config", tiny_config,
                     "--out", str(tmp_path / "empty_run")])
        assert code == 3

    def test_success_exits_0(self, tmp_path):
        assert main(["reproduce-table1-counts",
                     "--out", str(tmp_path / "run")]) == 0
        assert (tmp_path / "run" / "table1_counts.csv").exists()


class TestPipeline:
    def test_chain_and_hash_gating(self, tiny_config, tmp_path):
        run = str(tmp_path / "run")
        assert main(["gen-data", "--config", tiny_config, "--out", run]) == 0
        assert main(["train-teacher", "--config", tiny_config, "--out", run]) == 0
        # same pipeline directory with a different seed: artifact hash mismatch
        assert main(["distill", "--config", tiny_config, "--seed", "9",
                     "--out", run]) == 2
        # --force allows the mix
        assert main(["distill", "--config", tiny_config, "--seed", "9",
                     "--out", run, "--force"]) == 0

    def test_run_dir_contents(self, tiny_config, tmp_path):
        run = tmp_path / "run"
        main(["gen-data", "--config", tiny_config, "--out", str(run)])
        snapshot = json.loads((run / "config.json").read_text())
        assert "config_hash" in snapshot
        registry = json.loads((run / "artifacts.json").read_text())
        assert registry["train.edai"] == snapshot["config_hash"]
        assert (run / "log.txt").exists()

    def test_byte_identical_reruns(self, tiny_config, tmp_path):
        outputs = []
        for name in ("a", "b"):
            run = tmp_path / name
            assert main(["gen-data", "--config", tiny_config, "--out", str(run)]) == 0
            assert main(["train-teacher", "--config", tiny_config,
                         "--out", str(run)]) == 0
            outputs.append((
                (run / "train.edai").read_bytes(),
                (run / "teacher_history.csv").read_bytes(),
            ))
        assert outputs[0] == outputs[1]
