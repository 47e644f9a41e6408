"""Configuration tree and run manifest behavior."""

import hashlib
import json
import os

import pytest
import yaml

from bumps.config import (BaselineSection, EvalSection, MetaSection,
                          RunConfig, canonical_json, config_from_dict,
                          config_to_dict, default_config, desk_config,
                          format_config, load_config, paper_config,
                          save_config)
from bumps.errors import ConfigError, DataIntegrityError
from bumps.manifest import (RunManifest, file_sha256, open_run, run_id_for)


# ---------------------------------------------------------------------------
# RunConfig structure and profiles

def test_desk_defaults():
    cfg = desk_config()
    assert cfg.ppo.total_timesteps == 200_000
    assert cfg.meta.presets == ("4x256", "11x128")
    assert cfg.meta.bc.epochs == 2000
    assert cfg.eval.episodes == 100
    assert cfg.eval.threshold == 1.0
    assert cfg.seeds == (0, 1, 2)
    assert cfg.master_seed == 0
    assert len(cfg.grids.meta_train) == 23
    assert len(cfg.grids.meta_test) == 111


def test_paper_profile_values():
    cfg = paper_config()
    assert cfg.ppo.learning_rate == 1e-6
    assert cfg.ppo.steps_per_batch == 4096
    assert cfg.ppo.minibatch_size == 1024
    assert cfg.ppo.epochs_per_batch == 30
    assert cfg.ppo.total_timesteps == 12_000_000
    assert cfg.meta.bc.learning_rate == 3e-6
    assert cfg.meta.bc.epochs == 150_000
    assert cfg.baseline.hidden_layers == (256,) * 11
    assert cfg.seeds == (0, 1, 2, 3, 4, 5)


def test_default_config_dispatch():
    assert default_config("desk") == desk_config()
    assert default_config("paper") == paper_config()
    with pytest.raises(ConfigError):
        default_config("warehouse")


def test_baseline_budget_derived():
    cfg = desk_config()
    # 23 experts at 200k steps each, handicapped by 4
    assert cfg.baseline_budget() == 1_150_000


def test_baseline_budget_override():
    cfg = RunConfig(baseline=BaselineSection(total_timesteps=5000))
    assert cfg.baseline_budget() == 5000


def test_seed_validation():
    with pytest.raises(ConfigError):
        RunConfig(seeds=())
    with pytest.raises(ConfigError):
        RunConfig(seeds=(1, 1, 2))


def test_meta_section_validation():
    with pytest.raises(ConfigError):
        MetaSection(presets=())
    with pytest.raises(ConfigError):
        MetaSection(presets=("9x999",))
    with pytest.raises(ConfigError):
        MetaSection(presets=("4x256", "4x256"))


def test_eval_section_validation():
    with pytest.raises(ConfigError):
        EvalSection(episodes=0)
    with pytest.raises(ConfigError):
        EvalSection(threshold=0.0)
    with pytest.raises(ConfigError):
        EvalSection(confidence=1.0)
    with pytest.raises(ConfigError):
        EvalSection(resamples=0)


def test_baseline_section_validation():
    with pytest.raises(ConfigError):
        BaselineSection(hidden_layers=())
    with pytest.raises(ConfigError):
        BaselineSection(hidden_layers=(64, 0))
    with pytest.raises(ConfigError):
        BaselineSection(total_timesteps=-1)


# ---------------------------------------------------------------------------
# serialization

def test_dict_round_trip():
    cfg = desk_config()
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_dict_round_trip_paper():
    cfg = paper_config()
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_partial_dict_keeps_defaults():
    cfg = config_from_dict({"ppo": {"total_timesteps": 4000}})
    assert cfg.ppo.total_timesteps == 4000
    assert cfg.ppo.gamma == desk_config().ppo.gamma
    assert cfg.meta == desk_config().meta


def test_partial_grids_section():
    cfg = config_from_dict({"grids": {"meta_train": [8.0, 9.0, 10.0]}})
    assert cfg.grids.meta_train == (8.0, 9.0, 10.0)
    assert len(cfg.grids.meta_test) == 111


def test_unknown_top_level_key():
    with pytest.raises(ConfigError):
        config_from_dict({"pppo": {}})


def test_unknown_section_key():
    with pytest.raises(ConfigError):
        config_from_dict({"ppo": {"learn_rate": 1e-3}})
    with pytest.raises(ConfigError):
        config_from_dict({"meta": {"bc": {"epoch": 5}}})


def test_non_mapping_rejected():
    with pytest.raises(ConfigError):
        config_from_dict([1, 2, 3])
    with pytest.raises(ConfigError):
        config_from_dict({"eval": 7})


def test_yaml_round_trip(tmp_path):
    cfg = RunConfig(seeds=(5, 6), output_dir="elsewhere")
    path = tmp_path / "run.yaml"
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_yaml_file_is_plain_data(tmp_path):
    path = tmp_path / "run.yaml"
    save_config(path, desk_config())
    data = yaml.safe_load(path.read_text())
    assert isinstance(data, dict)
    assert data["ppo"]["total_timesteps"] == 200_000


def test_load_config_rejects_garbage(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("ppo: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_format_config_parses_back():
    text = format_config(desk_config())
    assert config_from_dict(yaml.safe_load(text)) == desk_config()


# ---------------------------------------------------------------------------
# run identity

def test_canonical_json_ignores_output_dir():
    a = RunConfig(output_dir="runs")
    b = RunConfig(output_dir="/somewhere/else")
    assert canonical_json(a) == canonical_json(b)
    assert run_id_for(a) == run_id_for(b)


def test_canonical_json_sensitive_to_fields():
    a = desk_config()
    b = RunConfig(seeds=(0, 1, 2, 3))
    assert canonical_json(a) != canonical_json(b)
    assert run_id_for(a) != run_id_for(b)


def test_run_id_shape():
    rid = run_id_for(desk_config())
    assert len(rid) == 12
    assert all(c in "0123456789abcdef" for c in rid)
    # prefix of the sha256 of the canonical string
    full = hashlib.sha256(canonical_json(desk_config()).encode()).hexdigest()
    assert full.startswith(rid)


def test_canonical_json_is_stable():
    assert canonical_json(desk_config()) == canonical_json(desk_config())
    parsed = json.loads(canonical_json(desk_config()))
    assert "output_dir" not in parsed


# ---------------------------------------------------------------------------
# manifest

def test_file_sha256_known_value(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"kick")
    assert file_sha256(path) == hashlib.sha256(b"kick").hexdigest()


def test_open_run_creates_and_resumes(tmp_path):
    cfg = desk_config()
    m1 = open_run(tmp_path, cfg)
    assert os.path.isdir(m1.root)
    assert os.path.exists(os.path.join(m1.root, "manifest.json"))
    (tmp_path / m1.run_id / "artifact.txt").write_text("hello")
    m1.register("greeting", "artifact.txt")
    m1.save()

    m2 = open_run(tmp_path, cfg)
    assert m2.run_id == m1.run_id
    assert m2.has("greeting")


def test_open_run_rejects_foreign_directory(tmp_path):
    cfg = desk_config()
    m1 = open_run(tmp_path, cfg)
    m1.config_hash = "tampered"
    m1.save()
    with pytest.raises(DataIntegrityError):
        open_run(tmp_path, cfg)


def test_register_and_verify(tmp_path):
    m = open_run(tmp_path, desk_config())
    path = os.path.join(m.root, "data.csv")
    with open(path, "w") as fh:
        fh.write("a,b\n1,2\n")
    m.register("table", path)
    m.verify(["table"])
    m.verify()


def test_verify_detects_modification(tmp_path):
    m = open_run(tmp_path, desk_config())
    path = os.path.join(m.root, "data.csv")
    with open(path, "w") as fh:
        fh.write("original")
    m.register("table", path)
    with open(path, "w") as fh:
        fh.write("tampered")
    assert not m.has("table")
    with pytest.raises(DataIntegrityError):
        m.verify(["table"])


def test_verify_detects_missing_file(tmp_path):
    m = open_run(tmp_path, desk_config())
    path = os.path.join(m.root, "gone.txt")
    with open(path, "w") as fh:
        fh.write("x")
    m.register("ghost", path)
    os.remove(path)
    with pytest.raises(DataIntegrityError):
        m.verify()


def test_verify_unknown_artifact(tmp_path):
    m = open_run(tmp_path, desk_config())
    with pytest.raises(DataIntegrityError):
        m.verify(["never-registered"])
    with pytest.raises(DataIntegrityError):
        m.path_of("never-registered")


def test_register_missing_file_rejected(tmp_path):
    m = open_run(tmp_path, desk_config())
    with pytest.raises(DataIntegrityError):
        m.register("nope", os.path.join(m.root, "absent.bin"))


def test_has_false_before_register(tmp_path):
    m = open_run(tmp_path, desk_config())
    assert not m.has("anything")


def test_manifest_save_load_round_trip(tmp_path):
    cfg = desk_config()
    m = open_run(tmp_path, cfg)
    path = os.path.join(m.root, "x.txt")
    with open(path, "w") as fh:
        fh.write("payload")
    m.register("x", path)
    m.save()
    loaded = RunManifest.load(m.root)
    assert loaded.run_id == m.run_id
    assert loaded.artifacts == m.artifacts
    loaded.verify()


def test_load_missing_manifest(tmp_path):
    with pytest.raises(DataIntegrityError):
        RunManifest.load(tmp_path)


def test_load_corrupt_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataIntegrityError):
        RunManifest.load(tmp_path)


def test_load_incomplete_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"run_id": "abc"}))
    with pytest.raises(DataIntegrityError):
        RunManifest.load(tmp_path)


def test_path_of_registered(tmp_path):
    m = open_run(tmp_path, desk_config())
    path = os.path.join(m.root, "thing.bin")
    with open(path, "wb") as fh:
        fh.write(b"\x00\x01")
    m.register("thing", path)
    assert m.path_of("thing") == path
