"""Command line pipeline wiring, exit codes, and run layout."""

import dataclasses
import json
import os

import numpy as np
import pytest

from bumps.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, expert_name,
                       load_expert, main)
from bumps.config import (BaselineSection, BcConfig, EvalSection,
                          FilterConfig, MetaSection, RunConfig, save_config)
from bumps.errors import TrainingFault
from bumps.manifest import RunManifest, run_id_for
from bumps.meta import TaskGrids

os.environ.pop("BUMPS_OUTPUT_DIR", None)


def tiny_config(output_dir, presets=("4x256",), seeds=(0, 1)):
    """Budgets scaled down until every stage takes well under a second."""
    from bumps.rl import PpoConfig
    return RunConfig(
        ppo=PpoConfig(total_timesteps=2000, steps_per_batch=200,
                      minibatch_size=50),
        grids=TaskGrids(meta_train=(9.0, 10.0, 11.0),
                        meta_test=(9.5, 10.5)),
        meta=MetaSection(presets=tuple(presets),
                         bc=BcConfig(epochs=30, eval_interval=10)),
        filter=FilterConfig(radius=0.5, episodes=2),
        eval=EvalSection(episodes=5, resamples=50),
        baseline=BaselineSection(hidden_layers=(16, 16),
                                 total_timesteps=400),
        seeds=tuple(seeds),
        output_dir=str(output_dir),
        bootstrap_epochs=50,
    )


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the read-only assertions."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(root / "runs")
    cfg_path = root / "tiny.yaml"
    save_config(cfg_path, cfg)
    args = ["--config", str(cfg_path)]
    for command in ("train-experts", "build-dataset", "meta-train",
                    "filter", "evaluate", "baseline"):
        assert main(args + [command]) == 0, command
    return cfg, str(cfg_path), os.path.join(str(root / "runs"),
                                            run_id_for(cfg))


def test_run_layout(pipeline):
    cfg, _, run_root = pipeline
    assert os.path.isdir(run_root)
    for stage in ("experts", "datasets", "meta", "filter", "eval",
                  "baseline"):
        assert os.path.isdir(os.path.join(run_root, stage))
    assert os.path.exists(os.path.join(run_root, "manifest.json"))
    assert os.path.exists(os.path.join(run_root, "config.yaml"))


def test_expert_artifacts(pipeline):
    cfg, _, run_root = pipeline
    for omega in cfg.grids.meta_train:
        base = os.path.join(run_root, "experts", expert_name(omega))
        assert os.path.exists(base + ".ckpt")
        assert os.path.exists(base + ".json")
        with open(base + "-curve.csv") as fh:
            header = fh.readline().strip()
        assert header == "timesteps,mean_return,mean_final_error"


def test_expert_round_trip(pipeline):
    cfg, _, run_root = pipeline
    manifest = RunManifest.load(run_root)
    expert = load_expert(manifest, 10.0)
    assert expert.task.target_distance == 10.0
    assert expert.timesteps == cfg.ppo.total_timesteps


def test_dataset_artifact(pipeline):
    cfg, _, run_root = pipeline
    path = os.path.join(run_root, "datasets", "contextual.jsonl")
    with open(path) as fh:
        records = [json.loads(line) for line in fh]
    assert len(records) == 3 * cfg.env.horizon_T
    assert {r["omega"] for r in records} == {9.0, 10.0, 11.0}


def test_meta_artifacts(pipeline):
    _, _, run_root = pipeline
    base = os.path.join(run_root, "meta", "meta-4x256")
    assert os.path.exists(base + ".ckpt")
    with open(base + ".json") as fh:
        info = json.load(fh)
    assert info["preset"] == "4x256"
    with open(base + "-curve.csv") as fh:
        assert fh.readline().strip() == "epoch,loss,learning_rate"


def test_filter_artifacts(pipeline):
    _, _, run_root = pipeline
    base = os.path.join(run_root, "filter", "normal-4x256")
    assert os.path.exists(base + ".jsonl")
    with open(base + ".json") as fh:
        info = json.load(fh)
    assert info["models"] == ["4x256"]
    assert info["mode"] == "normal"
    # one report line per meta-test task
    with open(base + ".jsonl") as fh:
        assert sum(1 for _ in fh) == 2


def test_eval_artifacts(pipeline):
    _, _, run_root = pipeline
    eval_dir = os.path.join(run_root, "eval")
    for name in ("experts.csv", "unfiltered-4x256.csv",
                 "filtered-normal-4x256.csv", "comparison.csv",
                 "dominance.csv"):
        assert os.path.exists(os.path.join(eval_dir, name)), name
    with open(os.path.join(eval_dir, "dominance.csv")) as fh:
        fh.readline()
        header = fh.readline().strip()
        rows = [line.strip().split(",") for line in fh]
    assert header == "source,omega,selected_loss,central_loss,satisfied"
    assert all(row[-1] == "True" for row in rows)


def test_eval_csv_run_id_stamp(pipeline):
    cfg, _, run_root = pipeline
    with open(os.path.join(run_root, "eval", "experts.csv")) as fh:
        first = fh.readline().strip()
    assert first == f"# run_id={run_id_for(cfg)}"


def test_baseline_artifacts(pipeline):
    cfg, _, run_root = pipeline
    base_dir = os.path.join(run_root, "baseline")
    with open(os.path.join(base_dir, "curve.csv")) as fh:
        fh.readline()
        assert fh.readline().strip() == "seed,timestep,mean_return,ci_low,ci_high"
        seeds = {line.split(",")[0] for line in fh}
    assert seeds == {"0", "1", "-1"}
    for seed in cfg.seeds:
        assert os.path.exists(os.path.join(base_dir,
                                           f"baseline-seed{seed}.ckpt"))
        assert os.path.exists(os.path.join(base_dir,
                                           f"sweep-seed{seed}.csv"))
    with open(os.path.join(base_dir, "summary.csv")) as fh:
        fh.readline()
        assert fh.readline().strip() == "seed,timesteps,mean_error,mean_accuracy"
        rows = [line.strip().split(",") for line in fh]
    assert [row[0] for row in rows] == ["0", "1", "-1"]
    assert all(row[1] == "400" for row in rows)


def test_manifest_covers_artifacts(pipeline):
    _, _, run_root = pipeline
    manifest = RunManifest.load(run_root)
    manifest.verify()
    for name in ("dataset", "meta-4x256", "filter-normal-4x256",
                 "eval-comparison", "baseline-curve"):
        assert name in manifest.artifacts, name


def test_rerun_skips_trained_experts(pipeline, capsys):
    _, cfg_path, _ = pipeline
    assert main(["--config", cfg_path, "train-experts"]) == 0
    out = capsys.readouterr().out
    assert "skipping 3 completed experts" in out
    assert "trained expert" not in out


def test_single_task_flag(pipeline, capsys):
    _, cfg_path, _ = pipeline
    assert main(["--config", cfg_path, "train-experts",
                 "--tasks", "10.0"]) == 0
    assert "skipping 1 completed experts" in capsys.readouterr().out


def test_task_off_grid(pipeline):
    _, cfg_path, _ = pipeline
    assert main(["--config", cfg_path, "train-experts",
                 "--tasks", "10.25"]) == EXIT_CONFIG


def test_print_config(pipeline, capsys):
    cfg, cfg_path, _ = pipeline
    assert main(["--config", cfg_path, "print-config"]) == 0
    out = capsys.readouterr().out
    assert out.startswith(f"# run_id: {run_id_for(cfg)}")
    assert "total_timesteps: 2000" in out


def test_print_config_profiles(capsys):
    assert main(["--profile", "paper", "print-config"]) == 0
    out = capsys.readouterr().out
    assert "total_timesteps: 12000000" in out
    assert main(["print-config"]) == 0
    assert "total_timesteps: 200000" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# failure paths

def test_build_dataset_without_experts(tmp_path):
    cfg = tiny_config(tmp_path / "runs")
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    assert main(["--config", str(path), "build-dataset"]) == EXIT_DATA


def test_meta_train_without_dataset(tmp_path):
    cfg = tiny_config(tmp_path / "runs")
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    assert main(["--config", str(path), "meta-train"]) == EXIT_DATA


def test_filter_without_meta(tmp_path):
    cfg = tiny_config(tmp_path / "runs")
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    assert main(["--config", str(path), "filter"]) == EXIT_DATA


def test_corrupted_checkpoint_detected(tmp_path):
    cfg = tiny_config(tmp_path / "runs", seeds=(0,))
    cfg = dataclasses.replace(cfg, grids=TaskGrids(meta_train=(10.0,),
                                                   meta_test=(10.0,)))
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    args = ["--config", str(path)]
    assert main(args + ["train-experts"]) == 0
    ckpt = os.path.join(str(tmp_path / "runs"), run_id_for(cfg),
                        "experts", "expert-1000.ckpt")
    with open(ckpt, "ab") as fh:
        fh.write(b"garbage")
    assert main(args + ["build-dataset"]) == EXIT_DATA


def test_bad_config_file(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("ppo: {learning_rate: [oops\n")
    assert main(["--config", str(path), "print-config"]) == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    path = tmp_path / "extra.yaml"
    path.write_text("pppo: {}\n")
    assert main(["--config", str(path), "print-config"]) == EXIT_CONFIG


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["meta-train", "--preset", "9x999"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["--profile", "warehouse", "print-config"])
    assert exc.value.code == 2


def test_training_fault_exit_code(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path / "runs")
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)

    def explode(*args, **kwargs):
        raise TrainingFault("diverged")

    monkeypatch.setattr("bumps.cli.cmd_train_experts", explode)
    assert main(["--config", str(path), "train-experts"]) == EXIT_TRAINING


# ---------------------------------------------------------------------------
# output root precedence

def test_env_var_output_dir(tmp_path, monkeypatch, capsys):
    cfg = tiny_config("runs")
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    env_root = tmp_path / "from-env"
    monkeypatch.setenv("BUMPS_OUTPUT_DIR", str(env_root))
    assert main(["--config", str(path), "train-experts",
                 "--tasks", "9.0"]) == 0
    capsys.readouterr()
    assert os.path.isdir(os.path.join(str(env_root), run_id_for(cfg)))


def test_flag_beats_env_var(tmp_path, monkeypatch, capsys):
    cfg = tiny_config("runs")
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    monkeypatch.setenv("BUMPS_OUTPUT_DIR", str(tmp_path / "ignored"))
    flag_root = tmp_path / "from-flag"
    assert main(["--config", str(path), "--output-dir", str(flag_root),
                 "train-experts", "--tasks", "9.0"]) == 0
    capsys.readouterr()
    assert os.path.isdir(os.path.join(str(flag_root), run_id_for(cfg)))
    assert not os.path.exists(str(tmp_path / "ignored"))


def test_run_id_stable_across_roots(tmp_path):
    a = tiny_config(tmp_path / "a")
    b = tiny_config(tmp_path / "b")
    assert run_id_for(a) == run_id_for(b)


# ---------------------------------------------------------------------------
# ensemble path

def test_two_presets_make_ensemble(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "runs", presets=("4x256", "11x128"),
                      seeds=(0,))
    cfg = dataclasses.replace(cfg, grids=TaskGrids(meta_train=(10.0, 11.0),
                                                   meta_test=(10.5,)))
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    args = ["--config", str(path)]
    for command in ("train-experts", "build-dataset", "meta-train",
                    "filter", "evaluate"):
        assert main(args + [command]) == 0, command
    capsys.readouterr()
    run_root = os.path.join(str(tmp_path / "runs"), run_id_for(cfg))
    for label in ("4x256", "11x128", "ensemble"):
        assert os.path.exists(os.path.join(run_root, "filter",
                                           f"normal-{label}.jsonl"))
        assert os.path.exists(os.path.join(run_root, "eval",
                                           f"filtered-normal-{label}.csv"))
    with open(os.path.join(run_root, "filter", "normal-ensemble.json")) as fh:
        assert json.load(fh)["models"] == ["4x256", "11x128"]


def test_filter_mode_flag(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "runs", seeds=(0,))
    cfg = dataclasses.replace(cfg, grids=TaskGrids(meta_train=(10.0, 11.0),
                                                   meta_test=(10.5,)))
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    args = ["--config", str(path)]
    for command in ("train-experts", "build-dataset", "meta-train"):
        assert main(args + [command]) == 0
    assert main(args + ["filter", "--mode", "high_rate",
                        "--radius", "0.05"]) == 0
    capsys.readouterr()
    run_root = os.path.join(str(tmp_path / "runs"), run_id_for(cfg))
    report_path = os.path.join(run_root, "filter", "high_rate-4x256.jsonl")
    assert os.path.exists(report_path)
    from bumps.meta import load_filter_reports
    reports = load_filter_reports(report_path)
    # 0.05 radius at 0.01 spacing: 11 lattice points around the target
    assert len(reports[0].entries) == 11
    assert reports[0].mode == "high_rate"


def test_radius_zero_reports_central(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "runs", seeds=(0,))
    cfg = dataclasses.replace(cfg, grids=TaskGrids(meta_train=(10.0, 11.0),
                                                   meta_test=(10.5,)))
    path = tmp_path / "cfg.yaml"
    save_config(path, cfg)
    args = ["--config", str(path)]
    for command in ("train-experts", "build-dataset", "meta-train"):
        assert main(args + [command]) == 0
    assert main(args + ["filter", "--radius", "0"]) == 0
    capsys.readouterr()
    run_root = os.path.join(str(tmp_path / "runs"), run_id_for(cfg))
    from bumps.meta import load_filter_reports
    reports = load_filter_reports(
        os.path.join(run_root, "filter", "normal-4x256.jsonl"))
    assert len(reports[0].entries) == 1
    assert reports[0].selected_candidate == 10.5
    assert reports[0].selected_loss == reports[0].central_loss(0)
