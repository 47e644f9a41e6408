"""Pipeline command line.

Subcommands cover the whole workflow: train the per-task experts, pool
their trajectories into the contextual dataset, distill the meta-policy,
select adaptation contexts, and report. Every invocation resolves to a run
directory named by a hash of the effective configuration, so repeating a
command resumes the same run and finished expert checkpoints are reused.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data integrity,
5 training fault.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import nn
from .config import (PROFILES, RunConfig, default_config, format_config,
                     load_config, save_config)
from .env import TaskContext
from .errors import (ConfigError, ContextRangeError, DataIntegrityError,
                     GridMismatchError, ShapeError, TrainingFault)
from .evaluation import (FilteredSelections, SweepReport, compare_models,
                         curve_rows, format_comparison, format_sweep_table,
                         generalization_sweep, kick_statistics, save_comparison_csv,
                         save_curve_csv, save_sweep_csv)
from .manifest import RunManifest, open_run, run_id_for
from .meta import (FILTER_MODES, FilterConfig, MetaPolicy, collect_rollouts,
                   contextualize_and_aggregate, load_dataset,
                   load_filter_reports, meta_train, policy_filter,
                   save_dataset, save_filter_reports)
from .nn import PRESETS, MlpSpec, preset_hidden_layers
from .rl import ExpertPolicy, train_expert, train_multitask_baseline

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAINING = 5

STAGE_DIRS = ("experts", "datasets", "meta", "filter", "eval", "baseline")


def _hundredths(omega) -> int:
    return int(round(float(omega) * 100))


def _fmt(value) -> str:
    # repr keeps float round-trips byte-stable across runs
    return repr(float(value))


# ---------------------------------------------------------------------------
# expert persistence

def expert_name(omega) -> str:
    return f"expert-{_hundredths(omega)}"


def save_expert(manifest: RunManifest, expert: ExpertPolicy) -> None:
    name = expert_name(expert.task.target_distance)
    base = os.path.join(manifest.root, "experts", name)
    nn.save_checkpoint(base + ".ckpt", expert.params)
    info = {"omega": expert.task.target_distance, "seed": expert.seed,
            "timesteps": expert.timesteps,
            "final_mean_return": expert.final_mean_return}
    with open(base + ".json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(base + "-curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timesteps", "mean_return", "mean_final_error"])
        for point in expert.curve:
            writer.writerow([int(point["timesteps"]),
                             _fmt(point["mean_return"]),
                             _fmt(point["mean_final_error"])])
    manifest.register(name, base + ".ckpt")
    manifest.register(name + "-info", base + ".json")
    manifest.register(name + "-curve", base + "-curve.csv")


def load_expert(manifest: RunManifest, omega) -> ExpertPolicy:
    name = expert_name(omega)
    if name not in manifest.artifacts:
        raise DataIntegrityError(
            f"no expert checkpoint for task {float(omega)}; "
            f"run train-experts first")
    manifest.verify([name, name + "-info"])
    params = nn.load_checkpoint(manifest.path_of(name))
    with open(manifest.path_of(name + "-info")) as fh:
        info = json.load(fh)
    return ExpertPolicy(task=TaskContext(info["omega"]), params=params,
                        seed=info["seed"], timesteps=info["timesteps"],
                        final_mean_return=info["final_mean_return"])


def _meta_spec(cfg: RunConfig, preset: str) -> MlpSpec:
    return MlpSpec(2, preset_hidden_layers(preset), cfg.env.action_dim)


def load_meta(manifest: RunManifest, preset: str) -> MetaPolicy:
    name = f"meta-{preset}"
    if name not in manifest.artifacts:
        raise DataIntegrityError(
            f"no meta-policy checkpoint for preset {preset}; "
            f"run meta-train first")
    manifest.verify([name])
    return MetaPolicy(params=nn.load_checkpoint(manifest.path_of(name)))


# ---------------------------------------------------------------------------
# stages

def _train_one(job):
    task_omega, ppo_cfg, env_cfg, seed, bootstrap_epochs = job
    return train_expert(TaskContext(task_omega), ppo_cfg, env_cfg, seed,
                        bootstrap_epochs=bootstrap_epochs)


def cmd_train_experts(cfg: RunConfig, manifest: RunManifest,
                      tasks=None, jobs: int = 1) -> None:
    grid = list(cfg.grids.meta_train)
    if tasks is not None:
        chosen = []
        for omega in tasks:
            matches = [w for w in grid if _hundredths(w) == _hundredths(omega)]
            if not matches:
                raise ConfigError(
                    f"--tasks {omega} is not on the training grid")
            chosen.append(matches[0])
        grid = chosen
    remaining = [w for w in grid if not manifest.has(expert_name(w))]
    done = len(grid) - len(remaining)
    if done:
        print(f"skipping {done} completed experts")
    if not remaining:
        manifest.save()
        return
    jobs = max(1, int(jobs))
    job_args = [(w, cfg.ppo, cfg.env, cfg.master_seed, cfg.bootstrap_epochs)
                for w in remaining]
    failures = []
    for omega, outcome in _run_jobs(job_args, jobs, failures):
        if outcome is None:
            continue
        save_expert(manifest, outcome)
        manifest.save()
        print(f"trained expert for {omega:.2f} m "
              f"(mean return {outcome.final_mean_return:.2f})")
    if failures:
        detail = "; ".join(f"{w:.2f}: {msg}" for w, msg in failures)
        raise TrainingFault(f"{len(failures)} expert(s) failed: {detail}")


def _run_jobs(job_args, jobs, failures):
    """Yield (task, expert-or-None) in grid order, recording failures."""
    if jobs == 1:
        for job in job_args:
            try:
                yield job[0], _train_one(job)
            except TrainingFault as exc:
                failures.append((job[0], str(exc)))
                yield job[0], None
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [(job[0], pool.submit(_train_one, job)) for job in job_args]
        for omega, future in futures:
            try:
                yield omega, future.result()
            except TrainingFault as exc:
                failures.append((omega, str(exc)))
                yield omega, None


def cmd_build_dataset(cfg: RunConfig, manifest: RunManifest) -> None:
    grid = list(cfg.grids.meta_train)
    trajectories = []
    for index, omega in enumerate(grid):
        expert = load_expert(manifest, omega)
        trajectories += collect_rollouts(
            expert, expert.task, K=cfg.rollouts_per_expert,
            seed=(cfg.master_seed, "dataset", index), env_cfg=cfg.env)
    dataset = contextualize_and_aggregate(trajectories)
    expected = len(grid) * cfg.rollouts_per_expert * cfg.env.horizon_T
    if len(dataset) != expected:
        raise DataIntegrityError(
            f"dataset has {len(dataset)} records, expected {expected}")
    path = os.path.join(manifest.root, "datasets", "contextual.jsonl")
    save_dataset(path, dataset)
    manifest.register("dataset", path)
    manifest.save()
    print(f"dataset: {len(dataset)} records from {len(grid)} experts")


def cmd_meta_train(cfg: RunConfig, manifest: RunManifest,
                   presets=None) -> None:
    manifest.verify(["dataset"])
    dataset = load_dataset(manifest.path_of("dataset"))
    for preset in presets or cfg.meta.presets:
        meta = meta_train(dataset, _meta_spec(cfg, preset), cfg.meta.bc)
        base = os.path.join(manifest.root, "meta", f"meta-{preset}")
        nn.save_checkpoint(base + ".ckpt", meta.params)
        with open(base + ".json", "w") as fh:
            json.dump({"preset": preset, "best_epoch": meta.best_epoch,
                       "best_loss": meta.best_loss}, fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
        with open(base + "-curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "learning_rate"])
            for point in meta.curve:
                writer.writerow([int(point["epoch"]), _fmt(point["loss"]),
                                 _fmt(point["learning_rate"])])
        manifest.register(f"meta-{preset}", base + ".ckpt")
        manifest.register(f"meta-{preset}-info", base + ".json")
        manifest.register(f"meta-{preset}-curve", base + "-curve.csv")
        manifest.save()
        print(f"meta {preset}: best loss {meta.best_loss:.4f} "
              f"at epoch {meta.best_epoch}")


def cmd_filter(cfg: RunConfig, manifest: RunManifest, mode: str = None,
               radius: float = None, models=None) -> None:
    presets = list(models) if models else \
        [p for p in cfg.meta.presets if f"meta-{p}" in manifest.artifacts]
    if not presets:
        raise DataIntegrityError("no meta-policy checkpoints; "
                                 "run meta-train first")
    metas = {p: load_meta(manifest, p) for p in presets}
    filter_cfg = FilterConfig(
        radius=cfg.filter.radius if radius is None else radius,
        mode=cfg.filter.mode if mode is None else mode,
        episodes=cfg.filter.episodes, seed=cfg.filter.seed)
    test_tasks = cfg.grids.test_tasks()

    groups = [([p], p) for p in presets]
    if len(presets) >= 2:
        groups.append((presets, "ensemble"))
    for members, label in groups:
        reports = [policy_filter([metas[p] for p in members], task,
                                 filter_cfg, cfg.grids, cfg.env)
                   for task in test_tasks]
        base = os.path.join(manifest.root, "filter",
                            f"{filter_cfg.mode}-{label}")
        save_filter_reports(base + ".jsonl", reports)
        with open(base + ".json", "w") as fh:
            json.dump({"models": members, "mode": filter_cfg.mode,
                       "radius": filter_cfg.radius,
                       "episodes": filter_cfg.episodes,
                       "seed": filter_cfg.seed}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.register(f"filter-{filter_cfg.mode}-{label}", base + ".jsonl")
        manifest.register(f"filter-{filter_cfg.mode}-{label}-info",
                          base + ".json")
        manifest.save()
        mean_loss = float(np.mean([r.selected_loss for r in reports]))
        print(f"filter {filter_cfg.mode}/{label}: "
              f"mean selected loss {mean_loss:.4f} "
              f"over {len(reports)} tasks")


def _filter_sources(manifest: RunManifest):
    """(mode, label) pairs for every stored filter report file."""
    sources = []
    for name in sorted(manifest.artifacts):
        if not name.startswith("filter-") or name.endswith("-info"):
            continue
        mode, _, label = name[len("filter-"):].partition("-")
        sources.append((mode, label))
    return sources


def cmd_evaluate(cfg: RunConfig, manifest: RunManifest) -> None:
    ev = cfg.eval
    seed = cfg.master_seed
    run_id = manifest.run_id
    eval_dir = os.path.join(manifest.root, "eval")
    reports = {}

    # each expert on its own task
    rows = []
    for omega in cfg.grids.meta_train:
        expert = load_expert(manifest, omega)
        rows.append(kick_statistics(expert, TaskContext(omega),
                                    N=ev.episodes, seed=seed, env_cfg=cfg.env,
                                    threshold=ev.threshold))
    reports["experts"] = SweepReport(rows=rows, n=ev.episodes,
                                     threshold=ev.threshold, seed=seed)
    save_sweep_csv(os.path.join(eval_dir, "experts.csv"),
                   reports["experts"], run_id=run_id)
    manifest.register("eval-experts", os.path.join(eval_dir, "experts.csv"))

    presets = [p for p in cfg.meta.presets if f"meta-{p}" in manifest.artifacts]
    metas = {p: load_meta(manifest, p) for p in presets}
    for preset in presets:
        report = generalization_sweep(metas[preset], cfg.grids,
                                      N=ev.episodes, seed=seed,
                                      env_cfg=cfg.env, threshold=ev.threshold)
        reports[f"unfiltered-{preset}"] = report
        path = os.path.join(eval_dir, f"unfiltered-{preset}.csv")
        save_sweep_csv(path, report, run_id=run_id)
        manifest.register(f"eval-unfiltered-{preset}", path)

    dominance_rows = []
    pairs = []
    for mode, label in _filter_sources(manifest):
        name = f"filter-{mode}-{label}"
        manifest.verify([name, name + "-info"])
        stored = load_filter_reports(manifest.path_of(name))
        with open(manifest.path_of(name + "-info")) as fh:
            members = json.load(fh)["models"]
        missing = [p for p in members if p not in metas]
        if missing:
            raise DataIntegrityError(
                f"filter file {name} references unknown models {missing}")
        selections = FilteredSelections(
            models=[metas[p].params for p in members], reports=stored)
        report = generalization_sweep(selections, cfg.grids, N=ev.episodes,
                                      seed=seed, env_cfg=cfg.env,
                                      threshold=ev.threshold)
        key = f"filtered-{mode}-{label}"
        reports[key] = report
        path = os.path.join(eval_dir, f"{key}.csv")
        save_sweep_csv(path, report, run_id=run_id)
        manifest.register(f"eval-{key}", path)
        for stored_report in stored:
            central = min(e.loss for e in stored_report.entries
                          if e.candidate == stored_report.test_omega)
            dominance_rows.append(
                [f"{mode}-{label}", _fmt(stored_report.test_omega),
                 _fmt(stored_report.selected_loss), _fmt(central),
                 stored_report.selected_loss <= central])
        for member in members:
            pairs.append((key, f"unfiltered-{member}"))

    # experts cover the coarse training grid; comparisons need one grid
    test_grid_reports = sorted((name, rep) for name, rep in reports.items()
                               if name != "experts")
    comparison = compare_models(test_grid_reports, dominance_pairs=pairs) \
        if len(test_grid_reports) >= 2 else None
    if comparison is not None:
        save_comparison_csv(os.path.join(eval_dir, "comparison.csv"),
                            comparison, run_id=run_id)
        manifest.register("eval-comparison",
                          os.path.join(eval_dir, "comparison.csv"))
    if dominance_rows:
        path = os.path.join(eval_dir, "dominance.csv")
        with open(path, "w", newline="") as fh:
            fh.write(f"# run_id={run_id}\n")
            writer = csv.writer(fh)
            writer.writerow(["source", "omega", "selected_loss",
                             "central_loss", "satisfied"])
            writer.writerows(dominance_rows)
        manifest.register("eval-dominance", path)
    manifest.save()

    print(format_sweep_table(reports["experts"], title="experts"))
    if comparison is not None:
        print(format_comparison(comparison))
    if dominance_rows:
        satisfied = sum(1 for row in dominance_rows if row[-1])
        print(f"dominance satisfied on {satisfied}/{len(dominance_rows)} "
              f"filtered tasks")


def cmd_baseline(cfg: RunConfig, manifest: RunManifest) -> None:
    budget = cfg.baseline_budget()
    ppo_cfg = dataclasses.replace(cfg.ppo, total_timesteps=budget)
    result = train_multitask_baseline(ppo_cfg, cfg.env, cfg.seeds,
                                      cfg.grids.meta_train,
                                      hidden_layers=cfg.baseline.hidden_layers,
                                      bootstrap_epochs=cfg.bootstrap_epochs)
    run_id = manifest.run_id
    base_dir = os.path.join(manifest.root, "baseline")
    rows = curve_rows(result.curves, confidence=cfg.eval.confidence,
                      resamples=cfg.eval.resamples, seed=cfg.master_seed)
    curve_path = os.path.join(base_dir, "curve.csv")
    save_curve_csv(curve_path, rows, run_id=run_id)
    manifest.register("baseline-curve", curve_path)

    summary = []
    for seed, params in zip(cfg.seeds, result.policies):
        ckpt = os.path.join(base_dir, f"baseline-seed{seed}.ckpt")
        nn.save_checkpoint(ckpt, params)
        manifest.register(f"baseline-seed{seed}", ckpt)
        report = generalization_sweep(params, cfg.grids, N=cfg.eval.episodes,
                                      seed=cfg.master_seed, env_cfg=cfg.env,
                                      threshold=cfg.eval.threshold)
        path = os.path.join(base_dir, f"sweep-seed{seed}.csv")
        save_sweep_csv(path, report, run_id=run_id)
        manifest.register(f"baseline-sweep-seed{seed}", path)
        summary.append((seed, report.mean_error, report.mean_accuracy))
        print(f"baseline seed {seed}: mean error {report.mean_error:.3f}, "
              f"accuracy {report.mean_accuracy:.3f} at {budget} steps")

    summary_path = os.path.join(base_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        fh.write(f"# run_id={run_id}\n")
        writer = csv.writer(fh)
        writer.writerow(["seed", "timesteps", "mean_error", "mean_accuracy"])
        for seed, err, acc in summary:
            writer.writerow([seed, budget, _fmt(err), _fmt(acc)])
        writer.writerow([-1, budget,
                         _fmt(np.mean([s[1] for s in summary])),
                         _fmt(np.mean([s[2] for s in summary]))])
    manifest.register("baseline-summary", summary_path)
    manifest.save()


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bumps",
        description="train per-task kick experts, distill them into a "
                    "contextual meta-policy, and adapt it by candidate "
                    "context selection")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--profile", choices=PROFILES,
                        help="built-in configuration profile "
                             "(ignored when --config is given)")
    parser.add_argument("--output-dir",
                        help="output root (overrides BUMPS_OUTPUT_DIR "
                             "and the configuration)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-experts",
                       help="train one expert per training-grid task")
    p.add_argument("--tasks", type=float, nargs="+",
                   help="train only these grid targets")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel training processes")
    sub.add_parser("build-dataset",
                   help="roll expert trajectories into the contextual "
                        "dataset")
    p = sub.add_parser("meta-train",
                       help="distill the dataset into meta-policies")
    p.add_argument("--preset", action="append", dest="presets",
                   choices=sorted(PRESETS),
                   help="network preset (repeatable; default: all "
                        "configured presets)")
    p = sub.add_parser("filter",
                       help="select adaptation contexts per test task")
    p.add_argument("--mode", choices=FILTER_MODES,
                   help="candidate grid mode (default from configuration)")
    p.add_argument("--radius", type=float,
                   help="candidate search radius around each test target")
    p.add_argument("--models", nargs="+", choices=sorted(PRESETS),
                   help="meta-policy presets to filter (default: all "
                        "with checkpoints)")
    sub.add_parser("evaluate", help="emit sweep and comparison reports")
    sub.add_parser("baseline",
                   help="train the budget-matched multi-task baseline")
    sub.add_parser("print-config", help="dump the effective configuration")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.profile or "desk")
    output_dir = args.output_dir or os.environ.get("BUMPS_OUTPUT_DIR")
    if output_dir:
        cfg = dataclasses.replace(cfg, output_dir=output_dir)
    return cfg


def _dispatch(args, cfg: RunConfig, manifest: RunManifest) -> None:
    if args.command == "train-experts":
        cmd_train_experts(cfg, manifest, tasks=args.tasks, jobs=args.jobs)
    elif args.command == "build-dataset":
        cmd_build_dataset(cfg, manifest)
    elif args.command == "meta-train":
        cmd_meta_train(cfg, manifest, presets=args.presets)
    elif args.command == "filter":
        cmd_filter(cfg, manifest, mode=args.mode, radius=args.radius,
                   models=args.models)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, manifest)
    elif args.command == "baseline":
        cmd_baseline(cfg, manifest)
    else:
        raise ConfigError(f"unhandled command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "print-config":
            print(f"# run_id: {run_id_for(cfg)}")
            print(format_config(cfg), end="")
            return EXIT_OK
        manifest = open_run(cfg.output_dir, cfg)
        for stage in STAGE_DIRS:
            os.makedirs(os.path.join(manifest.root, stage), exist_ok=True)
        config_path = os.path.join(manifest.root, "config.yaml")
        if not os.path.exists(config_path):
            save_config(config_path, cfg)
        _dispatch(args, cfg, manifest)
        return EXIT_OK
    except (ConfigError, ContextRangeError, ShapeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataIntegrityError, GridMismatchError) as exc:
        print(f"data integrity error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
