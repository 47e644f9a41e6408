"""Accuracy and error statistics for kick policies: per-task evaluation,
grid sweeps, side-by-side model comparisons, and bootstrap confidence bands
for training curves. Reports are plain CSV plus aligned text tables."""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import EnvConfig, TaskContext
from .errors import ConfigError, DataIntegrityError, GridMismatchError
from .meta import MetaPolicy, TaskGrids
from .rl import episode_rngs, rollout_episodes
from .seeding import seed_sequence

ACCURACY_THRESHOLD = 1.0
# fraction-of-tasks summaries reported at these per-task accuracy levels
ACCURACY_LEVELS = (0.7, 0.8)

SWEEP_CSV_HEADER = ["omega", "n", "accuracy", "mean_error", "std_error",
                    "rel_error_pct"]
CURVE_CSV_HEADER = ["seed", "timestep", "mean_return", "ci_low", "ci_high"]
AGGREGATE_SEED = -1


@dataclass(frozen=True)
class KickStats:
    """Outcome of N evaluation kicks at one target.

    The raw error sample rides along so alternative summaries can be
    recomputed without re-running episodes.
    """

    omega: float
    n: int
    accuracy: float
    mean_error: float
    std_error: float
    mean_relative_error: float
    errors: tuple = ()


def stats_from_errors(omega: float, errors,
                      threshold: float = ACCURACY_THRESHOLD) -> KickStats:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ConfigError("empty error sample")
    mean_error = float(errors.mean())
    return KickStats(
        omega=float(omega),
        n=int(errors.size),
        accuracy=float((errors <= threshold).mean()),
        mean_error=mean_error,
        std_error=float(errors.std(ddof=0)),
        mean_relative_error=100.0 * mean_error / float(omega),
        errors=tuple(float(e) for e in errors),
    )


def _resolve_params(policy):
    return getattr(policy, "params", policy)


def kick_statistics(policy, task: TaskContext, N: int = 100, seed=0,
                    env_cfg: EnvConfig = None, context: float = None,
                    threshold: float = ACCURACY_THRESHOLD) -> KickStats:
    """Run N stochastic episodes with deterministic mean actions and reduce
    the absolute final errors to summary statistics.

    ``context`` conditions a contextual policy on something other than the
    task itself (filtered selections); by default a contextual policy is
    conditioned on the task and a context-free policy just observes.
    """
    if env_cfg is None:
        env_cfg = EnvConfig()
    if N < 1:
        raise ConfigError("N must be at least 1")
    params = _resolve_params(policy)
    contextual = params.spec.input_dim >= 2
    if context is not None and not contextual:
        raise ConfigError("context given for a context-free policy")
    omega = task.target_distance
    root = seed_sequence(seed, "kick-eval", int(round(omega * 100)))
    env_rngs, _ = episode_rngs(root, N)
    omegas = np.full(N, omega)
    contexts = None
    if contextual:
        contexts = np.full(N, omega if context is None else float(context))
    rolled = rollout_episodes(params, env_cfg, omegas, env_rngs,
                              policy_rngs=None, include_context=contextual,
                              context_omegas=contexts)
    return stats_from_errors(omega, rolled.final_errors(), threshold)


@dataclass(frozen=True)
class FilteredSelections:
    """A context-search outcome per task: which model to run and at which
    conditioning context."""

    models: tuple
    reports: tuple

    def __post_init__(self):
        n_models = len(self.models)
        for report in self.reports:
            if not 0 <= report.selected_model < n_models:
                raise DataIntegrityError("report selects a missing model")

    def for_task(self, omega: float):
        for report in self.reports:
            if report.test_omega == omega:
                params = _resolve_params(self.models[report.selected_model])
                return params, report.selected_candidate
        raise GridMismatchError(f"no filter report for task {omega}")


@dataclass
class SweepReport:
    """Per-task statistics over a grid plus aggregates recomputable from
    the rows."""

    rows: list
    n: int
    threshold: float
    seed: object
    mean_accuracy: float = 0.0
    mean_error: float = 0.0
    std_error: float = 0.0
    mean_relative_error: float = 0.0
    accuracy_fractions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.omega)
        agg = self.recompute_aggregates()
        for k, v in agg.items():
            setattr(self, k, v)

    def recompute_aggregates(self) -> dict:
        accs = np.array([r.accuracy for r in self.rows])
        errs = np.array([r.mean_error for r in self.rows])
        rels = np.array([r.mean_relative_error for r in self.rows])
        return {
            "mean_accuracy": float(accs.mean()),
            "mean_error": float(errs.mean()),
            "std_error": float(errs.std(ddof=0)),
            "mean_relative_error": float(rels.mean()),
            "accuracy_fractions": {level: float((accs >= level).mean())
                                   for level in ACCURACY_LEVELS},
        }

    def omegas(self) -> list:
        return [r.omega for r in self.rows]

    def mean_error_above(self, min_accuracy: float) -> float:
        """Aggregate mean error over tasks whose accuracy clears a floor."""
        errs = [r.mean_error for r in self.rows if r.accuracy > min_accuracy]
        if not errs:
            return float("nan")
        return float(np.mean(errs))


def _grid_omegas(grid) -> list:
    if isinstance(grid, TaskGrids):
        return list(grid.meta_test)
    return [float(w) for w in grid]


def generalization_sweep(policy, grid, N: int = 100, seed=0,
                         env_cfg: EnvConfig = None,
                         threshold: float = ACCURACY_THRESHOLD) -> SweepReport:
    """Evaluate a policy on every task of a grid.

    ``policy`` is either a single (contextual or single-task) policy, or
    FilteredSelections mapping each task to its chosen model and context.
    ``grid`` is a TaskGrids (its test grid is used) or an explicit sequence
    of targets.
    """
    omegas = _grid_omegas(grid)
    if not omegas:
        raise ConfigError("empty evaluation grid")
    rows = []
    for omega in omegas:
        task = TaskContext(omega)
        if isinstance(policy, FilteredSelections):
            params, context = policy.for_task(omega)
            row = kick_statistics(params, task, N=N, seed=seed,
                                  env_cfg=env_cfg, context=context,
                                  threshold=threshold)
        else:
            row = kick_statistics(policy, task, N=N, seed=seed,
                                  env_cfg=env_cfg, threshold=threshold)
        rows.append(row)
    return SweepReport(rows=rows, n=N, threshold=threshold, seed=seed)


# ---------------------------------------------------------------------------
# bootstrap bands

def bootstrap_ci(samples, confidence: float = 0.95, resamples: int = 1000,
                 seed=0) -> tuple:
    """Percentile bootstrap band for the mean of ``samples``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ConfigError("bootstrap needs at least one sample")
    if not 0.0 < confidence < 1.0:
        raise ConfigError("confidence must be in (0, 1)")
    if resamples < 1:
        raise ConfigError("resamples must be positive")
    rng = np.random.default_rng(seed_sequence(seed, "bootstrap"))
    idx = rng.integers(0, samples.size, size=(resamples, samples.size))
    means = samples[idx].mean(axis=1)
    alpha = 100.0 * (1.0 - confidence) / 2.0
    low, high = np.percentile(means, [alpha, 100.0 - alpha])
    return float(low), float(high)


# ---------------------------------------------------------------------------
# comparisons

@dataclass(frozen=True)
class ComparisonRow:
    name: str
    mean_accuracy: float
    mean_error: float
    std_error: float
    mean_relative_error: float


@dataclass
class Comparison:
    rows: list
    # (better_name, worse_name, omega, better_error, worse_error) triples
    # where the declared ordering failed on a task
    violations: list


def compare_models(named_reports, dominance_pairs=()) -> Comparison:
    """Side-by-side aggregates for reports over the same grid.

    ``dominance_pairs`` lists (better, worse) report names expected to
    satisfy per-task mean_error(better) <= mean_error(worse); failures are
    recorded, not raised.
    """
    named_reports = list(named_reports)
    if len(named_reports) < 2:
        raise ConfigError("compare_models needs at least two reports")
    names = [name for name, _ in named_reports]
    if len(set(names)) != len(names):
        raise ConfigError("report names must be distinct")
    reference = named_reports[0][1].omegas()
    for name, report in named_reports[1:]:
        if report.omegas() != reference:
            raise GridMismatchError(f"report {name!r} covers a different grid")
    by_name = dict(named_reports)
    rows = [ComparisonRow(name=name, mean_accuracy=r.mean_accuracy,
                          mean_error=r.mean_error, std_error=r.std_error,
                          mean_relative_error=r.mean_relative_error)
            for name, r in named_reports]
    violations = []
    for better, worse in dominance_pairs:
        if better not in by_name or worse not in by_name:
            raise ConfigError(f"unknown report in dominance pair "
                              f"({better!r}, {worse!r})")
        for rb, rw in zip(by_name[better].rows, by_name[worse].rows):
            if rb.mean_error > rw.mean_error:
                violations.append((better, worse, rb.omega, rb.mean_error,
                                   rw.mean_error))
    return Comparison(rows=rows, violations=violations)


# ---------------------------------------------------------------------------
# persistence

def _fmt(value) -> str:
    # repr keeps the shortest exact decimal form, so files are byte-stable
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_sweep_csv(path, report: SweepReport, run_id: str = None) -> None:
    with open(path, "w", newline="") as fh:
        if run_id is not None:
            fh.write(f"# run_id={run_id}\n")
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in report.rows:
            writer.writerow([_fmt(r.omega), r.n, _fmt(r.accuracy),
                             _fmt(r.mean_error), _fmt(r.std_error),
                             _fmt(r.mean_relative_error)])


def load_sweep_csv(path, threshold: float = ACCURACY_THRESHOLD) -> SweepReport:
    """Rebuild a report from its CSV rows. Raw error samples do not survive
    the round trip; aggregates are recomputed from the rows."""
    rows = []
    n = 0
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != SWEEP_CSV_HEADER:
        raise DataIntegrityError(f"unexpected sweep header: {header}")
    for record in reader:
        if len(record) != len(SWEEP_CSV_HEADER):
            raise DataIntegrityError(f"malformed sweep row: {record}")
        try:
            omega, acc = float(record[0]), float(record[2])
            n = int(record[1])
            mean_err, std_err = float(record[3]), float(record[4])
            rel = float(record[5])
        except ValueError as exc:
            raise DataIntegrityError(f"malformed sweep row: {record}") from exc
        rows.append(KickStats(omega=omega, n=n, accuracy=acc,
                              mean_error=mean_err, std_error=std_err,
                              mean_relative_error=rel))
    if not rows:
        raise DataIntegrityError("sweep file has no rows")
    return SweepReport(rows=rows, n=n, threshold=threshold, seed=None)


def format_sweep_table(report: SweepReport, title: str = "sweep") -> str:
    lines = [title,
             f"{'omega':>8} {'acc':>6} {'mean_err':>9} {'std_err':>8} "
             f"{'rel_%':>7}"]
    for r in report.rows:
        lines.append(f"{r.omega:8.2f} {r.accuracy:6.2f} {r.mean_error:9.3f} "
                     f"{r.std_error:8.3f} {r.mean_relative_error:7.2f}")
    lines.append(f"aggregate: accuracy {report.mean_accuracy:.3f}, "
                 f"error {report.mean_error:.3f} +- {report.std_error:.3f} m, "
                 f"rel {report.mean_relative_error:.2f}%")
    for level, frac in sorted(report.accuracy_fractions.items()):
        lines.append(f"tasks with accuracy >= {level:.1f}: {frac:.3f}")
    return "\n".join(lines)


def format_comparison(comparison: Comparison) -> str:
    lines = [f"{'model':<24} {'acc':>6} {'mean_err':>9} {'std_err':>8} "
             f"{'rel_%':>7}"]
    for row in comparison.rows:
        lines.append(f"{row.name:<24} {row.mean_accuracy:6.2f} "
                     f"{row.mean_error:9.3f} {row.std_error:8.3f} "
                     f"{row.mean_relative_error:7.2f}")
    if comparison.violations:
        lines.append("dominance violations:")
        for better, worse, omega, be, we in comparison.violations:
            lines.append(f"  {better} > {worse} at omega={omega:.2f} "
                         f"({be:.3f} > {we:.3f})")
    else:
        lines.append("dominance violations: none")
    return "\n".join(lines)


def save_comparison_csv(path, comparison: Comparison, run_id: str = None) -> None:
    with open(path, "w", newline="") as fh:
        if run_id is not None:
            fh.write(f"# run_id={run_id}\n")
        writer = csv.writer(fh)
        writer.writerow(["model", "mean_accuracy", "mean_error", "std_error",
                         "rel_error_pct"])
        for row in comparison.rows:
            writer.writerow([row.name, _fmt(row.mean_accuracy),
                             _fmt(row.mean_error), _fmt(row.std_error),
                             _fmt(row.mean_relative_error)])


# ---------------------------------------------------------------------------
# training-curve bands

def curve_rows(curves, confidence: float = 0.95, resamples: int = 1000,
               seed=0) -> list:
    """Aggregate per-seed reward curves into per-timestep bootstrap bands.

    Returns per-seed rows (zero-width band at the seed's own value) followed
    by aggregate rows under the sentinel seed.
    """
    curves = list(curves)
    if not curves:
        raise ConfigError("no curves to aggregate")
    timesteps = list(curves[0].steps)
    for curve in curves[1:]:
        if list(curve.steps) != timesteps:
            raise GridMismatchError("seed curves cover different timesteps")
    rows = []
    for curve in curves:
        for t, value in zip(curve.steps, curve.mean_returns):
            rows.append((curve.seed, t, value, value, value))
    for i, t in enumerate(timesteps):
        samples = [curve.mean_returns[i] for curve in curves]
        low, high = bootstrap_ci(samples, confidence=confidence,
                                 resamples=resamples, seed=(seed, t))
        rows.append((AGGREGATE_SEED, t, float(np.mean(samples)), low, high))
    return rows


def save_curve_csv(path, rows, run_id: str = None) -> None:
    with open(path, "w", newline="") as fh:
        if run_id is not None:
            fh.write(f"# run_id={run_id}\n")
        writer = csv.writer(fh)
        writer.writerow(CURVE_CSV_HEADER)
        for seed, t, value, low, high in rows:
            writer.writerow([seed, t, _fmt(float(value)), _fmt(float(low)),
                             _fmt(float(high))])
