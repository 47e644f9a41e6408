"""Distill single-task experts into one context-conditioned policy, then
adapt it to a new target by searching over nearby contexts.

The flow has three stages. ``collect_rollouts`` plus
``contextualize_and_aggregate`` turn trained experts into a pooled dataset of
(context, observation, action) records. ``meta_train`` fits a Gaussian policy
to that dataset by maximum likelihood. ``policy_filter`` adapts the trained
policy to a test target without gradient steps: it rolls out the policy under
a grid of candidate contexts near the target and keeps the candidate whose
kicks land closest.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .env import (OMEGA_MIN, OMEGA_MAX, OMEGA_SPAN, EnvConfig, TaskContext,
                  Trajectory)
from .errors import (ConfigError, ContextRangeError, DataIntegrityError,
                     ShapeError, TrainingFault)
from .nn import MlpSpec, NetworkParams
from .rl import ExpertPolicy, episode_rngs, rollout_episodes
from .seeding import seed_sequence

META_TRAIN_SPACING = 0.5
META_TEST_SPACING = 0.1
FILTER_SPACING_NORMAL = 0.1
FILTER_SPACING_HIGH_RATE = 0.01
FILTER_MODES = ("normal", "high_rate", "global")


def _hundredth_grid(start: float, stop: float, spacing: float) -> tuple:
    """Inclusive grid from start to stop, built in integer hundredths of a
    meter so every point is an exact float like 7.5, never 7.4999...9."""
    step = int(round(spacing * 100))
    if step <= 0 or abs(step - spacing * 100) > 1e-9:
        raise ConfigError("grid spacing must be a positive multiple of 0.01")
    lo, hi = int(round(start * 100)), int(round(stop * 100))
    return tuple(h / 100 for h in range(lo, hi + 1, step))


@dataclass(frozen=True)
class TaskGrids:
    """Target grids: coarse for expert training, dense for held-out tests."""

    meta_train: tuple
    meta_test: tuple
    filter_grid_spacing: float = FILTER_SPACING_NORMAL

    def __post_init__(self):
        for name in ("meta_train", "meta_test"):
            grid = getattr(self, name)
            if len(grid) == 0:
                raise ConfigError(f"{name} grid is empty")
            arr = np.asarray(grid, dtype=np.float64)
            if not np.all(np.diff(arr) > 0):
                raise ConfigError(f"{name} grid must be strictly increasing")
            if arr[0] < OMEGA_MIN or arr[-1] > OMEGA_MAX:
                raise ContextRangeError(
                    f"{name} grid leaves [{OMEGA_MIN}, {OMEGA_MAX}]")
        if self.filter_grid_spacing <= 0:
            raise ConfigError("filter_grid_spacing must be positive")

    @staticmethod
    def default() -> "TaskGrids":
        return TaskGrids(
            meta_train=_hundredth_grid(OMEGA_MIN, OMEGA_MAX, META_TRAIN_SPACING),
            meta_test=_hundredth_grid(OMEGA_MIN, OMEGA_MAX, META_TEST_SPACING),
        )

    def train_tasks(self) -> list:
        return [TaskContext(w) for w in self.meta_train]

    def test_tasks(self) -> list:
        return [TaskContext(w) for w in self.meta_test]


# ---------------------------------------------------------------------------
# dataset construction

@dataclass
class ContextualDataset:
    """Pooled (context, observation, action) records with provenance.

    ``trajectory_ids`` and ``step_indices`` say where each record came from,
    so aggregation stays lossless and auditable. Rewards ride along for
    round-tripping through the trajectory record format; likelihood training
    ignores them.
    """

    omegas: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    trajectory_ids: np.ndarray
    step_indices: np.ndarray

    def __len__(self) -> int:
        return self.omegas.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def distinct_contexts(self) -> np.ndarray:
        return np.unique(self.omegas)

    def contextual_inputs(self) -> np.ndarray:
        """Observations with the normalized context appended as a column."""
        context = (self.omegas - OMEGA_MIN) / OMEGA_SPAN
        return np.concatenate([self.observations, context[:, None]], axis=1)

    def validate(self) -> None:
        n = len(self)
        for name in ("observations", "actions", "rewards", "trajectory_ids",
                     "step_indices"):
            if getattr(self, name).shape[0] != n:
                raise DataIntegrityError(f"{name} length does not match omegas")
        if n == 0:
            return
        for arr in (self.omegas, self.observations, self.actions, self.rewards):
            if not np.isfinite(arr).all():
                raise DataIntegrityError("non-finite value in dataset")
        if self.omegas.min() < OMEGA_MIN or self.omegas.max() > OMEGA_MAX:
            raise DataIntegrityError("context outside the task range")


def collect_rollouts(policy: ExpertPolicy, task: TaskContext, K: int, seed,
                     env_cfg: EnvConfig = None) -> list:
    """Roll K episodes with the expert's mean action (no action sampling).

    The env keeps its own stochasticity, so K > 1 gives distinct trajectories
    unless noise_std is zero.
    """
    if env_cfg is None:
        env_cfg = EnvConfig()
    if K < 1:
        raise ConfigError("K must be a positive integer")
    if policy.task.target_distance != task.target_distance:
        raise ConfigError("expert was trained for a different task")
    env_rngs, _ = episode_rngs(seed_sequence(seed, "collect"), K)
    omegas = np.full(K, task.target_distance)
    rolled = rollout_episodes(policy.params, env_cfg, omegas, env_rngs,
                              policy_rngs=None, include_context=False)
    return [Trajectory(task=task, observations=rolled.observations[k],
                       actions=rolled.actions[k], rewards=rolled.rewards[k])
            for k in range(K)]


def contextualize_and_aggregate(trajectories: list) -> ContextualDataset:
    """Tag every step of every trajectory with its task's target and pool
    the lot into one flat dataset."""
    if not trajectories:
        empty = np.zeros(0)
        return ContextualDataset(omegas=empty, observations=np.zeros((0, 0)),
                                 actions=np.zeros((0, 0)), rewards=empty.copy(),
                                 trajectory_ids=np.zeros(0, dtype=np.int64),
                                 step_indices=np.zeros(0, dtype=np.int64))
    omegas, obs, actions, rewards, traj_ids, steps = [], [], [], [], [], []
    for tid, traj in enumerate(trajectories):
        if traj.task is None:
            raise DataIntegrityError(f"trajectory {tid} carries no task")
        T = len(traj)
        omegas.append(np.full(T, traj.task.target_distance))
        obs.append(traj.observations)
        actions.append(traj.actions)
        rewards.append(traj.rewards)
        traj_ids.append(np.full(T, tid, dtype=np.int64))
        steps.append(np.arange(T, dtype=np.int64))
    dataset = ContextualDataset(
        omegas=np.concatenate(omegas),
        observations=np.concatenate(obs, axis=0),
        actions=np.concatenate(actions, axis=0),
        rewards=np.concatenate(rewards),
        trajectory_ids=np.concatenate(traj_ids),
        step_indices=np.concatenate(steps),
    )
    dataset.validate()
    return dataset


def save_dataset(path, dataset: ContextualDataset) -> None:
    """One JSON line per record, same shape as the trajectory step format."""
    dataset.validate()
    with open(path, "w") as fh:
        for i in range(len(dataset)):
            record = {
                "episode": int(dataset.trajectory_ids[i]),
                "omega": float(dataset.omegas[i]),
                "counter": int(dataset.step_indices[i]),
                "observation": [float(v) for v in dataset.observations[i]],
                "action": [float(v) for v in dataset.actions[i]],
                "reward": float(dataset.rewards[i]),
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> ContextualDataset:
    omegas, obs, actions, rewards, traj_ids, steps = [], [], [], [], [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                omegas.append(record["omega"])
                obs.append(record["observation"])
                actions.append(record["action"])
                rewards.append(record["reward"])
                traj_ids.append(record["episode"])
                steps.append(record["counter"])
            except (KeyError, ValueError, TypeError) as exc:
                raise DataIntegrityError(
                    f"bad dataset record at line {line_no}: {exc}") from exc
    if not omegas:
        return contextualize_and_aggregate([])
    try:
        dataset = ContextualDataset(
            omegas=np.asarray(omegas, dtype=np.float64),
            observations=np.asarray(obs, dtype=np.float64),
            actions=np.asarray(actions, dtype=np.float64),
            rewards=np.asarray(rewards, dtype=np.float64),
            trajectory_ids=np.asarray(traj_ids, dtype=np.int64),
            step_indices=np.asarray(steps, dtype=np.int64),
        )
    except ValueError as exc:  # ragged rows
        raise DataIntegrityError(f"inconsistent record shapes: {exc}") from exc
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# likelihood training

@dataclass
class MetaPolicy:
    """Context-conditioned Gaussian policy with its training history."""

    params: NetworkParams
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = float("nan")

    @property
    def spec(self) -> MlpSpec:
        return self.params.spec


@dataclass(frozen=True)
class BcConfig:
    epochs: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    decay_factor: float = 0.8
    # evaluate the full-dataset loss every eval_interval epochs; decay the
    # learning rate after plateau_patience evaluations without improvement
    plateau_patience: int = 20
    eval_interval: int = 10
    log_std_init: float = nn.DEFAULT_LOG_STD_INIT
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.plateau_patience <= 0 or self.eval_interval <= 0:
            raise ConfigError("plateau_patience and eval_interval must be positive")


def bc_loss(meta, inputs, actions):
    """Mean negative log-likelihood of the recorded actions, with gradients.

    ``meta`` may be a MetaPolicy or bare NetworkParams. ``inputs`` are the
    context-augmented observations.
    """
    params = getattr(meta, "params", meta)
    inputs = np.asarray(inputs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if inputs.ndim != 2 or actions.ndim != 2:
        raise ShapeError("bc_loss expects batched inputs and actions")
    m = inputs.shape[0]
    if m == 0:
        raise ConfigError("empty minibatch")
    if not (np.isfinite(inputs).all() and np.isfinite(actions).all()):
        raise TrainingFault("non-finite training record")
    weights = np.full(m, -1.0 / m)
    log_probs, grads = nn.gaussian_weighted_log_prob_backward(
        params, inputs, actions, weights)
    loss = -float(np.mean(log_probs))
    if not math.isfinite(loss):
        raise TrainingFault("non-finite likelihood loss")
    return loss, grads


def dataset_loss(params: NetworkParams, inputs, actions) -> float:
    """Full-dataset mean negative log-likelihood, no gradients."""
    log_probs = nn.gaussian_log_prob(params, inputs, actions)
    loss = -float(np.mean(log_probs))
    if not math.isfinite(loss):
        raise TrainingFault("non-finite likelihood loss")
    return loss


def meta_train(dataset: ContextualDataset, spec: MlpSpec,
               train_cfg: BcConfig = None) -> MetaPolicy:
    """Fit a Gaussian policy to the pooled dataset by minibatch likelihood
    ascent. Tracks the full-dataset loss on a fixed cadence and returns the
    best parameters seen, with the loss curve attached."""
    cfg = train_cfg if train_cfg is not None else BcConfig()
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if spec.input_dim != dataset.obs_dim + 1:
        raise ShapeError("policy input must be the observation plus one context")
    if spec.output_dim != dataset.action_dim:
        raise ShapeError("policy output dim must match the recorded actions")
    if dataset.distinct_contexts().size < 2:
        warnings.warn("dataset covers a single context; the policy cannot "
                      "generalize across targets", stacklevel=2)

    inputs = dataset.contextual_inputs()
    actions = dataset.actions
    params = nn.init_params(spec, np.random.default_rng(
        seed_sequence(cfg.seed, "meta-init")), with_log_std=True,
        log_std_init=cfg.log_std_init)
    opt = nn.init_optimizer(params, cfg.optimizer, cfg.learning_rate,
                            cfg.decay_factor)
    shuffle_rng = np.random.default_rng(seed_sequence(cfg.seed, "meta-shuffle"))

    n = len(dataset)
    curve = []
    best_loss = math.inf
    best_epoch = 0
    best_params = params.copy()
    evals_since_improvement = 0

    def evaluate(epoch: int) -> None:
        nonlocal best_loss, best_epoch, best_params, evals_since_improvement
        loss = dataset_loss(params, inputs, actions)
        curve.append({"epoch": epoch, "loss": loss,
                      "learning_rate": opt.learning_rate})
        if loss < best_loss:
            best_loss = loss
            best_epoch = epoch
            best_params = params.copy()
            evals_since_improvement = 0
        else:
            evals_since_improvement += 1
            if evals_since_improvement >= cfg.plateau_patience:
                nn.decay_learning_rate(opt)
                evals_since_improvement = 0

    evaluate(0)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = bc_loss(params, inputs[idx], actions[idx])
            nn.optimizer_step(params, grads, opt)
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            evaluate(epoch)
    return MetaPolicy(params=best_params, curve=curve, best_epoch=best_epoch,
                      best_loss=best_loss)


# ---------------------------------------------------------------------------
# context filtering

@dataclass(frozen=True)
class FilterConfig:
    radius: float = 1.0
    mode: str = "normal"
    # shared noise across candidates makes selection bias shrink with the
    # episode count; 10 keeps it well below the candidate spacing
    episodes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise ConfigError(f"unknown filter mode {self.mode!r}")
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")


@dataclass(frozen=True)
class FilterEntry:
    model_id: int
    candidate: float
    loss: float


@dataclass
class FilterReport:
    """Outcome of one context search: every (model, candidate) loss plus the
    winning pair under the deterministic tie-break."""

    test_omega: float
    entries: list
    selected_model: int
    selected_candidate: float
    selected_loss: float
    episodes: int
    seed: int
    mode: str
    radius: float

    def central_loss(self, model_id: int = 0) -> float:
        """Loss of the unadapted context (candidate == test target)."""
        for entry in self.entries:
            if entry.model_id == model_id and entry.candidate == self.test_omega:
                return entry.loss
        raise DataIntegrityError("central candidate missing from report")

    def model_best(self, model_id: int) -> FilterEntry:
        best = None
        for entry in self.entries:
            if entry.model_id != model_id:
                continue
            if best is None or _selection_key(entry, self.test_omega) < \
                    _selection_key(best, self.test_omega):
                best = entry
        if best is None:
            raise DataIntegrityError(f"no entries for model {model_id}")
        return best


def _selection_key(entry: FilterEntry, test_omega: float) -> tuple:
    return (entry.loss, abs(entry.candidate - test_omega), entry.candidate,
            entry.model_id)


def sample_candidate_contexts(test_omega: float, grids: TaskGrids,
                              mode: str = "normal",
                              radius: float = 1.0) -> list:
    """The test target plus every grid point within ±radius of it, clipped
    to the valid range, deduplicated and sorted. Grid points sit on an
    absolute lattice anchored at the range minimum, so neighboring test
    targets share candidates. ``high_rate`` tightens the lattice tenfold;
    ``global`` ignores the radius and scans the whole range."""
    if not OMEGA_MIN <= test_omega <= OMEGA_MAX:
        raise ContextRangeError(f"test context {test_omega} outside "
                                f"[{OMEGA_MIN}, {OMEGA_MAX}]")
    if mode not in FILTER_MODES:
        raise ConfigError(f"unknown filter mode {mode!r}")
    if radius <= 0 and mode != "global":
        return [float(test_omega)]
    spacing = FILTER_SPACING_HIGH_RATE if mode == "high_rate" \
        else grids.filter_grid_spacing
    step = int(round(spacing * 100))
    if step <= 0 or abs(step - spacing * 100) > 1e-9:
        raise ConfigError("filter spacing must be a positive multiple of 0.01")
    if mode == "global":
        lo, hi = OMEGA_MIN, OMEGA_MAX
    else:
        lo = max(OMEGA_MIN, test_omega - radius)
        hi = min(OMEGA_MAX, test_omega + radius)
    anchor = int(round(OMEGA_MIN * 100))
    k_min = math.ceil((lo * 100 - anchor) / step - 1e-9)
    k_max = math.floor((hi * 100 - anchor) / step + 1e-9)
    points = [(anchor + k * step) / 100 for k in range(k_min, k_max + 1)]
    return sorted(set(points) | {float(test_omega)})


def _shared_env_rngs(seed, episodes: int) -> list:
    # derived from the seed and episode index only, never from the candidate,
    # so every candidate faces identical env noise
    env_rngs, _ = episode_rngs(seed_sequence(seed, "filter-eval"), episodes)
    return env_rngs


def evaluate_candidate(meta, candidate_omega: float, test_task: TaskContext,
                       episodes: int, seed, env_cfg: EnvConfig = None) -> float:
    """Mean |final distance - test target| over E episodes with the policy
    conditioned on the candidate context and executing its mean action."""
    if env_cfg is None:
        env_cfg = EnvConfig()
    if episodes < 1:
        raise ConfigError("episodes must be at least 1")
    params = getattr(meta, "params", meta)
    omegas = np.full(episodes, test_task.target_distance)
    contexts = np.full(episodes, float(candidate_omega))
    rolled = rollout_episodes(params, env_cfg, omegas,
                              _shared_env_rngs(seed, episodes),
                              policy_rngs=None, include_context=True,
                              context_omegas=contexts)
    return float(np.mean(rolled.final_errors()))


def policy_filter(models, test_task: TaskContext, filter_cfg: FilterConfig,
                  grids: TaskGrids = None,
                  env_cfg: EnvConfig = None) -> FilterReport:
    """Score every (model, candidate context) pair on the test task and keep
    the global best.

    Every pair is evaluated one candidate at a time against the same derived
    env streams, which keeps losses bitwise comparable across modes and model
    subsets: adding candidates or models can only improve the selection.
    Ties break toward the candidate nearest the test target, then the lower
    candidate, then the earlier model.
    """
    if grids is None:
        grids = TaskGrids.default()
    if env_cfg is None:
        env_cfg = EnvConfig()
    models = list(models)
    if not models:
        raise ConfigError("policy_filter needs at least one model")
    candidates = sample_candidate_contexts(test_task.target_distance, grids,
                                           filter_cfg.mode, filter_cfg.radius)
    entries = []
    for model_id, model in enumerate(models):
        for candidate in candidates:
            loss = evaluate_candidate(model, candidate, test_task,
                                      filter_cfg.episodes, filter_cfg.seed,
                                      env_cfg)
            if not math.isfinite(loss):
                raise TrainingFault("non-finite candidate loss")
            entries.append(FilterEntry(model_id=model_id, candidate=candidate,
                                       loss=loss))
    best = min(entries,
               key=lambda e: _selection_key(e, test_task.target_distance))
    return FilterReport(test_omega=test_task.target_distance, entries=entries,
                        selected_model=best.model_id,
                        selected_candidate=best.candidate,
                        selected_loss=best.loss, episodes=filter_cfg.episodes,
                        seed=filter_cfg.seed, mode=filter_cfg.mode,
                        radius=filter_cfg.radius)


def save_filter_reports(path, reports: list) -> None:
    """One JSON line per test task."""
    with open(path, "w") as fh:
        for report in reports:
            record = {
                "test_omega": report.test_omega,
                "selected_model": report.selected_model,
                "selected_candidate": report.selected_candidate,
                "selected_loss": report.selected_loss,
                "episodes": report.episodes,
                "seed": report.seed,
                "mode": report.mode,
                "radius": report.radius,
                "entries": [[e.model_id, e.candidate, e.loss]
                            for e in report.entries],
            }
            fh.write(json.dumps(record) + "\n")


def load_filter_reports(path) -> list:
    reports = []
    with open(path) as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                entries = [FilterEntry(model_id=int(m), candidate=float(c),
                                       loss=float(l))
                           for m, c, l in record["entries"]]
                reports.append(FilterReport(
                    test_omega=float(record["test_omega"]), entries=entries,
                    selected_model=int(record["selected_model"]),
                    selected_candidate=float(record["selected_candidate"]),
                    selected_loss=float(record["selected_loss"]),
                    episodes=int(record["episodes"]), seed=record["seed"],
                    mode=str(record["mode"]), radius=float(record["radius"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataIntegrityError(
                    f"bad filter record at line {line_no}: {exc}") from exc
    return reports
