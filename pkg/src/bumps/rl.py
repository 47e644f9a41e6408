"""PPO training: single-task experts, two-phase bootstrap, multitask baseline.

The rollout engine exploits the environment's structure: observations depend
only on the step counter and the task context, never on prior actions, so a
whole batch of episodes is evaluated with one network forward pass and the
launch algebra applied per episode. The engine's semantics are identical to
stepping ``KickEnv`` (the test suite checks bit-level parity); noise streams
are per-episode generators so results are independent of batching.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .env import (
    BALL_START,
    OMEGA_MIN,
    OMEGA_SPAN,
    EnvConfig,
    KickEnv,
    TaskContext,
    launch_distance,
    launch_kernel,
    required_constant_action,
)
from .errors import ConfigError, ShapeError, TrainingFault
from .nn import MlpSpec, NetworkParams
from .seeding import seed_sequence

# expert policies are deliberately small; one task each
EXPERT_HIDDEN = (64, 64, 64)
VALUE_HIDDEN = (64, 64)
# the shared warm-start target for experts and the baseline
IMITATION_TARGET = 12.0


@dataclass
class PpoConfig:
    gamma: float = 0.999
    lam: float = 1.0
    clip_param: float = 0.29
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    steps_per_batch: int = 1000
    minibatch_size: int = 250
    epochs_per_batch: int = 10
    total_timesteps: int = 200_000
    learning_rate: float = 1e-3
    normalize_advantages: bool = True
    optimizer: str = "adam"
    # initial exploration noise of freshly created policies; 0.3 keeps the
    # launch-sum perturbations large enough to rise above contact noise
    log_std_init: float = float(np.log(0.3))

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0) or not (0.0 <= self.lam <= 1.0):
            raise ConfigError("gamma and lam must lie in [0, 1]")
        if self.clip_param <= 0:
            raise ConfigError("clip_param must be positive")
        if self.entropy_coef < 0 or self.value_coef <= 0:
            raise ConfigError("entropy_coef >= 0 and value_coef > 0 required")
        if self.minibatch_size > self.steps_per_batch:
            raise ConfigError("minibatch_size must not exceed steps_per_batch")
        if self.minibatch_size <= 0 or self.steps_per_batch <= 0:
            raise ConfigError("batch sizes must be positive")
        if self.epochs_per_batch <= 0:
            raise ConfigError("epochs_per_batch must be positive")
        if self.total_timesteps < 0:
            raise ConfigError("total_timesteps must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RolloutSet:
    """Episode-major rollout arrays: shapes (n, T, ...) or (n, T)."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    finals: np.ndarray
    omegas: np.ndarray
    log_probs: Optional[np.ndarray] = None

    @property
    def n_episodes(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def final_errors(self) -> np.ndarray:
        return np.abs(self.finals - self.omegas)


@dataclass
class RolloutBatch:
    """Flattened (n*T) training arrays with advantages and value targets."""

    observations: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    n_episodes: int
    mean_return: float
    mean_final_error: float


@dataclass
class ExpertPolicy:
    task: TaskContext
    params: NetworkParams
    seed: int
    timesteps: int
    final_mean_return: float
    curve: list = field(default_factory=list)
    flags: tuple = ()


def rollout_episodes(policy: NetworkParams, env_cfg: EnvConfig, omegas,
                     env_rngs, policy_rngs=None, include_context: bool = False,
                     context_omegas=None) -> RolloutSet:
    """Roll one episode per entry of ``omegas``.

    ``env_rngs``: one generator per episode for launch noise. ``policy_rngs``:
    one generator per episode for action sampling, or None for deterministic
    mean actions. Each episode's random draws come only from its own
    generators, so any batching produces identical trajectories.

    ``context_omegas`` decouples the context fed to the policy from the task
    the rewards and final errors are measured against (policy filtering
    evaluates candidate contexts on a fixed test task); default is the task
    itself.
    """
    omegas = np.asarray(omegas, dtype=np.float64)
    n = omegas.shape[0]
    if len(env_rngs) != n:
        raise ShapeError("one env generator per episode required")
    cfg = env_cfg
    T, A, C = cfg.horizon_T, cfg.action_dim, cfg.contact_step
    counters = np.arange(T, dtype=np.float64) / cfg.horizon_T
    if context_omegas is not None and not include_context:
        raise ConfigError("context_omegas requires include_context")
    if include_context:
        conditioning = omegas if context_omegas is None else np.asarray(
            context_omegas, dtype=np.float64)
        if conditioning.shape != omegas.shape:
            raise ShapeError("context_omegas must match omegas in shape")
        context = (conditioning - OMEGA_MIN) / OMEGA_SPAN
        obs = np.empty((n, T, 2))
        obs[:, :, 0] = counters[None, :]
        obs[:, :, 1] = context[:, None]
    else:
        obs = np.broadcast_to(counters[:, None], (T, 1))
        obs = np.broadcast_to(obs[None, :, :], (n, T, 1)).copy()
    means = nn.forward(policy, obs.reshape(n * T, -1)).reshape(n, T, A)

    log_probs = None
    if policy_rngs is not None:
        if len(policy_rngs) != n:
            raise ShapeError("one policy generator per episode required")
        log_std = nn.effective_log_std(policy)
        eps = np.stack([g.standard_normal((T, A)) for g in policy_rngs])
        actions = means + np.exp(log_std) * eps
        log_probs = nn.gaussian_log_prob_from_mean(means, log_std, actions)
    else:
        actions = means

    kernel = launch_kernel(cfg)
    launch_sums = np.einsum("nta,ta->n", np.abs(actions[:, :C, :]), kernel)
    if cfg.noise_std > 0:
        noise = np.array([g.normal(0.0, cfg.noise_std) for g in env_rngs])
    else:
        noise = np.zeros(n)
    finals = launch_distance(launch_sums, noise, cfg)

    next_counters = np.arange(1, T + 1, dtype=np.float64)
    frac = np.clip((next_counters - C) / cfg.flight_steps, 0.0, 1.0)
    positions = BALL_START + (finals[:, None] - BALL_START) * frac[None, :]
    launched = next_counters >= C
    rewards = np.where(launched[None, :],
                       -cfg.reward_scale * np.abs(positions - omegas[:, None]), 0.0)
    return RolloutSet(observations=obs, actions=actions, rewards=rewards,
                      finals=finals, omegas=omegas, log_probs=log_probs)


def episode_rngs(root: np.random.SeedSequence, n: int):
    """Derive (env_rngs, policy_rngs) pairs for n episodes.

    Children are built from explicit spawn keys rather than ``root.spawn`` so
    repeated calls with the same root reproduce the same streams.
    """
    def child(i: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=root.entropy,
                                      spawn_key=root.spawn_key + (i,))

    env_rngs = [np.random.default_rng(child(i)) for i in range(n)]
    policy_rngs = [np.random.default_rng(child(n + i)) for i in range(n)]
    return env_rngs, policy_rngs


def discounted_return(rewards, gamma: float) -> np.ndarray:
    """Suffix sums G_t = r_t + gamma * G_{t+1}; supports (T,) or (n, T)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = np.zeros_like(rewards[..., 0])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimation over complete episodes.

    ``values`` carries one more entry than ``rewards`` along time (the
    bootstrap value, zero at termination). Supports (T,)/(T+1,) and
    (n, T)/(n, T+1).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != rewards.shape[-1] + 1:
        raise ShapeError("values must have one more time entry than rewards")
    deltas = rewards + gamma * values[..., 1:] - values[..., :-1]
    out = np.zeros_like(deltas)
    acc = np.zeros_like(deltas[..., 0])
    for t in range(deltas.shape[-1] - 1, -1, -1):
        acc = deltas[..., t] + gamma * lam * acc
        out[..., t] = acc
    return out


def collect_batch(policy: NetworkParams, value_net: NetworkParams, cfg: PpoConfig,
                  env_cfg: EnvConfig, omegas, rollout_seed: np.random.SeedSequence,
                  include_context: bool = False) -> RolloutBatch:
    """Sample a training batch of complete episodes and compute advantages."""
    n = len(omegas)
    env_rngs, policy_rngs = episode_rngs(rollout_seed, n)
    rollouts = rollout_episodes(policy, env_cfg, omegas, env_rngs, policy_rngs,
                                include_context=include_context)
    T = rollouts.horizon
    obs_flat = rollouts.observations.reshape(n * T, -1)
    values = nn.forward(value_net, obs_flat).reshape(n, T)
    values_ext = np.concatenate([values, np.zeros((n, 1))], axis=1)
    advantages = gae(rollouts.rewards, values_ext, cfg.gamma, cfg.lam)
    returns = advantages + values
    if cfg.normalize_advantages:
        flat = advantages.ravel()
        advantages = (advantages - flat.mean()) / (flat.std() + 1e-8)
    dones = np.zeros((n, T), dtype=bool)
    dones[:, -1] = True
    return RolloutBatch(
        observations=obs_flat,
        actions=rollouts.actions.reshape(n * T, -1),
        log_probs_old=rollouts.log_probs.ravel(),
        rewards=rollouts.rewards.ravel(),
        values=values.ravel(),
        dones=dones.ravel(),
        advantages=advantages.ravel(),
        returns=returns.ravel(),
        n_episodes=n,
        mean_return=float(rollouts.episode_returns().mean()),
        mean_final_error=float(rollouts.final_errors().mean()),
    )


def clipped_objective_terms(ratios, advantages, clip_param: float) -> np.ndarray:
    """Per-sample clipped surrogate: min(ratio * A, clip(ratio) * A)."""
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    clipped = np.clip(ratios, 1.0 - clip_param, 1.0 + clip_param)
    return np.minimum(ratios * advantages, clipped * advantages)


def policy_gradient(policy: NetworkParams, obs, actions, advantages, log_probs_old,
                    cfg: PpoConfig) -> nn.Gradients:
    """Minimization gradient of the clipped PPO policy loss on one minibatch.

    Loss = -mean(min(ratio * A, clip(ratio) * A)) - entropy_coef * entropy.
    """
    m = np.asarray(obs).shape[0]
    log_probs = nn.gaussian_log_prob(policy, obs, actions)
    if not np.isfinite(log_probs).all():
        raise TrainingFault("non-finite log probabilities")
    ratios = np.exp(log_probs - log_probs_old)
    clipped = np.clip(ratios, 1.0 - cfg.clip_param, 1.0 + cfg.clip_param)
    unclipped_term = ratios * advantages
    clipped_term = clipped * advantages
    # gradient flows only where the unclipped term attains the min
    take_grad = unclipped_term <= clipped_term
    coef = np.where(take_grad, ratios * advantages, 0.0) / m
    _, grads = nn.gaussian_weighted_log_prob_backward(policy, obs, actions, -coef)
    active = (policy.log_std > nn.LOG_STD_MIN) & (policy.log_std < nn.LOG_STD_MAX)
    grads.log_std = grads.log_std - cfg.entropy_coef * active
    return grads


def _policy_diagnostics(policy: NetworkParams, batch: RolloutBatch, cfg: PpoConfig) -> dict:
    log_probs = nn.gaussian_log_prob(policy, batch.observations, batch.actions)
    ratios = np.exp(log_probs - batch.log_probs_old)
    surrogate = clipped_objective_terms(ratios, batch.advantages, cfg.clip_param)
    return {
        "surrogate": float(surrogate.mean()),
        "kl": float((batch.log_probs_old - log_probs).mean()),
        "clip_fraction": float(((ratios > 1.0 + cfg.clip_param)
                                | (ratios < 1.0 - cfg.clip_param)).mean()),
        "entropy": nn.gaussian_entropy(nn.effective_log_std(policy)),
    }


def ppo_update(policy: NetworkParams, value_net: NetworkParams, batch: RolloutBatch,
               cfg: PpoConfig, policy_opt, value_opt, rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO epochs over shuffled minibatches.

    Maximizes E[min(ratio * A, clip(ratio) * A)] + entropy_coef * entropy,
    minimizes value_coef * MSE(V, returns). Diagnostics are evaluated on the
    full batch before each epoch (so the first entry has clip fraction 0 on a
    fresh batch) and once more after the final epoch. A non-finite loss or
    gradient aborts the update and restores both networks.
    """
    policy_snapshot = policy.copy()
    value_snapshot = value_net.copy()
    n = batch.observations.shape[0]
    diagnostics = []
    try:
        for arr in (batch.advantages, batch.returns, batch.log_probs_old):
            if not np.isfinite(arr).all():
                raise TrainingFault("non-finite training batch")
        for _ in range(cfg.epochs_per_batch):
            diagnostics.append(_policy_diagnostics(policy, batch, cfg))
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                obs = batch.observations[idx]
                m = len(idx)

                grads = policy_gradient(policy, obs, batch.actions[idx],
                                        batch.advantages[idx],
                                        batch.log_probs_old[idx], cfg)
                nn.optimizer_step(policy, grads, policy_opt)

                v_pred, v_cache = nn.forward_cache(value_net, obs)
                v_err = v_pred[:, 0] - batch.returns[idx]
                if not np.isfinite(v_err).all():
                    raise TrainingFault("non-finite value predictions")
                grad_out = (2.0 * cfg.value_coef / m) * v_err[:, None]
                v_grads = nn.backward(value_net, v_cache, grad_out)
                nn.optimizer_step(value_net, v_grads, value_opt)
        diagnostics.append(_policy_diagnostics(policy, batch, cfg))
    except TrainingFault:
        for dst, src in zip(policy.arrays(), policy_snapshot.arrays()):
            dst[:] = src
        for dst, src in zip(value_net.arrays(), value_snapshot.arrays()):
            dst[:] = src
        return {"epochs": diagnostics, "aborted": True}
    return {"epochs": diagnostics, "aborted": False}


def scripted_reference(env_cfg: EnvConfig, target: float = IMITATION_TARGET) -> np.ndarray:
    """Constant action sequence whose zero-noise kick lands at ``target``."""
    value = required_constant_action(target, env_cfg)
    return np.full((env_cfg.horizon_T, env_cfg.action_dim), value)


def reference_final_distance(actions, env_cfg: EnvConfig) -> float:
    """Zero-noise kick outcome of an action sequence (for validation)."""
    kernel = launch_kernel(env_cfg)
    launch_sum = float((np.abs(actions[: env_cfg.contact_step]) * kernel).sum())
    return float(launch_distance(launch_sum, 0.0, env_cfg))


def bootstrap_expert(reference_actions, task: TaskContext, bc_epochs: int,
                     env_cfg: EnvConfig = None, spec: MlpSpec = None, seed: int = 0,
                     include_context: bool = False,
                     imitation_context: float = IMITATION_TARGET,
                     learning_rate: float = 1e-3,
                     log_std_init: float = nn.DEFAULT_LOG_STD_INIT) -> NetworkParams:
    """Imitation warm start: fit the policy mean to a scripted kick.

    Phase one of expert training. The reference must land within 1 m of the
    12 m imitation target in the zero-noise environment. log_std is frozen so
    the follow-up PPO phase keeps its exploration noise.
    """
    env_cfg = env_cfg if env_cfg is not None else EnvConfig()
    reference_actions = np.asarray(reference_actions, dtype=np.float64)
    if reference_actions.shape != (env_cfg.horizon_T, env_cfg.action_dim):
        raise ShapeError("reference action sequence has wrong shape")
    final = reference_final_distance(reference_actions, env_cfg)
    if abs(final - IMITATION_TARGET) > 1.0:
        raise ConfigError(
            f"scripted reference lands at {final:.2f} m, not {IMITATION_TARGET} +/- 1 m")
    obs_dim = 2 if include_context else 1
    if spec is None:
        spec = MlpSpec(obs_dim, EXPERT_HIDDEN, env_cfg.action_dim)
    if spec.input_dim != obs_dim:
        raise ConfigError("spec input_dim inconsistent with include_context")
    rng = np.random.default_rng(seed_sequence(seed, "bootstrap-init"))
    params = nn.init_params(spec, rng, with_log_std=True, log_std_init=log_std_init)
    counters = np.arange(env_cfg.horizon_T, dtype=np.float64) / env_cfg.horizon_T
    if include_context:
        ctx = (imitation_context - OMEGA_MIN) / OMEGA_SPAN
        obs = np.column_stack([counters, np.full_like(counters, ctx)])
    else:
        obs = counters[:, None]
    opt = nn.init_optimizer(params, "adam", learning_rate)
    for _ in range(bc_epochs):
        log_probs, grads = nn.gaussian_log_prob_backward(params, obs, reference_actions)
        # minimize NLL of the reference actions; keep exploration noise fixed
        grads = grads.scale(-1.0 / len(obs))
        grads.log_std = np.zeros_like(params.log_std)
        nn.optimizer_step(params, grads, opt)
    return params


def train_expert(task: TaskContext, cfg: PpoConfig, env_cfg: EnvConfig, seed: int,
                 bootstrap_epochs: int = 500) -> ExpertPolicy:
    """Two-phase expert training: imitation warm start, then PPO."""
    if not isinstance(task, TaskContext):
        task = TaskContext(float(task))
    policy = bootstrap_expert(scripted_reference(env_cfg), task, bootstrap_epochs,
                              env_cfg=env_cfg, seed=seed,
                              log_std_init=cfg.log_std_init)
    value_spec = MlpSpec(1, VALUE_HIDDEN, 1)
    value_net = nn.init_params(
        value_spec, np.random.default_rng(seed_sequence(seed, "value-init")))
    policy_opt = nn.init_optimizer(policy, cfg.optimizer, cfg.learning_rate)
    value_opt = nn.init_optimizer(value_net, cfg.optimizer, cfg.learning_rate)
    episodes_per_batch = max(1, -(-cfg.steps_per_batch // env_cfg.horizon_T))
    timesteps = 0
    iteration = 0
    curve = []
    flags = set()
    while timesteps < cfg.total_timesteps:
        omegas = np.full(episodes_per_batch, task.target_distance)
        batch = collect_batch(policy, value_net, cfg, env_cfg, omegas,
                              seed_sequence(seed, "rollout", iteration))
        update_rng = np.random.default_rng(seed_sequence(seed, "update", iteration))
        result = ppo_update(policy, value_net, batch, cfg, policy_opt, value_opt,
                            update_rng)
        if result["aborted"]:
            flags.add("non-finite-update-restored")
        timesteps += episodes_per_batch * env_cfg.horizon_T
        curve.append({"timesteps": timesteps, "mean_return": batch.mean_return,
                      "mean_final_error": batch.mean_final_error})
        iteration += 1
    if curve:
        final_mean_return = curve[-1]["mean_return"]
        if final_mean_return <= curve[0]["mean_return"] and len(curve) > 1:
            flags.add("no-improvement")
    else:
        final_mean_return = float("nan")
    return ExpertPolicy(task=task, params=policy, seed=seed, timesteps=timesteps,
                        final_mean_return=final_mean_return, curve=curve,
                        flags=tuple(sorted(flags)))


@dataclass
class SeedCurve:
    seed: int
    steps: list
    mean_returns: list
    episode_returns: list  # one array of per-episode returns per curve point


@dataclass
class BaselineResult:
    curves: list
    policies: list


def train_multitask_baseline(cfg: PpoConfig, env_cfg: EnvConfig, seeds,
                             train_omegas, hidden_layers=(128, 128, 128, 128),
                             bootstrap_epochs: int = 500) -> BaselineResult:
    """Context-conditioned PPO with a freshly drawn task every episode.

    Mirrors the contextual meta-policy's interface: the policy sees the
    normalized target alongside the counter. Warm-started by imitating the
    12 m kick at a fixed context input.
    """
    if len(seeds) == 0:
        raise ConfigError("at least one seed required")
    train_omegas = np.asarray(train_omegas, dtype=np.float64)
    curves = []
    policies = []
    for seed in seeds:
        spec = MlpSpec(2, tuple(hidden_layers), env_cfg.action_dim)
        policy = bootstrap_expert(scripted_reference(env_cfg), TaskContext(IMITATION_TARGET),
                                  bootstrap_epochs, env_cfg=env_cfg, spec=spec, seed=seed,
                                  include_context=True, log_std_init=cfg.log_std_init)
        value_net = nn.init_params(
            MlpSpec(2, VALUE_HIDDEN, 1),
            np.random.default_rng(seed_sequence(seed, "baseline-value-init")))
        policy_opt = nn.init_optimizer(policy, cfg.optimizer, cfg.learning_rate)
        value_opt = nn.init_optimizer(value_net, cfg.optimizer, cfg.learning_rate)
        episodes_per_batch = max(1, -(-cfg.steps_per_batch // env_cfg.horizon_T))
        timesteps = 0
        iteration = 0
        curve = SeedCurve(seed=seed, steps=[], mean_returns=[], episode_returns=[])
        # curve point at timestep 0: the warm-started policy before any update
        init_task_rng = np.random.default_rng(seed_sequence(seed, "task-draw-init"))
        init_omegas = train_omegas[init_task_rng.integers(0, len(train_omegas),
                                                          size=episodes_per_batch)]
        env_rngs, policy_rngs = episode_rngs(
            seed_sequence(seed, "baseline-rollout-init"), episodes_per_batch)
        init_rollouts = rollout_episodes(policy, env_cfg, init_omegas, env_rngs,
                                         policy_rngs, include_context=True)
        curve.steps.append(0)
        curve.mean_returns.append(float(init_rollouts.episode_returns().mean()))
        curve.episode_returns.append(init_rollouts.episode_returns())
        while timesteps < cfg.total_timesteps:
            task_rng = np.random.default_rng(seed_sequence(seed, "task-draw", iteration))
            omegas = train_omegas[task_rng.integers(0, len(train_omegas),
                                                    size=episodes_per_batch)]
            batch = collect_batch(policy, value_net, cfg, env_cfg, omegas,
                                  seed_sequence(seed, "baseline-rollout", iteration),
                                  include_context=True)
            update_rng = np.random.default_rng(
                seed_sequence(seed, "baseline-update", iteration))
            ppo_update(policy, value_net, batch, cfg, policy_opt, value_opt, update_rng)
            timesteps += episodes_per_batch * env_cfg.horizon_T
            returns = batch.rewards.reshape(episodes_per_batch, -1).sum(axis=1)
            curve.steps.append(timesteps)
            curve.mean_returns.append(batch.mean_return)
            curve.episode_returns.append(returns)
            iteration += 1
        curves.append(curve)
        policies.append(policy)
    return BaselineResult(curves=curves, policies=policies)
