"""Synthetic parameterized kick environment.

An episodic continuous-control task with delayed reward. The agent acts for
``contact_step`` steps; a fixed positive kernel turns the rectified action
trace into a launch statistic, softplus and a gain map it to the kicked
ball's travel distance, with multiplicative Gaussian noise applied once at
contact. The ball then flies along a short linear path and rests; reward
after contact is the scaled negative absolute distance between the ball and
the target.

The target distance ``omega`` in [7, 18] meters is the task context. Expert
policies observe only the normalized step counter; contextual policies also
receive the normalized target.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, ContextRangeError, LifecycleError, ShapeError

OMEGA_MIN = 7.0
OMEGA_MAX = 18.0
OMEGA_SPAN = OMEGA_MAX - OMEGA_MIN
BALL_START = 0.2


@dataclass(frozen=True)
class TaskContext:
    """Scalar task descriptor: how far the kicked ball should travel."""

    target_distance: float

    def __post_init__(self):
        d = float(self.target_distance)
        if not np.isfinite(d) or not (OMEGA_MIN <= d <= OMEGA_MAX):
            raise ContextRangeError(
                f"target_distance {self.target_distance!r} outside "
                f"[{OMEGA_MIN}, {OMEGA_MAX}]"
            )


@dataclass(frozen=True)
class EnvConfig:
    horizon_T: int = 40
    contact_step: int = 25
    action_dim: int = 6
    noise_std: float = 0.02
    reward_scale: float = 0.1
    distance_gain: float = 8.0
    # cap on the kick outcome; bounds every reward
    max_distance: float = 60.0
    # steps of linear ball flight after contact before it rests
    flight_steps: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if self.horizon_T <= 0 or self.contact_step <= 0:
            raise ConfigError("horizon_T and contact_step must be positive")
        if self.contact_step >= self.horizon_T:
            raise ConfigError(
                f"contact_step {self.contact_step} must be < horizon_T {self.horizon_T}"
            )
        if self.action_dim <= 0:
            raise ConfigError("action_dim must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.reward_scale <= 0 or self.distance_gain <= 0:
            raise ConfigError("reward_scale and distance_gain must be positive")
        if self.max_distance < OMEGA_MAX:
            raise ConfigError("max_distance must cover the task interval")
        if self.flight_steps <= 0:
            raise ConfigError("flight_steps must be positive")


@dataclass(frozen=True)
class EnvState:
    counter: int
    ball_position: float
    launched: bool
    # defined once launched; the noisy kick outcome
    final_distance: Optional[float] = None
    # running kernel-weighted sum of |action| entries
    launch_sum: float = 0.0


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool


@dataclass
class Trajectory:
    """One complete episode: per-step observations, actions, rewards."""

    task: TaskContext
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return self.actions.shape[0]

    def steps(self) -> Iterator[tuple]:
        for i in range(len(self)):
            yield self.observations[i], self.actions[i], float(self.rewards[i])


def launch_kernel(cfg: EnvConfig) -> np.ndarray:
    """Fixed positive weights over (pre-contact step, action dim), summing to 1.

    A smooth bump over time, flat across action dimensions. Strictly positive
    so every action entry influences the kick, and normalized so a constant
    action vector with value v yields a launch sum of exactly v.
    """
    t = np.arange(cfg.contact_step)
    profile = 0.1 + np.sin(np.pi * (t + 0.5) / cfg.contact_step)
    kernel = np.outer(profile, np.ones(cfg.action_dim))
    return kernel / kernel.sum()


def softplus(x):
    return np.logaddexp(0.0, x)


def launch_distance(launch_sum, noise, cfg: EnvConfig):
    """Map a launch statistic (plus multiplicative noise) to travel distance."""
    raw = cfg.distance_gain * softplus(launch_sum) * (1.0 + noise)
    return np.clip(raw, 0.0, cfg.max_distance)


def ball_position_at(counter, final_distance, cfg: EnvConfig):
    """Ball position as a function of the step counter, vectorized.

    Resting at BALL_START through contact, then linear flight over
    flight_steps steps, then resting at final_distance.
    """
    frac = np.clip((counter - cfg.contact_step) / cfg.flight_steps, 0.0, 1.0)
    return BALL_START + (final_distance - BALL_START) * frac


def required_constant_action(target: float, cfg: EnvConfig) -> float:
    """Entry value of the constant action vector whose zero-noise kick lands
    exactly at ``target``.

    Inverts the launch map: the kernel sums to 1, so a constant trace with
    value v has launch sum v, and softplus is inverted by log(expm1(.)).
    """
    if not (0.0 < target < cfg.max_distance):
        raise ConfigError(f"target {target} not reachable")
    return float(np.log(np.expm1(target / cfg.distance_gain)))


def observation(state: EnvState, cfg: EnvConfig, task: TaskContext = None,
                include_context: bool = False) -> np.ndarray:
    """Policy input: [counter/T], plus the normalized target when contextual."""
    parts = [state.counter / cfg.horizon_T]
    if include_context:
        if task is None:
            raise ShapeError("contextual observation requires a task")
        parts.append((task.target_distance - OMEGA_MIN) / OMEGA_SPAN)
    return np.asarray(parts, dtype=np.float64)


def context_observation(counter, omega, cfg: EnvConfig) -> np.ndarray:
    """Vectorized contextual observation for batches of episodes."""
    counter = np.asarray(counter, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    return np.stack(np.broadcast_arrays(
        counter / cfg.horizon_T, (omega - OMEGA_MIN) / OMEGA_SPAN), axis=-1)


class KickEnv:
    """Episode interface around the launch map.

    States are immutable; ``step`` returns a fresh state. Noise is drawn from
    the per-instance generator (seeded at reset) unless an explicit generator
    is passed, which is how evaluation shares noise streams across policies.
    """

    def __init__(self, cfg: EnvConfig = None):
        self.cfg = cfg if cfg is not None else EnvConfig()
        self.kernel = launch_kernel(self.cfg)
        self._rng = np.random.default_rng(self.cfg.rng_seed)
        self._task: Optional[TaskContext] = None

    @property
    def task(self) -> Optional[TaskContext]:
        return self._task

    def reset(self, task: TaskContext, seed: int = None) -> EnvState:
        if not isinstance(task, TaskContext):
            task = TaskContext(float(task))
        self._task = task
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        return EnvState(counter=0, ball_position=BALL_START, launched=False)

    def step(self, state: EnvState, action, rng: np.random.Generator = None) -> StepResult:
        cfg = self.cfg
        if self._task is None:
            raise LifecycleError("step before reset")
        if state.counter >= cfg.horizon_T:
            raise LifecycleError(f"episode finished at counter {state.counter}")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (cfg.action_dim,):
            raise ShapeError(f"action shape {action.shape} != ({cfg.action_dim},)")

        counter = state.counter + 1
        launch_sum = state.launch_sum
        final = state.final_distance
        if state.counter < cfg.contact_step:
            launch_sum = launch_sum + float(self.kernel[state.counter] @ np.abs(action))
            if counter == cfg.contact_step:
                gen = rng if rng is not None else self._rng
                noise = gen.normal(0.0, cfg.noise_std) if cfg.noise_std > 0 else 0.0
                final = float(launch_distance(launch_sum, noise, cfg))
        launched = counter >= cfg.contact_step
        if launched:
            position = float(ball_position_at(counter, final, cfg))
            reward = -cfg.reward_scale * abs(position - self._task.target_distance)
        else:
            position = BALL_START
            reward = 0.0
        next_state = EnvState(counter=counter, ball_position=position,
                              launched=launched, final_distance=final,
                              launch_sum=launch_sum)
        return StepResult(next_state=next_state, reward=reward,
                          done=counter == cfg.horizon_T)

    def rollout(self, task: TaskContext, policy_fn, seed: int = None) -> Trajectory:
        """Run one full episode, querying ``policy_fn(observation) -> action``.

        Observations are the expert view (no context); contextual rollouts go
        through the vectorized engine instead.
        """
        state = self.reset(task, seed=seed)
        obs_list, act_list, rew_list = [], [], []
        while state.counter < self.cfg.horizon_T:
            obs = observation(state, self.cfg)
            action = np.asarray(policy_fn(obs), dtype=np.float64)
            result = self.step(state, action)
            obs_list.append(obs)
            act_list.append(action)
            rew_list.append(result.reward)
            state = result.next_state
        return Trajectory(task=self._task,
                          observations=np.asarray(obs_list),
                          actions=np.asarray(act_list),
                          rewards=np.asarray(rew_list))


def save_trajectories(path, trajectories: list, episode_offset: int = 0) -> None:
    """Write trajectories as line-delimited JSON, one step per record."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep, traj in enumerate(trajectories, start=episode_offset):
            omega = traj.task.target_distance
            for counter, (obs, action, reward) in enumerate(traj.steps()):
                record = {
                    "episode": ep,
                    "omega": omega,
                    "counter": counter,
                    "observation": obs.tolist(),
                    "action": action.tolist(),
                    "reward": reward,
                }
                fh.write(json.dumps(record) + "\n")


def load_trajectories(path) -> list:
    """Inverse of save_trajectories; groups records back into episodes."""
    episodes: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            episodes.setdefault(rec["episode"], []).append(rec)
    out = []
    for ep in sorted(episodes):
        records = sorted(episodes[ep], key=lambda r: r["counter"])
        task = TaskContext(records[0]["omega"])
        obs = np.asarray([r["observation"] for r in records], dtype=np.float64)
        act = np.asarray([r["action"] for r in records], dtype=np.float64)
        rew = np.asarray([r["reward"] for r in records], dtype=np.float64)
        out.append(Trajectory(task=task, observations=obs, actions=act, rewards=rew))
    return out
