"""A tour of the synthetic kick environment.

The episode is a fixed-length countdown: the policy wiggles its six
actuators, at the contact step the accumulated launch statistic turns into
a ball distance (with multiplicative contact noise), the ball flies for a
few steps and rests. Rewards before contact are zero, afterwards they
penalize the gap between the ball and the target.
"""

import numpy as np

from bumps.env import (EnvConfig, KickEnv, TaskContext,
                       required_constant_action)


def run_episode(env, task, action, seed):
    state = env.reset(task, seed=seed)
    total = 0.0
    trace = []
    while state.counter < env.cfg.horizon_T:
        result = env.step(state, action)
        state = result.next_state
        total += result.reward
        trace.append((state.counter, state.ball_position, result.reward))
    return state, total, trace


def main():
    cfg = EnvConfig()
    task = TaskContext(12.0)
    env = KickEnv(cfg)
    print(f"task: kick the ball {task.target_distance} m")
    print(f"episode length {cfg.horizon_T}, contact at step "
          f"{cfg.contact_step}, {cfg.action_dim} actuators")

    # the env is exactly solvable: a constant per-step action value whose
    # noise-free kick lands on the target
    a_star = required_constant_action(task.target_distance, cfg)
    print(f"\nanalytic constant action for 12 m: {a_star:.6f}")

    action = np.full(cfg.action_dim, a_star)
    state, total, trace = run_episode(env, task, action, seed=7)
    for counter, ball, reward in trace:
        if counter in (cfg.contact_step - 1, cfg.contact_step,
                       cfg.contact_step + cfg.flight_steps, cfg.horizon_T):
            print(f"  step {counter:2d}: ball {ball:7.3f}, "
                  f"reward {reward:8.4f}")
    print(f"episode return {total:.3f}, final ball distance "
          f"{state.final_distance:.4f} (contact noise moved it off 12.0)")

    # same action, many episodes: only the contact noise varies
    finals = [run_episode(env, task, action, seed=100 + e)[0].final_distance
              for e in range(500)]
    finals = np.array(finals)
    print(f"\n500 episodes of the exact action: mean final "
          f"{finals.mean():.3f}, std {finals.std():.3f} "
          f"(2% multiplicative contact noise)")

    # scaling the action trace up always kicks farther
    quiet = KickEnv(EnvConfig(noise_std=0.0))
    for scale in (0.5, 1.0, 1.5):
        state, _, _ = run_episode(quiet, task, action * scale, seed=0)
        print(f"action x{scale}: noise-free distance "
              f"{state.final_distance:.3f}")


if __name__ == "__main__":
    main()
