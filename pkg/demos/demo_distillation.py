"""Distill a handful of experts into one contextual meta-policy.

Three experts are trained on neighboring targets, each contributes a
single deterministic trajectory, and the pooled records (tagged with the
task context) fit a Gaussian meta-policy by maximum likelihood. The
meta-policy is then asked for targets none of the experts ever saw.
"""

import dataclasses
import time

from bumps.env import EnvConfig, TaskContext
from bumps.evaluation import kick_statistics
from bumps.meta import (BcConfig, collect_rollouts,
                        contextualize_and_aggregate, dataset_loss,
                        meta_train)
from bumps.nn import MlpSpec, preset_hidden_layers
from bumps.rl import PpoConfig, train_expert


def main():
    env_cfg = EnvConfig()
    targets = [9.0, 10.0, 11.0]
    ppo_cfg = dataclasses.replace(PpoConfig(), total_timesteps=60_000)

    start = time.time()
    experts = [train_expert(TaskContext(w), ppo_cfg, env_cfg, seed=0)
               for w in targets]
    print(f"trained {len(experts)} experts in {time.time() - start:.0f}s "
          f"(targets {targets})")

    # one deterministic trajectory per expert, env noise still on
    trajectories = []
    for index, expert in enumerate(experts):
        trajectories += collect_rollouts(expert, expert.task, K=1,
                                         seed=(0, index), env_cfg=env_cfg)
    dataset = contextualize_and_aggregate(trajectories)
    print(f"dataset: {len(dataset)} records "
          f"({len(experts)} trajectories x {env_cfg.horizon_T} steps)")

    spec = MlpSpec(2, preset_hidden_layers("4x256"), env_cfg.action_dim)
    bc_cfg = BcConfig(epochs=800, seed=0)
    start = time.time()
    meta = meta_train(dataset, spec, bc_cfg)
    print(f"distilled in {time.time() - start:.0f}s: best loss "
          f"{meta.best_loss:.3f} at epoch {meta.best_epoch}")
    final_fit = dataset_loss(meta.params, dataset.contextual_inputs(),
                             dataset.actions)
    print(f"final dataset negative log likelihood {final_fit:.3f}\n")

    print("meta-policy asked for seen and unseen targets:")
    for omega in (9.0, 9.5, 10.0, 10.5, 11.0):
        seen = "seen  " if omega in targets else "unseen"
        stats = kick_statistics(meta.params, TaskContext(omega), N=100,
                                seed=2)
        print(f"  {omega:4.1f} m ({seen}): accuracy {stats.accuracy:.2f}, "
              f"mean error {stats.mean_error:.3f} m")


if __name__ == "__main__":
    main()
