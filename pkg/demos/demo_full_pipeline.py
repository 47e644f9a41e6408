"""Drive the whole pipeline through the command line interface.

Runs every stage at a reduced budget: three experts, one distilled
meta-policy, context filtering, the evaluation reports, and the
budget-matched multi-task baseline. Artifacts land in ./demo-runs under a
directory named by the configuration hash; rerunning skips the experts
that already exist.
"""

import dataclasses
import os
import time

from bumps.cli import main as bumps_cli
from bumps.config import (BaselineSection, BcConfig, MetaSection, RunConfig,
                          save_config)
from bumps.manifest import run_id_for
from bumps.meta import TaskGrids
from bumps.rl import PpoConfig


def run(args):
    code = bumps_cli(args)
    if code != 0:
        raise SystemExit(f"stage {args} exited with {code}")


def main():
    cfg = RunConfig(
        ppo=dataclasses.replace(PpoConfig(), total_timesteps=60_000),
        grids=TaskGrids(meta_train=(9.0, 10.0, 11.0),
                        meta_test=(9.25, 9.75, 10.25, 10.75)),
        meta=MetaSection(presets=("4x256",), bc=BcConfig(epochs=1000)),
        baseline=BaselineSection(hidden_layers=(64, 64)),
        seeds=(0, 1),
        output_dir="demo-runs",
    )
    cfg_path = "demo-runs/pipeline.yaml"
    os.makedirs("demo-runs", exist_ok=True)
    save_config(cfg_path, cfg)
    print(f"run id {run_id_for(cfg)} "
          f"(baseline budget {cfg.baseline_budget()} steps/seed)\n")

    stages = (["train-experts"], ["build-dataset"], ["meta-train"],
              ["filter"], ["evaluate"], ["baseline"])
    for stage in stages:
        start = time.time()
        print(f"--- {' '.join(stage)}")
        run(["--config", cfg_path] + stage)
        print(f"    ({time.time() - start:.0f}s)\n")

    run_root = os.path.join("demo-runs", run_id_for(cfg))
    print("artifacts:")
    for base, _, files in sorted(os.walk(run_root)):
        for name in sorted(files):
            rel = os.path.relpath(os.path.join(base, name), run_root)
            print(f"  {rel}")


if __name__ == "__main__":
    main()
