"""One serializable configuration tree for the whole pipeline.

Two built-in profiles: the desk profile (default) runs every stage in
minutes on a laptop; the paper profile carries full-scale hyperparameters
and is only practical with serious compute.
"""

import json
from dataclasses import dataclass, field, fields

import yaml

from .env import EnvConfig
from .errors import ConfigError
from .meta import BcConfig, FilterConfig, TaskGrids
from .nn import PRESETS
from .rl import PpoConfig

PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class MetaSection:
    presets: tuple = ("4x256", "11x128")
    bc: BcConfig = field(default_factory=BcConfig)

    def __post_init__(self):
        if not self.presets:
            raise ConfigError("at least one meta preset required")
        for preset in self.presets:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
        if len(set(self.presets)) != len(self.presets):
            raise ConfigError("duplicate meta presets")


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 100
    threshold: float = 1.0
    confidence: float = 0.95
    resamples: int = 1000

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("eval episodes must be at least 1")
        if self.threshold <= 0:
            raise ConfigError("accuracy threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError("confidence must be in (0, 1)")
        if self.resamples < 1:
            raise ConfigError("resamples must be positive")


@dataclass(frozen=True)
class BaselineSection:
    hidden_layers: tuple = (128, 128, 128, 128)
    # None derives the budget: expert budget summed over the training grid,
    # divided by four (the sample-efficiency handicap)
    total_timesteps: int = None

    def __post_init__(self):
        if not self.hidden_layers or any(h < 1 for h in self.hidden_layers):
            raise ConfigError("hidden_layers must be positive integers")
        if self.total_timesteps is not None and self.total_timesteps < 0:
            raise ConfigError("total_timesteps must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    meta: MetaSection = field(default_factory=MetaSection)
    grids: TaskGrids = field(default_factory=TaskGrids.default)
    filter: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    seeds: tuple = (0, 1, 2)
    output_dir: str = "runs"
    rollouts_per_expert: int = 1
    bootstrap_epochs: int = 500

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate seeds")
        if self.rollouts_per_expert < 1:
            raise ConfigError("rollouts_per_expert must be at least 1")
        if self.bootstrap_epochs < 0:
            raise ConfigError("bootstrap_epochs must be non-negative")

    @property
    def master_seed(self):
        return self.seeds[0]

    def baseline_budget(self) -> int:
        if self.baseline.total_timesteps is not None:
            return self.baseline.total_timesteps
        return len(self.grids.meta_train) * self.ppo.total_timesteps // 4


def desk_config() -> RunConfig:
    return RunConfig()


def paper_config() -> RunConfig:
    """Published full-scale hyperparameters; only the env stays synthetic."""
    return RunConfig(
        ppo=PpoConfig(learning_rate=1e-6, steps_per_batch=4096,
                      minibatch_size=1024, epochs_per_batch=30,
                      total_timesteps=12_000_000),
        meta=MetaSection(bc=BcConfig(learning_rate=3e-6, epochs=150_000)),
        baseline=BaselineSection(hidden_layers=(256,) * 11),
        seeds=(0, 1, 2, 3, 4, 5),
    )


def default_config(profile: str = "desk") -> RunConfig:
    if profile == "desk":
        return desk_config()
    if profile == "paper":
        return paper_config()
    raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")


# ---------------------------------------------------------------------------
# serialization

def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def _section_to_dict(section) -> dict:
    return {f.name: _plain(getattr(section, f.name)) for f in fields(section)}


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "env": _section_to_dict(cfg.env),
        "ppo": _section_to_dict(cfg.ppo),
        "meta": {"presets": list(cfg.meta.presets),
                 "bc": _section_to_dict(cfg.meta.bc)},
        "grids": _section_to_dict(cfg.grids),
        "filter": _section_to_dict(cfg.filter),
        "eval": _section_to_dict(cfg.eval),
        "baseline": _section_to_dict(cfg.baseline),
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
        "rollouts_per_expert": cfg.rollouts_per_expert,
        "bootstrap_epochs": cfg.bootstrap_epochs,
    }


def _build_section(cls, data, name, tuple_fields=()):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kwargs = dict(data)
    for key in tuple_fields:
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad section {name!r}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    top_known = {"env", "ppo", "meta", "grids", "filter", "eval", "baseline",
                 "seeds", "output_dir", "rollouts_per_expert",
                 "bootstrap_epochs"}
    unknown = set(data) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    if "env" in data:
        kwargs["env"] = _build_section(EnvConfig, data["env"], "env")
    if "ppo" in data:
        kwargs["ppo"] = _build_section(PpoConfig, data["ppo"], "ppo")
    if "meta" in data:
        meta = data["meta"]
        if not isinstance(meta, dict) or set(meta) - {"presets", "bc"}:
            raise ConfigError("section 'meta' accepts keys presets and bc")
        meta_kwargs = {}
        if "presets" in meta:
            meta_kwargs["presets"] = tuple(meta["presets"])
        if "bc" in meta:
            meta_kwargs["bc"] = _build_section(BcConfig, meta["bc"], "meta.bc")
        kwargs["meta"] = MetaSection(**meta_kwargs)
    if "grids" in data:
        base = _section_to_dict(TaskGrids.default())
        if not isinstance(data["grids"], dict):
            raise ConfigError("section 'grids' must be a mapping")
        base.update(data["grids"])
        kwargs["grids"] = _build_section(TaskGrids, base, "grids",
                                         tuple_fields=("meta_train",
                                                       "meta_test"))
    if "filter" in data:
        kwargs["filter"] = _build_section(FilterConfig, data["filter"],
                                          "filter")
    if "eval" in data:
        kwargs["eval"] = _build_section(EvalSection, data["eval"], "eval")
    if "baseline" in data:
        kwargs["baseline"] = _build_section(BaselineSection, data["baseline"],
                                            "baseline",
                                            tuple_fields=("hidden_layers",))
    if "seeds" in data:
        kwargs["seeds"] = tuple(data["seeds"])
    for key in ("output_dir", "rollouts_per_expert", "bootstrap_epochs"):
        if key in data:
            kwargs[key] = data[key]
    return RunConfig(**kwargs)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True,
                       default_flow_style=False)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"unreadable configuration file: {exc}") from exc
    if data is None:
        return RunConfig()
    return config_from_dict(data)


def format_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def canonical_json(cfg: RunConfig) -> str:
    """Stable serialization for hashing. The output root does not change
    what an experiment computes, so it stays out of the identity."""
    data = config_to_dict(cfg)
    data.pop("output_dir")
    return json.dumps(data, sort_keys=True, separators=(",", ":"))
