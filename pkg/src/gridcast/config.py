"""Run configuration: a strict YAML tree that round-trips losslessly.

The file mirrors the pipeline: top-level seed and output directory, a data
section (window geometry plus dataset sources with roles), the model and
training sections, and the evaluation section.  Unknown keys anywhere are
rejected with their full path, so typos fail loudly instead of silently
falling back to defaults.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .data import SYNTHETIC_FAMILIES
from .errors import ConfigError
from .model import ModelConfig

DATASET_ROLES = ("pretrain", "finetune", "zero_shot_target")


@dataclass(frozen=True)
class DatasetSpec:
    """One data source: either a container file or a synthetic recipe."""

    role: str = "pretrain"
    path: str = None
    family: str = None
    shape: tuple = None
    seed: int = 0
    steps_per_day: int = 24
    name: str = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in DATASET_ROLES:
            raise ConfigError(
                f"dataset role must be one of {DATASET_ROLES}, got {self.role!r}")
        if (self.path is None) == (self.family is None):
            raise ConfigError(
                "dataset needs exactly one of 'path' or 'family', got "
                f"path={self.path!r}, family={self.family!r}")
        if self.family is not None:
            if self.family not in SYNTHETIC_FAMILIES:
                raise ConfigError(
                    f"unknown synthetic family {self.family!r}; "
                    f"expected one of {SYNTHETIC_FAMILIES}")
            if self.shape is None or len(self.shape) != 4:
                raise ConfigError(
                    f"synthetic dataset needs a 4-entry shape, got {self.shape}")
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def label(self):
        if self.name:
            return self.name
        if self.family:
            return f"{self.family}-{self.seed}"
        import os
        return os.path.splitext(os.path.basename(self.path))[0]


@dataclass(frozen=True)
class DataConfig:
    l_h: int = 6
    k: int = 6
    n_period_days: int = 1
    datasets: tuple = ()

    def __post_init__(self):
        if self.l_h <= 0 or self.k <= 0:
            raise ConfigError(f"l_h and k must be positive, got {self.l_h}, {self.k}")
        if self.n_period_days < 0:
            raise ConfigError(f"n_period_days must be >= 0, got {self.n_period_days}")
        object.__setattr__(self, "datasets", tuple(self.datasets))

    def with_role(self, role):
        return [d for d in self.datasets if d.role == role]


@dataclass(frozen=True)
class TrainSection:
    """Training knobs; seed and window geometry are injected from above."""

    batch_size: int = 8
    max_steps: int = 1000
    lr_pretrain: float = 3e-4
    lr_finetune: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    squared_l2: bool = False
    mask_ratio: float = 0.5
    strategy_weights: dict = field(default_factory=lambda: {
        "random": 1.0, "tube": 1.0, "block": 1.0, "temporal": 1.0})
    extended_block_mask: bool = False
    val_every_epochs: int = 10
    val_max_windows: int = 32
    freeze_backbone: bool = False
    fraction: float = 1.0


@dataclass(frozen=True)
class EvalSection:
    protocols: tuple = ("short",)
    l_h_long: int = 64
    k_long: int = 64
    fractions: tuple = (0.01, 0.05, 0.10, 1.0)
    noise_levels: tuple = (0.001, 0.01, 0.1)
    baselines: bool = True

    def __post_init__(self):
        from .evaluation import PROTOCOLS
        object.__setattr__(self, "protocols", tuple(self.protocols))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "noise_levels",
                           tuple(float(x) for x in self.noise_levels))
        bad = [p for p in self.protocols if p not in PROTOCOLS]
        if bad:
            raise ConfigError(f"unknown protocols {bad}; expected subset of {PROTOCOLS}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self):
        """The runtime TrainConfig with seed and geometry injected."""
        from .training import TrainConfig
        kv = dataclasses.asdict(self.train)
        kv.pop("fraction")
        return TrainConfig(seed=self.seed, l_h=self.data.l_h, k=self.data.k,
                           n_period_days=self.data.n_period_days, **kv)


# ---------------------------------------------------------------------------
# strict dict <-> dataclass conversion
# ---------------------------------------------------------------------------

_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainSection,
    "eval": EvalSection,
}


def _build(cls, mapping, path):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; allowed: {sorted(names)}")
    kv = {}
    for key, val in mapping.items():
        where = f"{path}.{key}"
        if key == "datasets":
            if not isinstance(val, list):
                raise ConfigError(f"{where}: expected a list of dataset entries")
            kv[key] = tuple(_build(DatasetSpec, item, f"{where}[{i}]")
                            for i, item in enumerate(val))
        elif isinstance(val, list):
            kv[key] = tuple(val)
        else:
            kv[key] = val
    try:
        return cls(**kv)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(tree):
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(tree) - ({"seed", "out_dir"} | set(_SECTIONS)))
    if unknown:
        raise ConfigError(f"config: unknown top-level keys {unknown}")
    kv = {}
    if "seed" in tree:
        kv["seed"] = int(tree["seed"])
    if "out_dir" in tree:
        kv["out_dir"] = str(tree["out_dir"])
    for section, cls in _SECTIONS.items():
        if section in tree:
            if cls is ModelConfig:
                if not isinstance(tree[section], dict):
                    raise ConfigError(f"{section}: expected a mapping")
                names = {f.name for f in dataclasses.fields(ModelConfig)}
                unknown = sorted(set(tree[section]) - names)
                if unknown:
                    raise ConfigError(f"{section}: unknown keys {unknown}")
                try:
                    kv[section] = ModelConfig.from_dict(tree[section])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{section}: {exc}") from exc
            else:
                kv[section] = _build(cls, tree[section], section)
    return RunConfig(**kv)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {k: _plain(v) for k, v in dataclasses.asdict(value).items()
                if v is not None}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg):
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "data": _plain(cfg.data),
        "model": _plain(cfg.model),
        "train": _plain(cfg.train),
        "eval": _plain(cfg.eval),
    }


def load_config(path):
    with open(path) as fh:
        try:
            tree = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if tree is None:
        tree = {}
    return config_from_dict(tree)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
