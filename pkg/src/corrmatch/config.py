"""Run configuration: a flat JSON object mapped onto :class:`RunConfig`."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError

THRESHOLD_MODES = ("fixed", "relaxed_global", "relaxed_per_class")
REQUIRED_KEYS = ("seed",)
SEED_ENV = "CORRMATCH_SEED"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    # dataset
    n_labeled: int = 4
    n_unlabeled: int = 256
    n_val: int = 64
    H: int = 32
    W: int = 32
    Cin: int = 3
    K: int = 4
    noise_std: float = 0.08
    shapes_min: int = 1
    shapes_max: int = 3
    dataset_path: str | None = None
    # model
    D: int = 16
    hidden: int = 16
    # objective
    lambda1: float = 0.5
    lambda2: float = 0.25
    lambda3: float = 0.25
    threshold_mode: str = "relaxed_global"
    fixed_threshold: float = 0.95
    tau0: float = 0.85
    ema_momentum: float = 0.999
    use_soft_loss: bool = True
    use_corr_loss: bool = True
    use_feature_perturb: bool = True
    use_cutmix: bool = True
    supervised_only: bool = False
    # augmentation
    scale_min: float = 0.5
    scale_max: float = 2.0
    # optimization
    lr0: float = 0.05
    momentum: float = 0.9
    total_iters: int = 3000
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    # logging
    eval_interval: int = 250
    out_dir: str = "runs/default"
    plots: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "lr0"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(f"threshold_mode must be one of {THRESHOLD_MODES}, got {self.threshold_mode!r}")
        for name in ("fixed_threshold", "tau0"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.D < 1 or self.hidden < 1:
            raise ConfigError("D and hidden must be >= 1")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError(f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")
        self.dataset_spec().validate()

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            seed=self.seed,
            n_labeled=self.n_labeled,
            n_unlabeled=self.n_unlabeled,
            H=self.H,
            W=self.W,
            Cin=self.Cin,
            K=self.K,
            noise_std=self.noise_std,
            shapes_min=self.shapes_min,
            shapes_max=self.shapes_max,
        )

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @property
    def unlabeled_active(self) -> bool:
        return not self.supervised_only and any(w > 0 for w in self.weights)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, value, typ):
    bad = ConfigError(f"config key {name!r} has invalid value {value!r}")
    if typ in ("int",):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if typ in ("float",):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if typ == "bool":
        if not isinstance(value, bool):
            raise bad
        return value
    if typ == "str":
        if not isinstance(value, str):
            raise bad
        return value
    if typ == "str | None":
        if value is not None and not isinstance(value, str):
            raise bad
        return value
    return value


def from_dict(raw: dict, env: dict | None = None) -> RunConfig:
    """Build a config, rejecting unknown keys and naming missing required ones.

    ``CORRMATCH_SEED`` in ``env`` (default: the process environment) overrides the seed.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    env = os.environ if env is None else env
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = dict(raw)
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required config key: {key!r}")
    out = {}
    for key, value in values.items():
        out[key] = _coerce(key, value, str(known[key].type))
    return RunConfig(**out)


def load_config(path, env: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(raw, env)
