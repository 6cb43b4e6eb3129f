"""Experiment configuration: JSON schema, presets, seed streams and context building."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .darcy import ForwardModel
from .errors import ConfigError
from .grid import BoundaryConditions, build_grid, sample_observation_nodes
from .random_field import CovarianceSpec, KLBasis, build_kl_basis
from .rare_events import ShiftSettings
from .training import TrainConfig


@dataclass(frozen=True)
class GridConfig:
    nx: int = 26
    ny: int = 26
    lx: float = 200.0
    ly: float = 200.0


@dataclass(frozen=True)
class BcConfig:
    left: float = 10.0
    right: float = 0.0
    top: float = 0.5
    bottom: float = 0.0


@dataclass(frozen=True)
class CovarianceConfig:
    kernel: str = "exponential"
    variance: float = 1.0
    corr_length: float = 100.0


@dataclass(frozen=True)
class SizesConfig:
    train: int = 2000
    validation: int = 100
    test: int = 200


@dataclass(frozen=True)
class ScenarioConfig:
    names: tuple = ("LLL", "LLS", "LSL", "LSS", "SLL", "SLS", "SSL", "SSS")
    train_sizes: tuple = (2000, 500)
    obs_counts: tuple = (200, 50)
    corr_lengths: tuple = (100.0, 10.0)


@dataclass(frozen=True)
class RareConfig:
    critical_x: float = 150.0
    critical_y: float = 150.0
    critical_node: typing.Optional[int] = None
    quantile: float = 0.01
    threshold: typing.Optional[float] = None
    n_bruteforce: int = 1000
    n_train: int = 500
    n_validation: int = 20
    n_test: int = 100
    draw_batch: int = 500
    max_draws: int = 200_000
    shift: ShiftSettings = ShiftSettings()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    solver: str = "auto"
    grid: GridConfig = GridConfig()
    bc: BcConfig = BcConfig()
    covariance: CovarianceConfig = CovarianceConfig()
    n_modes: int = 20
    mean_log_k: float = 0.0
    n_obs: int = 200
    obs_seed: int = 1
    train: TrainConfig = TrainConfig(n_iterations=500)
    sizes: SizesConfig = SizesConfig()
    scenarios: ScenarioConfig = ScenarioConfig()
    rare: RareConfig = RareConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=list)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "desk": {},
    "paper": {
        "out_dir": "runs/paper",
        "grid": {"nx": 51, "ny": 51},
        "n_modes": 200,
        "train": {"n_iterations": 10000},
        "sizes": {"train": 50000, "validation": 200, "test": 1000},
        "scenarios": {"train_sizes": [50000, 5000]},
        "rare": {"n_bruteforce": 10000, "n_train": 5000, "n_validation": 200, "n_test": 1000},
    },
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, path)
        elif hint is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = _coerce(hint, value, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(hint, value, path):
    optional = typing.get_origin(hint) is typing.Union
    if optional:
        if value is None:
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if hint is str and isinstance(value, str):
        return value
    raise ConfigError(f"{path}: expected {hint.__name__}, got {value!r}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(data: dict, preset: str | None = "desk") -> ExperimentConfig:
    """Overlay ``data`` on a preset and validate; unknown keys are rejected."""
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = asdict(ExperimentConfig()) if preset is None else _merge(asdict(ExperimentConfig()), PRESETS[preset])
    base = json.loads(json.dumps(base, default=list))
    cfg = _build(ExperimentConfig, _merge(base, data), "")
    validate(cfg)
    return cfg


def load_config(path=None, preset: str | None = "desk") -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, preset)


def validate(cfg: ExperimentConfig) -> None:
    g = cfg.grid
    try:
        grid = build_grid(g.nx, g.ny, g.lx, g.ly)
        BoundaryConditions(**asdict(cfg.bc))
        CovarianceSpec(cfg.covariance.variance, cfg.covariance.corr_length, cfg.covariance.kernel)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 1 <= cfg.n_modes <= grid.n_nodes:
        raise ConfigError(f"n_modes={cfg.n_modes} must lie in [1, {grid.n_nodes}]")
    obs_counts = [cfg.n_obs, *cfg.scenarios.obs_counts]
    if any(not 1 <= n <= grid.n_interior for n in obs_counts):
        raise ConfigError(f"observation counts {obs_counts} exceed {grid.n_interior} interior nodes")
    for name in ("train", "validation", "test"):
        if getattr(cfg.sizes, name) < 1:
            raise ConfigError(f"sizes.{name} must be positive")
    sc = cfg.scenarios
    if len(sc.train_sizes) != 2 or len(sc.obs_counts) != 2 or len(sc.corr_lengths) != 2:
        raise ConfigError("scenario factor lists need exactly (large, small) entries")
    for name in sc.names:
        if len(name) != 3 or set(name) - set("LS"):
            raise ConfigError(f"bad scenario name {name!r}")
    r = cfg.rare
    if not 0 < r.quantile < 1:
        raise ConfigError("rare.quantile must be in (0, 1)")
    if r.n_bruteforce * r.quantile < 1:
        raise ConfigError("rare.n_bruteforce * rare.quantile must be at least 1")
    if r.critical_node is not None and not (0 <= r.critical_node < grid.n_nodes and not grid.is_boundary()[r.critical_node]):
        raise ConfigError(f"rare.critical_node {r.critical_node} is not an interior node")
    if cfg.solver not in ("auto", "cholesky", "cg"):
        raise ConfigError(f"solver must be auto, cholesky or cg, got {cfg.solver!r}")


def derive_seed(master: int, *stream) -> int:
    """Independent 63-bit seed for a named stream; insensitive to call order."""
    key = tuple(zlib.crc32(str(s).encode()) for s in stream)
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=key)
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def build_basis(cfg: ExperimentConfig, corr_length: float | None = None) -> KLBasis:
    g = cfg.grid
    spec = CovarianceSpec(
        cfg.covariance.variance,
        cfg.covariance.corr_length if corr_length is None else corr_length,
        cfg.covariance.kernel,
    )
    return build_kl_basis(build_grid(g.nx, g.ny, g.lx, g.ly), spec, cfg.n_modes, cfg.mean_log_k)


def build_context(cfg: ExperimentConfig, basis: KLBasis | None = None, n_obs: int | None = None) -> ForwardModel:
    g = cfg.grid
    grid = build_grid(g.nx, g.ny, g.lx, g.ly)
    if basis is None:
        basis = build_basis(cfg)
    obs = sample_observation_nodes(grid, cfg.n_obs if n_obs is None else n_obs, cfg.obs_seed)
    return ForwardModel(grid, basis, BoundaryConditions(**asdict(cfg.bc)), obs, cfg.solver)


def critical_node(cfg: ExperimentConfig) -> int:
    if cfg.rare.critical_node is not None:
        return cfg.rare.critical_node
    g = cfg.grid
    return build_grid(g.nx, g.ny, g.lx, g.ly).nearest_node(cfg.rare.critical_x, cfg.rare.critical_y)

