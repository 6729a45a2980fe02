"""Run configuration: a nested YAML document mapped onto dataclasses.

Unknown keys and wrongly typed values raise :class:`ConfigurationError`
naming the dotted field path, e.g. ``training.iterations``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import NoiseSchedule, TrainConfig
from .dynamics import DynamicsConfig
from .errors import ConfigurationError, StormsteerError
from .fields import GridSpec
from .transfer import TransferTrainConfig

STAGES = ("generate", "train", "catalog", "intervene", "evaluate")


@dataclass
class GridSection:
    height: int = 24
    width: int = 24
    levels: int = 3


@dataclass
class DynamicsSection:
    grid: GridSection = field(default_factory=GridSection)
    params: dict = field(default_factory=dict)  # overrides for DynamicsConfig fields


@dataclass
class DataSection:
    years: int = 16


@dataclass
class ScheduleSection:
    n_steps: int = 20
    sigma_max: float = 80.0
    sigma_min: float = 0.03


@dataclass
class CatalogSection:
    percentile: float = 99.0
    dedup_steps: int = 4
    dedup_radius: float = 6.0
    half_extent: int = 2
    predictability_lead: int = 2


@dataclass
class GuidanceSection:
    multipliers: list = field(default_factory=lambda: [1.0, 2.5, 5.0, 7.5, 10.0])
    base_fraction: float = 0.01
    lambdas: typing.Optional[list] = None  # explicit grid; skips calibration
    T: int = 2
    n: int = 2
    skip_final: bool = True


@dataclass
class AttackSection:
    epsilon: float = 0.07
    eta: typing.Optional[float] = None
    K: int = 50


@dataclass
class EvaluationSection:
    latent_tail_steps: int = 5
    pca_events: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    workdir: str = "runs/default"
    workers: int = 1
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferTrainConfig = field(default_factory=TransferTrainConfig)
    catalog: CatalogSection = field(default_factory=CatalogSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # ------------------------------------------------------------ derived objects

    def dynamics_config(self) -> DynamicsConfig:
        g = self.dynamics.grid
        spec = GridSpec.default(g.height, g.width, g.levels)
        params = dict(self.dynamics.params)
        if "hotspot" in params:
            params["hotspot"] = tuple(params["hotspot"])
        try:
            return DynamicsConfig(spec=spec, seed=self.seed, **params)
        except TypeError as exc:
            raise ConfigurationError(f"dynamics.params: {exc}") from None
        except StormsteerError as exc:
            raise ConfigurationError(f"dynamics.params: {exc}") from None

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        try:
            return NoiseSchedule.geometric(s.n_steps, s.sigma_max, s.sigma_min)
        except StormsteerError as exc:
            raise ConfigurationError(f"schedule: {exc}") from None

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.training, seed=self.seed)

    def transfer_config(self) -> TransferTrainConfig:
        return dataclasses.replace(self.transfer, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def stage_hashes(self) -> dict[str, str]:
        """Chained content hashes: each stage covers its own block plus everything upstream."""
        d = self.to_dict()
        blocks = {
            "generate": {"seed": self.seed, "dynamics": d["dynamics"], "data": d["data"]},
            "train": {"schedule": d["schedule"], "training": d["training"], "transfer": d["transfer"]},
            "catalog": {"catalog": d["catalog"]},
            "intervene": {"guidance": d["guidance"], "attack": d["attack"]},
            "evaluate": {"evaluation": d["evaluation"]},
        }
        out, prev = {}, ""
        for stage in STAGES:
            raw = json.dumps({"upstream": prev, **blocks[stage]}, sort_keys=True).encode()
            prev = hashlib.sha256(raw).hexdigest()[:16]
            out[stage] = prev
        return out

    def validate(self) -> None:
        checks = [
            (self.data.years >= 2, "data.years", "must be at least 2"),
            (self.workers >= 1, "workers", "must be at least 1"),
            (self.training.iterations >= 1, "training.iterations", "must be positive"),
            (self.training.batch_size >= 1, "training.batch_size", "must be positive"),
            (self.training.hidden >= 1, "training.hidden", "must be positive"),
            (self.transfer.iterations >= 1, "transfer.iterations", "must be positive"),
            (0 < self.catalog.percentile <= 100, "catalog.percentile", "must lie in (0, 100]"),
            (self.catalog.half_extent >= 0, "catalog.half_extent", "must be nonnegative"),
            (self.catalog.predictability_lead >= 1, "catalog.predictability_lead", "must be at least 1"),
            (self.guidance.T >= 2, "guidance.T", "must be at least 2"),
            (1 <= self.guidance.n <= self.schedule.n_steps, "guidance.n", "must lie in [1, schedule.n_steps]"),
            (self.guidance.base_fraction > 0, "guidance.base_fraction", "must be positive"),
            (len(self.guidance.multipliers) >= 1, "guidance.multipliers", "must not be empty"),
            (all(m >= 0 for m in self.guidance.multipliers), "guidance.multipliers", "must be nonnegative"),
            (self.guidance.lambdas is None or all(x >= 0 for x in self.guidance.lambdas),
             "guidance.lambdas", "must be nonnegative"),
            (self.attack.epsilon > 0, "attack.epsilon", "must be positive"),
            (self.attack.eta is None or self.attack.eta > 0, "attack.eta", "must be positive"),
            (self.attack.K >= 0, "attack.K", "must be nonnegative"),
            (self.evaluation.latent_tail_steps >= 1, "evaluation.latent_tail_steps", "must be positive"),
        ]
        for ok, path, msg in checks:
            if not ok:
                raise ConfigurationError(f"{path}: {msg}")
        self.dynamics_config()
        self.noise_schedule()


def _check_type(value, tp, path):
    origin = typing.get_origin(tp)
    if tp is typing.Any:
        return value
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return [_check_type(v, float, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected a mapping, got {value!r}")
        return dict(value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    return value


def _build(cls, data, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or '<root>'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigurationError(f"{sub}: unknown field")
        kwargs[key] = _check_type(value, hints[key], sub)
    try:
        return cls(**kwargs)
    except StormsteerError as exc:
        raise ConfigurationError(f"{path or '<root>'}: {exc}") from None


def from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data or {})
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (or defaults if ``path`` is None) and apply CLI/env overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file {p} does not exist")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{p}: invalid YAML ({exc})") from None
    data = dict(data)
    env_workdir = os.environ.get("STORMSTEER_WORKDIR")
    if env_workdir:
        data["workdir"] = env_workdir
    env_threads = os.environ.get("STORMSTEER_THREADS")
    if env_threads:
        try:
            data["workers"] = int(env_threads)
        except ValueError:
            raise ConfigurationError(f"STORMSTEER_THREADS: expected an integer, got {env_threads!r}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
