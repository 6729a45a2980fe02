"""Gridded fields, channel bookkeeping, normalization and target regions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError

SURFACE = "surface"
PERTURBABLE_VARIABLES = ("temperature", "u_wind", "v_wind")
LEVEL_VARIABLES = ("temperature", "u_wind", "v_wind", "humidity")
PRECIPITATION = "precipitation"


@dataclass(frozen=True)
class Channel:
    name: str
    level: int | str
    perturbable: bool

    @property
    def label(self) -> str:
        if self.level == SURFACE:
            return self.name
        return f"{self.name}@{self.level}"


@dataclass(frozen=True)
class GridSpec:
    """Grid shape plus the ordered channel layout of a state tensor."""

    height: int
    width: int
    levels: int
    channels: tuple[Channel, ...]
    q_max: float = 3.0
    periodic_columns: bool = True
    periodic_rows: bool = False

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(f"grid must be at least 8x8, got {self.height}x{self.width}")
        if self.levels < 2:
            raise ConfigurationError(f"need at least 2 pressure levels, got {self.levels}")
        precip = [c for c in self.channels if c.name == PRECIPITATION]
        if len(precip) != 1 or precip[0].level != SURFACE:
            raise ConfigurationError("exactly one surface precipitation channel is required")
        for c in self.channels:
            should = c.name in PERTURBABLE_VARIABLES and c.level != SURFACE
            if c.perturbable != should:
                raise ConfigurationError(f"channel {c.label}: perturbable flag must be {should}")
        for name in PERTURBABLE_VARIABLES:
            have = sorted(c.level for c in self.channels if c.name == name)
            if have != list(range(self.levels)):
                raise ConfigurationError(f"{name} must be present at every level 0..{self.levels - 1}")
        if len(set(self.channels)) != len(self.channels):
            raise ConfigurationError("duplicate channels")
        if self.q_max <= 0:
            raise ConfigurationError("q_max must be positive")

    @classmethod
    def default(cls, height: int = 24, width: int = 24, levels: int = 3, **kw) -> "GridSpec":
        chans = [
            Channel(name, lvl, name in PERTURBABLE_VARIABLES)
            for name in LEVEL_VARIABLES
            for lvl in range(levels)
        ]
        chans.append(Channel(PRECIPITATION, SURFACE, False))
        return cls(height, width, levels, tuple(chans), **kw)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.n_channels)

    def index(self, name: str, level: int | str = SURFACE) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name and c.level == level:
                return i
        raise KeyError(f"no channel {name}@{level}")

    def indices(self, name: str) -> list[int]:
        """Channel indices of ``name`` ordered by level."""
        found = [(c.level, i) for i, c in enumerate(self.channels) if c.name == name]
        found.sort(key=lambda t: (t[0] == SURFACE, t[0] if t[0] != SURFACE else 0))
        return [i for _, i in found]

    @property
    def precip_index(self) -> int:
        return self.index(PRECIPITATION)

    @property
    def perturbable_mask(self) -> np.ndarray:
        return np.array([c.perturbable for c in self.channels], dtype=bool)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "levels": self.levels,
            "q_max": self.q_max,
            "periodic_columns": self.periodic_columns,
            "periodic_rows": self.periodic_rows,
            "channels": [[c.name, c.level, c.perturbable] for c in self.channels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        chans = tuple(Channel(n, lvl, bool(p)) for n, lvl, p in d["channels"])
        return cls(
            int(d["height"]), int(d["width"]), int(d["levels"]), chans,
            q_max=float(d["q_max"]),
            periodic_columns=bool(d["periodic_columns"]),
            periodic_rows=bool(d["periodic_rows"]),
        )


@dataclass(frozen=True, eq=False)
class AtmosphericState:
    spec: GridSpec
    data: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.spec.shape:
            raise ValidationError(f"state shape {data.shape} != grid shape {self.spec.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("state contains non-finite values")
        if np.any(data[..., self.spec.precip_index] < 0):
            raise ValidationError("negative precipitation")
        hum = data[..., self.spec.indices("humidity")]
        if np.any(hum < 0) or np.any(hum > self.spec.q_max):
            raise ValidationError("humidity outside [0, q_max]")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_raw(cls, spec: GridSpec, raw: np.ndarray, time_index: int = 0) -> "AtmosphericState":
        """Build a state from an unconstrained model output, clipping to valid ranges."""
        out = np.array(raw, dtype=np.float64)
        out[..., spec.precip_index] = np.maximum(out[..., spec.precip_index], 0.0)
        hum = spec.indices("humidity")
        out[..., hum] = np.clip(out[..., hum], 0.0, spec.q_max)
        return cls(spec, out, time_index)

    @property
    def precipitation(self) -> np.ndarray:
        return self.data[..., self.spec.precip_index]

    def channel(self, name: str, level: int | str = SURFACE) -> np.ndarray:
        return self.data[..., self.spec.index(name, level)]


@dataclass(frozen=True, eq=False)
class NormStats:
    """Diagonal per-channel affine normalization."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).copy()
        scale = np.asarray(self.scale, dtype=np.float64).copy()
        if mean.shape != scale.shape or mean.ndim != 1:
            raise ConfigurationError("mean and scale must be 1-D vectors of equal length")
        if not np.all(scale > 0):
            raise ConfigurationError("normalization scale must be strictly positive")
        mean.flags.writeable = False
        scale.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @property
    def n_channels(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fit(cls, samples: np.ndarray, zero_mean: bool = False, floor: float = 1e-6) -> "NormStats":
        """Fit from a stack (..., C); channels with (near-)zero spread get scale 1."""
        flat = np.asarray(samples, dtype=np.float64).reshape(-1, samples.shape[-1])
        mean = np.zeros(flat.shape[1]) if zero_mean else flat.mean(axis=0)
        spread = np.sqrt(np.mean((flat - mean) ** 2, axis=0))
        scale = np.where(spread > floor, spread, 1.0)
        return cls(mean, scale)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "scale": self.scale}


def _check_channels(data: np.ndarray, stats: NormStats) -> None:
    if data.shape[-1] != stats.n_channels:
        raise ConfigurationError(
            f"channel count mismatch: data has {data.shape[-1]}, stats have {stats.n_channels}"
        )


def normalize(state: AtmosphericState | np.ndarray, stats: NormStats) -> np.ndarray:
    data = state.data if isinstance(state, AtmosphericState) else np.asarray(state, dtype=np.float64)
    _check_channels(data, stats)
    return (data - stats.mean) / stats.scale


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    _check_channels(values, stats)
    return values * stats.scale + stats.mean


@dataclass(frozen=True)
class TargetRegion:
    center: tuple[int, int]
    half_extent: int
    cells: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.cells) < 1:
            raise ValidationError("target region must contain at least one cell")

    @classmethod
    def around(cls, center: Sequence[int], half_extent: int, spec: GridSpec) -> "TargetRegion":
        r0, c0 = int(center[0]), int(center[1])
        if not (0 <= r0 < spec.height and 0 <= c0 < spec.width):
            raise ValidationError(f"region center {center} outside grid")
        if half_extent < 0:
            raise ValidationError("half_extent must be nonnegative")
        cells = set()
        for r in range(r0 - half_extent, r0 + half_extent + 1):
            if spec.periodic_rows:
                r %= spec.height
            elif not 0 <= r < spec.height:
                continue
            for c in range(c0 - half_extent, c0 + half_extent + 1):
                if spec.periodic_columns:
                    c %= spec.width
                elif not 0 <= c < spec.width:
                    continue
                cells.add((r, c))
        return cls((r0, c0), int(half_extent), frozenset(cells))

    def sorted_cells(self) -> list[tuple[int, int]]:
        return sorted(self.cells)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "half_extent": self.half_extent}


def region_mask(region: TargetRegion, spec: GridSpec) -> np.ndarray:
    mask = np.zeros((spec.height, spec.width))
    for r, c in region.cells:
        if not (0 <= r < spec.height and 0 <= c < spec.width):
            raise ValidationError(f"region cell {(r, c)} outside {spec.height}x{spec.width} grid")
        mask[r, c] = 1.0
    return mask


def channel_mask(spec: GridSpec, names: Iterable[str] | None = None) -> np.ndarray:
    """Float mask over channels; defaults to the perturbable set."""
    if names is None:
        return spec.perturbable_mask.astype(np.float64)
    names = set(names)
    return np.array([c.name in names for c in spec.channels], dtype=np.float64)
