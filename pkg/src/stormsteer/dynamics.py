"""Synthetic "reanalysis": advected moisture, condensation and injected storms.

The world is a zonal band: columns wrap east-west, rows run south (warm,
moist) to north (cold).  Precipitation is the column-integrated condensate
of one step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DynamicsError, ValidationError
from .fields import AtmosphericState, GridSpec
from .fld import read_fld, write_fld


@dataclass(frozen=True)
class DynamicsConfig:
    spec: GridSpec = field(default_factory=GridSpec.default)
    dt: float = 1.0
    # saturation curve q_sat(T) = q0 * exp(a * (T - T0))
    q0: float = 0.5
    a: float = 0.08
    T0: float = 280.0
    cond_rate: float = 0.6
    storm_rate: float = 0.15
    storm_radius: float = 1.1
    storm_dT: float = 28.0
    storm_dq: float = 2.5
    storm_spread: float = 0.5
    # share of storms born near a fixed hot spot (fractional grid coordinates)
    storm_focus: float = 0.5
    hotspot: tuple[float, float] = (0.55, 0.45)
    hotspot_spread: float = 3.0
    jet_amplitude: float = 0.6
    jet_shear: float = 0.5
    wind_relax: float = 0.3
    wind_noise: float = 0.25
    temp_relax: float = 0.2
    moist_relax: float = 0.15
    rh_background: float = 0.8
    T_surface: float = 288.0
    T_gradient: float = 16.0
    lapse: float = 6.0
    seasonal_amplitude: float = 3.0
    steps_per_year: int = 40
    spinup: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.storm_rate < 0:
            raise ValidationError("storm_rate must be nonnegative")
        if self.q0 <= 0:
            raise ValidationError("q0 must be positive")
        if not 0 <= self.storm_focus <= 1:
            raise ValidationError("storm_focus must lie in [0, 1]")
        if not 0 <= self.cond_rate * self.dt <= 1:
            raise ValidationError("cond_rate * dt must lie in [0, 1]")
        if self.steps_per_year < 1:
            raise ValidationError("steps_per_year must be positive")

    def q_sat(self, T: np.ndarray) -> np.ndarray:
        return self.q0 * np.exp(self.a * (T - self.T0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d

    def digest(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class Trajectory:
    states: list[AtmosphericState]
    years: int
    steps_per_year: int

    def __post_init__(self):
        for a, b in zip(self.states, self.states[1:]):
            if b.time_index - a.time_index != 1:
                raise ValidationError("trajectory time indices must be consecutive")

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i: int) -> AtmosphericState:
        return self.states[i]

    @property
    def spec(self) -> GridSpec:
        return self.states[0].spec

    def stack(self) -> np.ndarray:
        return np.stack([s.data for s in self.states])

    def precipitation(self) -> np.ndarray:
        return self.stack()[..., self.spec.precip_index]

    def slot(self, i: int) -> int:
        return self.states[i].time_index % self.steps_per_year


# ---------------------------------------------------------------- profiles

def _row_coordinate(spec: GridSpec) -> np.ndarray:
    return np.linspace(0.0, 1.0, spec.height)


def background_temperature(cfg: DynamicsConfig, time_index: int) -> np.ndarray:
    """(H, W, L) radiative-equilibrium temperature for the given step."""
    spec = cfg.spec
    y = _row_coordinate(spec)
    phase = 2 * np.pi * (time_index * cfg.dt) / cfg.steps_per_year
    surf = cfg.T_surface - cfg.T_gradient * y + cfg.seasonal_amplitude * np.sin(phase)
    levels = np.arange(spec.levels)
    prof = surf[:, None] - cfg.lapse * levels[None, :]
    return np.broadcast_to(prof[:, None, :], (spec.height, spec.width, spec.levels)).copy()


def background_wind(cfg: DynamicsConfig) -> np.ndarray:
    spec = cfg.spec
    y = _row_coordinate(spec)
    levels = np.arange(spec.levels)
    prof = cfg.jet_amplitude * np.sin(np.pi * y)[:, None] * (1 + cfg.jet_shear * levels)[None, :]
    return np.broadcast_to(prof[:, None, :], (spec.height, spec.width, spec.levels)).copy()


def background_state(cfg: DynamicsConfig, time_index: int = 0) -> AtmosphericState:
    spec = cfg.spec
    data = np.zeros(spec.shape)
    T = background_temperature(cfg, time_index)
    data[..., spec.indices("temperature")] = T
    data[..., spec.indices("u_wind")] = background_wind(cfg)
    q = np.minimum(cfg.rh_background * cfg.q_sat(T), spec.q_max)
    data[..., spec.indices("humidity")] = q
    return AtmosphericState(spec, data, time_index)


# ---------------------------------------------------------------- physics

def advect(field_: np.ndarray, u: np.ndarray, v: np.ndarray, dt: float,
           periodic_rows: bool = False, periodic_columns: bool = True) -> np.ndarray:
    """Semi-Lagrangian advection of (H, W, K) fields with bilinear interpolation.

    ``u`` moves along columns, ``v`` along rows (grid cells per unit time).
    """
    H, W = field_.shape[:2]
    rows, cols = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    r = rows - v * dt
    c = cols - u * dt
    if not periodic_rows:
        r = np.clip(r, 0.0, H - 1.0)
    if not periodic_columns:
        c = np.clip(c, 0.0, W - 1.0)
    r0 = np.floor(r)
    c0 = np.floor(c)
    wr = (r - r0)[..., None]
    wc = (c - c0)[..., None]
    r0 = r0.astype(int)
    c0 = c0.astype(int)
    if periodic_rows:
        r0 %= H
        r1 = (r0 + 1) % H
    else:
        r1 = np.minimum(r0 + 1, H - 1)
    if periodic_columns:
        c0 %= W
        c1 = (c0 + 1) % W
    else:
        c1 = np.minimum(c0 + 1, W - 1)
    return ((1 - wr) * (1 - wc) * field_[r0, c0] + (1 - wr) * wc * field_[r0, c1]
            + wr * (1 - wc) * field_[r1, c0] + wr * wc * field_[r1, c1])


def condense(T: np.ndarray, q: np.ndarray, cfg: DynamicsConfig) -> tuple[np.ndarray, np.ndarray]:
    """Remove supersaturation; returns (new humidity, column precipitation)."""
    cond = cfg.cond_rate * cfg.dt * np.maximum(0.0, q - cfg.q_sat(T))
    return q - cond, cond.sum(axis=-1)


def _smooth_noise(rng: np.random.Generator, spec: GridSpec, scale: float = 2.5) -> np.ndarray:
    white = rng.standard_normal((spec.height, spec.width))
    mode = ("wrap" if spec.periodic_rows else "nearest", "wrap" if spec.periodic_columns else "nearest")
    sm = gaussian_filter(white, scale, mode=mode)
    return sm / (sm.std() + 1e-12)


def _storm_bump(rng: np.random.Generator, cfg: DynamicsConfig) -> np.ndarray:
    spec = cfg.spec
    if cfg.storm_focus > 0 and rng.uniform() < cfg.storm_focus:
        r0 = float(np.clip(cfg.hotspot[0] * spec.height + cfg.hotspot_spread * rng.standard_normal(), 0, spec.height - 1))
        c0 = (cfg.hotspot[1] * spec.width + cfg.hotspot_spread * rng.standard_normal()) % spec.width
    else:
        r0 = rng.uniform(0, spec.height)
        c0 = rng.uniform(0, spec.width)
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    dr = rows - r0
    dc = cols - c0
    if spec.periodic_columns:
        dc = (dc + spec.width / 2) % spec.width - spec.width / 2
    if spec.periodic_rows:
        dr = (dr + spec.height / 2) % spec.height - spec.height / 2
    return np.exp(-(dr ** 2 + dc ** 2) / (2 * cfg.storm_radius ** 2))


def step_truth(state: AtmosphericState, cfg: DynamicsConfig, rng: np.random.Generator) -> AtmosphericState:
    spec = cfg.spec
    if state.spec != spec:
        raise ValidationError("state does not conform to the dynamics grid")
    if not np.all(np.isfinite(state.data)):
        raise DynamicsError("non-finite input state", step=state.time_index)
    iT, iu, iv, iq = (spec.indices(n) for n in ("temperature", "u_wind", "v_wind", "humidity"))
    x = state.data
    T, u, v, q = x[..., iT], x[..., iu], x[..., iv], x[..., iq]
    dt = cfg.dt
    t_next = state.time_index + 1

    # 1. advect T and q with the level-mean wind
    ubar = u.mean(axis=-1)
    vbar = v.mean(axis=-1)
    T = advect(T, ubar, vbar, dt, spec.periodic_rows, spec.periodic_columns)
    q = advect(q, ubar, vbar, dt, spec.periodic_rows, spec.periodic_columns)

    # 2. winds relax toward the jet, plus smooth stochastic forcing
    u = u + dt * cfg.wind_relax * (background_wind(cfg) - u)
    v = v - dt * cfg.wind_relax * v
    if cfg.wind_noise > 0:
        amp = cfg.wind_noise * np.sqrt(dt)
        u = u + amp * _smooth_noise(rng, spec)[..., None]
        v = v + amp * _smooth_noise(rng, spec)[..., None]

    # radiative relaxation and surface moisture supply
    T_bg = background_temperature(cfg, t_next)
    T = T + dt * cfg.temp_relax * (T_bg - T)
    if cfg.moist_relax > 0:
        q_bg = cfg.rh_background * cfg.q_sat(T_bg)
        q = q + dt * cfg.moist_relax * np.maximum(0.0, q_bg - q)

    # 3. condensation
    q, precip = condense(T, q, cfg)

    # 4. storms: warm, moist Gaussian bumps that rain out as they cool
    n_storms = rng.poisson(cfg.storm_rate * dt) if cfg.storm_rate > 0 else 0
    weights = np.linspace(1.0, 0.4, spec.levels)
    for _ in range(n_storms):
        g = _storm_bump(rng, cfg)[..., None] * weights
        strength = 1.0 + cfg.storm_spread * rng.uniform(-1.0, 1.0)
        T = T + cfg.storm_dT * g
        q = q + strength * cfg.storm_dq * g * cfg.q_sat(T_bg)

    q = np.clip(q, 0.0, spec.q_max)
    out = np.empty_like(x)
    out[..., iT], out[..., iu], out[..., iv], out[..., iq] = T, u, v, q
    out[..., spec.precip_index] = precip
    if not np.all(np.isfinite(out)):
        raise DynamicsError("dynamics produced non-finite values", step=t_next)
    return AtmosphericState(spec, out, t_next)


def generate_dataset(cfg: DynamicsConfig, years: int) -> Trajectory:
    """``years * steps_per_year`` states after ``cfg.spinup`` discarded steps."""
    if years < 2:
        raise ValidationError("need at least 2 years for a climatology")
    rng = np.random.default_rng(cfg.seed)
    n = int(round(years * cfg.steps_per_year / cfg.dt))
    state = background_state(cfg, -cfg.spinup - 1)
    for _ in range(cfg.spinup):
        state = step_truth(state, cfg, rng)
    states = []
    for _ in range(n):
        state = step_truth(state, cfg, rng)
        states.append(state)
    spy = int(round(cfg.steps_per_year / cfg.dt))
    return Trajectory(states, years, spy)


def generate_paired(cfg: DynamicsConfig, years: int) -> tuple[Trajectory, Trajectory]:
    """Simulate at half-step resolution; return (model-step, half-step) trajectories.

    Model-step state k is half-step state 2k with precipitation accumulated
    over the two half-steps ending there.
    """
    if years < 2:
        raise ValidationError("need at least 2 years for a climatology")
    half_cfg = replace(cfg, dt=cfg.dt / 2)
    rng = np.random.default_rng(cfg.seed)
    n_full = years * cfg.steps_per_year
    state = background_state(half_cfg, -2 * cfg.spinup - 1)
    for _ in range(2 * cfg.spinup):
        state = step_truth(state, half_cfg, rng)
    prev_precip = state.precipitation
    halves = []
    for _ in range(2 * n_full):
        state = step_truth(state, half_cfg, rng)
        halves.append(state)
    full = []
    spec = cfg.spec
    for k in range(n_full):
        data = halves[2 * k].data.copy()
        before = prev_precip if k == 0 else halves[2 * k - 1].precipitation
        data[..., spec.precip_index] = before + halves[2 * k].precipitation
        full.append(AtmosphericState(spec, data, k))
    return (Trajectory(full, years, cfg.steps_per_year),
            Trajectory(halves, years, 2 * cfg.steps_per_year))


# ---------------------------------------------------------------- persistence

def save_trajectory(directory: str | Path, traj: Trajectory, manifest: dict | None = None) -> Path:
    """One ``.fld`` chunk per simulated year plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spy = traj.steps_per_year
    files = []
    for y in range(traj.years):
        chunk = traj.states[y * spy:(y + 1) * spy]
        name = f"year_{y:03d}.fld"
        write_fld(directory / name, {"data": np.stack([s.data for s in chunk])},
                  {"kind": "trajectory_chunk", "grid": traj.spec.to_dict(),
                   "channels": [c.label for c in traj.spec.channels],
                   "first_time_index": chunk[0].time_index})
        files.append(name)
    info = {"years": traj.years, "steps_per_year": spy, "files": files, **(manifest or {})}
    (directory / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return directory


def load_trajectory(directory: str | Path) -> Trajectory:
    directory = Path(directory)
    info = json.loads((directory / "manifest.json").read_text())
    states = []
    for name in info["files"]:
        meta, arrays = read_fld(directory / name)
        spec = GridSpec.from_dict(meta["grid"])
        t0 = int(meta["first_time_index"])
        for k, d in enumerate(arrays["data"]):
            states.append(AtmosphericState(spec, d, t0 + k))
    return Trajectory(states, int(info["years"]), int(info["steps_per_year"]))
