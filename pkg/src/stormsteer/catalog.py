"""Extreme-precipitation event catalog: climatology, threshold, extraction, filtering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .dynamics import Trajectory
from .errors import StateError, ValidationError
from .fields import AtmosphericState, GridSpec, TargetRegion, region_mask


@dataclass(frozen=True, eq=False)
class Climatology:
    mean: np.ndarray  # (steps_per_year, H, W)

    def __post_init__(self):
        if self.mean.ndim != 3:
            raise ValidationError("climatology must be (steps_per_year, H, W)")
        if np.any(self.mean < 0):
            raise ValidationError("climatology must be nonnegative")

    @property
    def steps_per_year(self) -> int:
        return self.mean.shape[0]

    def at(self, time_index: int) -> np.ndarray:
        return self.mean[time_index % self.steps_per_year]


@dataclass(frozen=True)
class EventThreshold:
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"degenerate event threshold tau={self.tau}")


@dataclass(frozen=True)
class EventRecord:
    time_index: int
    cell: tuple[int, int]
    anomaly: float
    region: TargetRegion
    predictable: bool = False

    def to_dict(self) -> dict:
        return {"time_index": self.time_index, "cell": list(self.cell), "anomaly": self.anomaly,
                "half_extent": self.region.half_extent, "predictable": self.predictable}

    @classmethod
    def from_dict(cls, d: dict, spec: GridSpec) -> "EventRecord":
        cell = (int(d["cell"][0]), int(d["cell"][1]))
        return cls(int(d["time_index"]), cell, float(d["anomaly"]),
                   TargetRegion.around(cell, int(d["half_extent"]), spec), bool(d["predictable"]))


def build_climatology(traj: Trajectory) -> Climatology:
    if traj.years < 2:
        raise ValidationError("climatology needs at least 2 years")
    P = traj.precipitation()
    spy = traj.steps_per_year
    P = P[: traj.years * spy].reshape(traj.years, spy, *P.shape[1:])
    return Climatology(P.mean(axis=0))


def anomalies(traj: Trajectory, clim: Climatology) -> np.ndarray:
    P = traj.precipitation()
    slots = np.array([s.time_index % clim.steps_per_year for s in traj.states])
    return P - clim.mean[slots]


def nearest_rank_percentile(values: np.ndarray, p: float, axis: int = 0) -> np.ndarray:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=float), axis=axis)
    n = values.shape[axis]
    rank = max(1, math.ceil(p / 100.0 * n))
    return np.take(values, rank - 1, axis=axis)


def tau_from_yearly_maxima(yearly_max: np.ndarray, percentile: float = 99.0) -> float:
    """yearly_max: (years, ...) maxima per cell -> spatial mean of per-cell percentiles."""
    yearly_max = np.asarray(yearly_max, dtype=float)
    if yearly_max.shape[0] < 1:
        raise ValidationError("need at least one year of maxima")
    return float(nearest_rank_percentile(yearly_max, percentile, axis=0).mean())


def compute_tau(traj: Trajectory, clim: Climatology, percentile: float = 99.0) -> EventThreshold:
    if traj.years < 1:
        raise ValidationError("need at least one year")
    A = anomalies(traj, clim)
    spy = traj.steps_per_year
    yearly_max = A[: traj.years * spy].reshape(traj.years, spy, *A.shape[1:]).max(axis=1)
    return EventThreshold(tau_from_yearly_maxima(yearly_max, percentile))


def default_land_mask(spec: GridSpec) -> np.ndarray:
    """A rectangular continent covering roughly 40% of the grid."""
    mask = np.zeros((spec.height, spec.width))
    r0, r1 = round(0.25 * spec.height), round(0.83 * spec.height)
    c0, c1 = round(0.12 * spec.width), round(0.80 * spec.width)
    mask[r0:r1, c0:c1] = 1.0
    return mask


def grid_distance(a: tuple[int, int], b: tuple[int, int], spec: GridSpec) -> float:
    dr = abs(a[0] - b[0])
    dc = abs(a[1] - b[1])
    if spec.periodic_rows:
        dr = min(dr, spec.height - dr)
    if spec.periodic_columns:
        dc = min(dc, spec.width - dc)
    return math.hypot(dr, dc)


def deduplicate(candidates: list[tuple[int, int, int, float]], spec: GridSpec,
                dedup_steps: int = 4, dedup_radius: float = 6.0) -> list[tuple[int, int, int, float]]:
    """Greedy dedup of (t, row, col, anomaly) tuples, strongest first.

    Ties in anomaly break on (t, row, col) so the result is order-independent.
    """
    order = sorted(candidates, key=lambda e: (-e[3], e[0], e[1], e[2]))
    kept: list[tuple[int, int, int, float]] = []
    if not order:
        return kept
    kt = np.empty(len(order), dtype=int)
    kr = np.empty(len(order), dtype=int)
    kc = np.empty(len(order), dtype=int)
    n = 0
    for e in order:
        if n:
            dt = np.abs(kt[:n] - e[0])
            dr = np.abs(kr[:n] - e[1])
            dc = np.abs(kc[:n] - e[2])
            if spec.periodic_rows:
                dr = np.minimum(dr, spec.height - dr)
            if spec.periodic_columns:
                dc = np.minimum(dc, spec.width - dc)
            if np.any((dt <= dedup_steps) & (np.hypot(dr, dc) <= dedup_radius)):
                continue
        kt[n], kr[n], kc[n] = e[0], e[1], e[2]
        n += 1
        kept.append(e)
    return kept


def extract_events(traj: Trajectory, clim: Climatology, thr: EventThreshold, land: np.ndarray,
                   dedup_steps: int = 4, dedup_radius: float = 6.0,
                   half_extent: int = 2) -> list[EventRecord]:
    spec = traj.spec
    if land.shape != (spec.height, spec.width):
        raise ValidationError(f"land mask shape {land.shape} does not match grid")
    A = anomalies(traj, clim)
    hits = np.argwhere((A > thr.tau) & (land[None] > 0))
    cands = [(int(traj.states[i].time_index), int(r), int(c), float(A[i, r, c])) for i, r, c in hits]
    kept = deduplicate(cands, spec, dedup_steps, dedup_radius)
    kept.sort(key=lambda e: (e[0], e[1], e[2]))
    return [EventRecord(t, (r, c), a, TargetRegion.around((r, c), half_extent, spec))
            for t, r, c, a in kept]


class Forecaster(Protocol):
    is_trained: bool

    def forecast(self, x_prev: AtmosphericState, x_cur: AtmosphericState) -> AtmosphericState: ...


class TruthForecaster:
    """Oracle that returns the recorded next state."""

    is_trained = True

    def __init__(self, traj: Trajectory):
        self._by_time = {s.time_index: s for s in traj.states}

    def forecast(self, x_prev, x_cur):
        return self._by_time[x_cur.time_index + 1]


def filter_predictable(events: list[EventRecord], forecaster: Forecaster, traj: Trajectory,
                       thr: EventThreshold, clim: Climatology, lead: int = 1,
                       progress: Callable[[int], None] | None = None) -> list[EventRecord]:
    """Keep events whose forecast for the event time exceeds tau somewhere in the region.

    The forecast starts from the recorded states ``lead + 1`` and ``lead``
    steps before the event and chains ``lead`` forecaster calls.
    """
    if not getattr(forecaster, "is_trained", False):
        raise StateError("forecaster is not trained")
    if lead < 1:
        raise ValidationError("lead must be at least 1")
    by_time = {s.time_index: s for s in traj.states}
    out = []
    for k, ev in enumerate(events):
        prev = by_time.get(ev.time_index - lead - 1)
        cur = by_time.get(ev.time_index - lead)
        if prev is None or cur is None:
            continue
        for _ in range(lead):
            prev, cur = cur, forecaster.forecast(prev, cur)
        anom = cur.precipitation - clim.at(ev.time_index)
        mask = region_mask(ev.region, traj.spec) > 0
        if anom[mask].max() > thr.tau:
            out.append(replace(ev, predictable=True))
        if progress:
            progress(k)
    return out


def save_catalog(path: str | Path, events: list[EventRecord], thr: EventThreshold, header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"record": "header", "tau": thr.tau, **header}, sort_keys=True)]
    lines += [json.dumps({"record": "event", **e.to_dict()}, sort_keys=True) for e in events]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_catalog(path: str | Path, spec: GridSpec) -> tuple[dict, list[EventRecord]]:
    header, events = {}, []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec.pop("record") == "header":
            header = rec
        else:
            events.append(EventRecord.from_dict(rec, spec))
    return header, events
