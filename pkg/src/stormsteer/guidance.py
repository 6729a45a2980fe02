"""Gradient-guided sampling that steers a forecast away from heavy target-region rain.

At each denoising step the clean-residual estimate is nudged against the
gradient of the target-region mean precipitation at lead ``T``.  That
gradient flows through the residual reconstruction and a cheap rollout that
runs the sampler on only ``n`` representative noise levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import (DenoiserParams, NoiseSchedule, PassCounter, denoise_backward,
                        denoise_forward, reconstruct, run_sampler)
from .errors import GuidanceError, StateError, ValidationError
from .fields import AtmosphericState, GridSpec, NormStats, TargetRegion, channel_mask, region_mask


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Additive change to a state, in physical units, zero off the perturbable channels."""

    delta: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        m = np.asarray(self.mask, dtype=np.float64)
        if d.shape[-1] != m.shape[0]:
            raise ValidationError("perturbation mask does not match channel count")
        if not np.all(np.isfinite(d)):
            raise ValidationError("perturbation must be finite")
        if np.any(d[..., m == 0] != 0):
            raise ValidationError("perturbation is nonzero on a non-perturbable channel")
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "mask", m)

    @classmethod
    def zeros(cls, spec: GridSpec) -> "Perturbation":
        return cls(np.zeros(spec.shape), channel_mask(spec))

    @classmethod
    def masked(cls, raw: np.ndarray, spec: GridSpec) -> "Perturbation":
        m = channel_mask(spec)
        return cls(np.where(m > 0, raw, 0.0), m)

    def normalized(self, stats: NormStats) -> np.ndarray:
        return self.delta / stats.scale

    def apply(self, state: AtmosphericState) -> AtmosphericState:
        return AtmosphericState.from_raw(state.spec, state.data + self.delta, state.time_index)


@dataclass
class GuidanceConfig:
    region: TargetRegion
    lam: float = 1.0
    T: int = 2
    n: int = 2
    skip_final: bool = True

    def validate(self, schedule: NoiseSchedule) -> None:
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"guidance scale must be >= 0, got {self.lam}")
        if self.T < 2:
            raise ValidationError(f"target lead must be >= 2, got {self.T}")
        if not 1 <= self.n <= schedule.N:
            raise ValidationError(f"n must lie in [1, {schedule.N}], got {self.n}")


def precip_loss(forecast: AtmosphericState | np.ndarray, region: TargetRegion,
                spec: GridSpec | None = None) -> float:
    """Mean precipitation over the region cells."""
    if not region.cells:
        raise ValidationError("empty target region")
    if isinstance(forecast, AtmosphericState):
        spec, data = forecast.spec, forecast.data
    else:
        data = np.asarray(forecast)
        if spec is None:
            raise ValidationError("a grid spec is required for raw arrays")
    mask = region_mask(region, spec)
    return float(np.sum(data[..., spec.precip_index] * mask) / mask.sum())


@dataclass(frozen=True, eq=False)
class RolloutPlan:
    """Representative level indices and the noise each cheap rollout step starts from."""

    levels: tuple[int, ...]
    noise: np.ndarray  # (T-1, H, W, C)

    @classmethod
    def draw(cls, schedule: NoiseSchedule, n: int, T: int, shape, rng: np.random.Generator) -> "RolloutPlan":
        if not 1 <= n <= schedule.N:
            raise ValidationError(f"n must lie in [1, {schedule.N}], got {n}")
        groups = np.array_split(np.arange(schedule.N), n)
        levels = tuple(int(g[rng.integers(0, len(g))]) for g in groups)
        noise = rng.standard_normal((T - 1,) + tuple(shape))
        return cls(levels, noise)

    def sigmas(self, schedule: NoiseSchedule) -> np.ndarray:
        return np.append(schedule.sigmas[list(self.levels)], 0.0)


def _cheap_step(params, sigmas, x_a, x_b, noise, counter, keep):
    """Sampler over the given levels conditioned on (x_a, x_b); returns (x_next, caches)."""
    z = sigmas[0] * noise
    caches = []
    for k in range(len(sigmas) - 1):
        zhat, _, cache = denoise_forward(params, z, x_a, x_b, sigmas[k], counter)
        if keep:
            caches.append(cache)
        z = zhat + (sigmas[k + 1] / sigmas[k]) * (z - zhat)
    return reconstruct(x_b, z, params.residual_stats), caches


def _cheap_step_backward(params, sigmas, caches, g_next, counter):
    g_b = g_next.copy()
    g_z = params.residual_stats.scale * g_next
    g_a = np.zeros_like(g_next)
    for k in reversed(range(len(caches))):
        r = sigmas[k + 1] / sigmas[k]
        dz, da, db = denoise_backward(params, caches[k], (1.0 - r) * g_z, counter)
        g_z = r * g_z + dz
        g_a += da
        g_b += db
    return g_a, g_b


def rollout_objective(x_next: np.ndarray, x_cur: np.ndarray, params: DenoiserParams,
                      schedule: NoiseSchedule, plan: RolloutPlan, region: TargetRegion, T: int = 2,
                      counter: PassCounter | None = None, need_grad: bool = True):
    """Region-mean precipitation at lead T after the cheap rollout from (x_cur, x_next).

    Returns (loss, d loss / d x_next or None, final raw state).
    """
    spec = params.spec
    sigmas = plan.sigmas(schedule)
    states = [np.asarray(x_cur, dtype=np.float64), np.asarray(x_next, dtype=np.float64)]
    tape = []
    for j in range(T - 1):
        x_new, caches = _cheap_step(params, sigmas, states[-2], states[-1], plan.noise[j], counter, need_grad)
        tape.append(caches)
        states.append(x_new)
    mask = region_mask(region, spec)
    loss = float(np.sum(states[-1][..., spec.precip_index] * mask) / mask.sum())
    if not need_grad:
        return loss, None, states[-1]
    grads = [np.zeros_like(s) for s in states]
    grads[-1][..., spec.precip_index] = mask / mask.sum()
    for j in reversed(range(T - 1)):
        g_a, g_b = _cheap_step_backward(params, sigmas, tape[j], grads[j + 2], counter)
        grads[j] += g_a
        grads[j + 1] += g_b
    return loss, grads[1], states[-1]


def approx_rollout(z_denoised: np.ndarray, x_cur: AtmosphericState, params: DenoiserParams,
                   schedule: NoiseSchedule, cfg: GuidanceConfig, plan: RolloutPlan,
                   counter: PassCounter | None = None) -> AtmosphericState:
    """Reconstruct X^{t+1} from a denoised residual, then roll forward to lead T cheaply."""
    x_next = reconstruct(x_cur.data, z_denoised, params.residual_stats)
    _, _, x_T = rollout_objective(x_next, x_cur.data, params, schedule, plan, cfg.region, cfg.T,
                                  counter, need_grad=False)
    return AtmosphericState.from_raw(params.spec, x_T, x_cur.time_index + cfg.T)


def residual_gradient(zhat: np.ndarray, x_cur: np.ndarray, params: DenoiserParams,
                      schedule: NoiseSchedule, plan: RolloutPlan, region: TargetRegion, T: int,
                      counter: PassCounter | None = None) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. a denoised residual, masked to perturbable channels."""
    x_next = reconstruct(x_cur, zhat, params.residual_stats)
    loss, g_x, _ = rollout_objective(x_next, x_cur, params, schedule, plan, region, T, counter)
    return loss, g_x * params.residual_stats.scale * channel_mask(params.spec)


@dataclass
class GuidedResult:
    forecast: AtmosphericState
    perturbation: Perturbation
    counter: PassCounter
    standard: AtmosphericState
    loss_trace: list[float] = field(default_factory=list)
    plan: RolloutPlan | None = None

    @property
    def intervened(self) -> AtmosphericState:
        return self.perturbation.apply(self.standard)


def guided_sample(x_prev: AtmosphericState, x_cur: AtmosphericState, params: DenoiserParams,
                  schedule: NoiseSchedule, cfg: GuidanceConfig, rng: np.random.Generator,
                  standard: AtmosphericState | None = None,
                  noise: np.ndarray | None = None) -> GuidedResult:
    """Guided forecast of X^{t+1} plus the perturbation it implies.

    The rng supplies the initial noise first (unless ``noise`` is given) and
    the rollout plan second.  The unguided reference (if not given) reuses
    that initial noise and does not count towards the returned pass counter.
    """
    if not params.trained:
        raise StateError("denoiser parameters are not trained")
    cfg.validate(schedule)
    spec = params.spec
    if noise is None:
        noise = rng.standard_normal(spec.shape)
    plan = RolloutPlan.draw(schedule, cfg.n, cfg.T, spec.shape, rng)
    counter = PassCounter()
    trace = []

    def guide(zhat, step):
        loss, g = residual_gradient(zhat, x_cur.data, params, schedule, plan, cfg.region, cfg.T, counter)
        if not np.all(np.isfinite(g)):
            raise GuidanceError("non-finite guidance gradient", step=step)
        trace.append(loss)
        return zhat - cfg.lam * g

    z = schedule.sigmas[0] * noise
    for i in range(schedule.N):
        zhat, _, _ = denoise_forward(params, z, x_prev.data, x_cur.data, schedule.sigmas[i], counter)
        if cfg.lam > 0:
            zhat = guide(zhat, i)
        z = zhat + schedule.ratio(i) * (z - zhat)
        if not np.all(np.isfinite(z)):
            raise GuidanceError("non-finite residual during guided sampling", step=i)
    if not cfg.skip_final and cfg.lam > 0:
        z = guide(z, schedule.N)
    guided = AtmosphericState.from_raw(spec, reconstruct(x_cur.data, z, params.residual_stats),
                                       x_cur.time_index + 1)

    if standard is None:
        z0 = run_sampler(params, schedule, x_prev.data, x_cur.data, noise)
        standard = AtmosphericState.from_raw(spec, reconstruct(x_cur.data, z0, params.residual_stats),
                                             x_cur.time_index + 1)
    pert = Perturbation.masked(guided.data - standard.data, spec)
    return GuidedResult(guided, pert, counter, standard, trace, plan)


def lambda_scale_probe(x_prev: AtmosphericState, x_cur: AtmosphericState, params: DenoiserParams,
                       schedule: NoiseSchedule, cfg: GuidanceConfig, rng: np.random.Generator,
                       fraction: float = 0.01) -> float:
    """Guidance scale at which the first guided step moves the residual estimate by ``fraction``."""
    spec = params.spec
    noise = rng.standard_normal(spec.shape)
    plan = RolloutPlan.draw(schedule, cfg.n, cfg.T, spec.shape, rng)
    zhat, _, _ = denoise_forward(params, schedule.sigmas[0] * noise, x_prev.data, x_cur.data, schedule.sigmas[0])
    _, g = residual_gradient(zhat, x_cur.data, params, schedule, plan, cfg.region, cfg.T)
    gn = float(np.linalg.norm(g))
    if gn == 0 or not np.isfinite(gn):
        raise GuidanceError("degenerate guidance gradient while calibrating", step=0)
    return fraction * float(np.linalg.norm(zhat)) / gn


def lambda_grid(base: float, multipliers=(1.0, 2.5, 5.0, 7.5, 10.0)) -> list[float]:
    return [base * m for m in multipliers]
