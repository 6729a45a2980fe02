"""Direct state-space attack baseline: projected gradient descent on the t+1 state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DenoiserParams, NoiseSchedule, PassCounter
from .errors import AttackError, StateError, ValidationError
from .fields import AtmosphericState, TargetRegion, channel_mask
from .guidance import Perturbation, RolloutPlan, rollout_objective


@dataclass
class AttackConfig:
    region: TargetRegion
    epsilon: float = 0.07
    eta: float | None = None  # defaults to epsilon / 10
    K: int = 50
    T: int = 2
    n: int = 2

    def __post_init__(self):
        if self.eta is None:
            self.eta = self.epsilon / 10.0
        if not self.epsilon > 0 or not self.eta > 0:
            raise ValidationError("epsilon and eta must be positive")
        if self.K < 0:
            raise ValidationError("K must be nonnegative")
        if self.T < 2:
            raise ValidationError("target lead must be >= 2")


def project_std(delta: np.ndarray, eps: float) -> np.ndarray:
    """Shrink every channel slice whose spatial std exceeds ``eps`` about its own mean.

    ``delta`` is (H, W, C) in normalized units.
    """
    delta = np.asarray(delta, dtype=np.float64)
    mean = delta.mean(axis=(0, 1))
    std = np.sqrt(np.mean((delta - mean) ** 2, axis=(0, 1)))
    over = std > eps
    factor = np.where(over, eps / np.where(std > 0, std, 1.0), 1.0)
    return np.where(over, mean + (delta - mean) * factor, delta)


@dataclass
class AttackResult:
    perturbation: Perturbation
    counter: PassCounter
    loss_trace: list[float] = field(default_factory=list)
    std_trace: list[float] = field(default_factory=list)  # max slice std after each projection


def pgd_attack(x_cur: AtmosphericState, x_next_fc: AtmosphericState, params: DenoiserParams,
               schedule: NoiseSchedule, cfg: AttackConfig, rng: np.random.Generator) -> AttackResult:
    """K normalized-gradient descent steps on delta, each followed by the std projection."""
    if not params.trained:
        raise StateError("denoiser parameters are not trained")
    spec = params.spec
    scale = params.state_stats.scale
    mask = channel_mask(spec)
    plan = RolloutPlan.draw(schedule, cfg.n, cfg.T, spec.shape, rng)
    counter = PassCounter()
    d = np.zeros(spec.shape)  # normalized units
    losses, stds = [], []
    n_active = mask.sum() * spec.height * spec.width
    for k in range(cfg.K):
        loss, g_x, _ = rollout_objective(x_next_fc.data + d * scale, x_cur.data, params, schedule,
                                         plan, cfg.region, cfg.T, counter)
        g = g_x * scale * mask
        if not np.all(np.isfinite(g)):
            raise AttackError("non-finite attack gradient", step=k)
        losses.append(loss)
        rms = np.sqrt(np.sum(g * g) / n_active)
        if rms > 0:
            d = d - cfg.eta * g / rms
        d = project_std(d, cfg.epsilon) * mask
        stds.append(float(np.max(np.std(d, axis=(0, 1)))))
    return AttackResult(Perturbation.masked(d * scale, spec), counter, losses, stds)
