"""Conditional residual diffusion forecaster.

The model generates a normalized residual ``Z`` with ``X_next = X_cur + s * Z``
(``s`` the per-channel residual scale).  The denoiser is a small conv net
with EDM preconditioning:

    d(Z; x_prev, x_cur, sigma) = c_skip(sigma) Z + c_out(sigma) F(c_in(sigma) Z, x_prev, x_cur, log sigma)

``F`` is encoder (1x1) -> two 3x3 conv layers -> decoder (1x1); the
activation after the second 3x3 layer is exposed as the latent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .dynamics import Trajectory
from .errors import SamplingError, StateError, TrainingError, ValidationError
from .fields import AtmosphericState, GridSpec, NormStats
from .fld import read_fld, write_fld

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Noise levels sigma_0 > ... > sigma_{N-1} > sigma_N = 0.

    ``N`` denoiser calls happen at sigma_0 .. sigma_{N-1}; the terminal level
    is exactly zero so the last update returns the denoised estimate.
    """

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 3:
            raise ValidationError("schedule needs N >= 2 denoising levels plus the terminal level")
        if not np.all(s[:-1] > 0) or s[-1] != 0:
            raise ValidationError("denoising levels must be positive and the terminal level zero")
        if not np.all(np.diff(s) < 0):
            raise ValidationError("noise levels must be strictly decreasing")
        s.flags.writeable = False
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def geometric(cls, n_steps: int = 20, sigma_max: float = 80.0, sigma_min: float = 0.03) -> "NoiseSchedule":
        if n_steps < 2:
            raise ValidationError("N must be at least 2")
        i = np.arange(n_steps)
        levels = sigma_max * (sigma_min / sigma_max) ** (i / (n_steps - 1))
        return cls(np.append(levels, 0.0))

    @property
    def N(self) -> int:
        return self.sigmas.size - 1

    def ratio(self, i: int) -> float:
        return float(self.sigmas[i + 1] / self.sigmas[i])

    def to_dict(self) -> dict:
        return {"sigmas": [float(x) for x in self.sigmas]}


@dataclass
class PassCounter:
    forward_passes: int = 0
    backward_passes: int = 0

    def as_dict(self) -> dict:
        return {"forward": self.forward_passes, "backward": self.backward_passes}


@dataclass
class TrainConfig:
    hidden: int = 24
    activation: str = "silu"
    iterations: int = 8000
    batch_size: int = 8
    lr: float = 6e-3
    grad_clip: float = 1.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 1.0
    holdout_steps: int = 40
    seed: int = 0
    log_every: int = 250


@dataclass(eq=False)
class DenoiserParams:
    weights: dict[str, np.ndarray]
    spec: GridSpec
    state_stats: NormStats
    residual_stats: NormStats
    hidden: int
    activation: str = "silu"
    sigma_data: float = 1.0
    trained: bool = False
    history: dict = field(default_factory=dict)

    @property
    def n_channels(self) -> int:
        return self.spec.n_channels

    @property
    def n_inputs(self) -> int:
        return 3 * self.n_channels + 1

    def latent_shape(self) -> tuple[int, int, int]:
        return (self.spec.height, self.spec.width, self.hidden)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams({k: v.copy() for k, v in self.weights.items()}, self.spec,
                              self.state_stats, self.residual_stats, self.hidden,
                              self.activation, self.sigma_data, self.trained, dict(self.history))


def init_params(spec: GridSpec, state_stats: NormStats, residual_stats: NormStats,
                hidden: int = 24, activation: str = "silu", sigma_data: float = 1.0,
                rng: np.random.Generator | None = None) -> DenoiserParams:
    if activation not in nn.ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    rng = rng or np.random.default_rng(0)
    C = spec.n_channels
    cin = 3 * C + 1

    def he(fan_in, shape, gain=1.0):
        return rng.standard_normal(shape) * gain / np.sqrt(fan_in)

    w = {
        "enc_w": he(cin, (cin, hidden)), "enc_b": np.zeros(hidden),
        "c1_w": he(9 * hidden, (9 * hidden, hidden)), "c1_b": np.zeros(hidden),
        "c2_w": he(9 * hidden, (9 * hidden, hidden)), "c2_b": np.zeros(hidden),
        "dec_w": he(hidden, (hidden, C), 0.5), "dec_b": np.zeros(C),
    }
    return DenoiserParams(w, spec, state_stats, residual_stats, hidden, activation, sigma_data)


# ---------------------------------------------------------------- network

def precond(sigma: np.ndarray, sigma_data: float):
    """EDM coefficients (c_skip, c_out, c_in, c_noise) broadcastable over (B, 1, 1, 1)."""
    s = np.asarray(sigma, dtype=np.float64).reshape(-1, 1, 1, 1)
    sd2 = sigma_data ** 2
    c_skip = sd2 / (s ** 2 + sd2)
    c_out = s * sigma_data / np.sqrt(s ** 2 + sd2)
    c_in = 1.0 / np.sqrt(s ** 2 + sd2)
    c_noise = np.log(s) / 4.0
    return c_skip, c_out, c_in, c_noise


def net_forward(params: DenoiserParams, inp: np.ndarray):
    """Raw network F on (B, H, W, 3C+1) inputs. Returns (out, cache)."""
    w = params.weights
    act, _ = nn.ACTIVATIONS[params.activation]
    pr, pc = params.spec.periodic_rows, params.spec.periodic_columns
    z0 = nn.dense(inp, w["enc_w"], w["enc_b"])
    a0 = act(z0)
    cols1 = nn.im2col3(a0, pr, pc)
    z1 = nn.dense(cols1, w["c1_w"], w["c1_b"])
    a1 = act(z1)
    cols2 = nn.im2col3(a1, pr, pc)
    z2 = nn.dense(cols2, w["c2_w"], w["c2_b"])
    a2 = act(z2)
    out = nn.dense(a2, w["dec_w"], w["dec_b"])
    return out, (inp, z0, cols1, z1, cols2, z2, a2)


def net_backward(params: DenoiserParams, cache, dout: np.ndarray, need_weights: bool = True):
    """Reverse pass of :func:`net_forward`. Returns (d_input, weight_grads or None)."""
    w = params.weights
    _, dact = nn.ACTIVATIONS[params.activation]
    pr, pc = params.spec.periodic_rows, params.spec.periodic_columns
    inp, z0, cols1, z1, cols2, z2, a2 = cache
    da2, g_dec_w, g_dec_b = nn.dense_backward(a2, w["dec_w"], dout)
    dz2 = da2 * dact(z2)
    dcols2, g_c2_w, g_c2_b = nn.dense_backward(cols2, w["c2_w"], dz2)
    da1 = nn.col2im3(dcols2, pr, pc)
    dz1 = da1 * dact(z1)
    dcols1, g_c1_w, g_c1_b = nn.dense_backward(cols1, w["c1_w"], dz1)
    da0 = nn.col2im3(dcols1, pr, pc)
    dz0 = da0 * dact(z0)
    dinp, g_enc_w, g_enc_b = nn.dense_backward(inp, w["enc_w"], dz0)
    grads = None
    if need_weights:
        grads = {"enc_w": g_enc_w, "enc_b": g_enc_b, "c1_w": g_c1_w, "c1_b": g_c1_b,
                 "c2_w": g_c2_w, "c2_b": g_c2_b, "dec_w": g_dec_w, "dec_b": g_dec_b}
    return dinp, grads


@dataclass
class DenoiseCache:
    net_cache: tuple
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    batched: bool


def _batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x, True) if x.ndim == 4 else (x[None], False)


def denoise_forward(params: DenoiserParams, z: np.ndarray, x_prev: np.ndarray, x_cur: np.ndarray,
                    sigma, counter: PassCounter | None = None):
    """d(Z; x_prev, x_cur, sigma) for physical-unit conditioning arrays.

    Returns (denoised, latent, cache); shapes follow ``z`` (batched or not).
    """
    zb, batched = _batch(z)
    pb, _ = _batch(x_prev)
    cb, _ = _batch(x_cur)
    C = params.n_channels
    if zb.shape[1:] != params.spec.shape or pb.shape != zb.shape or cb.shape != zb.shape:
        raise ValidationError(f"denoiser input shapes {zb.shape}, {pb.shape}, {cb.shape} do not match grid")
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (zb.shape[0],))
    c_skip, c_out, c_in, c_noise = precond(sig, params.sigma_data)
    st = params.state_stats
    inp = np.concatenate([
        c_in * zb,
        (pb - st.mean) / st.scale,
        (cb - st.mean) / st.scale,
        np.broadcast_to(c_noise, zb.shape[:3] + (1,)),
    ], axis=-1)
    F, net_cache = net_forward(params, inp)
    out = c_skip * zb + c_out * F
    latent = net_cache[-1]
    if counter is not None:
        counter.forward_passes += 1
    cache = DenoiseCache(net_cache, c_skip, c_out, c_in, batched)
    if not batched:
        return out[0], latent[0], cache
    assert inp.shape[-1] == 3 * C + 1
    return out, latent, cache


def denoise_backward(params: DenoiserParams, cache: DenoiseCache, cotangent: np.ndarray,
                     counter: PassCounter | None = None):
    """VJP of :func:`denoise_forward`: gradients w.r.t. (z, x_prev, x_cur)."""
    cot, _ = _batch(cotangent)
    C = params.n_channels
    dinp, _ = net_backward(params, cache.net_cache, cache.c_out * cot, need_weights=False)
    st = params.state_stats
    dz = cache.c_skip * cot + cache.c_in * dinp[..., :C]
    dprev = dinp[..., C:2 * C] / st.scale
    dcur = dinp[..., 2 * C:3 * C] / st.scale
    if counter is not None:
        counter.backward_passes += 1
    if not cache.batched:
        return dz[0], dprev[0], dcur[0]
    return dz, dprev, dcur


@dataclass
class DenoiserInputs:
    z: np.ndarray
    x_prev: np.ndarray
    x_cur: np.ndarray
    sigma: float


def vjp_denoiser(inputs: DenoiserInputs, params: DenoiserParams, cotangent: np.ndarray,
                 counter: PassCounter | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode derivative of the denoiser at ``inputs`` applied to ``cotangent``."""
    out, _, cache = denoise_forward(params, inputs.z, inputs.x_prev, inputs.x_cur, inputs.sigma)
    if np.shape(cotangent) != out.shape:
        raise ValidationError(f"cotangent shape {np.shape(cotangent)} != output shape {out.shape}")
    dz, dprev, dcur = denoise_backward(params, cache, cotangent, counter)
    return {"z": dz, "x_prev": dprev, "x_cur": dcur}


# ---------------------------------------------------------------- sampling

def run_sampler(params: DenoiserParams, schedule: NoiseSchedule, x_prev: np.ndarray, x_cur: np.ndarray,
                noise: np.ndarray, counter: PassCounter | None = None,
                latent_tap: list | None = None,
                denoiser: Callable | None = None) -> np.ndarray:
    """Deterministic first-order sampler; returns the final normalized residual Z_N.

    ``denoiser(z, sigma, i)`` overrides the network (used for oracle checks).
    """
    z = schedule.sigmas[0] * noise
    for i in range(schedule.N):
        sigma = schedule.sigmas[i]
        if denoiser is None:
            zhat, latent, _ = denoise_forward(params, z, x_prev, x_cur, sigma, counter)
            if latent_tap is not None:
                latent_tap.append(latent.copy())
        else:
            zhat = denoiser(z, sigma, i)
            if counter is not None:
                counter.forward_passes += 1
        z = zhat + schedule.ratio(i) * (z - zhat)
        if not np.all(np.isfinite(z)):
            raise SamplingError("non-finite residual during sampling", step=i)
    return z


def reconstruct(x_cur: np.ndarray, z: np.ndarray, residual_stats: NormStats) -> np.ndarray:
    """X_next = X_cur + s * Z (diagonal residual scaling)."""
    return np.asarray(x_cur) + residual_stats.scale * z


def sample_forecast(x_prev: AtmosphericState, x_cur: AtmosphericState, params: DenoiserParams,
                    schedule: NoiseSchedule, rng: np.random.Generator, latent_tap: list | None = None,
                    counter: PassCounter | None = None) -> tuple[AtmosphericState, list]:
    if not params.trained:
        raise StateError("denoiser parameters are not trained")
    for s in (x_prev, x_cur):
        if s.spec != params.spec:
            raise ValidationError("state does not conform to the model grid")
    tap = [] if latent_tap is None else latent_tap
    noise = rng.standard_normal(params.spec.shape)
    z = run_sampler(params, schedule, x_prev.data, x_cur.data, noise, counter, tap)
    raw = reconstruct(x_cur.data, z, params.residual_stats)
    return AtmosphericState.from_raw(params.spec, raw, x_cur.time_index + 1), tap


def forecast_noise(seed: int, time_index: int, spec: GridSpec) -> np.ndarray:
    """Initial sampler noise for the forecast issued from state ``time_index``."""
    return np.random.default_rng([int(seed), int(time_index)]).standard_normal(spec.shape)


class DiffusionForecaster:
    """Forecaster with noise tied to the issue time, so reruns reproduce the same forecast."""

    def __init__(self, params: DenoiserParams, schedule: NoiseSchedule, seed: int = 0):
        self.params = params
        self.schedule = schedule
        self.seed = seed

    @property
    def is_trained(self) -> bool:
        return self.params.trained

    def forecast(self, x_prev: AtmosphericState, x_cur: AtmosphericState) -> AtmosphericState:
        if not self.params.trained:
            raise StateError("denoiser parameters are not trained")
        noise = forecast_noise(self.seed, x_cur.time_index, self.params.spec)
        z = run_sampler(self.params, self.schedule, x_prev.data, x_cur.data, noise)
        return AtmosphericState.from_raw(self.params.spec, reconstruct(x_cur.data, z, self.params.residual_stats),
                                         x_cur.time_index + 1)


# ---------------------------------------------------------------- training

def fit_stats(traj: Trajectory) -> tuple[NormStats, NormStats]:
    data = traj.stack()
    return NormStats.fit(data), NormStats.fit(data[1:] - data[:-1], zero_mean=True)


def training_triples(traj: Trajectory, residual_stats: NormStats):
    data = traj.stack()
    prev, cur, nxt = data[:-2], data[1:-1], data[2:]
    return prev, cur, (nxt - cur) / residual_stats.scale


def _edm_loss_and_grad(params, z_clean, prev, cur, sigma, noise, need_grad=True):
    zn = z_clean + sigma.reshape(-1, 1, 1, 1) * noise
    c_skip, c_out, c_in, c_noise = precond(sigma, params.sigma_data)
    st = params.state_stats
    inp = np.concatenate([
        c_in * zn, (prev - st.mean) / st.scale, (cur - st.mean) / st.scale,
        np.broadcast_to(c_noise, zn.shape[:3] + (1,)),
    ], axis=-1)
    F, cache = net_forward(params, inp)
    target = (z_clean - c_skip * zn) / c_out
    diff = F - target
    loss = float(np.mean(diff ** 2))
    if not need_grad:
        return loss, None
    _, grads = net_backward(params, cache, 2.0 * diff / diff.size)
    return loss, grads


def _sample_sigmas(rng, n, cfg: TrainConfig, schedule: NoiseSchedule):
    s = np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(n))
    return np.clip(s, schedule.sigmas[-2], schedule.sigmas[0])


def train(dataset: Trajectory, schedule: NoiseSchedule, hyper: TrainConfig,
          stats: tuple[NormStats, NormStats] | None = None) -> DenoiserParams:
    """Denoising score matching on (X^{t-1}, X^t) -> normalized residual triples."""
    if len(dataset) < 3:
        raise ValidationError("training needs at least 3 consecutive states")
    state_stats, residual_stats = stats or fit_stats(dataset)
    rng = np.random.default_rng(hyper.seed)
    params = init_params(dataset.spec, state_stats, residual_stats, hyper.hidden,
                         hyper.activation, hyper.sigma_data, rng)
    prev, cur, target = training_triples(dataset, residual_stats)
    n_train = len(target) - hyper.holdout_steps if len(target) > hyper.holdout_steps + 2 else len(target)

    # fixed probe batch to measure progress
    probe = rng.integers(0, n_train, size=min(32, n_train))
    probe_sigma = _sample_sigmas(rng, probe.size, hyper, schedule)
    probe_noise = rng.standard_normal(target[probe].shape)

    def probe_loss():
        return _edm_loss_and_grad(params, target[probe], prev[probe], cur[probe],
                                  probe_sigma, probe_noise, need_grad=False)[0]

    initial = probe_loss()
    opt = nn.Adam(params.weights, lr=hyper.lr)
    losses = []
    for it in range(hyper.iterations):
        idx = rng.integers(0, n_train, size=hyper.batch_size)
        sigma = _sample_sigmas(rng, hyper.batch_size, hyper, schedule)
        noise = rng.standard_normal(target[idx].shape)
        loss, grads = _edm_loss_and_grad(params, target[idx], prev[idx], cur[idx], sigma, noise)
        if not np.isfinite(loss):
            raise TrainingError(
                f"training diverged: loss={loss}, last finite={losses[-1] if losses else None}", step=it)
        gnorm = nn.clip_by_global_norm(grads, hyper.grad_clip)
        opt.step(params.weights, grads, nn.cosine_lr(it, hyper.iterations, hyper.lr))
        losses.append(loss)
        if hyper.log_every and (it + 1) % hyper.log_every == 0:
            log.info("denoiser iter %d loss %.4f (grad norm %.3f)", it + 1,
                     float(np.mean(losses[-hyper.log_every:])), gnorm)
    final = probe_loss()
    if not np.isfinite(final):
        raise TrainingError("training produced non-finite probe loss")
    params.trained = True
    params.history = {"initial_loss": initial, "final_loss": final, "n_train": int(n_train),
                      "loss_curve": [float(np.mean(losses[i:i + 50])) for i in range(0, len(losses), 50)]}
    return params


# ---------------------------------------------------------------- persistence

def save_params(path: str | Path, params: DenoiserParams, extra: dict | None = None) -> Path:
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({f"state/{k}": v for k, v in params.state_stats.to_arrays().items()})
    arrays.update({f"residual/{k}": v for k, v in params.residual_stats.to_arrays().items()})
    meta = {"kind": "denoiser", "grid": params.spec.to_dict(), "hidden": params.hidden,
            "activation": params.activation, "sigma_data": params.sigma_data,
            "trained": params.trained, "history": params.history,
            "architecture": "enc1x1-conv3x3-conv3x3-dec1x1", **(extra or {})}
    return write_fld(path, arrays, meta)


def load_params(path: str | Path) -> DenoiserParams:
    meta, arrays = read_fld(path)
    w = {k[2:]: v for k, v in arrays.items() if k.startswith("w/")}
    return DenoiserParams(
        w, GridSpec.from_dict(meta["grid"]),
        NormStats(arrays["state/mean"], arrays["state/scale"]),
        NormStats(arrays["residual/mean"], arrays["residual/scale"]),
        int(meta["hidden"]), meta["activation"], float(meta["sigma_data"]),
        bool(meta["trained"]), meta.get("history", {}),
    )
