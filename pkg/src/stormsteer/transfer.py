"""Deterministic half-step forecaster with a different architecture.

Each cell's next half-step increment is regressed from the 3x3 neighborhood
of the two most recent states by a two-layer perceptron (shared over cells).
Two half-steps cover one model step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .dynamics import Trajectory
from .errors import StateError, TrainingError, ValidationError
from .fields import AtmosphericState, GridSpec, NormStats
from .fld import read_fld, write_fld

log = logging.getLogger(__name__)


@dataclass
class TransferTrainConfig:
    hidden: int = 48
    activation: str = "tanh"
    iterations: int = 1500
    batch_size: int = 8
    lr: float = 3e-3
    grad_clip: float = 1.0
    holdout_steps: int = 80
    seed: int = 0


@dataclass(eq=False)
class TransferParams:
    weights: dict[str, np.ndarray]
    spec: GridSpec
    state_stats: NormStats
    increment_stats: NormStats
    hidden: int
    activation: str = "tanh"
    trained: bool = False
    history: dict = field(default_factory=dict)


def init_transfer(spec: GridSpec, state_stats: NormStats, increment_stats: NormStats,
                  hidden: int = 48, activation: str = "tanh", rng=None) -> TransferParams:
    if activation not in nn.ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    rng = rng or np.random.default_rng(0)
    C = spec.n_channels
    fan = 9 * 2 * C
    w = {"w1": rng.standard_normal((fan, hidden)) / np.sqrt(fan), "b1": np.zeros(hidden),
         "w2": rng.standard_normal((hidden, C)) * 0.5 / np.sqrt(hidden), "b2": np.zeros(C)}
    return TransferParams(w, spec, state_stats, increment_stats, hidden, activation)


def _features(params: TransferParams, prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    st = params.state_stats
    x = np.concatenate([(prev - st.mean) / st.scale, (cur - st.mean) / st.scale], axis=-1)
    return nn.im2col3(x, params.spec.periodic_rows, params.spec.periodic_columns)


def _mlp(params: TransferParams, feats: np.ndarray):
    act, _ = nn.ACTIVATIONS[params.activation]
    h_pre = nn.dense(feats, params.weights["w1"], params.weights["b1"])
    h = act(h_pre)
    return nn.dense(h, params.weights["w2"], params.weights["b2"]), (feats, h_pre, h)


def predict_increment(params: TransferParams, prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Normalized half-step increment; inputs may be batched (B, H, W, C)."""
    batched = np.ndim(cur) == 4
    p = prev if batched else prev[None]
    c = cur if batched else cur[None]
    out, _ = _mlp(params, _features(params, p, c))
    return out if batched else out[0]


def half_step(params: TransferParams, prev: AtmosphericState, cur: AtmosphericState,
              time_index: int | None = None) -> AtmosphericState:
    if not params.trained:
        raise StateError("transfer model is not trained")
    for s in (prev, cur):
        if s.spec != params.spec:
            raise ValidationError("state does not conform to the transfer model grid")
    inc = predict_increment(params, prev.data, cur.data)
    raw = cur.data + params.increment_stats.scale * inc
    return AtmosphericState.from_raw(params.spec, raw, cur.time_index + 1 if time_index is None else time_index)


def train_transfer(dataset: Trajectory, hyper: TransferTrainConfig) -> TransferParams:
    """Regress the next half-step state from the two preceding half-step states."""
    if len(dataset) < 3:
        raise ValidationError("training needs at least 3 consecutive states")
    data = dataset.stack()
    state_stats = NormStats.fit(data)
    inc_stats = NormStats.fit(data[1:] - data[:-1], zero_mean=True)
    rng = np.random.default_rng(hyper.seed)
    params = init_transfer(dataset.spec, state_stats, inc_stats, hyper.hidden, hyper.activation, rng)
    prev, cur = data[:-2], data[1:-1]
    target = (data[2:] - cur) / inc_stats.scale
    n_train = len(target) - hyper.holdout_steps if len(target) > hyper.holdout_steps + 2 else len(target)
    probe = rng.integers(0, n_train, size=min(32, n_train))

    def loss_at(idx):
        out, _ = _mlp(params, _features(params, prev[idx], cur[idx]))
        return float(np.mean((out - target[idx]) ** 2))

    initial = loss_at(probe)
    _, dact = nn.ACTIVATIONS[params.activation]
    opt = nn.Adam(params.weights, lr=hyper.lr)
    for it in range(hyper.iterations):
        idx = rng.integers(0, n_train, size=hyper.batch_size)
        out, (feats, h_pre, h) = _mlp(params, _features(params, prev[idx], cur[idx]))
        diff = out - target[idx]
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise TrainingError(f"transfer training diverged (loss={loss})", step=it)
        dh, g_w2, g_b2 = nn.dense_backward(h, params.weights["w2"], 2.0 * diff / diff.size)
        _, g_w1, g_b1 = nn.dense_backward(feats, params.weights["w1"], dh * dact(h_pre))
        grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}
        nn.clip_by_global_norm(grads, hyper.grad_clip)
        opt.step(params.weights, grads, nn.cosine_lr(it, hyper.iterations, hyper.lr))
    final = loss_at(probe)
    params.trained = True
    params.history = {"initial_loss": initial, "final_loss": final, "n_train": int(n_train)}
    log.info("transfer model loss %.4f -> %.4f", initial, final)
    return params


@dataclass
class TransferRollout:
    first: AtmosphericState
    second: AtmosphericState

    @property
    def precip_halves(self) -> tuple[np.ndarray, np.ndarray]:
        return self.first.precipitation, self.second.precipitation

    @property
    def precip_total(self) -> np.ndarray:
        return self.first.precipitation + self.second.precipitation


def transfer_rollout(x_cur: AtmosphericState, x_tilde_next: AtmosphericState,
                     params: TransferParams) -> TransferRollout:
    """Two chained half-steps started from (x_cur, x_tilde_next).

    Output time indices count half-steps: the pair ends at 2 * (t + 2), one
    model step after ``x_tilde_next``.
    """
    if x_tilde_next.time_index != x_cur.time_index + 1:
        raise ValidationError("x_tilde_next must follow x_cur by one model step")
    base = 2 * x_tilde_next.time_index
    h1 = half_step(params, x_cur, x_tilde_next, base + 1)
    h2 = half_step(params, x_tilde_next, h1, base + 2)
    return TransferRollout(h1, h2)


def save_transfer(path: str | Path, params: TransferParams, extra: dict | None = None) -> Path:
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({f"state/{k}": v for k, v in params.state_stats.to_arrays().items()})
    arrays.update({f"increment/{k}": v for k, v in params.increment_stats.to_arrays().items()})
    meta = {"kind": "transfer", "grid": params.spec.to_dict(), "hidden": params.hidden,
            "activation": params.activation, "trained": params.trained, "history": params.history,
            "architecture": "stencil3x3-mlp2", **(extra or {})}
    return write_fld(path, arrays, meta)


def load_transfer(path: str | Path) -> TransferParams:
    meta, arrays = read_fld(path)
    return TransferParams(
        {k[2:]: v for k, v in arrays.items() if k.startswith("w/")},
        GridSpec.from_dict(meta["grid"]),
        NormStats(arrays["state/mean"], arrays["state/scale"]),
        NormStats(arrays["increment/mean"], arrays["increment/scale"]),
        int(meta["hidden"]), meta["activation"], bool(meta["trained"]), meta.get("history", {}),
    )
