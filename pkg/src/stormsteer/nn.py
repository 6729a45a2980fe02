"""Minimal numpy layers with hand-derived reverse-mode derivatives.

Tensors are channels-last, (B, H, W, C).  Spatial padding follows the grid:
columns wrap when periodic, rows are zero padded unless periodic.
"""

from __future__ import annotations

import numpy as np


# activations: name -> (f, f') with f' expressed in terms of the pre-activation
def _silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


def pad_grid(x: np.ndarray, periodic_rows: bool, periodic_columns: bool, width: int = 1) -> np.ndarray:
    p = width
    if periodic_rows:
        x = np.concatenate([x[:, -p:], x, x[:, :p]], axis=1)
    else:
        x = np.pad(x, ((0, 0), (p, p), (0, 0), (0, 0)))
    if periodic_columns:
        x = np.concatenate([x[:, :, -p:], x, x[:, :, :p]], axis=2)
    else:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (0, 0)))
    return x


def unpad_grid_grad(gp: np.ndarray, periodic_rows: bool, periodic_columns: bool, width: int = 1) -> np.ndarray:
    """Adjoint of :func:`pad_grid`: fold halo gradients back onto the interior."""
    p = width
    if periodic_columns:
        g = gp[:, :, p:-p].copy()
        g[:, :, -p:] += gp[:, :, :p]
        g[:, :, :p] += gp[:, :, -p:]
    else:
        g = gp[:, :, p:-p]
    if periodic_rows:
        out = g[:, p:-p].copy()
        out[:, -p:] += g[:, :p]
        out[:, :p] += g[:, -p:]
    else:
        out = g[:, p:-p]
    return out


def im2col3(x: np.ndarray, periodic_rows: bool, periodic_columns: bool) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, 9C) of 3x3 neighborhoods, offset-major."""
    B, H, W, C = x.shape
    xp = pad_grid(x, periodic_rows, periodic_columns)
    return np.concatenate([xp[:, i:i + H, j:j + W] for i in range(3) for j in range(3)], axis=-1)


def col2im3(dcols: np.ndarray, periodic_rows: bool, periodic_columns: bool) -> np.ndarray:
    B, H, W, C9 = dcols.shape
    C = C9 // 9
    gp = np.zeros((B, H + 2, W + 2, C))
    k = 0
    for i in range(3):
        for j in range(3):
            gp[:, i:i + H, j:j + W] += dcols[..., k * C:(k + 1) * C]
            k += 1
    return unpad_grid_grad(gp, periodic_rows, periodic_columns)


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Returns (dx, dw, db) for y = x @ w + b over arbitrary leading dims."""
    k = x.shape[-1]
    dw = x.reshape(-1, k).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.T, dw, db


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        self.t += 1
        lr = self.lr if lr is None else lr
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def cosine_lr(step: int, total: int, base: float, warmup: int = 50, floor: float = 0.05) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * min(frac, 1.0))))
