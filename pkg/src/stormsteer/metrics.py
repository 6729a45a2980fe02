"""Intervention scores, perturbation profiles, latent deviation, PCA and FSS.

Functions accept either :class:`AtmosphericState` objects or bare 2-D
precipitation arrays.  Metrics that can be undefined for an event return
``None`` so aggregation can skip and count them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .fields import PERTURBABLE_VARIABLES, AtmosphericState, GridSpec, NormStats, TargetRegion

SPARSITY_THRESHOLD = 0.01


def _precip(x) -> np.ndarray:
    if isinstance(x, AtmosphericState):
        return x.precipitation
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"expected a 2-D precipitation field, got shape {a.shape}")
    return a


def cells_mask(region: TargetRegion, shape: tuple[int, int]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for r, c in region.cells:
        if not (0 <= r < shape[0] and 0 <= c < shape[1]):
            raise ValidationError(f"region cell {(r, c)} outside grid {shape}")
        m[r, c] = True
    if not m.any():
        raise ValidationError("empty target region")
    return m


def region_mean(x, region: TargetRegion) -> float:
    p = _precip(x)
    return float(p[cells_mask(region, p.shape)].mean())


def reduction_ratio(std_fc, int_fc, region: TargetRegion) -> float | None:
    base = region_mean(std_fc, region)
    if not base > 0:
        return None
    return 1.0 - region_mean(int_fc, region) / base


def success_rate(std_fc, int_fc, clim: np.ndarray, tau: float, region: TargetRegion) -> float | None:
    """Share of region cells above tau (anomaly) in the standard forecast that drop below it."""
    ps, pi = _precip(std_fc), _precip(int_fc)
    m = cells_mask(region, ps.shape)
    exceed = m & (ps - clim > tau)
    if not exceed.any():
        return None
    return float(np.mean((pi - clim)[exceed] < tau))


def nontarget_scores(std_fc, int_fc, region: TargetRegion) -> tuple[float, float]:
    ps, pi = _precip(std_fc), _precip(int_fc)
    outside = ~cells_mask(region, ps.shape)
    d = (pi - ps)[outside]
    return float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d)))


def perturbation_profile(delta: np.ndarray, spec: GridSpec, stats: NormStats,
                         threshold: float = SPARSITY_THRESHOLD) -> dict[str, dict[str, list[float]]]:
    """Per variable and level: spatial l2 norm and share of cells with |delta| < threshold.

    ``delta`` is in physical units and is normalized with ``stats`` here.
    """
    d = np.asarray(getattr(delta, "delta", delta), dtype=np.float64) / stats.scale
    out = {}
    for name in PERTURBABLE_VARIABLES:
        l2, sparsity = [], []
        for ch in spec.indices(name):
            s = d[..., ch]
            l2.append(float(np.sqrt(np.sum(s * s))))
            sparsity.append(float(np.mean(np.abs(s) < threshold)))
        out[name] = {"l2": l2, "sparsity": sparsity}
    return out


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    both_zero = (na == 0) & (nb == 0)
    denom = np.where(na * nb > 0, na * nb, 1.0)
    cos = np.where(na * nb > 0, dot / denom, 0.0)
    cos = np.where(both_zero, 1.0, cos)
    return np.clip(cos, -1.0, 1.0)


@dataclass
class LatentDeviation:
    rmse_in: np.ndarray
    rmse_out: np.ndarray
    cos_in: np.ndarray
    cos_out: np.ndarray

    def tail_mean(self, steps: int = 5) -> dict[str, float]:
        return {k: float(np.mean(getattr(self, k)[-steps:]))
                for k in ("rmse_in", "rmse_out", "cos_in", "cos_out")}

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("rmse_in", "rmse_out", "cos_in", "cos_out")}


def latent_deviation(traces_ref, traces_other, region_cells: np.ndarray) -> LatentDeviation:
    """Per sampling step RMSE and mean per-cell cosine similarity, inside and outside the region.

    Each trace is a sequence of (H, W, D) latent tensors; ``region_cells`` is an (H, W) bool mask.
    """
    if len(traces_ref) != len(traces_other):
        raise ValidationError(f"trace lengths differ: {len(traces_ref)} vs {len(traces_other)}")
    inside = np.asarray(region_cells, dtype=bool)
    if not inside.any() or inside.all():
        raise ValidationError("region must split the cells into two nonempty sets")
    cols = {k: [] for k in ("rmse_in", "rmse_out", "cos_in", "cos_out")}
    for a, b in zip(traces_ref, traces_other):
        a = np.asarray(a)
        b = np.asarray(b)
        if a.shape != b.shape or a.shape[:2] != inside.shape:
            raise ValidationError("latent shapes do not match")
        for tag, sel in (("in", inside), ("out", ~inside)):
            va, vb = a[sel], b[sel]
            cols[f"rmse_{tag}"].append(np.sqrt(np.mean((va - vb) ** 2)))
            cols[f"cos_{tag}"].append(np.mean(_cosine_rows(va, vb)))
    return LatentDeviation(*(np.array(cols[k]) for k in ("rmse_in", "rmse_out", "cos_in", "cos_out")))


@dataclass
class PCAResult:
    mean: np.ndarray
    axes: np.ndarray  # (3, D), orthonormal rows
    eigenvalues: np.ndarray  # top three, descending
    trajectory: np.ndarray  # (steps, 3)
    reference: np.ndarray  # (3,)

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.axes.T

    def to_dict(self) -> dict:
        return {"eigenvalues": self.eigenvalues.tolist(), "trajectory": self.trajectory.tolist(),
                "reference": self.reference.tolist()}


def pca_basis(samples: np.ndarray, k: int = 3, rank_tol: float = 1e-12):
    """Mean, top-k principal axes and covariance eigenvalues of (M, D) samples."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < k + 1:
        raise ValidationError(f"need at least {k + 1} samples for a {k}-D basis")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    eig = s ** 2 / (X.shape[0] - 1)
    if eig.size < k or eig[k - 1] <= rank_tol * max(eig[0], 1e-300):
        raise ValidationError(f"degenerate PCA basis: rank below {k}")
    return mean, vt[:k], eig[:k]


def pca_trajectory(pool: np.ndarray, trace: np.ndarray, reference: np.ndarray) -> PCAResult:
    """Fit PCA on pooled latent vectors, then project a per-step trace and a reference point."""
    mean, axes, eig = pca_basis(pool)
    res = PCAResult(mean, axes, eig, np.zeros((0, 3)), np.zeros(3))
    res.trajectory = res.project(np.asarray(trace).reshape(len(trace), -1))
    res.reference = res.project(np.asarray(reference).reshape(-1))
    return res


def fss(std_fc, int_fc, tau: float, region: TargetRegion | None, k: int) -> float:
    """Fractions skill score over the non-target cells with clipped k x k windows."""
    ps, pi = _precip(std_fc), _precip(int_fc)
    if k < 1 or k % 2 == 0 or k > min(ps.shape):
        raise ValidationError(f"window size must be odd and at most {min(ps.shape)}, got {k}")
    valid = np.ones(ps.shape, dtype=bool) if region is None else ~cells_mask(region, ps.shape)
    vf = valid.astype(np.float64)
    box = np.ones((k, k))
    count = ndimage.correlate(vf, box, mode="constant", cval=0.0)
    count = np.where(count > 0, count, 1.0)
    f = ndimage.correlate((ps > tau) * vf, box, mode="constant", cval=0.0) / count
    o = ndimage.correlate((pi > tau) * vf, box, mode="constant", cval=0.0) / count
    f, o = f[valid], o[valid]
    denom = np.sum(f * f) + np.sum(o * o)
    if denom == 0:
        return 1.0
    return float(1.0 - np.sum((f - o) ** 2) / denom)
