"""Image, material, and distributional evaluation metrics.

Image metrics: scale-invariant log RMSE (HDR), scale-invariant linear RMSE,
PSNR against a fixed peak of 1.0, and mean local SSIM with the standard
11x11 Gaussian window. Material metric: scale-invariant log RMSE between
dense half/difference-angle BRDF tables. Distributional metric: a PCA
Gaussian fitted to coefficient samples, scored by log-likelihood and
Mahalanobis distance, with best-k-of-n aggregation.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .brdf import ReflectanceParams, tabulate_merl_style
from .errors import InsufficientDataError
from .sh import ShCoefficients

LOG_FLOOR = 1e-6
LPIPS_UNAVAILABLE = "unavailable"


def _masked_pair(x, y, mask):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if mask is None:
        return x.ravel(), y.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[: mask.ndim]:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape}")
    return x[mask].ravel(), y[mask].ravel()


def si_log_rmse(x, y, mask=None) -> float:
    """RMSE of log x - log y after removing the optimal global log offset.

    Equivalently the population std of the log difference. Values are
    floored at 1e-6 before the log so dark pixels stay finite.
    """
    xs, ys = _masked_pair(x, y, mask)
    if xs.size == 0:
        raise InsufficientDataError("metric undefined on an empty mask")
    d = np.log(np.maximum(xs, LOG_FLOOR)) - np.log(np.maximum(ys, LOG_FLOOR))
    return float(np.sqrt(np.mean((d - d.mean()) ** 2)))


def si_rmse(x, y, mask=None) -> float:
    """RMSE after the global scale a* = <x,y>/<x,x> minimizing ||a x - y||."""
    xs, ys = _masked_pair(x, y, mask)
    if xs.size == 0:
        raise InsufficientDataError("metric undefined on an empty mask")
    denom = float(xs @ xs)
    a = float(xs @ ys) / denom if denom > 0 else 0.0
    return float(np.sqrt(np.mean((a * xs - ys) ** 2)))


def optimal_log_scale(x, y, mask=None) -> float:
    """Scale to apply to x so it best matches y in log space."""
    xs, ys = _masked_pair(x, y, mask)
    if xs.size == 0:
        raise InsufficientDataError("scale undefined on an empty mask")
    d = np.log(np.maximum(ys, LOG_FLOOR)) - np.log(np.maximum(xs, LOG_FLOOR))
    return float(np.exp(d.mean()))


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; +inf when identical."""
    xs, ys = _masked_pair(x, y, None)
    mse = float(np.mean((xs - ys) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _local_means(img: np.ndarray, kernel2d: np.ndarray) -> np.ndarray:
    n = kernel2d.shape[0]
    win = sliding_window_view(img, (n, n))
    return np.einsum("hwij,ij->hw", win, kernel2d, optimize=False)


def ssim(x, y, window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over fully valid windows; C1 = 0.01^2, C2 = 0.03^2.

    Accepts 2-D images or 3-D channel stacks (channel SSIMs averaged).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        return float(np.mean([ssim(x[..., c], y[..., c], window, sigma) for c in range(x.shape[2])]))
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D or 3-D arrays")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")

    k1d = _gaussian_kernel(window, sigma)
    k2d = np.outer(k1d, k1d)
    c1, c2 = 0.01**2, 0.03**2
    mu_x = _local_means(x, k2d)
    mu_y = _local_means(y, k2d)
    var_x = _local_means(x * x, k2d) - mu_x * mu_x
    var_y = _local_means(y * y, k2d) - mu_y * mu_y
    cov = _local_means(x * y, k2d) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def brdf_log_rmse(
    psi_a: ReflectanceParams,
    rho_a,
    psi_b: ReflectanceParams,
    rho_b,
    resolution: tuple[int, int, int] = (16, 16, 16),
) -> float:
    """Scale-invariant log RMSE between two materials' dense BRDF tables."""
    ta = tabulate_merl_style(psi_a, np.asarray(rho_a, dtype=np.float64), resolution)
    tb = tabulate_merl_style(psi_b, np.asarray(rho_b, dtype=np.float64), resolution)
    both = ta.mask & tb.mask
    return si_log_rmse(ta.values[both], tb.values[both])


# ---------------------------------------------------------------------------
# PCA Gaussian scoring


@dataclass
class PcaGaussianModel:
    """Gaussian over coefficient vectors in a retained principal subspace."""

    mean: np.ndarray  # (d,)
    axes: np.ndarray  # (k, d) orthonormal rows
    variances: np.ndarray  # (k,) floored eigenvalues
    ratio: float  # requested retained-variance ratio
    n_dim: int
    n_retained: int

    def project(self, vec: np.ndarray) -> np.ndarray:
        vec = _as_vector(vec)
        if vec.shape != (self.n_dim,):
            raise ValueError(f"expected dimension {self.n_dim}, got {vec.shape}")
        return self.axes @ (vec - self.mean)


def _as_vector(sample) -> np.ndarray:
    if isinstance(sample, ShCoefficients):
        return sample.vector()
    return np.asarray(sample, dtype=np.float64).ravel()


def fit_pca(samples, ratio: float = 0.99) -> PcaGaussianModel:
    """Fit the retained-variance PCA Gaussian to coefficient samples.

    Keeps the smallest axis count whose cumulative eigenvalue share reaches
    ``ratio``; per-axis variances are floored at 1e-8 of the top eigenvalue
    so near-degenerate directions stay scoreable.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise InsufficientDataError(f"PCA needs at least 2 samples, got {len(samples)}")
    vecs = np.stack([_as_vector(s) for s in samples])
    n, d = vecs.shape
    mean = vecs.mean(axis=0)
    centered = vecs - mean
    # population covariance: duplicating every sample leaves the fit unchanged
    _, svals, vt = np.linalg.svd(centered / np.sqrt(n), full_matrices=False)
    lam = svals**2
    total = float(lam.sum())
    if total <= 0.0:
        k = 1
    else:
        cum = np.cumsum(lam)
        k = int(np.searchsorted(cum, ratio * total * (1.0 - 1e-12)) + 1)
        k = min(max(k, 1), len(lam))
        assert cum[k - 1] >= ratio * total * (1.0 - 1e-9)  # ≤ (1-ratio) variance lost
    axes = vt[:k].copy()
    for row in axes:  # deterministic sign: first nonzero component positive
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    floor = max(1e-8 * (lam[0] if len(lam) else 0.0), 1e-18)
    variances = np.maximum(lam[:k], floor)
    return PcaGaussianModel(
        mean=mean, axes=axes, variances=variances, ratio=ratio, n_dim=d, n_retained=k
    )


def gaussian_score(model: PcaGaussianModel, gt) -> tuple[float, float]:
    """(log_likelihood, mahalanobis) of gt in the retained subspace."""
    z = model.project(gt)
    q = z * z / model.variances
    mahalanobis = float(np.sqrt(q.sum()))
    log_likelihood = -0.5 * float(q.sum() + np.sum(np.log(2.0 * np.pi * model.variances)))
    return log_likelihood, mahalanobis


def subspace_residual(model: PcaGaussianModel, gt) -> float:
    """Norm of the component of gt - mean outside the retained subspace."""
    vec = _as_vector(gt)
    centered = vec - model.mean
    z = model.axes @ centered
    return float(np.linalg.norm(centered - model.axes.T @ z))


def topk_aggregate(values, k: int = 3, direction: str = "lower") -> float:
    """Mean of the k best values; ``direction`` says which end is best."""
    if direction not in ("lower", "higher"):
        raise ValueError(f"unknown metric direction {direction!r}")
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size < k:
        raise InsufficientDataError(f"need at least {k} values, got {vals.size}")
    ordered = np.sort(vals)
    best = ordered[:k] if direction == "lower" else ordered[-k:]
    return float(best.mean())


# ---------------------------------------------------------------------------
# reports


def format_metric(value) -> str:
    if isinstance(value, str):
        return value
    v = float(value)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


@dataclass
class ScoreReport:
    """Per-sample metric table with a direction-aware best-k aggregate row."""

    names: list[str]
    directions: dict[str, str]  # name -> "lower" | "higher" | "info"
    k: int = 3
    samples: list[dict] = field(default_factory=list)

    def add_sample(self, values: dict) -> None:
        missing = set(self.names) - set(values)
        if missing:
            raise ValueError(f"sample is missing metrics {sorted(missing)}")
        self.samples.append({name: values[name] for name in self.names})

    def aggregate(self) -> dict:
        if len(self.samples) < self.k:
            raise InsufficientDataError(
                f"aggregate needs at least {self.k} samples, got {len(self.samples)}"
            )
        out = {}
        for name in self.names:
            direction = self.directions.get(name, "info")
            column = [s[name] for s in self.samples]
            if direction == "info" or any(isinstance(v, str) for v in column):
                out[name] = ""
            else:
                out[name] = topk_aggregate(column, self.k, direction)
        return out

    def save_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["sample"] + list(self.names))
            for i, sample in enumerate(self.samples):
                writer.writerow([i] + [format_metric(sample[n]) for n in self.names])
            if len(self.samples) >= self.k:
                agg = self.aggregate()
                writer.writerow(["AGGREGATE"] + [format_metric(agg[n]) for n in self.names])


def save_projection_csv(path: str | os.PathLike, model: PcaGaussianModel, groups: dict) -> None:
    """2-D PCA scatter data: rows (sample_id, source, pc1, pc2) per group."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "source", "pc1", "pc2"])
        for source, vecs in groups.items():
            for i, vec in enumerate(vecs):
                z = model.project(vec)
                pc1 = float(z[0]) if model.n_retained >= 1 else 0.0
                pc2 = float(z[1]) if model.n_retained >= 2 else 0.0
                writer.writerow([i, source, repr(pc1), repr(pc2)])
