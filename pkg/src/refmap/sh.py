"""Real spherical harmonics on equirectangular grids.

Basis: orthonormal real SH without the Condon-Shortley phase,

    Y_{l,0}  = N_l^0(cos theta)
    Y_{l,m}  = sqrt(2) N_l^m(cos theta) cos(m phi)   (m > 0)
    Y_{l,-m} = sqrt(2) N_l^m(cos theta) sin(m phi)   (m > 0)

where N_l^m is the fully normalized associated Legendre function, evaluated
with the stable (l - m)-indexed recurrence (naive factorial normalization
overflows float64 well before degree 32). Coefficients are stored per color
channel in the flat order idx = l*(l+1) + m.

Projection integrates pixel-center samples with Fejer-1 colatitude weights
and uniform azimuth weights. That rule is exact for products of harmonics
up to combined degree H-1, so project . reconstruct is an identity for
band-limited maps on any reasonably sized grid; the exact-area solid-angle
grid (envmap.solid_angles) is reserved for radiometric integrals.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .envmap import EnvironmentMap, grid_angles


@dataclass
class ShCoefficients:
    """Per-channel real SH coefficients up to ``degree``."""

    degree: int
    coeffs: np.ndarray  # (3, (degree+1)**2) float64

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        n = (self.degree + 1) ** 2
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if self.coeffs.shape != (3, n):
            raise ValueError(
                f"coefficients must have shape (3, {n}) for degree {self.degree}, "
                f"got {self.coeffs.shape}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients contain non-finite values")

    @property
    def n_coeffs(self) -> int:
        return self.coeffs.shape[1]

    def vector(self) -> np.ndarray:
        """Channel-major flattening, length 3*(degree+1)**2."""
        return self.coeffs.ravel().copy()

    @classmethod
    def from_vector(cls, degree: int, vec: np.ndarray) -> "ShCoefficients":
        n = (degree + 1) ** 2
        return cls(degree, np.asarray(vec, dtype=np.float64).reshape(3, n))

    @classmethod
    def zeros(cls, degree: int) -> "ShCoefficients":
        return cls(degree, np.zeros((3, (degree + 1) ** 2)))


def sh_index(l: int, m: int) -> int:
    if abs(m) > l:
        raise ValueError(f"|m| = {abs(m)} exceeds l = {l}")
    return l * (l + 1) + m


def _legendre_table(degree: int, x: np.ndarray) -> np.ndarray:
    """Fully normalized N_l^m(x) for all l, m <= degree; shape (L+1, L+1, ...)."""
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    table = np.zeros((degree + 1, degree + 1) + x.shape)
    table[0, 0] = np.full(x.shape, np.sqrt(1.0 / (4.0 * np.pi)))
    for m in range(1, degree + 1):
        table[m, m] = np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * table[m - 1, m - 1]
    for m in range(degree):
        table[m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * table[m, m]
    for m in range(degree + 1):
        for l in range(m + 2, degree + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            table[l, m] = a * (x * table[l - 1, m] - b * table[l - 2, m])
    return table


def sh_basis(degree: int, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Evaluate all harmonics up to ``degree``; output shape (..., (L+1)**2)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    theta, phi = np.broadcast_arrays(theta, phi)
    table = _legendre_table(degree, np.cos(theta))
    out = np.zeros(theta.shape + ((degree + 1) ** 2,))
    sqrt2 = np.sqrt(2.0)
    for l in range(degree + 1):
        out[..., sh_index(l, 0)] = table[l, 0]
        for m in range(1, l + 1):
            cm = np.cos(m * phi)
            sm = np.sin(m * phi)
            out[..., sh_index(l, m)] = sqrt2 * table[l, m] * cm
            out[..., sh_index(l, -m)] = sqrt2 * table[l, m] * sm
    return out


def colatitude_weights(height: int) -> np.ndarray:
    """Fejer-1 quadrature weights on the pixel-center colatitudes.

    Exact for integrands polynomial in cos(theta) up to degree height-1;
    the weights are positive and sum to 2 (the measure of d cos theta).
    """
    theta = np.pi * (np.arange(height) + 0.5) / height
    w = np.ones(height)
    for k in range(1, height // 2 + 1):
        w -= 2.0 * np.cos(2.0 * k * theta) / (4.0 * k * k - 1.0)
    return w * (2.0 / height)


def project(env: EnvironmentMap, degree: int) -> ShCoefficients:
    """Project an environment map onto harmonics up to ``degree``."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    h, w = env.height, env.width
    n = (degree + 1) ** 2
    if n > h * w:
        warnings.warn(
            f"projecting {n} coefficients from only {h * w} pixels; "
            "high bands will alias",
            stacklevel=2,
        )
    theta, phi = grid_angles(h, w)
    table = _legendre_table(degree, np.cos(theta))  # (L+1, L+1, H)
    wts = colatitude_weights(h)
    dphi = 2.0 * np.pi / w

    m_all = np.arange(degree + 1)
    cosm = np.cos(m_all[None, :] * phi[:, None])  # (W, L+1)
    sinm = np.sin(m_all[None, :] * phi[:, None])
    # azimuthal sums per row: (H, L+1, 3)
    ac = np.einsum("hwc,wm->hmc", env.data, cosm, optimize=False) * dphi
    as_ = np.einsum("hwc,wm->hmc", env.data, sinm, optimize=False) * dphi

    coeffs = np.zeros((3, n))
    sqrt2 = np.sqrt(2.0)
    for m in range(degree + 1):
        block = table[m:, m] * wts[None, :]  # (L+1-m, H)
        cc = np.einsum("li,ic->lc", block, ac[:, m, :], optimize=False)
        if m == 0:
            for l in range(degree + 1):
                coeffs[:, sh_index(l, 0)] = cc[l]
        else:
            ss = np.einsum("li,ic->lc", block, as_[:, m, :], optimize=False)
            for l in range(m, degree + 1):
                coeffs[:, sh_index(l, m)] = sqrt2 * cc[l - m]
                coeffs[:, sh_index(l, -m)] = sqrt2 * ss[l - m]
    return ShCoefficients(degree, coeffs)


def reconstruct(coeffs: ShCoefficients, height: int, width: int) -> np.ndarray:
    """Evaluate the band-limited field at pixel centers; shape (H, W, 3).

    The result is a plain array, not an EnvironmentMap: band-limited
    reconstructions of nonnegative maps routinely dip below zero.
    """
    degree = coeffs.degree
    theta, phi = grid_angles(height, width)
    table = _legendre_table(degree, np.cos(theta))  # (L+1, L+1, H)
    sqrt2 = np.sqrt(2.0)

    m_all = np.arange(degree + 1)
    cosm = np.cos(m_all[:, None] * phi[None, :])  # (L+1, W)
    sinm = np.sin(m_all[:, None] * phi[None, :])

    pc = np.zeros((degree + 1, height, 3))
    ps = np.zeros((degree + 1, height, 3))
    for m in range(degree + 1):
        ls = np.arange(m, degree + 1)
        idx_c = ls * (ls + 1) + m
        scale = 1.0 if m == 0 else sqrt2
        pc[m] = scale * np.einsum("cl,li->ic", coeffs.coeffs[:, idx_c], table[m:, m], optimize=False)
        if m > 0:
            idx_s = ls * (ls + 1) - m
            ps[m] = scale * np.einsum(
                "cl,li->ic", coeffs.coeffs[:, idx_s], table[m:, m], optimize=False
            )
    out = np.einsum("mic,mw->iwc", pc, cosm, optimize=False)
    out += np.einsum("mic,mw->iwc", ps, sinm, optimize=False)
    return out


def band_power(coeffs: ShCoefficients) -> np.ndarray:
    """Rotation-invariant band power p_l = sum over m and channels of c^2."""
    power = np.zeros(coeffs.degree + 1)
    for l in range(coeffs.degree + 1):
        idx = [sh_index(l, m) for m in range(-l, l + 1)]
        power[l] = float(np.sum(coeffs.coeffs[:, idx] ** 2))
    return power


def lambert_band_gains(degree: int) -> np.ndarray:
    """Clamped-cosine kernel gains A_l applied by Lambertian convolution.

    A_0 = pi, A_1 = 2*pi/3, odd l > 1 vanish, and even l follow the closed
    form with alternating sign and factorial falloff.
    """
    gains = np.zeros(degree + 1)
    for l in range(degree + 1):
        if l == 0:
            gains[l] = np.pi
        elif l == 1:
            gains[l] = 2.0 * np.pi / 3.0
        elif l % 2 == 1:
            gains[l] = 0.0
        else:
            half = l // 2
            # evaluate the factorial ratio in log space; degree 32 is already
            # beyond exact float64 factorials
            log_ratio = (
                sum(np.log(k) for k in range(1, l + 1))
                - l * np.log(2.0)
                - 2.0 * sum(np.log(k) for k in range(1, half + 1))
            )
            sign = -1.0 if (half - 1) % 2 else 1.0
            gains[l] = 2.0 * np.pi * sign / ((l + 2.0) * (l - 1.0)) * np.exp(log_ratio)
    return gains


def lambert_convolve(coeffs: ShCoefficients) -> ShCoefficients:
    """Scale each band by the clamped-cosine gain; result has the same degree.

    Reconstructing the result gives the irradiance map E(n) of the input
    radiance, the band-limited equal of the brute-force cosine integral.
    """
    gains = lambert_band_gains(coeffs.degree)
    out = coeffs.coeffs.copy()
    for l in range(coeffs.degree + 1):
        idx = [sh_index(l, m) for m in range(-l, l + 1)]
        out[:, idx] *= gains[l]
    return ShCoefficients(coeffs.degree, out)


# ---------------------------------------------------------------------------
# CSV export


def save_coefficients_csv(path: str | os.PathLike, coeffs: ShCoefficients) -> None:
    """Write rows (l, m, c_R, c_G, c_B)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["l", "m", "c_R", "c_G", "c_B"])
        for l in range(coeffs.degree + 1):
            for m in range(-l, l + 1):
                c = coeffs.coeffs[:, sh_index(l, m)]
                writer.writerow([l, m, repr(float(c[0])), repr(float(c[1])), repr(float(c[2]))])


def load_coefficients_csv(path: str | os.PathLike) -> ShCoefficients:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["l", "m"]:
            raise ValueError(f"unexpected coefficient CSV header {header}")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])))
    degree = max(r[0] for r in rows)
    coeffs = np.zeros((3, (degree + 1) ** 2))
    for l, m, r, g, b in rows:
        coeffs[:, sh_index(l, m)] = (r, g, b)
    return ShCoefficients(degree, coeffs)


def save_band_power_csv(path: str | os.PathLike, coeffs: ShCoefficients) -> None:
    """Write rows (l, power)."""
    power = band_power(coeffs)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["l", "power"])
        for l, p in enumerate(power):
            writer.writerow([l, repr(float(p))])
