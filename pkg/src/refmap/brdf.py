"""Principled BRDF: Burley diffuse + retro-reflection, GGX specular.

Materials are the triple psi = (metallic, roughness, specular), each in
[0, 1], applied to a per-channel diffuse albedo rho_d:

    f_r = (1 - metallic) * (rho_d / pi) * (f_diff + f_retro) + f_spec

with the published Burley diffuse/retro terms, a GGX normal distribution
under the alpha = roughness**2 remap (floored at 1e-3 so metallic(1, 0, 1)
stays a finite near-mirror lobe), separable Smith masking, and Schlick
Fresnel whose F0 lerps from 0.08*specular (dielectric) to rho_d (metal).

For every channel the value is affine in rho_d, so evaluation is split into
an albedo coefficient and an albedo-independent term; renders and the
closed-form texture solver exploit that split.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

ALPHA_FLOOR = 1e-3
DIELECTRIC_F0_SCALE = 0.08

# the schedule's fixed point: a smooth metallic mirror
MIRROR = None  # assigned after the dataclass exists


@dataclass(frozen=True)
class ReflectanceParams:
    """Material triple (metallic, roughness, specular), each in [0, 1]."""

    metallic: float
    roughness: float
    specular: float

    def __post_init__(self):
        for name in ("metallic", "roughness", "specular"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not 0.0 <= v <= 1.0 or not np.isfinite(v):
                raise ValueError(f"{name} = {v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.metallic, self.roughness, self.specular])

    @classmethod
    def from_array(cls, arr) -> "ReflectanceParams":
        m, r, s = np.asarray(arr, dtype=np.float64)
        return cls(float(m), float(r), float(s))


MIRROR = ReflectanceParams(1.0, 0.0, 1.0)


def distance_to_mirror(psi: ReflectanceParams) -> float:
    """Squared distance to the mirror state under the 1/sqrt(3) scaling.

    || (psi - psi_mirror) / sqrt(3) ||^2; the most distant material
    (0, 1, 0) sits at exactly 1.
    """
    d = psi.as_array() - MIRROR.as_array()
    return float(np.dot(d, d) / 3.0)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1)


def disney_parts(
    psi: ReflectanceParams,
    normal: np.ndarray,
    w_i: np.ndarray,
    w_o: np.ndarray,
    diffuse_model: str = "burley",
    extra_alpha_sq: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Split f_r into (albedo coefficient, albedo-free term).

    ``f_r = albedo_coef * rho_d + const_term`` holds exactly per channel,
    for any metallic, because Schlick Fresnel is itself affine in F0.
    Directions below the local horizon give zeros. ``diffuse_model`` is
    "burley" (default) or "lambert", the analytic-oracle mode where the
    diffuse factor is identically 1.

    ``extra_alpha_sq`` widens the GGX lobe in quadrature (added to alpha^2);
    renderers pass the direction grid's footprint so lobes narrower than a
    grid cell are integrated instead of point-sampled.
    """
    if diffuse_model not in ("burley", "lambert"):
        raise ValueError(f"unknown diffuse model {diffuse_model!r}")
    normal = np.asarray(normal, dtype=np.float64)
    w_i = np.asarray(w_i, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)

    ci = _dot(w_i, normal)
    co = _dot(w_o, normal)
    valid = (ci > 0.0) & (co > 0.0)
    ci_s = np.where(valid, ci, 1.0)
    co_s = np.where(valid, co, 1.0)

    h = w_i + w_o
    hlen = np.sqrt(np.clip(_dot(h, h), 1e-300, None))
    h = h / hlen[..., None]
    ch = np.clip(_dot(h, normal), -1.0, 1.0)
    cd = np.clip(_dot(w_i, h), 0.0, 1.0)  # theta_d: w_i.h == w_o.h

    gamma = psi.metallic
    alpha = max(psi.roughness * psi.roughness, ALPHA_FLOOR)
    a2 = alpha * alpha + float(extra_alpha_sq)

    d_ggx = a2 / (np.pi * (ch * ch * (a2 - 1.0) + 1.0) ** 2)

    def g1(c):
        return 2.0 * c / (c + np.sqrt(a2 + (1.0 - a2) * c * c))

    spec_core = d_ggx * g1(ci_s) * g1(co_s) / (4.0 * ci_s * co_s)
    s = (1.0 - cd) ** 5  # Schlick interpolant

    if diffuse_model == "burley":
        fl = (1.0 - ci_s) ** 5
        fv = (1.0 - co_s) ** 5
        rr = 2.0 * psi.roughness * cd * cd
        f_diff = (1.0 - 0.5 * fl) * (1.0 - 0.5 * fv)
        f_retro = rr * (fl + fv + fl * fv * (rr - 1.0))
        diffuse_factor = f_diff + f_retro
    else:
        diffuse_factor = np.ones_like(ci_s)

    albedo_coef = (1.0 - gamma) / np.pi * diffuse_factor + gamma * (1.0 - s) * spec_core
    const_term = (
        (1.0 - gamma) * DIELECTRIC_F0_SCALE * psi.specular * (1.0 - s) + s
    ) * spec_core

    zero = np.zeros_like(albedo_coef)
    return np.where(valid, albedo_coef, zero), np.where(valid, const_term, zero)


def eval_disney(
    psi: ReflectanceParams,
    rho_d: np.ndarray,
    normal: np.ndarray,
    w_i: np.ndarray,
    w_o: np.ndarray,
    diffuse_model: str = "burley",
) -> np.ndarray:
    """Evaluate f_r for every direction pair; returns (..., 3)."""
    rho_d = np.asarray(rho_d, dtype=np.float64)
    albedo_coef, const_term = disney_parts(psi, normal, w_i, w_o, diffuse_model)
    return albedo_coef[..., None] * rho_d + const_term[..., None]


# ---------------------------------------------------------------------------
# Rusinkiewicz-parameterized tables

TABLE_MAGIC = b"RBT1"


@dataclass
class BrdfTable:
    """Dense BRDF samples over (theta_half, theta_diff, phi_diff) cells.

    ``values`` is (n_h, n_d, n_p, 3); cells whose reconstructed direction
    pair dips below the horizon hold zeros and are excluded by ``mask``.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 4 or self.values.shape[3] != 3:
            raise ValueError(f"table must be (n_h, n_d, n_p, 3), got {self.values.shape}")
        if self.mask.shape != self.values.shape[:3]:
            raise ValueError("mask shape does not match table shape")


def rusinkiewicz_directions(
    theta_h: np.ndarray, theta_d: np.ndarray, phi_d: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Half/difference angles -> (w_i, w_o) in the local frame n = +z.

    The half vector is placed in the xz plane (isotropic BRDFs do not
    depend on its azimuth); w_o is w_i reflected about the half vector.
    """
    th, td, pd = np.broadcast_arrays(
        np.asarray(theta_h, dtype=np.float64),
        np.asarray(theta_d, dtype=np.float64),
        np.asarray(phi_d, dtype=np.float64),
    )
    d = np.stack(
        [np.sin(td) * np.cos(pd), np.sin(td) * np.sin(pd), np.cos(td)], axis=-1
    )
    cos_th, sin_th = np.cos(th), np.sin(th)
    # rotate the half-vector frame (z -> h) about y
    w_i = np.stack(
        [
            cos_th * d[..., 0] + sin_th * d[..., 2],
            d[..., 1],
            -sin_th * d[..., 0] + cos_th * d[..., 2],
        ],
        axis=-1,
    )
    h = np.stack([sin_th, np.zeros_like(th), cos_th], axis=-1)
    w_o = 2.0 * _dot(w_i, h)[..., None] * h - w_i
    return w_i, w_o


def tabulate_merl_style(
    psi: ReflectanceParams,
    rho_d: np.ndarray,
    resolution: tuple[int, int, int] = (16, 16, 16),
) -> BrdfTable:
    """Sample f_r on a cell-centered (theta_h, theta_d, phi_d) grid.

    Axes span [0, pi/2] x [0, pi/2] x [0, pi]; each axis needs at least
    two cells.
    """
    n_h, n_d, n_p = (int(v) for v in resolution)
    if min(n_h, n_d, n_p) < 2:
        raise ValueError(f"table resolution {resolution} must be >= 2 per axis")
    th = (np.arange(n_h) + 0.5) / n_h * (np.pi / 2.0)
    td = (np.arange(n_d) + 0.5) / n_d * (np.pi / 2.0)
    pd = (np.arange(n_p) + 0.5) / n_p * np.pi
    grid = np.meshgrid(th, td, pd, indexing="ij")
    w_i, w_o = rusinkiewicz_directions(*grid)
    normal = np.array([0.0, 0.0, 1.0])
    mask = (w_i[..., 2] > 0.0) & (w_o[..., 2] > 0.0)
    values = eval_disney(psi, rho_d, normal, w_i, w_o)
    values[~mask] = 0.0
    return BrdfTable(values=values, mask=mask)


def save_brdf_table(path: str | os.PathLike, table: BrdfTable) -> None:
    """Write the binary table plus a JSON sidecar describing the layout.

    Binary layout: three little-endian uint32 grid dimensions, a 4-byte
    magic, then the float64 samples in C order.
    """
    n_h, n_d, n_p = table.values.shape[:3]
    path = os.fspath(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<III", n_h, n_d, n_p))
        f.write(TABLE_MAGIC)
        f.write(np.ascontiguousarray(table.values, dtype="<f8").tobytes())
    sidecar = {
        "magic": TABLE_MAGIC.decode("ascii"),
        "dtype": "<f8",
        "shape": [n_h, n_d, n_p, 3],
        "axes": {
            "theta_half": {"count": n_h, "range_rad": [0.0, np.pi / 2.0], "sampling": "cell centers"},
            "theta_diff": {"count": n_d, "range_rad": [0.0, np.pi / 2.0], "sampling": "cell centers"},
            "phi_diff": {"count": n_p, "range_rad": [0.0, np.pi], "sampling": "cell centers"},
        },
        "mask": "cells whose direction pair falls below the horizon are zero-filled",
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_brdf_table(path: str | os.PathLike) -> BrdfTable:
    path = os.fspath(path)
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError("BRDF table header truncated")
        n_h, n_d, n_p = struct.unpack("<III", header[:12])
        if header[12:] != TABLE_MAGIC:
            raise ValueError(f"bad BRDF table magic {header[12:]!r}")
        payload = f.read()
    values = np.frombuffer(payload, dtype="<f8").reshape(n_h, n_d, n_p, 3).copy()
    th = (np.arange(n_h) + 0.5) / n_h * (np.pi / 2.0)
    td = (np.arange(n_d) + 0.5) / n_d * (np.pi / 2.0)
    pd = (np.arange(n_p) + 0.5) / n_p * np.pi
    w_i, w_o = rusinkiewicz_directions(*np.meshgrid(th, td, pd, indexing="ij"))
    mask = (w_i[..., 2] > 0.0) & (w_o[..., 2] > 0.0)
    return BrdfTable(values=values, mask=mask)
