"""Reflectance maps on the Gaussian sphere and object renders.

A reflectance map is a square image over (u, v) in [-1, 1]^2; the pixel at
(u, v) inside the unit disk holds the outgoing radiance of a surface point
with normal n = (u, v, sqrt(1 - u^2 - v^2)) under a fixed orthographic
viewer w_o = +Z and a shared distant environment. Row 0 is v = +1, column 0
is u = -1.

Rendering integrates the BRDF against the environment over the pixel-center
direction grid with exact-area solid angles. Evaluation is chunked over
output pixels; a full 128^2 map against a 128x256 environment is ~0.5G BRDF
evaluations, so an integer ``env_stride`` is accepted to integrate against
a solid-angle-averaged downsampled environment instead.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import envmap as em
from .brdf import ReflectanceParams, disney_parts
from .envmap import EnvironmentMap

OMEGA_O = np.array([0.0, 0.0, 1.0])

# fraction of an environment row's angular height added (in quadrature) to
# the GGX width, so sub-pixel specular lobes integrate to the filtered
# environment instead of aliasing against the direction grid
SPECULAR_FOOTPRINT = 0.7

_LOBES = ("full", "albedo", "const")


@dataclass
class ReflectanceMap:
    """Radiance over the Gaussian sphere plus a validity mask.

    Noisy process slices may carry negative values; pristine renders are
    nonnegative wherever ``mask`` is set.
    """

    values: np.ndarray  # (N, N, 3) float64
    mask: np.ndarray  # (N, N) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError(f"map values must be (N, N, 3), got {self.values.shape}")
        if self.values.shape[0] != self.values.shape[1]:
            raise ValueError("reflectance maps are square")
        if self.mask.shape != self.values.shape[:2]:
            raise ValueError("mask shape does not match values")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("masked map values must be finite")

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class NormalMap:
    """Per-pixel unit normals with a foreground mask."""

    normals: np.ndarray  # (H, W, 3) float64
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.ndim != 3 or self.normals.shape[2] != 3:
            raise ValueError(f"normals must be (H, W, 3), got {self.normals.shape}")
        if self.mask.shape != self.normals.shape[:2]:
            raise ValueError("mask shape does not match normals")
        if self.mask.any():
            norms = np.linalg.norm(self.normals[self.mask], axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-3):
                raise ValueError("foreground normals must be unit length")


def disk_normals(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Normals of every map cell center and the unit-disk mask."""
    if size < 1:
        raise ValueError("map size must be positive")
    u = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v = 1.0 - (np.arange(size) + 0.5) / size * 2.0
    uu, vv = np.meshgrid(u, v, indexing="xy")
    rr = uu * uu + vv * vv
    mask = rr <= 1.0
    z = np.sqrt(np.clip(1.0 - rr, 0.0, None))
    normals = np.stack([uu, vv, z], axis=-1)
    normals[~mask] = 0.0
    return normals, mask


def sphere_normal_map(size: int) -> NormalMap:
    """Orthographic sphere filling the frame; background normals are zero."""
    normals, mask = disk_normals(size)
    return NormalMap(normals=normals, mask=mask)


# ---------------------------------------------------------------------------
# integration


def _env_quadrature(env: EnvironmentMap, env_stride: int):
    if env_stride != 1:
        env = em.downsample(env, env_stride)
    h, w = env.height, env.width
    dirs = em.grid_directions(h, w).reshape(-1, 3)
    omega = em.solid_angles(h, w).reshape(-1)
    radiance = env.data.reshape(-1, 3)
    footprint_sq = (SPECULAR_FOOTPRINT * np.pi / h) ** 2
    return dirs, omega, radiance, footprint_sq


def grid_footprint_sq(env_height: int) -> float:
    """Squared angular footprint added to GGX width on this grid."""
    return (SPECULAR_FOOTPRINT * np.pi / env_height) ** 2


def cell_sample_normals(size: int, subdiv: int) -> tuple[np.ndarray, np.ndarray]:
    """Sub-sampled normals covering every map cell.

    Returns ``(normals, inside)`` of shapes (size, size, subdiv**2, 3) and
    (size, size, subdiv**2): a regular subdiv x subdiv grid inside each
    cell's (n_x, n_y) footprint, with off-disk points flagged False. When an
    image ``subdiv`` times the map resolution is binned by
    ``lift_to_sphere``, these are exactly the binned pixels' normals, so
    averaging predictions over them reproduces the binning.
    """
    if size < 1:
        raise ValueError("map size must be positive")
    if subdiv < 1:
        raise ValueError("subdiv must be >= 1")
    fine = size * subdiv
    u = (np.arange(fine) + 0.5) / fine * 2.0 - 1.0
    v = 1.0 - (np.arange(fine) + 0.5) / fine * 2.0
    uu = u.reshape(size, subdiv)[None, :, None, :]  # (1, size, 1, subdiv)
    vv = v.reshape(size, subdiv)[:, None, :, None]  # (size, 1, subdiv, 1)
    uu, vv = np.broadcast_arrays(uu, vv)
    rr = uu * uu + vv * vv
    inside = rr <= 1.0  # same disk rule as disk_normals / sphere_normal_map
    z = np.sqrt(np.clip(1.0 - rr, 0.0, None))
    normals = np.stack([uu, vv, z], axis=-1)
    normals[~inside] = 0.0
    s = subdiv * subdiv
    return normals.reshape(size, size, s, 3), inside.reshape(size, size, s)


def weight_matrices(
    psi: ReflectanceParams,
    normals: np.ndarray,
    dirs: np.ndarray,
    omega: np.ndarray,
    diffuse_model: str = "burley",
    extra_alpha_sq: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Dense (P, D) quadrature weights for P normals against D directions.

    Returns (albedo_part, const_part): radiance at normal p is
    ``rho_d * (albedo_part @ L) + const_part @ L`` per channel. This is the
    linear-in-illumination form the inverse machinery depends on.
    """
    a, c = disney_parts(
        psi, normals[:, None, :], dirs[None, :, :], OMEGA_O, diffuse_model, extra_alpha_sq
    )
    cos_i = np.clip(normals @ dirs.T, 0.0, None)
    w = cos_i * omega[None, :]
    return a * w, c * w


def binned_weight_matrices(
    psi: ReflectanceParams,
    normals: np.ndarray,
    inside: np.ndarray,
    dirs: np.ndarray,
    omega: np.ndarray,
    diffuse_model: str = "burley",
    extra_alpha_sq: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature weights averaged over each cell's sub-sampled normals.

    ``normals`` is (P, S, 3) from ``cell_sample_normals`` with ``inside``
    (P, S) flagging on-disk sub-points. Each output row is the mean of
    ``weight_matrices`` rows over its valid sub-points, which models maps
    produced by binning a finer image instead of point predictions at cell
    centers.
    """
    if normals.ndim != 3 or normals.shape[2] != 3:
        raise ValueError(f"normals must be (P, S, 3), got {normals.shape}")
    if inside.shape != normals.shape[:2]:
        raise ValueError("inside mask shape does not match normals")
    p_n, s_n, _ = normals.shape
    d_n = dirs.shape[0]
    a_out = np.zeros((p_n, d_n))
    c_out = np.zeros((p_n, d_n))
    counts = np.maximum(inside.sum(axis=1), 1).astype(np.float64)
    chunk = max(1, int(4_000_000 / max(d_n * s_n, 1)))
    for start in range(0, p_n, chunk):
        sl = slice(start, min(start + chunk, p_n))
        a_w, c_w = weight_matrices(
            psi, normals[sl].reshape(-1, 3), dirs, omega, diffuse_model, extra_alpha_sq
        )
        keep = inside[sl].reshape(-1, 1)
        a_out[sl] = (a_w * keep).reshape(-1, s_n, d_n).sum(axis=1)
        c_out[sl] = (c_w * keep).reshape(-1, s_n, d_n).sum(axis=1)
    return a_out / counts[:, None], c_out / counts[:, None]


def _integrate(
    psi: ReflectanceParams,
    normals_flat: np.ndarray,
    rho_d: np.ndarray | None,
    texture_flat: np.ndarray | None,
    env: EnvironmentMap,
    diffuse_model: str,
    lobe: str,
    env_stride: int,
) -> np.ndarray:
    if lobe not in _LOBES:
        raise ValueError(f"unknown lobe {lobe!r}")
    dirs, omega, radiance, fp_sq = _env_quadrature(env, env_stride)
    n_px = normals_flat.shape[0]
    out = np.zeros((n_px, 3))
    # keep the (chunk x directions) temporaries around a few MB each
    chunk = max(1, int(4_000_000 / max(len(dirs), 1)))
    for start in range(0, n_px, chunk):
        sl = slice(start, min(start + chunk, n_px))
        a_w, c_w = weight_matrices(psi, normals_flat[sl], dirs, omega, diffuse_model, fp_sq)
        if lobe in ("full", "albedo"):
            albedo_rad = a_w @ radiance
            if texture_flat is not None:
                albedo_rad = albedo_rad * texture_flat[sl]
            else:
                albedo_rad = albedo_rad * rho_d[None, :]
            out[sl] += albedo_rad
        if lobe in ("full", "const"):
            out[sl] += c_w @ radiance
    return out


def render_reflectance_map(
    psi: ReflectanceParams,
    rho_d: np.ndarray,
    env: EnvironmentMap,
    size: int,
    diffuse_model: str = "burley",
    lobe: str = "full",
    env_stride: int = 1,
) -> ReflectanceMap:
    """Render the sphere of normals under a uniform diffuse albedo ``rho_d``."""
    rho_d = np.asarray(rho_d, dtype=np.float64).reshape(3)
    normals, mask = disk_normals(size)
    flat = normals[mask]
    vals = _integrate(psi, flat, rho_d, None, env, diffuse_model, lobe, env_stride)
    values = np.zeros((size, size, 3))
    values[mask] = vals
    return ReflectanceMap(values=values, mask=mask)


def render_irradiance_map(env: EnvironmentMap, size: int, env_stride: int = 1) -> ReflectanceMap:
    """Cosine-weighted irradiance E(n); the diffuse integral at unit albedo.

    A Lambertian surface of albedo rho_d radiates rho_d/pi * E(n); this map
    is the brute-force reference for the SH clamped-cosine convolution.
    """
    dirs, omega, radiance, _ = _env_quadrature(env, env_stride)
    normals, mask = disk_normals(size)
    flat = normals[mask]
    cos_i = np.clip(flat @ dirs.T, 0.0, None)
    vals = (cos_i * omega[None, :]) @ radiance
    values = np.zeros((size, size, 3))
    values[mask] = vals
    return ReflectanceMap(values=values, mask=mask)


def render_object(
    normals: NormalMap,
    texture: np.ndarray,
    psi: ReflectanceParams,
    env: EnvironmentMap,
    diffuse_model: str = "burley",
    lobe: str = "full",
    env_stride: int = 1,
) -> np.ndarray:
    """Shade an object given per-pixel normals; background pixels are zero.

    ``texture`` is either a single (3,) diffuse albedo or a per-pixel
    (H, W, 3) albedo image.
    """
    texture = np.asarray(texture, dtype=np.float64)
    fg = normals.mask
    flat_normals = normals.normals[fg]
    if texture.ndim == 1:
        tex_flat = np.broadcast_to(texture.reshape(1, 3), (flat_normals.shape[0], 3))
    elif texture.shape == normals.normals.shape:
        tex_flat = texture[fg]
    else:
        raise ValueError(
            f"texture must be (3,) or match the normal map {normals.normals.shape}, "
            f"got {texture.shape}"
        )
    vals = _integrate(psi, flat_normals, None, np.ascontiguousarray(tex_flat), env,
                      diffuse_model, lobe, env_stride)
    image = np.zeros(normals.normals.shape)
    image[fg] = vals
    return image


def lift_to_sphere(image: np.ndarray, normals: NormalMap, size: int) -> ReflectanceMap:
    """Bin foreground pixels by normal into map cells and average.

    Cells that receive no pixel, or whose center falls outside the unit
    disk, stay masked out; untextured convex objects round-trip to the
    rendered reflectance map up to in-cell normal variation.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != normals.normals.shape:
        raise ValueError(f"image shape {image.shape} does not match normal map")
    fg = normals.mask
    if not fg.any():
        raise ValueError("normal map has an empty foreground")
    n = normals.normals[fg]
    vals = image[fg]
    col = np.clip(((n[:, 0] + 1.0) / 2.0 * size).astype(np.intp), 0, size - 1)
    row = np.clip(((1.0 - n[:, 1]) / 2.0 * size).astype(np.intp), 0, size - 1)
    flat_idx = row * size + col
    counts = np.bincount(flat_idx, minlength=size * size)
    sums = np.stack(
        [np.bincount(flat_idx, weights=vals[:, ch], minlength=size * size) for ch in range(3)],
        axis=-1,
    )
    hit = counts > 0
    values = np.zeros((size * size, 3))
    values[hit] = sums[hit] / counts[hit, None]
    _, disk = disk_normals(size)
    mask = hit.reshape(size, size) & disk
    values = values.reshape(size, size, 3)
    values[~mask] = 0.0
    return ReflectanceMap(values=values, mask=mask)


def merge_raw_maps(maps: list[ReflectanceMap]) -> ReflectanceMap:
    """Per-cell masked average of raw maps from objects sharing a material.

    Cells valid in no input stay invalid.
    """
    if not maps:
        raise ValueError("need at least one map to merge")
    size = maps[0].size
    if any(m.size != size for m in maps):
        raise ValueError("maps must share one resolution")
    counts = np.zeros((size, size))
    total = np.zeros((size, size, 3))
    for m in maps:
        counts += m.mask
        total += np.where(m.mask[..., None], m.values, 0.0)
    mask = counts > 0
    values = np.zeros((size, size, 3))
    values[mask] = total[mask] / counts[mask, None]
    return ReflectanceMap(values=values, mask=mask)


# ---------------------------------------------------------------------------
# serialization


def save_reflectance_map(basepath: str | os.PathLike, rmap: ReflectanceMap) -> None:
    """Write ``{base}.pfm`` (radiance) and ``{base}_mask.png``."""
    base = os.fspath(basepath)
    em.write_pfm(base + ".pfm", rmap.values)
    em.write_png(base + "_mask.png", rmap.mask)


def load_reflectance_map(basepath: str | os.PathLike) -> ReflectanceMap:
    base = os.fspath(basepath)
    values = em.read_pfm(base + ".pfm")
    if values.ndim != 3:
        raise ValueError("reflectance map PFM must be 3-channel")
    mask_img = em.read_png(base + "_mask.png")
    if mask_img.ndim == 3:
        mask_img = mask_img[..., 0]
    return ReflectanceMap(values=values, mask=mask_img > 127)


def save_normal_map(path: str | os.PathLike, normals: NormalMap) -> None:
    """Normals as a 3-channel PFM; background pixels are written as zeros."""
    data = np.where(normals.mask[..., None], normals.normals, 0.0)
    em.write_pfm(path, data)


def load_normal_map(path: str | os.PathLike) -> NormalMap:
    data = em.read_pfm(path)
    if data.ndim != 3:
        raise ValueError("normal map PFM must be 3-channel")
    mask = np.linalg.norm(data, axis=-1) > 0.5
    return NormalMap(normals=data, mask=mask)
