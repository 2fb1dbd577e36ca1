"""Equirectangular HDR environment maps and their I/O.

Geometry conventions used everywhere in this library:

* world up is +Y, the camera looks along -Z, so the viewer direction
  (surface toward camera) is +Z;
* a direction (x, y, z) maps to colatitude theta = arccos(y) and azimuth
  phi = atan2(x, -z), taken modulo 2*pi;
* pixel (i, j) of an H x W map is centered at theta = pi*(i+0.5)/H,
  phi = 2*pi*(j+0.5)/W, so row 0 is the zenith and the camera-forward
  direction (0, 0, -1) sits at the phi = 0 wrap seam between the last
  and first columns.

Radiance is stored as float64 (H, W, 3) arrays. PFM files are raw float32
and round-trip bit-exactly; Radiance RGBE files are lossy (~1% from the
shared-exponent encoding). RLE-compressed RGBE scanlines are accepted on
read; files are always written uncompressed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import HdrParseError


@dataclass
class EnvironmentMap:
    """Equirectangular radiance map with positive, finite values."""

    data: np.ndarray  # (H, W, 3) float64, >= 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"environment map must be (H, W, 3), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError("environment map must have at least one pixel")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("environment map contains non-finite values")
        if np.any(self.data < 0):
            raise ValueError("environment map contains negative radiance")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# direction <-> grid geometry


def directions_to_angles(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions (..., 3) -> (theta, phi) with phi in [0, 2*pi)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(dirs[..., 1], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 0], -dirs[..., 2])
    phi = np.mod(phi, 2.0 * np.pi)
    return theta, phi


def angles_to_directions(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """(theta, phi) -> unit directions, inverse of :func:`directions_to_angles`."""
    theta, phi = np.broadcast_arrays(
        np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64)
    )
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=-1)


def grid_angles(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center (theta_i, phi_j) as 1-D arrays of length H and W."""
    theta = np.pi * (np.arange(height) + 0.5) / height
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width
    return theta, phi


def grid_directions(height: int, width: int) -> np.ndarray:
    """Unit direction of every pixel center, shape (H, W, 3)."""
    theta, phi = grid_angles(height, width)
    return angles_to_directions(theta[:, None], phi[None, :])


def solid_angles(height: int, width: int) -> np.ndarray:
    """Exact per-pixel solid angle (H, W); rows share the same value.

    weight(i, j) = (2*pi/W) * (cos(theta_top) - cos(theta_bottom)) for the
    pixel's latitude band; the total is exactly 4*pi up to rounding.
    """
    i = np.arange(height)
    band = np.cos(np.pi * i / height) - np.cos(np.pi * (i + 1) / height)
    row = (2.0 * np.pi / width) * band
    return np.repeat(row[:, None], width, axis=1)


def lookup(env: EnvironmentMap, dirs: np.ndarray) -> np.ndarray:
    """Bilinear radiance lookup along unit directions (..., 3) -> (..., 3).

    Azimuth wraps around; colatitude is clamped at the poles.
    """
    h, w = env.height, env.width
    theta, phi = directions_to_angles(dirs)
    fi = theta / np.pi * h - 0.5
    fj = phi / (2.0 * np.pi) * w - 0.5

    i0 = np.clip(np.floor(fi), 0, h - 1).astype(np.intp)
    i1 = np.minimum(i0 + 1, h - 1)
    ti = np.clip(fi - i0, 0.0, 1.0)

    j0f = np.floor(fj)
    tj = fj - j0f
    j0 = np.mod(j0f.astype(np.intp), w)
    j1 = np.mod(j0 + 1, w)

    d = env.data
    top = d[i0, j0] * (1.0 - tj)[..., None] + d[i0, j1] * tj[..., None]
    bot = d[i1, j0] * (1.0 - tj)[..., None] + d[i1, j1] * tj[..., None]
    return top * (1.0 - ti)[..., None] + bot * ti[..., None]


def downsample(env: EnvironmentMap, factor: int) -> EnvironmentMap:
    """Solid-angle-weighted block average by an integer factor.

    Preserves the total integral against any piecewise-constant integrand,
    which is what the strided rendering mode needs.
    """
    h, w = env.height, env.width
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide {h}x{w}")
    if factor == 1:
        return EnvironmentMap(env.data.copy())
    wts = solid_angles(h, w)
    num = (env.data * wts[:, :, None]).reshape(h // factor, factor, w // factor, factor, 3)
    den = wts.reshape(h // factor, factor, w // factor, factor)
    out = num.sum(axis=(1, 3)) / den.sum(axis=(1, 3))[:, :, None]
    return EnvironmentMap(out)


# ---------------------------------------------------------------------------
# PFM (portable float map)


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n and buf[pos : pos + 1].isspace():
        pos += 1
    if pos >= n:
        raise HdrParseError("unexpected end of PFM header", offset=pos)
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    """Read a PFM file; returns (H, W, 3) for 'PF', (H, W) for 'Pf'.

    Rows are stored bottom-first in the file and returned top-down.
    """
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _next_token(buf, 0)
    if magic not in (b"PF", b"Pf"):
        raise HdrParseError(f"not a PFM file (magic {magic!r})", offset=0)
    wtok, pos = _next_token(buf, pos)
    htok, pos = _next_token(buf, pos)
    stok, pos = _next_token(buf, pos)
    try:
        width, height = int(wtok), int(htok)
        scale = float(stok)
    except ValueError as e:
        raise HdrParseError(f"bad PFM header field: {e}", offset=pos) from None
    if width <= 0 or height <= 0 or scale == 0.0:
        raise HdrParseError("bad PFM dimensions or scale", offset=pos)
    pos += 1  # single whitespace byte terminates the header
    channels = 3 if magic == b"PF" else 1
    count = width * height * channels
    dtype = "<f4" if scale < 0 else ">f4"
    end = pos + 4 * count
    if end > len(buf):
        raise HdrParseError(
            f"PFM payload truncated (need {4 * count} bytes, have {len(buf) - pos})",
            offset=len(buf),
        )
    data = np.frombuffer(buf[pos:end], dtype=dtype).astype(np.float64)
    data = data.reshape(height, width, channels)[::-1]  # bottom row first on disk
    if abs(scale) != 1.0:
        data = data * abs(scale)
    return data if channels == 3 else data[:, :, 0]


def write_pfm(path: str | os.PathLike, data: np.ndarray) -> None:
    """Write float32 PFM, little-endian (scale -1.0), bottom row first."""
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    elif data.ndim == 2:
        magic = b"Pf"
    else:
        raise ValueError(f"PFM data must be (H, W, 3) or (H, W), got {data.shape}")
    h, w = data.shape[0], data.shape[1]
    payload = np.ascontiguousarray(data[::-1], dtype="<f4")
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(payload.tobytes())


# ---------------------------------------------------------------------------
# Radiance RGBE (.hdr)


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    rgbe = rgbe.astype(np.float64)
    exp = rgbe[..., 3]
    scale = np.where(exp == 0, 0.0, np.ldexp(1.0, (exp - 136).astype(np.int64)))
    return rgbe[..., :3] * scale[..., None]


def _float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    v = rgb.max(axis=-1)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    live = v >= 1e-32
    if np.any(live):
        m, e = np.frexp(v[live])
        scale = m * 256.0 / v[live]
        comp = np.clip(rgb[live] * scale[:, None], 0, 255).astype(np.uint8)
        out[live, :3] = comp
        out[live, 3] = (e + 128).astype(np.uint8)
    return out


def _read_rgbe_scanline(buf: bytes, pos: int, width: int) -> tuple[np.ndarray, int]:
    if pos + 4 > len(buf):
        raise HdrParseError("truncated RGBE scanline", offset=pos)
    b0, b1, b2, b3 = buf[pos], buf[pos + 1], buf[pos + 2], buf[pos + 3]
    if b0 == 2 and b1 == 2 and (b2 << 8 | b3) == width:
        # adaptive RLE: four component planes, each run-length coded
        pos += 4
        planes = np.empty((4, width), dtype=np.uint8)
        for c in range(4):
            filled = 0
            while filled < width:
                if pos >= len(buf):
                    raise HdrParseError("truncated RLE plane", offset=pos)
                count = buf[pos]
                pos += 1
                if count > 128:  # run of a repeated byte
                    count -= 128
                    if pos >= len(buf) or filled + count > width:
                        raise HdrParseError("bad RLE run", offset=pos)
                    planes[c, filled : filled + count] = buf[pos]
                    pos += 1
                else:  # literal bytes
                    if count == 0 or filled + count > width or pos + count > len(buf):
                        raise HdrParseError("bad RLE literal", offset=pos)
                    planes[c, filled : filled + count] = np.frombuffer(
                        buf[pos : pos + count], dtype=np.uint8
                    )
                    pos += count
                filled += count
        return planes.T.copy(), pos
    # flat scanline
    end = pos + 4 * width
    if end > len(buf):
        raise HdrParseError("truncated flat RGBE scanline", offset=pos)
    flat = np.frombuffer(buf[pos:end], dtype=np.uint8).reshape(width, 4)
    return flat, end


def read_hdr(path: str | os.PathLike) -> np.ndarray:
    """Read a Radiance RGBE file into an (H, W, 3) float array."""
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(b"#?RADIANCE"):
        raise HdrParseError("missing #?RADIANCE magic", offset=0)
    pos = buf.find(b"\n")
    if pos < 0:
        raise HdrParseError("unterminated RGBE header", offset=len(buf))
    pos += 1
    # header lines until the blank separator
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise HdrParseError("unterminated RGBE header", offset=pos)
        line = buf[pos:nl]
        pos = nl + 1
        if line == b"":
            break
        if line.startswith(b"FORMAT=") and line != b"FORMAT=32-bit_rle_rgbe":
            raise HdrParseError(f"unsupported RGBE format {line!r}", offset=pos)
    nl = buf.find(b"\n", pos)
    if nl < 0:
        raise HdrParseError("missing RGBE resolution line", offset=pos)
    parts = buf[pos:nl].split()
    if len(parts) != 4 or parts[0] != b"-Y" or parts[2] != b"+X":
        raise HdrParseError(f"unsupported RGBE orientation {buf[pos:nl]!r}", offset=pos)
    try:
        height, width = int(parts[1]), int(parts[3])
    except ValueError:
        raise HdrParseError("bad RGBE resolution line", offset=pos) from None
    pos = nl + 1
    rows = np.empty((height, width, 4), dtype=np.uint8)
    for i in range(height):
        rows[i], pos = _read_rgbe_scanline(buf, pos, width)
    return _rgbe_to_float(rows)


def write_hdr(path: str | os.PathLike, data: np.ndarray) -> None:
    """Write Radiance RGBE, uncompressed scanlines."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"RGBE data must be (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    rgbe = _float_to_rgbe(data)
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\n")
        f.write(b"FORMAT=32-bit_rle_rgbe\n\n")
        f.write(f"-Y {h} +X {w}\n".encode("ascii"))
        f.write(rgbe.tobytes())


def load_hdr(path: str | os.PathLike) -> EnvironmentMap:
    """Load an environment map, sniffing PFM vs RGBE from the magic bytes."""
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"#?":
        data = read_hdr(path)
    elif head in (b"PF", b"Pf"):
        data = read_pfm(path)
        if data.ndim == 2:
            raise HdrParseError("grayscale PFM is not an environment map", offset=0)
    else:
        raise HdrParseError(f"unrecognized HDR magic {head!r}", offset=0)
    return EnvironmentMap(np.clip(data, 0.0, None))


def save_pfm(path: str | os.PathLike, env: EnvironmentMap) -> None:
    write_pfm(path, env.data)


def save_hdr(path: str | os.PathLike, env: EnvironmentMap) -> None:
    write_hdr(path, env.data)


# ---------------------------------------------------------------------------
# tone mapping and PNG helpers


def tonemap_ldr(env: EnvironmentMap | np.ndarray) -> np.ndarray:
    """HDR -> uint8 LDR: scale by 1/percentile_99, clamp, gamma 1/2.2.

    An all-nonpositive percentile falls back to scale 1, so an all-zero map
    maps to zero bytes. A value exactly at the 99th percentile lands on 255.
    """
    data = env.data if isinstance(env, EnvironmentMap) else np.asarray(env, dtype=np.float64)
    p99 = np.percentile(data, 99.0)
    scale = 1.0 / p99 if p99 > 0 else 1.0
    ldr = np.clip(data * scale, 0.0, 1.0) ** (1.0 / 2.2)
    return np.round(ldr * 255.0).astype(np.uint8)


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a uint8 (H, W) or (H, W, 3) image, or a bool mask, as PNG."""
    from PIL import Image

    image = np.asarray(image)
    if image.dtype == bool:
        image = image.astype(np.uint8) * 255
    if image.dtype != np.uint8:
        raise ValueError("PNG writer expects uint8 or bool data")
    Image.fromarray(image).save(path)


def read_png(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path))


def mirror_warp(env: EnvironmentMap, size: int):
    """Ideal-mirror reflectance map: sample env along r = 2(n.wo)n - wo.

    The output is the geometric warp a perfect mirror sphere would show an
    orthographic camera at +Z; it is the sharp reference the near-mirror
    rendered map converges to.
    """
    from .render import ReflectanceMap, disk_normals

    normals, mask = disk_normals(size)
    refl = 2.0 * normals[..., 2:3] * normals - np.array([0.0, 0.0, 1.0])
    values = np.zeros((size, size, 3), dtype=np.float64)
    values[mask] = lookup(env, refl[mask])
    return ReflectanceMap(values=values, mask=mask)
