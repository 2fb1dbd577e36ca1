import io
import struct

import numpy as np
import pytest

from refmap import envmap as em
from refmap.errors import HdrParseError


def test_solid_angles_2x4_hand_value():
    # 2 rows x 4 cols: each band covers cos spans of 1, so every pixel is
    # (2*pi/4) * 1 = pi/2
    w = em.solid_angles(2, 4)
    assert w.shape == (2, 4)
    np.testing.assert_allclose(w, np.pi / 2.0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (17, 9), (128, 256)])
def test_solid_angles_sum_to_sphere(shape):
    total = em.solid_angles(*shape).sum()
    assert abs(total - 4.0 * np.pi) < 1e-9


def test_direction_convention_round_trip():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    theta, phi = em.directions_to_angles(d)
    back = em.angles_to_directions(theta, phi)
    np.testing.assert_allclose(back, d, atol=1e-12)


def test_direction_convention_anchor_points():
    # up is +Y; the camera looks along -Z so the forward direction lands at
    # phi = 0 and the direction behind the camera (+Z) at phi = pi
    theta, phi = em.directions_to_angles(np.array([0.0, 1.0, 0.0]))
    assert abs(theta) < 1e-12
    theta, phi = em.directions_to_angles(np.array([0.0, 0.0, -1.0]))
    assert abs(theta - np.pi / 2) < 1e-12 and abs(phi) < 1e-12
    theta, phi = em.directions_to_angles(np.array([0.0, 0.0, 1.0]))
    assert abs(phi - np.pi) < 1e-12
    theta, phi = em.directions_to_angles(np.array([1.0, 0.0, 0.0]))
    assert abs(phi - np.pi / 2) < 1e-12


def test_pixel_centers_match_grid_directions():
    h, w = 8, 16
    dirs = em.grid_directions(h, w)
    theta, phi = em.grid_angles(h, w)
    assert abs(theta[0] - np.pi * 0.5 / h) < 1e-15
    assert abs(phi[3] - 2 * np.pi * 3.5 / w) < 1e-15
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)


def test_lookup_exact_at_pixel_centers():
    rng = np.random.default_rng(1)
    env = em.EnvironmentMap(rng.uniform(0.1, 2.0, size=(6, 12, 3)))
    dirs = em.grid_directions(6, 12)
    got = em.lookup(env, dirs.reshape(-1, 3)).reshape(6, 12, 3)
    np.testing.assert_allclose(got, env.data, atol=1e-12)


def test_lookup_wraps_azimuth():
    env = em.EnvironmentMap(np.zeros((4, 8, 3)))
    env.data[:, 0] = 1.0
    env.data[:, 7] = 3.0
    # halfway between the last and first columns
    theta = np.pi * 1.5 / 4
    phi = 0.0  # phi=0 sits exactly between centers of col 7 and col 0
    val = em.lookup(env, em.angles_to_directions(np.array(theta), np.array(phi)))
    np.testing.assert_allclose(val, 2.0, atol=1e-12)


# ---------------------------------------------------------------------------
# PFM


def test_pfm_read_hand_built_file(tmp_path):
    # 4 wide, 2 high, all ones; PFM stores the bottom row first
    payload = np.ones(4 * 2 * 3, dtype="<f4").tobytes()
    raw = b"PF\n4 2\n-1.0\n" + payload
    p = tmp_path / "ones.pfm"
    p.write_bytes(raw)
    data = em.read_pfm(p)
    assert data.shape == (2, 4, 3)
    np.testing.assert_array_equal(data, 1.0)


def test_pfm_bottom_row_first_orientation(tmp_path):
    top = np.full((1, 2, 3), 7.0, dtype="<f4")
    bottom = np.full((1, 2, 3), 3.0, dtype="<f4")
    raw = b"PF\n2 2\n-1.0\n" + bottom.tobytes() + top.tobytes()
    p = tmp_path / "rows.pfm"
    p.write_bytes(raw)
    data = em.read_pfm(p)
    assert data[0, 0, 0] == 7.0  # file's last row is the image top
    assert data[1, 0, 0] == 3.0


def test_pfm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    values = rng.uniform(0, 10, size=(5, 9, 3)).astype(np.float32).astype(np.float64)
    p = tmp_path / "rt.pfm"
    em.write_pfm(p, values)
    back = em.read_pfm(p)
    assert np.array_equal(back, values)
    # header bytes as pinned
    head = p.read_bytes()[:32]
    assert head.startswith(b"PF\n9 5\n-1.0\n")


def test_pfm_env_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    env = em.EnvironmentMap(rng.uniform(0, 4, size=(6, 8, 3)).astype(np.float32))
    p = tmp_path / "env.pfm"
    em.save_pfm(p, env)
    back = em.load_hdr(p)
    assert np.array_equal(back.data, env.data)


def test_pfm_truncated_payload_reports_offset(tmp_path):
    raw = b"PF\n4 2\n-1.0\n" + b"\x00" * 10
    p = tmp_path / "trunc.pfm"
    p.write_bytes(raw)
    with pytest.raises(HdrParseError) as exc:
        em.read_pfm(p)
    assert exc.value.offset == len(raw)


def test_pfm_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(HdrParseError):
        em.read_pfm(p)


# ---------------------------------------------------------------------------
# RGBE


def _hdr_bytes(height, width, pixels):
    head = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n"
    head += f"-Y {height} +X {width}\n".encode()
    return head + bytes(pixels)


def test_rgbe_unit_pixel_decodes_to_one(tmp_path):
    # (128, 128, 128, 129): mantissa 128/256 with exponent 129-128 -> 1.0
    p = tmp_path / "one.hdr"
    p.write_bytes(_hdr_bytes(1, 1, [128, 128, 128, 129]))
    data = em.read_hdr(p)
    np.testing.assert_array_equal(data, np.ones((1, 1, 3)))


def test_rgbe_zero_exponent_is_black(tmp_path):
    p = tmp_path / "zero.hdr"
    p.write_bytes(_hdr_bytes(1, 1, [200, 10, 5, 0]))
    data = em.read_hdr(p)
    np.testing.assert_array_equal(data, 0.0)


def test_rgbe_rle_scanline_decodes(tmp_path):
    # adaptive RLE: 2,2,hi,lo then per-component planes. 8 pixels, each
    # component a run of 8 identical bytes.
    width = 8
    planes = b""
    for value in (128, 64, 32, 129):
        planes += bytes([128 + width, value])  # run marker, byte
    p = tmp_path / "rle.hdr"
    p.write_bytes(_hdr_bytes(1, width, []) + bytes([2, 2, 0, width]) + planes)
    data = em.read_hdr(p)
    expect = np.array([128, 64, 32]) / 256.0 * 2.0
    np.testing.assert_allclose(data, np.broadcast_to(expect, (1, width, 3)))


def test_rgbe_rle_literal_runs(tmp_path):
    # planes are per component: mantissas vary per pixel, exponent plane is
    # a uniform 129 so every pixel decodes with scale 2 / 256
    width = 4
    planes = b""
    for comp in range(3):
        planes += bytes([4, 10 + comp, 20 + comp, 30 + comp, 40 + comp])
    planes += bytes([4, 129, 129, 129, 129])
    p = tmp_path / "lit.hdr"
    p.write_bytes(_hdr_bytes(1, width, []) + bytes([2, 2, 0, width]) + planes)
    data = em.read_hdr(p)
    assert data.shape == (1, 4, 3)
    np.testing.assert_allclose(data[0, 0], np.array([10, 11, 12]) / 256.0 * 2.0)
    np.testing.assert_allclose(data[0, 3], np.array([40, 41, 42]) / 256.0 * 2.0)


def test_rgbe_round_trip_within_encoding_error(tmp_path):
    rng = np.random.default_rng(4)
    env = em.EnvironmentMap(rng.uniform(0.01, 50.0, size=(8, 16, 3)))
    p = tmp_path / "rt.hdr"
    em.save_hdr(p, env)
    back = em.load_hdr(p)
    # the shared exponent quantizes every channel at the scale of the
    # brightest one, so judge the error against the per-pixel maximum
    peak = env.data.max(axis=-1, keepdims=True)
    rel = np.abs(back.data - env.data) / peak
    assert rel.max() < 0.01


def test_rgbe_missing_magic(tmp_path):
    p = tmp_path / "bad.hdr"
    p.write_bytes(b"#?NOPE\n\n-Y 1 +X 1\n\x00\x00\x00\x00")
    with pytest.raises(HdrParseError) as exc:
        em.read_hdr(p)
    assert exc.value.offset == 0


def test_rgbe_truncated_scanline_offset(tmp_path):
    p = tmp_path / "trunc.hdr"
    p.write_bytes(_hdr_bytes(1, 4, [1, 2, 3]))
    with pytest.raises(HdrParseError):
        em.read_hdr(p)


# ---------------------------------------------------------------------------
# tonemap


def test_tonemap_p99_lands_on_255():
    # 101 distinct values; the linear-interp 99th percentile is exactly 99
    vals = np.arange(101, dtype=np.float64)
    data = np.stack([vals, vals, vals], axis=-1).reshape(101, 1, 3)
    ldr = em.tonemap_ldr(em.EnvironmentMap(data))
    assert ldr[99, 0, 0] == 255
    assert ldr[100, 0, 0] == 255  # above the scale point clamps
    assert ldr[0, 0, 0] == 0


def test_tonemap_gamma_value():
    data = np.full((4, 4, 3), 0.5)
    data[0, 0] = 1.0  # 99th percentile of {45 x 0.5, 3 x 1.0} is exactly 1
    ldr = em.tonemap_ldr(em.EnvironmentMap(data))
    assert ldr[1, 1, 0] == round(0.5 ** (1 / 2.2) * 255)  # 186


def test_tonemap_all_zero_fallback():
    ldr = em.tonemap_ldr(em.EnvironmentMap(np.zeros((3, 3, 3))))
    assert ldr.dtype == np.uint8
    np.testing.assert_array_equal(ldr, 0)


# ---------------------------------------------------------------------------
# mirror warp


def test_mirror_warp_center_sees_behind_camera():
    # center normal (0,0,1) reflects the +Z view ray back to +Z, which sits
    # at theta pi/2, phi pi: make that column bright and everything else dark
    data = np.zeros((64, 128, 3))
    theta, phi = em.grid_angles(64, 128)
    j = int(np.argmin(np.abs(phi - np.pi)))
    data[:, j] = 10.0
    env = em.EnvironmentMap(data)
    warp = em.mirror_warp(env, 33)  # odd size puts a cell center at (0,0)
    center = warp.values[16, 16]
    assert center[0] > 4.0


def test_mirror_warp_mask_is_unit_disk():
    warp = em.mirror_warp(em.EnvironmentMap(np.ones((8, 16, 3))), 16)
    from refmap.render import disk_normals

    _, disk = disk_normals(16)
    np.testing.assert_array_equal(warp.mask, disk)
    assert not warp.values[~warp.mask].any()


def test_mirror_warp_linear_in_radiance():
    rng = np.random.default_rng(5)
    data = rng.uniform(0, 3, size=(16, 32, 3))
    w1 = em.mirror_warp(em.EnvironmentMap(data), 20)
    w2 = em.mirror_warp(em.EnvironmentMap(2.5 * data), 20)
    np.testing.assert_allclose(w2.values, 2.5 * w1.values, atol=1e-12)


def test_downsample_preserves_integral():
    rng = np.random.default_rng(6)
    env = em.EnvironmentMap(rng.uniform(0, 2, size=(16, 32, 3)))
    down = em.downsample(env, 4)
    w_full = em.solid_angles(16, 32)[:, :, None]
    w_down = em.solid_angles(4, 8)[:, :, None]
    np.testing.assert_allclose(
        (env.data * w_full).sum(axis=(0, 1)),
        (down.data * w_down).sum(axis=(0, 1)),
        rtol=1e-12,
    )


def test_environment_map_validation():
    with pytest.raises(ValueError):
        em.EnvironmentMap(np.ones((4, 4)))
    with pytest.raises(ValueError):
        em.EnvironmentMap(-np.ones((2, 2, 3)))
    bad = np.ones((2, 2, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        em.EnvironmentMap(bad)
