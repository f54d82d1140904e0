import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from depthup import flow
from depthup.errors import ConfigError, FormatError, ShapeError


def textured(h=64, w=80, seed=0):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.random((h + 20, w + 20)), 2.0)[10:-10, 10:-10] * 255 * 4


def interior_epe(f, true, margin=12):
    e = np.hypot(f[..., 0] - true[0], f[..., 1] - true[1])
    return float(e[margin:-margin, margin:-margin].mean())


# -- grayscale and configs ---------------------------------------------------

def test_grayscale_formula():
    rgb = np.random.default_rng(1).random((4, 5, 3))
    g = flow.to_grayscale(rgb)
    for i, j in [(0, 0), (3, 4), (2, 1)]:
        r, gg, b = rgb[i, j]
        assert abs(g[i, j] - (0.299 * r + 0.587 * gg + 0.114 * b)) < 1e-6
    assert flow.to_grayscale(np.full((2, 2, 3), 255.0))[0, 0] == pytest.approx(255.0)
    np.testing.assert_allclose(flow.to_grayscale(np.full((2, 2, 3), 7.0)), 7.0)
    with pytest.raises(ShapeError):
        flow.to_grayscale(np.zeros((3, 3)))


def test_config_validation():
    flow.FlowConfig().validate()
    for bad in (dict(levels=0), dict(win_size=14), dict(poly_n=4), dict(iterations=0), dict(pyr_scale=0.7)):
        with pytest.raises(ConfigError):
            flow.FlowConfig(**bad).validate()


# -- polynomial expansion -----------------------------------------------------

def test_poly_constant_image():
    m = flow.poly_expansion(np.full((20, 20), 42.0), 5, 1.1)
    np.testing.assert_allclose(m.A, 0, atol=1e-9)
    np.testing.assert_allclose(m.b, 0, atol=1e-9)
    np.testing.assert_allclose(m.c, 42.0, atol=1e-9)


def test_poly_linear_ramp():
    u = np.arange(30, dtype=float)[None, :].repeat(25, 0)
    m = flow.poly_expansion(2.5 * u, 5, 1.1)
    inner = (slice(6, -6), slice(6, -6))
    np.testing.assert_allclose(m.b[inner][..., 0], 2.5, atol=1e-9)
    np.testing.assert_allclose(m.b[inner][..., 1], 0, atol=1e-9)
    np.testing.assert_allclose(m.A[inner], 0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.floats(-2, 2)] * 6))
def test_poly_recovers_quadratic(coef):
    """Oracle: a global quadratic written in coordinates centred on the probe pixel."""
    axx, ayy, axy, bx, by, c = coef
    h = w = 21
    cy = cx = 10
    y, x = np.mgrid[0:h, 0:w].astype(float)
    dx, dy = x - cx, y - cy
    f = axx * dx * dx + ayy * dy * dy + 2 * axy * dx * dy + bx * dx + by * dy + c
    m = flow.poly_expansion(f, 5, 1.1)
    np.testing.assert_allclose(m.A[cy, cx], [[axx, axy], [axy, ayy]], atol=1e-3)
    np.testing.assert_allclose(m.b[cy, cx], [bx, by], atol=1e-3)
    assert m.c[cy, cx] == pytest.approx(c, abs=1e-3)


# -- flow -----------------------------------------------------------------------

def test_identical_frames_give_zero_flow():
    img = textured()
    f = flow.farneback_flow(img, img)
    assert f.shape == (64, 80, 2) and f.dtype == np.float32
    assert np.abs(f).mean() < 0.05


def test_uniform_frames_give_zero_flow():
    f = flow.farneback_flow(np.full((40, 40), 90.0), np.full((40, 40), 90.0))
    assert np.abs(f).max() < 1e-6


@pytest.mark.parametrize("shift", [(3, 0), (0, 2), (-4, 1), (5, -5)])
def test_integer_translation(shift):
    sx, sy = shift
    big = textured(100, 120, seed=2)
    prev = big[20:84, 20:100]
    nxt = big[20 + sy:84 + sy, 20 + sx:100 + sx]
    # prev(x) ~ next(x + flow): content moved by -shift
    f = flow.farneback_flow(prev, nxt)
    assert interior_epe(f, (-sx, -sy)) < 0.5


def test_flow_is_deterministic():
    a, b = textured(seed=3), textured(seed=4)
    np.testing.assert_array_equal(flow.farneback_flow(a, b), flow.farneback_flow(a, b))


def test_flow_shape_mismatch():
    with pytest.raises(ShapeError):
        flow.farneback_flow(np.zeros((10, 10)), np.zeros((10, 12)))


def test_pyramid_levels_stop_early():
    levels = flow.pyramid(np.zeros((40, 40)), 5, 12)
    assert [lv.shape for lv in levels][:2] == [(40, 40), (20, 20)]
    assert all(min(lv.shape) > 12 for lv in levels[1:]) or len(levels) == 1


# -- warping and baselines -----------------------------------------------------

def test_warp_zero_flow_is_identity():
    d = np.random.default_rng(0).integers(0, 4000, (9, 11)).astype(np.uint16)
    out, ok = flow.warp_depth(d, np.zeros((9, 11, 2)))
    np.testing.assert_array_equal(out, d)
    np.testing.assert_array_equal(ok, d != 0)


def test_warp_unit_shift_matches_manual_oracle():
    d = np.arange(1, 31, dtype=np.uint16).reshape(5, 6)
    f = np.zeros((5, 6, 2))
    f[..., 0] = 1.0
    out, ok = flow.warp_depth(d, f)
    want = np.zeros_like(d)
    want[:, :-1] = d[:, 1:]
    np.testing.assert_array_equal(out, want)
    assert not ok[:, -1].any() and ok[:, :-1].all()


def test_warp_out_of_frame_and_invalid_sources():
    d = np.full((4, 4), 7, dtype=np.uint16)
    d[1, 1] = 0
    f = np.zeros((4, 4, 2))
    f[0, 0] = (-5, 0)
    f[2, 2] = (-1, -1)
    out, ok = flow.warp_depth(d, f)
    assert not ok[0, 0] and not ok[2, 2] and not ok[1, 1]
    assert out[0, 0] == 0 and out[2, 2] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_warp_never_invents_depth(seed):
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 6, (7, 8)).astype(np.uint16) * 500
    f = rng.uniform(-4, 4, (7, 8, 2))
    out, ok = flow.warp_depth(d, f)
    assert set(np.unique(out[ok])) <= set(np.unique(d[d != 0]))
    assert (out[~ok] == 0).all()


def test_naive_baseline_is_identity():
    d = np.random.default_rng(3).random((5, 5))
    assert flow.naive_baseline(d) is d or np.array_equal(flow.naive_baseline(d), d)


# -- flow dump ---------------------------------------------------------------------

def test_flow_file_round_trip(tmp_path):
    f = np.random.default_rng(0).standard_normal((6, 9, 2)).astype(np.float32)
    p = tmp_path / "f.flo"
    flow.write_flow(p, f)
    raw = p.read_bytes()
    assert raw[:4] == b"FLOW" and len(raw) == 12 + 6 * 9 * 2 * 4
    np.testing.assert_array_equal(flow.read_flow(p), f)
    p.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        flow.read_flow(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        flow.read_flow(p)
