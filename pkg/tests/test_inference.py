import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regfree_sr.image import Image
from regfree_sr.inference import (
    benchmark_inference,
    blend_weights,
    generator_backend,
    nearest_upscale,
    plan_tiles,
    refine_offset,
    shift_tile,
    stitch,
    super_resolve,
    write_report,
)
from regfree_sr.nn import Generator, GeneratorConfig


def test_plan_single_tile():
    g = plan_tiles(100, 100)
    assert len(g) == 1 and g.origins == [(0, 0)] and g.pad == (0, 0)


def test_plan_400():
    g = plan_tiles(400, 400, 100, 20)
    assert g.rows == g.cols == (0, 80, 160, 240, 300)
    assert len(g) == 25


def test_plan_401_and_rectangular():
    g = plan_tiles(401, 180)
    assert g.rows == (0, 80, 160, 240, 301)
    assert g.cols == (0, 80)


def test_plan_small_image_padded():
    g = plan_tiles(50, 130)
    assert g.pad == (50, 0) and g.rows == (0,) and g.cols == (0, 30)


def test_plan_errors():
    for args in ((100, 100, 20, 20), (100, 100, 20, 30), (0, 100), (100, 100, 100, -1)):
        with pytest.raises(ValueError):
            plan_tiles(*args)


@settings(max_examples=25)
@given(st.integers(1, 450), st.integers(1, 450), st.integers(2, 120), st.integers(0, 60))
def test_plan_covers_image(h, w, tile, overlap):
    if overlap >= tile:
        return
    g = plan_tiles(h, w, tile, overlap)
    ph, pw = g.padded_shape
    cov = np.zeros((ph, pw), bool)
    for y, x in g.origins:
        assert y + tile <= ph and x + tile <= pw
        cov[y : y + tile, x : x + tile] = True
    assert cov.all()


def test_blend_weights_sum_to_one_400():
    g = plan_tiles(400, 400, 100, 20)
    acc, _, _ = blend_weights(g, 4)
    assert acc.shape == (1600, 1600)
    assert np.max(np.abs(acc - 1.0)) < 1e-12


@settings(max_examples=30)
@given(st.integers(1, 260), st.integers(1, 260), st.integers(2, 60), st.integers(0, 59), st.sampled_from([1, 2, 4]))
def test_blend_weights_sum_to_one_any(h, w, tile, overlap, r):
    if overlap >= tile:
        return
    g = plan_tiles(h, w, tile, overlap)
    acc, wr, wc = blend_weights(g, r)
    assert np.max(np.abs(acc - 1.0)) < 1e-12
    assert all(np.all(v > 0) for v in wr + wc)


def test_stitch_is_weighted_mean(rng):
    g = plan_tiles(70, 70, 30, 20)
    tiles = [rng.random((60, 60, 1)) for _ in g.origins]
    _, wr, wc = blend_weights(g, 2)
    num = np.zeros((140, 140, 1))
    k = 0
    for i, y in enumerate(g.rows):
        for j, x in enumerate(g.cols):
            num[2 * y : 2 * y + 60, 2 * x : 2 * x + 60] += np.outer(wr[i], wc[j])[:, :, None] * tiles[k]
            k += 1
    assert np.allclose(stitch(tiles, g, 2), num, atol=1e-12)


def test_identity_stub_exact_400(rng):
    x = rng.random((400, 400, 1)).astype(np.float32)
    out = super_resolve(x, lambda b: nearest_upscale(b, 4), 4)
    assert out.shape == (1600, 1600, 1)
    assert np.array_equal(out, nearest_upscale(x[None], 4)[0])


def test_identity_stub_exact_odd_and_small(rng):
    for shape in ((401, 233, 1), (37, 61, 3)):
        x = rng.random(shape)
        out = super_resolve(x, lambda b: nearest_upscale(b, 2), 2, tile=40, overlap=10)
        assert np.array_equal(out, nearest_upscale(x[None], 2)[0])


def test_feather_ramp():
    g = plan_tiles(100, 180, 100, 20)
    a, b = 0.2, 0.9
    tiles = [np.full((400, 400, 1), a), np.full((400, 400, 1), b)]
    out = stitch(tiles, g, 4)[:, :, 0]
    k = np.arange(80)
    want = a + (b - a) * (k + 0.5) / 80
    assert np.allclose(out[7, 320:400], want, rtol=0, atol=1e-15)
    assert np.all(out[:, :320] == a) and np.all(out[:, 400:] == b)


@pytest.fixture(scope="module")
def small_generator():
    g = Generator(GeneratorConfig(1, 8, 2), seed=5)
    rng = np.random.default_rng(0)
    for k in g.buffers:
        g.buffers[k][:] = rng.uniform(0.5, 1.5, g.buffers[k].shape) if k.endswith("var") else rng.normal(0, 0.1, g.buffers[k].shape)
    return g


def test_generator_interior_bit_identical(small_generator, rng):
    x = rng.random((180, 180, 1)).astype(np.float32)
    out = super_resolve(x, generator_backend(small_generator), 2, clamp=False)
    g = plan_tiles(180, 180)
    single = {o: small_generator(x[None, o[0] : o[0] + 100, o[1] : o[1] + 100])[0] for o in g.origins}
    # pixels covered by exactly one tile
    own = {(0, 0): (slice(0, 160), slice(0, 160)), (80, 80): (slice(200, 360), slice(200, 360))}
    for (y, xx), (sy, sx) in own.items():
        t = single[(y, xx)][sy.start - 2 * y : sy.stop - 2 * y, sx.start - 2 * xx : sx.stop - 2 * xx]
        assert np.array_equal(out[sy, sx], t)


def test_thread_count_independent(small_generator, rng):
    x = rng.random((180, 260, 1)).astype(np.float32)
    be = generator_backend(small_generator)
    a = super_resolve(x, be, 2, threads=1)
    b = super_resolve(x, be, 2, threads=4)
    assert np.array_equal(a, b)


def test_image_round_trip(rng):
    img = Image(rng.random((50, 60)), pixel_size=1.0)
    out = super_resolve(img, lambda b: nearest_upscale(b, 4), 4)
    assert isinstance(out, Image) and out.shape == (200, 240, 1) and out.pixel_size == 0.25


def test_clamp():
    x = np.full((20, 20, 1), 0.5)
    out = super_resolve(x, lambda b: 3.0 * nearest_upscale(b, 2), 2, tile=10, overlap=2)
    assert out.max() == 1.0
    assert super_resolve(x, lambda b: 3.0 * nearest_upscale(b, 2), 2, tile=10, overlap=2, clamp=False).max() == 1.5


# --- refinement ---------------------------------------------------------------------


def _smooth_field(rng, n):
    from scipy import ndimage

    return ndimage.gaussian_filter(rng.random((n, n)), 3.0)[:, :, None]


@pytest.mark.parametrize("shift", [(1, -2), (0, 2), (-2, -1), (0, 0)])
def test_refine_offset_inverts_shift(rng, shift):
    ref = _smooth_field(rng, 48)
    mov = shift_tile(ref, *shift)
    dy, dx = refine_offset(ref[:, :, 0], mov[:, :, 0], 2)
    assert (dy, dx) == (-shift[0], -shift[1])
    assert np.array_equal(shift_tile(mov, dy, dx)[4:-4, 4:-4], ref[4:-4, 4:-4])


def test_shift_tile_definition(rng):
    t = rng.random((6, 5, 1))
    s = shift_tile(t, 1, -2)
    for y in range(6):
        for x in range(5):
            assert s[y, x, 0] == t[min(max(y - 1, 0), 5), min(max(x + 2, 0), 4), 0]


def test_stitch_refine_realigns_misplaced_tile(rng):
    img = _smooth_field(rng, 180)
    g = plan_tiles(90, 90, 50, 10)  # r = 2 output of a 180 x 180 truth
    r = 2
    tiles = []
    for k, (y, x) in enumerate(g.origins):
        t = img[y * r : (y + 50) * r, x * r : (x + 50) * r]
        tiles.append(shift_tile(t, 1, 2) if k == 3 else t)
    plain = stitch(tiles, g, r)
    fixed = stitch(tiles, g, r, refine=True)
    inner = (slice(100, 170), slice(100, 170))  # inside the last tile only
    assert not np.allclose(plain[inner], img[inner])
    assert np.array_equal(fixed[inner], img[inner])
    # correctly placed tiles are left alone
    assert np.array_equal(stitch(tiles[:3] + [img[80:180, 80:180]], g, r, refine=True), img)


# --- benchmark ------------------------------------------------------------------------


def test_benchmark_report(tmp_path, rng):
    x = rng.random((400, 400, 1)).astype(np.float32)
    rep = benchmark_inference(x, lambda b: nearest_upscale(b, 4), 4)
    assert rep["tile_count"] == 25 and len(rep["per_tile_s"]) == 25
    assert rep["output_shape"] == [1600, 1600, 1]
    lat = rep["tile_latency_s"]
    assert 0 <= lat["min"] <= lat["median"] <= lat["max"]
    assert "0.01 s" in rep["reference_note"]
    write_report(rep, tmp_path / "bench.json")
    assert json.loads((tmp_path / "bench.json").read_text())["tile_count"] == 25
