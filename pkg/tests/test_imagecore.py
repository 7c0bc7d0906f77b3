import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image as PILImage

from frozensr import imagecore as ic
from frozensr.errors import DimensionError, ImageIOError, ShapeError, SizeError


def unit_images(max_side=12, channels=(1, 3)):
    return st.tuples(
        st.integers(1, max_side), st.integers(1, max_side), st.sampled_from(channels)
    ).flatmap(lambda s: arrays(np.float64, s, elements=st.floats(0.0, 1.0)))


# --- reference resamplers: direct per-pixel evaluation of the kernels -------


def keys_kernel(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def reference_resample(img, s, method):
    h, w, c = img.shape
    out = np.zeros((h * s, w * s, c))
    taps = range(-1, 3) if method == "bicubic" else range(0, 2)

    def weight(d):
        return keys_kernel(d) if method == "bicubic" else max(0.0, 1 - abs(d))

    for y in range(h * s):
        sy = (y + 0.5) / s - 0.5
        fy = math.floor(sy)
        for x in range(w * s):
            sx = (x + 0.5) / s - 0.5
            fx = math.floor(sx)
            acc = np.zeros(c)
            for dy in taps:
                for dx in taps:
                    iy = min(max(fy + dy, 0), h - 1)
                    ix = min(max(fx + dx, 0), w - 1)
                    acc += weight(sy - (fy + dy)) * weight(sx - (fx + dx)) * img[iy, ix]
            out[y, x] = acc
    return out


# --- box downsample ---------------------------------------------------------


def test_box_constant():
    out = ic.box_downsample(np.full((16, 8, 3), 0.5), 4)
    assert out.shape == (4, 2, 3)
    assert np.all(out == 0.5)


def test_box_two_by_two():
    out = ic.box_downsample(np.array([[0.0, 1.0], [0.0, 1.0]]), 2)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 0.5


def test_box_row_ramp():
    rows = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    img = np.repeat(rows[:, None], 4, axis=1)
    out = ic.box_downsample(img, 2)[:, :, 0]
    np.testing.assert_allclose(out, [[1 / 6, 1 / 6], [5 / 6, 5 / 6]], atol=1e-15)


@pytest.mark.parametrize("shape,axis", [((6, 8), "height"), ((8, 6), "width")])
def test_box_names_offending_axis(shape, axis):
    with pytest.raises(DimensionError, match=axis):
        ic.box_downsample(np.zeros(shape), 4)


@given(st.sampled_from([2, 4, 8]), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_box_preserves_mean(s, bh, bw, seed):
    img = np.random.default_rng(seed).random((bh * s, bw * s, 3))
    out = ic.box_downsample(img, s)
    np.testing.assert_allclose(out.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-6)


@given(unit_images(6), st.sampled_from([2, 4, 8]))
def test_box_inverts_nearest_upsample_exactly(img, s):
    assert np.array_equal(ic.box_downsample(ic.nearest_upsample(img, s), s), img)


# --- interpolation ----------------------------------------------------------


def test_bilinear_half_pixel_example():
    out = ic.bilinear_upsample(np.array([[0.0, 1.0], [0.0, 1.0]]), 2)[:, :, 0]
    for row in out:
        np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


@pytest.mark.parametrize("fn", [ic.bilinear_upsample, ic.bicubic_upsample])
def test_single_pixel_upsamples_to_constant(fn):
    out = fn(np.full((1, 1, 3), 0.3), 4)
    assert out.shape == (4, 4, 3)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


@pytest.mark.parametrize("fn", [ic.bilinear_upsample, ic.bicubic_upsample])
@given(v=st.floats(0.0, 1.0), h=st.integers(1, 9), w=st.integers(1, 9), s=st.sampled_from([2, 4, 8]))
def test_upsample_keeps_constants(fn, v, h, w, s):
    out = fn(np.full((h, w, 3), v), s)
    assert out.shape == (h * s, w * s, 3)
    assert np.max(np.abs(out - v)) <= 1e-6


@pytest.mark.parametrize("method", ["bilinear", "bicubic"])
@pytest.mark.parametrize("s", [2, 4])
def test_upsample_matches_direct_kernel_evaluation(rng, method, s):
    img = rng.random((5, 7, 3))
    fn = ic.bilinear_upsample if method == "bilinear" else ic.bicubic_upsample
    expected = np.clip(reference_resample(img, s, method), 0, 1)
    np.testing.assert_allclose(fn(img, s), expected, atol=1e-12)


@given(unit_images(8), st.sampled_from([2, 4, 8]))
def test_bilinear_stays_in_neighbour_hull(img, s):
    out = ic.bilinear_upsample(img, s)
    h, w, _ = img.shape
    for y in range(0, h * s, max(1, s // 2)):
        fy = math.floor((y + 0.5) / s - 0.5)
        ys = {min(max(fy, 0), h - 1), min(max(fy + 1, 0), h - 1)}
        for x in range(0, w * s, max(1, s // 2)):
            fx = math.floor((x + 0.5) / s - 0.5)
            xs = {min(max(fx, 0), w - 1), min(max(fx + 1, 0), w - 1)}
            nb = img[np.ix_(sorted(ys), sorted(xs))]
            assert np.all(out[y, x] >= nb.min(axis=(0, 1)) - 1e-12)
            assert np.all(out[y, x] <= nb.max(axis=(0, 1)) + 1e-12)


def test_bicubic_reproduces_linear_ramp_in_interior():
    w, s = 12, 4
    ramp = 0.1 + 0.05 * np.arange(w)
    img = np.tile(ramp, (3, 1))
    out = ic.bicubic_upsample(img, s)[1, :, 0]
    for x in range(w * s):
        src = (x + 0.5) / s - 0.5
        if math.floor(src) - 1 >= 0 and math.floor(src) + 2 <= w - 1:
            assert out[x] == pytest.approx(0.1 + 0.05 * src, abs=1e-12)


def test_bicubic_output_is_clamped():
    img = np.zeros((4, 4))
    img[:, 2:] = 1.0
    raw = np.einsum("bw,aw->ab", ic.upsample_matrix(4, 4, "bicubic"), img)
    assert raw.max() > 1.0 and raw.min() < 0.0  # Catmull-Rom overshoots
    out = ic.bicubic_upsample(img, 4)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_upsample_matrix_rows_sum_to_one():
    for method in ("bilinear", "bicubic"):
        m = ic.upsample_matrix(7, 8, method)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-14)


# --- patches and stitching --------------------------------------------------


@pytest.mark.parametrize("shape,count", [((256, 256), 1), ((512, 512), 9), ((300, 256), 1)])
def test_extract_patch_counts(shape, count):
    manifest, patches = ic.extract_patches(np.zeros(shape + (3,)), 256, 128)
    assert len(patches) == len(manifest) == count
    assert manifest.entries[0].origin_row == 0 and manifest.entries[0].origin_col == 0


def test_extract_patch_order_is_row_major(rng):
    src = rng.random((96, 64, 3))
    manifest, patches = ic.extract_patches(src, 32, 32, source_id="s")
    origins = [(e.origin_row, e.origin_col) for e in manifest]
    assert origins == sorted(origins)
    for e, p in zip(manifest, patches):
        assert np.array_equal(p, src[e.origin_row : e.origin_row + 32, e.origin_col : e.origin_col + 32])
    ids = [e.patch_id for e in manifest]
    assert ids == sorted(ids)


def test_extract_patch_count_formula_random_triples(rng):
    for _ in range(50):
        size = int(rng.integers(1, 40))
        h = int(rng.integers(size, 120))
        w = int(rng.integers(size, 120))
        stride = int(rng.integers(1, 50))
        manifest, _ = ic.extract_patches(np.zeros((h, w)), size, stride)
        assert len(manifest) == ((h - size) // stride + 1) * ((w - size) // stride + 1)
        manifest.validate({"image": (h, w)})


def test_extract_too_small():
    with pytest.raises(SizeError):
        ic.extract_patches(np.zeros((100, 300)), 256, 128)


def test_stitch_four_by_four(rng):
    patches = [rng.random((64, 64, 3)) for _ in range(16)]
    out = ic.stitch_grid(patches, 4, 4)
    assert out.shape == (256, 256, 3)
    assert np.array_equal(out[64:128, 192:256], patches[7])


def test_stitch_identity(rng):
    p = rng.random((10, 12, 3))
    assert np.array_equal(ic.stitch_grid([p], 1, 1), p)


def test_split_then_stitch_is_bit_exact(rng):
    img = rng.random((256, 256, 3))
    assert np.array_equal(ic.stitch_grid(ic.split_grid(img, 4, 4), 4, 4), img)
    _, tiles = ic.extract_patches(img, 64, 64)
    assert np.array_equal(ic.stitch_grid(tiles, 4, 4), img)


def test_stitch_errors(rng):
    with pytest.raises(ShapeError):
        ic.stitch_grid([rng.random((8, 8, 3))] * 15, 4, 4)
    bad = [rng.random((8, 8, 3))] * 3 + [rng.random((8, 9, 3))]
    with pytest.raises(ShapeError):
        ic.stitch_grid(bad, 2, 2)


def test_manifest_roundtrip_and_uniqueness(tmp_path):
    m, _ = ic.extract_patches(np.zeros((64, 64)), 32, 16, source_id="slide")
    m.to_jsonl(tmp_path / "m.jsonl")
    assert ic.PatchManifest.from_jsonl(tmp_path / "m.jsonl") == m
    dup = ic.PatchManifest(m.entries + m.entries[:1])
    with pytest.raises(ShapeError):
        dup.validate()
    outside = ic.PatchManifest([ic.PatchRecord("slide", 40, 0, 32)])
    with pytest.raises(SizeError):
        outside.validate({"slide": (64, 64)})


# --- raster I/O -------------------------------------------------------------


@pytest.mark.parametrize("value,expected", [(0.0, 0.0), (1.0, 1.0), (0.5, 128 / 255)])
def test_save_load_values(tmp_path, value, expected):
    ic.save_image(np.full((4, 5, 3), value), tmp_path / "x.png")
    out = ic.load_image(tmp_path / "x.png")
    assert out.shape == (4, 5, 3)
    assert np.all(out == expected)


@given(unit_images(10))
@settings(max_examples=30)
def test_save_load_quantisation_bound(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("io") / "img.png"
    ic.save_image(img, path)
    out = ic.load_image(path)
    assert out.shape == img.shape
    assert np.max(np.abs(out - img)) <= 1 / 510 + 1e-12


def test_load_errors(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageIOError):
        ic.load_image(tmp_path / "junk.png")
    with pytest.raises(ImageIOError):
        ic.load_image(tmp_path / "missing.png")
    PILImage.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(ImageIOError, match="unsupported"):
        ic.load_image(tmp_path / "deep.png")


def test_image_validation():
    with pytest.raises(ValueError):
        ic.as_image(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        ic.as_image(np.full((2, 2), np.nan))
    with pytest.raises(ShapeError):
        ic.as_image(np.zeros((2, 2, 2)))
