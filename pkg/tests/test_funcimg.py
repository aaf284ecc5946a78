import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optreelab.errors import ConfigError, DegenerateImageError
from optreelab.funcimg import (
    build_meshgrid, load_image, mask_from_rle, mask_rle, render_image, render_raw, save_image,
)
from optreelab.tree import ConstVec, GenConfig, build_tree, eval_tree, sample_constants, sample_tree
from optreelab.vocab import OperatorVocab

V = OperatorVocab(1)
X1 = build_tree("x1", V)


def test_grid_examples():
    g = build_meshgrid([1.0], 1, 3)
    assert g.coordinates[0, 0].tolist() == [-1.0, 0.0, 1.0]
    g = build_meshgrid([1.0, 2.0], 1, 3)
    assert g.coordinates[1, 0].tolist() == [-2.0, 0.0, 2.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=4), st.integers(1, 3), st.integers(2, 40))
def test_grid_is_uniform_and_symmetric(scales, dims, n):
    g = build_meshgrid(scales, dims, n)
    for s, scale in enumerate(g.scales):
        for axis in g.coordinates[s]:
            assert np.max(np.abs(axis)) == scale
            step = np.diff(axis)
            assert np.all(step > 0)
            assert np.max(np.abs(step - step[0])) <= 1e-15 * max(1.0, scale) * 4


@pytest.mark.parametrize("scales", [[0.0], [-1.0], []])
def test_grid_rejects_bad_scales(scales):
    with pytest.raises(ConfigError):
        build_meshgrid(scales)


def test_points_are_row_major_product():
    g = build_meshgrid([1.0], 2, 3)
    p = g.points(0)
    assert p.shape == (9, 2)
    assert p[:3].tolist() == [[-1, -1], [-1, 0], [-1, 1]]


def test_standardization_example():
    img = render_image(X1, ConstVec.empty(), build_meshgrid([1.0], 1, 3), noise_sigma=0.0)
    assert np.allclose(img.values[0], [-1.224744871391589, 0.0, 1.224744871391589], rtol=0, atol=1e-15)
    assert np.allclose(img.raw_values(), [[-1, 0, 1]], atol=1e-15)


def test_log_domain_masked():
    t = build_tree(("log", "x1"), V)
    g = build_meshgrid([1.0], 1, 64)
    img = render_image(t, ConstVec.empty(), g, noise_sigma=0.0)
    x = g.points(0)[:, 0]
    assert np.array_equal(img.finite_mask[0], x > 0)
    assert np.all(img.values[0][x <= 0] == 0.0)


def test_degenerate_image():
    t = build_tree(("log", ("neg", ("abs", "x1"))), V)
    with pytest.raises(DegenerateImageError):
        render_image(t, ConstVec.empty(), build_meshgrid())


def test_rendering_is_deterministic(grid):
    t = sample_tree(GenConfig(), 3)
    c = sample_constants(t, 3)
    a = render_image(t, c, grid, 0.0, seed=5)
    b = render_image(t, c, grid, 0.0, seed=5)
    assert np.array_equal(a.values, b.values)
    a = render_image(t, c, grid, 0.01, seed=5)
    b = render_image(t, c, grid, 0.01, seed=5)
    assert np.array_equal(a.values, b.values)


def test_unstandardized_matches_eval(grid):
    for s in range(30):
        t = sample_tree(GenConfig(), s)
        c = sample_constants(t, s)
        try:
            img = render_image(t, c, grid, 0.0, standardize=False)
        except DegenerateImageError:
            continue
        for ch in range(grid.n_channels):
            ref = eval_tree(t, c, grid.points(ch))
            ok = np.isfinite(ref)
            assert np.array_equal(img.finite_mask[ch], ok)
            assert np.array_equal(img.values[ch][ok], ref[ok])


def test_noise_level(grid):
    t = build_tree(("add", "x1", "C"), V)
    c = ConstVec.visible([0.3])
    img = render_image(t, c, grid, 0.001, seed=9)
    resid = img.raw_values() - render_raw(t, c, grid)
    assert 0.0007 < resid.std() < 0.0013


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_finite_coverage_and_sanitizing(seed):
    grid = build_meshgrid()
    t = sample_tree(GenConfig(), seed)
    c = sample_constants(t, seed)
    try:
        img = render_image(t, c, grid, 0.001, seed)
    except DegenerateImageError:
        return
    assert img.finite_fraction >= 0.5
    assert np.all(np.isfinite(img.values))
    assert np.all(img.values[~img.finite_mask] == 0.0)
    for ch in range(grid.n_channels):
        v = img.values[ch][img.finite_mask[ch]]
        assert abs(v.mean()) < 1e-9
        assert v.std() == pytest.approx(1.0, abs=1e-9) or v.std() == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_mask_rle_roundtrip(bits):
    m = np.array(bits)
    assert np.array_equal(mask_from_rle(mask_rle(m), m.shape), m)


def test_image_file_roundtrip(tmp_path, grid):
    t = build_tree(("sqrt", "x1"), V)
    img = render_image(t, ConstVec.empty(), grid, 0.001, 1)
    save_image(img, grid, tmp_path / "im")
    back = load_image(tmp_path / "im")
    assert np.array_equal(back.finite_mask, img.finite_mask)
    assert np.array_equal(back.values, img.values.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.channel_std, img.channel_std)
