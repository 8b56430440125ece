import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aastereo.autodiff import ShapeError, Tape, Tensor, finite_difference_check
from aastereo.cost_volume import Correlate, build_pyramid, correlate, scale_disparities, validity_mask
from aastereo.features import FeatureExtractor, extract_pyramid


def loop_correlate(left, right, dmax):
    _, n, h, w = left.shape
    out = np.zeros((left.shape[0], dmax, h, w))
    for b in range(left.shape[0]):
        for d in range(dmax):
            for y in range(h):
                for x in range(d, w):
                    out[b, d, y, x] = sum(left[b, c, y, x] * right[b, c, y, x - d] for c in range(n)) / n
    return out


def test_ones_give_one_where_valid_zero_elsewhere():
    f = np.ones((1, 2, 3, 6))
    vol = correlate(f, f, 4)
    np.testing.assert_array_equal(vol.values.data[0], np.where(vol.valid, 1.0, 0.0))
    assert not vol.valid[3, 0, 2] and vol.valid[3, 0, 3]


def test_single_entry_inner_product():
    left, right = np.zeros((1, 2, 1, 6)), np.zeros((1, 2, 1, 6))
    left[0, :, 0, 5] = (2, 0)
    right[0, :, 0, 5] = (1, 3)
    assert correlate(left, right, 1).values.data[0, 0, 0, 5] == 1.0


def test_random_8x8_matches_triple_loop():
    rng = np.random.default_rng(0)
    left, right = rng.standard_normal((2, 5, 8, 8)), rng.standard_normal((2, 5, 8, 8))
    np.testing.assert_allclose(correlate(left, right, 4).values.data, loop_correlate(left, right, 4),
                               rtol=0, atol=1e-12)


def test_rejects_disparity_wider_than_image_and_mismatched_maps():
    with pytest.raises(ShapeError):
        correlate(np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 2, 3)), 4)
    with pytest.raises(ShapeError):
        correlate(np.zeros((1, 1, 2, 3)), np.zeros((1, 2, 2, 3)), 1)


def test_gradcheck_and_no_gradient_through_invalid_cells():
    rng = np.random.default_rng(1)
    l, r = rng.standard_normal((1, 3, 4, 6)), rng.standard_normal((1, 3, 4, 6))
    assert finite_difference_check(Correlate(4), [l, r], step=1e-5).passed
    lt, rt = Tensor(l, requires_grad=True), Tensor(r, requires_grad=True)
    with Tape() as tape:
        vol = correlate(lt, rt, 4).values
    cot = np.where(validity_mask(4, 4, 6), 0.0, 1.0)[None]  # weight only invalid cells
    gl, gr = tape.gradient(vol, [lt, rt], cot)
    assert np.all(gl == 0.0) and np.all(gr == 0.0)


def test_scale_disparities():
    assert scale_disparities(192, 3, 3) == [64, 32, 16]
    assert scale_disparities(24, 3, 2) == [8, 4]
    assert scale_disparities(24, 3, 1) == [8]


def test_divisibility_violation_names_scale():
    with pytest.raises(ValueError, match="scale 3"):
        scale_disparities(30, 3, 3)


def test_build_pyramid_halves_disparities():
    ex = FeatureExtractor(3, 4, 3, 3, np.random.default_rng(0))
    img = np.random.default_rng(1).random((36, 72, 3))
    vols = build_pyramid(extract_pyramid(img, ex), extract_pyramid(img, ex), 24)
    assert [v.max_disp for v in vols] == [8, 4, 2]
    assert [v.scale for v in vols] == [1, 2, 3]
    for a, b in zip(vols, vols[1:]):
        assert b.max_disp * 2 == a.max_disp


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_self_correlation_peaks_at_zero(seed, n):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((1, n + 1, 3, 10))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    vol = correlate(f, f, 4).values.data[0]
    # equal-norm vectors: Cauchy-Schwarz makes d=0 the strict maximum unless neighbours coincide
    for x in range(4, 10):
        best = vol[:, :, x].argmax(axis=0)
        assert np.all(best == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.integers(0, 10_000))
def test_shift_moves_argmax(delta, seed):
    # constant-feature bands: each column is a distinct unit vector
    n, w = 12, 12
    cols = np.eye(n)[np.random.default_rng(seed).permutation(n)]
    right = np.broadcast_to(cols.T[None, :, None, :], (1, n, 2, w)).copy()
    left = np.zeros_like(right)
    left[..., delta:] = right[..., : w - delta]
    vol = correlate(left, right, 5).values.data[0]
    assert np.all(vol[:, :, 6:].argmax(axis=0) == delta)
