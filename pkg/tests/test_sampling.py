import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aem.sampling import (clarity_from_raw, combine, laplacian_variance, last_frame_baseline,
                          sample_effect_frame, select_effect_frame, semantic_relevance,
                          visual_clarity)


def test_single_frame_relevance():
    np.testing.assert_array_equal(semantic_relevance(np.ones((1, 4)), np.ones((2, 4))), [1.0])


def test_identical_frames_give_uniform_relevance():
    X = np.tile(np.arange(1.0, 5.0), (3, 1))
    np.testing.assert_allclose(semantic_relevance(X, np.eye(4)[:2]), np.full(3, 1 / 3))


def test_relevance_softmax_of_mean_cosines():
    d = np.array([[1.0, 0.0]])
    X = np.array([[0.9, np.sqrt(1 - 0.81)], [0.1, np.sqrt(0.99)], [0.1, -np.sqrt(0.99)]])
    e = np.exp([0.9, 0.1, 0.1])
    np.testing.assert_allclose(semantic_relevance(X, d), e / e.sum(), atol=1e-12)
    np.testing.assert_allclose(semantic_relevance(X, d), [0.5267, 0.2367, 0.2367], atol=1e-4)


def test_constant_patch_has_zero_variance():
    assert laplacian_variance(np.full((16, 16), 0.3)) == 0.0


def test_identical_patches_give_half_clarity():
    p = np.random.default_rng(0).uniform(size=(16, 16))
    np.testing.assert_array_equal(visual_clarity([p, p, p]), [0.5, 0.5, 0.5])


def test_percentile_clamp_on_arithmetic_sequence():
    c = clarity_from_raw(np.arange(1.0, 21.0))
    assert c[0] == 0.0 and c[19] == 1.0
    assert np.all(np.diff(c) >= 0)


def test_combine_example():
    fs = combine(np.array([0.6, 0.4]), np.array([0.2, 1.0]))
    np.testing.assert_allclose(fs.combined, [0.4, 0.7])
    assert fs.selected == 1
    np.testing.assert_allclose(fs.distribution.sum(), 1.0)


def test_ties_resolve_to_lowest_index():
    assert combine(np.array([0.5, 0.5]), np.array([0.5, 0.5])).selected == 0


def test_single_frame_selection():
    p = np.random.default_rng(0).uniform(size=(1, 16, 16))
    assert select_effect_frame(np.ones((1, 4)), p, np.ones((1, 4))).selected == 0


def test_last_frame():
    assert last_frame_baseline(5) == 4
    assert last_frame_baseline(1) == 0
    with pytest.raises(ValueError):
        last_frame_baseline(0)


def test_agrees_with_last_frame_when_effect_is_final(tiny_dataset):
    from aem.simulator import render_patch
    rng = np.random.default_rng(0)
    desc = tiny_dataset.descriptions(tiny_dataset.spec.actions[0])
    T = 6
    X = rng.normal(size=(T, desc.shape[1])) * 0.1
    X[-1] += 3 * desc.mean(axis=0)
    patches = np.stack([render_patch(0.0, rng) for _ in range(T - 1)] + [render_patch(1.0, rng)])
    assert select_effect_frame(X, patches, desc).selected == last_frame_baseline(T)


def test_sample_effect_frame_variants(tiny_dataset):
    seg = tiny_dataset.splits["train"][0]
    desc = tiny_dataset.descriptions(seg.action)
    assert sample_effect_frame(seg, desc, "last_frame") == seg.T - 1
    assert 0 <= sample_effect_frame(seg, desc) < seg.T
    with pytest.raises(ValueError):
        sample_effect_frame(seg, desc, "middle")


def test_mismatched_patch_count():
    with pytest.raises(ValueError):
        select_effect_frame(np.ones((3, 4)), np.ones((2, 16, 16)), np.ones((1, 4)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-5, 5)), st.floats(0.01, 100))
def test_relevance_is_scale_invariant(X, alpha):
    X = X + np.where(X >= 0, 1e-3, -1e-3)  # keep every frame clear of the norm floor
    d = np.random.default_rng(1).normal(size=(2, 6))
    np.testing.assert_allclose(semantic_relevance(alpha * X, d), semantic_relevance(X, d),
                               atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 10)))
def test_clarity_in_unit_interval(raw):
    c = clarity_from_raw(raw)
    assert np.all((c >= 0) & (c <= 1))
