import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from earseg.errormaps import (
    align_error_map,
    binarize,
    generate_error_map,
    load_error_maps,
    save_error_maps,
)

binary_maps = st.integers(1, 6).flatmap(
    lambda s: st.tuples(*(arrays(np.uint8, (4 * s, 4 * s), elements=st.integers(0, 1)),) * 2)
)


def test_binarize_picks_larger_logit():
    l = np.array([0.3, 0.7]).reshape(2, 1, 1)
    assert binarize(l)[0, 0] == 1
    assert binarize(l[::-1])[0, 0] == 0


def test_binarize_tie_is_background():
    assert binarize(np.zeros((2, 3, 3))).sum() == 0


def test_binarize_matches_argmax(rng):
    l = rng.standard_normal((2, 2, 8, 8))
    np.testing.assert_array_equal(binarize(l), np.argmax(l, axis=1))


def test_binarize_rejects_wrong_channel_count():
    with pytest.raises(ValueError):
        binarize(np.zeros((3, 4, 4)))


def test_error_map_example():
    gt = np.array([[1, 0], [1, 1]])
    m1 = np.array([[0, 0], [1, 1]])
    np.testing.assert_array_equal(generate_error_map(gt, m1), [[1, 0], [0, 0]])


def test_perfect_prediction_has_empty_error_map(rng):
    gt = (rng.random((16, 16)) > 0.7).astype(np.uint8)
    assert generate_error_map(gt, gt).sum() == 0


def test_false_positives_are_not_errors():
    gt = np.zeros((4, 4), np.uint8)
    assert generate_error_map(gt, np.ones_like(gt)).sum() == 0


def test_error_map_matches_elementwise_oracle():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        gt = rng.integers(0, 2, (4, 4))
        m1 = rng.integers(0, 2, (4, 4))
        oracle = np.array([[1 if (g == 1 and m == 0) else 0 for g, m in zip(gr, mr)]
                           for gr, mr in zip(gt, m1)])
        np.testing.assert_array_equal(generate_error_map(gt, m1), oracle)


def test_error_map_validates_inputs():
    with pytest.raises(ValueError):
        generate_error_map(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        generate_error_map(np.full((2, 2), 2), np.zeros((2, 2)))


@settings(max_examples=100, deadline=None)
@given(binary_maps)
def test_error_count_bounded_by_vessel_count(pair):
    gt, m1 = pair
    em = generate_error_map(gt, m1)
    assert em.sum() <= gt.sum()
    assert np.all(em <= gt)


def test_align_examples():
    em = np.zeros((8, 8), np.uint8)
    em[5, 2] = 1
    out = align_error_map(em, 4)
    np.testing.assert_array_equal(out, [[0, 0], [1, 0]])
    assert align_error_map(np.zeros((8, 8)), 4).sum() == 0
    assert align_error_map(np.ones((8, 8)), 4).min() == 1


def window_max_oracle(em, s):
    h, w = em.shape
    out = np.zeros((h // s, w // s), np.uint8)
    for i in range(h // s):
        for j in range(w // s):
            out[i, j] = max(em[y, x] for y in range(i * s, i * s + s) for x in range(j * s, j * s + s))
    return out


@settings(max_examples=60, deadline=None)
@given(binary_maps)
def test_align_matches_window_oracle_and_is_monotone(pair):
    a, b = pair
    np.testing.assert_array_equal(align_error_map(a), window_max_oracle(a, 4))
    union = np.maximum(a, b)
    assert np.all(align_error_map(a) <= align_error_map(union))


def test_align_batched_and_indivisible():
    em = np.zeros((3, 1, 8, 8), np.uint8)
    assert align_error_map(em).shape == (3, 1, 2, 2)
    with pytest.raises(ValueError, match="not divisible"):
        align_error_map(np.zeros((6, 8)))


def test_cache_round_trip_respects_key(tmp_path, rng):
    maps = {f"s{i}": (rng.random((8, 12)) > 0.5).astype(np.uint8) for i in range(3)}
    save_error_maps(maps, tmp_path, key="abc")
    assert sorted(p.name for p in tmp_path.glob("*_em.png")) == ["s0_em.png", "s1_em.png", "s2_em.png"]
    back = load_error_maps(tmp_path, "abc")
    assert back.keys() == maps.keys()
    for k in maps:
        np.testing.assert_array_equal(back[k], maps[k])
    assert load_error_maps(tmp_path, "other") is None
    assert load_error_maps(tmp_path / "missing") is None
