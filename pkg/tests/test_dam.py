import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refsketch.dam import (ForegroundMask, SegmentationState, aggregate_self_attention,
                           cluster_attention, extract_nouns, noun_maps_from_cross, object_nouns,
                           relevance_score, score_clusters, segment, select_foreground)
from refsketch.errors import DomainError, ShapeError


def planted(side=4, seed=0, noise=0.0):
    """F_SA whose rows come from two prototypes split at the middle row."""
    r = np.random.default_rng(seed)
    P = side * side
    protos = r.dirichlet(np.ones(P), size=2)
    truth = (np.arange(P) >= P // 2).astype(int)
    F = protos[truth] + noise * r.standard_normal((P, P))
    return F, truth.reshape(side, side)


def same_partition(masks, truth):
    labels = np.zeros(truth.shape, int)
    for j, m in enumerate(masks):
        labels[m.astype(bool)] = j
    # a partition match up to relabelling: pairwise co-membership agrees
    a, b = labels.ravel(), truth.ravel()
    return np.array_equal(a[:, None] == a[None, :], b[:, None] == b[None, :])


# -- aggregation -----------------------------------------------------------------

def test_aggregate_single_map_unchanged():
    m = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert np.array_equal(aggregate_self_attention([m]), m)


def test_aggregate_is_entrywise_mean():
    out = aggregate_self_attention([np.array([[0.5, 0.5]]), np.array([[0.9, 0.1]])])
    assert np.allclose(out, [[0.7, 0.3]], atol=1e-12)


def test_aggregate_errors():
    with pytest.raises(DomainError):
        aggregate_self_attention([])
    with pytest.raises(ShapeError):
        aggregate_self_attention([np.ones((2, 2)), np.ones((3, 3))])


# -- clustering --------------------------------------------------------------------

def test_planted_two_groups_recovered_exactly():
    F, truth = planted()
    masks = cluster_attention(F, 2, seed=0)
    assert same_partition(masks, truth)


def test_k_equals_p_gives_singletons():
    F = np.random.default_rng(0).dirichlet(np.ones(4), size=4)
    masks = cluster_attention(F, 4, seed=0)
    assert sorted(int(m.sum()) for m in masks) == [1, 1, 1, 1]


def test_clustering_deterministic():
    F, _ = planted(noise=0.01)
    a, b = cluster_attention(F, 3, seed=7), cluster_attention(F, 3, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("k", [1, 17])
def test_bad_k(k):
    F, _ = planted()
    with pytest.raises(DomainError):
        cluster_attention(F, k)


def test_non_square_pixel_count():
    with pytest.raises(ShapeError):
        cluster_attention(np.eye(6), 2)


@given(st.integers(2, 6), st.integers(0, 1000))
def test_masks_partition_grid(k, seed):
    F = np.random.default_rng(seed).dirichlet(np.ones(9), size=9)
    masks = cluster_attention(F, k, seed=seed)
    total = np.sum(masks, axis=0)
    assert (total == 1).all()


# -- relevance ---------------------------------------------------------------------

def test_relevance_full_mask():
    assert relevance_score(np.ones((2, 2)), np.ones((2, 2)), 1e-5) == pytest.approx(
        4 / (4 + 1e-5), abs=1e-12)
    assert relevance_score(np.ones((2, 2)), np.ones((2, 2)), 1e-5) == pytest.approx(
        0.9999975, abs=1e-7)


def test_relevance_empty_mask_is_zero():
    assert relevance_score(np.zeros((3, 3)), np.ones((3, 3))) == 0.0


def test_relevance_one_hot():
    M = np.zeros((2, 2))
    M[0, 0] = 1
    A = np.zeros((2, 2))
    A[0, 0] = 0.6
    assert relevance_score(M, A, 1e-5) == pytest.approx(0.6 / (1 + 1e-5), abs=1e-12)
    assert relevance_score(M, A, 1e-5) == pytest.approx(0.599994, abs=1e-6)


def test_relevance_errors():
    with pytest.raises(ShapeError):
        relevance_score(np.ones((2, 2)), np.ones((3, 3)))
    with pytest.raises(DomainError):
        relevance_score(np.ones((2, 2)), np.ones((2, 2)), 0.0)


@given(arrays(np.uint8, (8, 8), elements=st.integers(0, 1)),
       arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
def test_relevance_matches_double_loop(M, A):
    num = den = 0.0
    for i in range(8):
        for j in range(8):
            num += M[i, j] * A[i, j]
            den += M[i, j]
    assert abs(relevance_score(M, A, 1e-5) - num / (den + 1e-5)) < 1e-9


# -- foreground selection ------------------------------------------------------------

def _state(masks, relevance, nouns=("dog",)):
    return SegmentationState(F_SA=np.eye(masks[0].size), cluster_masks=tuple(masks),
                             noun_maps={n: np.zeros(masks[0].shape) for n in nouns},
                             relevance=relevance)


def _halves():
    top = np.zeros((2, 2), np.uint8)
    top[0] = 1
    return [top, 1 - top]


def test_threshold_is_strict():
    masks = _halves()
    fg = select_foreground(_state(masks, {(0, "dog"): 0.35, (1, "dog"): 0.35}), 0.35)
    assert fg.grid.sum() == 0 and fg.resolution == 2


def test_single_winner_verbatim():
    masks = _halves()
    fg = select_foreground(_state(masks, {(0, "dog"): 0.9, (1, "dog"): 0.1}), 0.35)
    assert np.array_equal(fg.grid, masks[0])


def test_two_winners_union():
    r = np.random.default_rng(0)
    labels = r.integers(0, 3, size=(4, 4))
    masks = [(labels == j).astype(np.uint8) for j in range(3)]
    rel = {(0, "dog"): 0.5, (1, "dog"): 0.1, (2, "dog"): 0.1,
           (0, "cat"): 0.0, (1, "cat"): 0.0, (2, "cat"): 0.7}
    fg = select_foreground(_state(masks, rel, ("dog", "cat")), 0.35)
    assert np.array_equal(fg.grid, (masks[0] | masks[2]))


def test_no_clusters_rejected():
    state = SegmentationState(F_SA=np.eye(4), cluster_masks=(), noun_maps={})
    with pytest.raises(DomainError):
        select_foreground(state)


def test_missing_relevance_rejected():
    with pytest.raises(DomainError):
        select_foreground(_state(_halves(), {(0, "dog"): 0.9}))


@given(st.floats(0.01, 0.98), st.floats(0.01, 0.98), st.integers(0, 1000))
def test_raising_tau_never_adds_pixels(t1, t2, seed):
    lo, hi = sorted((t1, t2))
    r = np.random.default_rng(seed)
    labels = r.integers(0, 4, size=(4, 4))
    masks = [(labels == j).astype(np.uint8) for j in range(4)]
    state = _state(masks, {(j, "dog"): float(r.uniform()) for j in range(4)})
    a, b = select_foreground(state, lo).grid, select_foreground(state, hi).grid
    assert (b <= a).all()


def test_segment_planted_relevance():
    F, truth = planted(side=4)
    noun = truth.astype(float)  # noun attends to the second group only
    state = segment(F, {"dog": noun}, k=2, seed=0)
    fg = select_foreground(state, 0.35)
    assert np.array_equal(fg.grid, truth)


# -- nouns -------------------------------------------------------------------------

def test_extract_nouns_examples():
    assert extract_nouns("a sketch of a dog on grass") == ["sketch", "dog", "grass"]
    assert extract_nouns("") == []
    assert extract_nouns("dog dog dog") == ["dog"]


def test_object_nouns_drop_medium_words():
    assert object_nouns(["sketch", "dog", "drawing", "grass"]) == ["dog", "grass"]


def test_noun_maps_normalised_and_skip_absent():
    cross = np.array([[0.1, 0.2], [0.3, 0.6], [0.2, 0.1], [0.4, 0.1]])
    maps = noun_maps_from_cross(cross, ["<null>", "dog"], ["dog", "cat"])
    assert set(maps) == {"dog"}
    assert maps["dog"].min() == 0.0 and maps["dog"].max() == 1.0
    assert np.allclose(maps["dog"].ravel(), (cross[:, 1] - 0.1) / 0.5)


# -- mask type ---------------------------------------------------------------------

def test_mask_rejects_non_binary():
    with pytest.raises(DomainError):
        ForegroundMask(np.full((2, 2), 0.5), 2)
    with pytest.raises(ShapeError):
        ForegroundMask(np.ones((2, 3)), 2)


def test_empty_mask_keeps_resolution():
    assert ForegroundMask.empty(5).resolution == 5


def test_resample_nearest():
    g = np.array([[1, 0], [0, 0]], np.uint8)
    up = ForegroundMask(g, 2).resample(4)
    assert np.array_equal(up.grid, np.kron(g, np.ones((2, 2), np.uint8)))
    assert np.array_equal(up.resample(2).grid, g)


def test_pgm_export(tmp_path):
    g = np.array([[1, 0], [0, 1]], np.uint8)
    path = ForegroundMask(g, 2).save_pgm(tmp_path / "m.pgm")
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[-4:]) == [255, 0, 0, 255]


def test_score_clusters_covers_all_pairs():
    masks = _halves()
    rel = score_clusters(masks, {"a": np.ones((2, 2)), "b": np.zeros((2, 2))})
    assert set(rel) == {(0, "a"), (1, "a"), (0, "b"), (1, "b")}
    assert all(v >= 0 for v in rel.values())
