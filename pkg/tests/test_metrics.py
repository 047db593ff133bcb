import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refsketch import fixtures
from refsketch.metrics import (SCORERS, MetricReport, combined_score, content_distance,
                               edge_overlap, register_scorer, score_pairs, style_distance)


def test_content_distance_is_mean_abs():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.25)
    assert content_distance(a, b, a) == pytest.approx(0.25)


def test_content_distance_accepts_uint8_and_resizes():
    big = fixtures.fixture("dog")
    assert content_distance(fixtures.fixture_uint8("dog"), big, big) == pytest.approx(0.0)


def test_edge_overlap_identical_is_one():
    img = fixtures.fixture("house")
    assert edge_overlap(img, img, img) == 1.0
    flat = np.full((8, 8, 3), 0.5)
    assert edge_overlap(flat, flat, flat) == 1.0


def test_style_distance_bounds():
    img = fixtures.fixture("hatch")
    assert style_distance(img, img, img) == 0.0
    assert style_distance(np.zeros((4, 4, 3)), img, np.ones((4, 4, 3))) == pytest.approx(1.0)


def test_combined_needs_both_terms():
    assert combined_score({"content_distance": 0.5}) is None
    assert combined_score({"content_distance": 0.5, "style_distance": 1.0}) == 3.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_aggregates_are_exact_means(values):
    report = MetricReport(per_pair=[{"m": v} for v in values], names=["m"])
    assert abs(report.aggregates["m"] - sum(values) / len(values)) < 1e-9


def test_score_pairs_and_custom_scorer():
    name = "mean_brightness_test"
    if name not in SCORERS:
        register_scorer(name)(lambda s, c, r: float(np.mean(s)))
    triples = [(fixtures.fixture(n), fixtures.fixture(n), fixtures.fixture("hatch"))
               for n in ("dog", "cat")]
    report = score_pairs(triples, ["content_distance", name], labels=["a", "b"])
    assert [p["pair"] for p in report.per_pair] == ["a", "b"]
    assert report.aggregates["content_distance"] == 0.0
    with pytest.raises(ValueError):
        register_scorer(name)(lambda s, c, r: 0.0)
    with pytest.raises(KeyError):
        score_pairs(triples, ["nope"])
