import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgdg.metrics import UndefinedMetricError, aggregate, average_precision, map3


def brute_force_ap(scores, labels, frame_ids=None):
    """Independent PR-staircase enumeration: recount precision/recall at
    every rank from scratch."""
    if frame_ids is None:
        frame_ids = list(range(len(scores)))
    ranked = sorted(zip(scores, frame_ids, labels), key=lambda t: (-t[0], t[1]))
    n_pos = sum(labels)
    ap = 0.0
    prev_recall = 0.0
    for k in range(1, len(ranked) + 1):
        if not ranked[k - 1][2]:
            continue
        tp = sum(1 for s, f, l in ranked[:k] if l)
        recall = tp / n_pos
        precision = tp / k
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def test_perfect_ranking_gives_one():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_single_positive_at_rank_two():
    assert average_precision([0.2, 0.9], [1, 0]) == 0.5


def test_all_positive_raises():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.2, 0.9], [1, 1])


def test_no_positive_raises():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.2, 0.9], [0, 0])


def test_matches_exhaustive_oracle_on_all_small_sets():
    # every label arrangement for n <= 8 with one fixed score vector per n,
    # plus tied scores to pin the frame-id tie break
    rng = np.random.default_rng(5)
    for n in range(2, 9):
        scores = np.round(rng.uniform(size=n), 2)  # rounding forces ties
        for labels in itertools.product([0, 1], repeat=n):
            if sum(labels) in (0, n):
                continue
            got = average_precision(scores, labels)
            want = brute_force_ap(list(scores), list(labels))
            assert got == want, (n, scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_invariant_under_monotone_score_transforms(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 16))
    scores = rng.normal(size=n)
    labels = np.zeros(n, dtype=int)
    labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
    if labels.sum() in (0, n):
        labels[0] = 1 - labels[0]
    base = average_precision(scores, labels)
    for transform in (lambda s: 3.0 * s + 1.0, np.tanh, lambda s: np.exp(s / 4.0)):
        assert average_precision(transform(scores), labels) == pytest.approx(base, abs=1e-12)


def test_inverted_scores_against_oracle():
    rng = np.random.default_rng(9)
    scores = rng.uniform(size=8)
    labels = np.array([1, 0, 1, 0, 1, 0, 1, 0])
    inv = average_precision(-scores, 1 - labels)
    assert inv == brute_force_ap(list(-scores), list(1 - labels))


def test_map3_simple_means():
    scores = np.array([[0.9, 0.9, 0.1], [0.1, 0.8, 0.9], [0.2, 0.1, 0.5]])
    labels = np.array([[1, 1, 0], [0, 0, 1], [0, 1, 0]])
    m, aps = map3(scores, labels)
    assert m == pytest.approx(np.mean(aps))
    for c in range(3):
        assert aps[c] == average_precision(scores[:, c], labels[:, c])


def test_map3_known_values():
    scores = np.array([[0.9, 0.6, 0.9], [0.1, 0.9, 0.8]])
    labels = np.array([[1, 0, 0], [0, 1, 1]])
    m, aps = map3(scores, labels)
    assert aps[0] == 1.0 and aps[1] == 1.0
    assert m == pytest.approx((1.0 + 1.0 + 0.5) / 3.0)


def test_map3_propagates_criterion_index():
    scores = np.array([[0.9, 0.6, 0.9], [0.1, 0.9, 0.8]])
    labels = np.array([[1, 0, 1], [0, 1, 1]])  # c3 has no negatives
    with pytest.raises(UndefinedMetricError) as exc:
        map3(scores, labels)
    assert exc.value.criterion == 2


def test_map3_stays_in_unit_interval():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(4, 30))
        scores = rng.uniform(size=(n, 3))
        labels = (rng.uniform(size=(n, 3)) < 0.4).astype(int)
        labels[0] = (1, 1, 1)
        labels[1] = (0, 0, 0)
        m, _ = map3(scores, labels)
        assert 0.0 <= m <= 1.0


def test_aggregate_identical_values():
    agg = aggregate([0.4, 0.4, 0.4])
    assert agg.mean == 0.4 and agg.std == 0.0


def test_aggregate_known_std():
    agg = aggregate([1.0, 2.0, 3.0])
    assert agg.mean == 2.0
    assert agg.std == pytest.approx(1.0)


def test_aggregate_single_value_has_no_std():
    agg = aggregate([0.3])
    assert agg.std is None
    assert agg.formatted() == "30.00"


def test_aggregate_matches_two_pass_oracle():
    rng = np.random.default_rng(2)
    vals = list(rng.uniform(size=7))
    agg = aggregate(vals)
    mean = sum(vals) / len(vals)
    std = (sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) ** 0.5
    assert agg.mean == pytest.approx(mean, rel=1e-15)
    assert agg.std == pytest.approx(std, rel=1e-12)


def test_aggregate_empty_errors():
    with pytest.raises(ValueError):
        aggregate([])


def test_report_cell_formatting():
    agg = aggregate([0.30, 0.32])
    assert agg.formatted() == "31.00 ± 1.41"
