import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ride_lab.analysis import (
    HIST_BINS,
    PredictionMatrix,
    decompose,
    hardest_negative,
    hardest_negative_scores,
    instance_variance,
    main_prediction,
    model_accuracies,
    zero_one_bias,
    zero_one_variance,
)
from ride_lab.data import LongTailProfile, shot_split

A, B = 0, 1


def pm(preds, truth, c=3):
    return PredictionMatrix(np.array(preds).reshape(len(preds), -1), np.array(truth), c)


def test_main_prediction_examples():
    assert main_prediction([A, A, A]) == A
    assert main_prediction([A, A, B]) == A
    assert main_prediction([B, A]) == A
    assert main_prediction([2, 1, 2, 1]) == 1


def test_bias_examples():
    assert zero_one_bias(pm([[A], [A], [B]], [B]))[B] == 1
    assert zero_one_bias(pm([[B], [B], [A]], [B]))[B] == 0
    assert np.nansum(zero_one_bias(pm([[0, 1, 2], [0, 1, 2]], [0, 1, 2]))) == 0


def test_variance_examples():
    assert zero_one_variance(pm([[A], [A], [A]], [A]))[A] == 0
    assert zero_one_variance(pm([[A], [A], [B]], [A]))[A] == pytest.approx(1 / 3)
    n = 5
    v = instance_variance(PredictionMatrix(np.arange(n)[:, None], np.array([0]), 8))
    assert v[0] == pytest.approx((n - 1) / n)


def test_empty_class_is_nan():
    assert np.isnan(zero_one_bias(pm([[0], [0]], [0]))[2])


def test_rejects_single_model():
    with pytest.raises(ValueError):
        PredictionMatrix(np.zeros((1, 3), int), np.zeros(3, int), 2)


def brute_force(preds, truth, c):
    """Definitional decomposition with explicit mode search and loss counting."""
    n_models, n_inst = len(preds), len(truth)
    bias_sum, var_sum, acc_sum, count = [0.0] * c, [0.0] * c, [0.0] * c, [0] * c
    for i in range(n_inst):
        column = [preds[m][i] for m in range(n_models)]
        best, best_votes = None, -1
        for label in range(c):
            votes = sum(1 for p in column if p == label)
            if votes > best_votes:
                best, best_votes = label, votes
        y = truth[i]
        count[y] += 1
        bias_sum[y] += 1.0 if best != y else 0.0
        var_sum[y] += sum(1 for p in column if p != best) / n_models
        acc_sum[y] += sum(1 for p in column if p == y) / n_models
    nan = float("nan")
    return (
        [b / k if k else nan for b, k in zip(bias_sum, count)],
        [v / k if k else nan for v, k in zip(var_sum, count)],
        [a / k if k else nan for a, k in zip(acc_sum, count)],
    )


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 25), st.integers(2, 100), st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_matches_brute_force(n_models, c, n_inst, seed):
    rng = np.random.default_rng(seed)
    preds = rng.integers(0, c, (n_models, n_inst))
    truth = rng.integers(0, c, n_inst)
    rep = decompose(PredictionMatrix(preds, truth, c), [1] * c, shot_split(LongTailProfile((1,) * c, (3, 1))))
    b, v, a = brute_force(preds.tolist(), truth.tolist(), c)
    np.testing.assert_array_equal(rep.bias, b)
    np.testing.assert_array_equal(rep.variance, v)
    np.testing.assert_allclose(rep.accuracy, a, rtol=1e-12)


def test_model_accuracy_crosscheck():
    rng = np.random.default_rng(0)
    preds = rng.integers(0, 4, (6, 40))
    truth = rng.integers(0, 4, 40)
    m = PredictionMatrix(preds, truth, 4)
    acc = model_accuracies(m)
    assert acc.mean() == pytest.approx(np.mean(preds == truth))


def test_report_rows_and_summary():
    preds = np.array([[0, 1, 2, 2], [0, 1, 1, 2], [0, 0, 2, 2]])
    truth = np.array([0, 1, 2, 2])
    prof = LongTailProfile((200, 50, 5))
    rep = decompose(PredictionMatrix(preds, truth, 3), prof.counts, shot_split(prof))
    rows = rep.rows()
    assert [r["split"] for r in rows] == ["many", "medium", "few"]
    assert rows[1]["variance"] == pytest.approx(1 / 3)
    assert rep.summary["n_models"] == 3
    assert set(rep.summary["bias"]) == {"all", "many", "medium", "few"}


def test_hardest_negative_examples():
    np.testing.assert_allclose(hardest_negative(np.full((1, 4), 0.25), np.array([0])), [0.25])
    assert hardest_negative(np.array([[0.7, 0.2, 0.1]]), np.array([0]))[0] == pytest.approx(0.2)
    assert hardest_negative(np.array([[0.1, 0.6, 0.3]]), np.array([0]))[0] == pytest.approx(0.6)


def test_hardest_negative_stats():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]])
    truth = np.array([0, 0, 2])
    prof = LongTailProfile((200, 50, 5))
    scores, stats = hardest_negative_scores(probs, truth, shot_split(prof))
    assert stats["many"]["mean"] == pytest.approx(0.4)
    assert stats["few"]["mean"] == pytest.approx(0.3)
    assert np.isnan(stats["medium"]["mean"])
    assert len(stats["all"]["histogram"]) == HIST_BINS
    assert sum(stats["all"]["histogram"]) == 3


def test_decompose_is_deterministic():
    rng = np.random.default_rng(3)
    m = PredictionMatrix(rng.integers(0, 5, (4, 30)), rng.integers(0, 5, 30), 5)
    s = shot_split(LongTailProfile((9, 8, 5, 3, 1), (6, 2)))
    a = decompose(m, [9, 8, 5, 3, 1], s)
    b = decompose(m, [9, 8, 5, 3, 1], s)
    assert a.rows() == b.rows()
