import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import batch, small_model
from ride_lab.experts import softmax
from ride_lab.losses import (
    LossConfig,
    TemperatureSchedule,
    class_temperatures,
    collaborative_loss,
    cross_entropy,
    diversity_loss,
    diversity_terms,
    drw_weights,
    effective_number_weights,
    focal_loss,
    individual_loss,
    ldam_drw_loss,
    ldam_margins,
    tempered_probs,
    total_loss,
)
from ride_lab.netcore import NumericError

CE = lambda z, y: cross_entropy(z, y)  # noqa: E731


def test_ce_uniform_and_confident():
    assert cross_entropy(np.zeros((1, 4)), np.array([0]))[0] == pytest.approx(math.log(4))
    v, _ = cross_entropy(np.array([[10.0, -10.0]]), np.array([0]))
    assert v == pytest.approx(2.06e-9, rel=1e-2)


def test_ce_weight_linearity():
    z = np.random.default_rng(0).standard_normal((5, 3))
    y = np.array([0, 1, 2, 1, 0])
    a, _ = cross_entropy(z, y, np.ones(3))
    b, _ = cross_entropy(z, y, np.full(3, 2.0))
    assert b == pytest.approx(2 * a)


def test_ce_rejects_nonfinite():
    with pytest.raises(NumericError):
        cross_entropy(np.array([[np.inf, 0.0]]), np.array([0]))


def test_ldam_margins():
    np.testing.assert_allclose(ldam_margins([625, 16], 0.5), [0.1, 0.25])
    m = ldam_margins([40] * 5, 0.5)
    assert np.all(m == m[0])


def test_drw_weight_ratio_and_schedule():
    raw = (1 - 0.99) / (1 - 0.99 ** np.array([100, 10]))
    assert raw[1] / raw[0] == pytest.approx(6.63, abs=0.01)
    w = effective_number_weights([100, 10], 0.99)
    assert w[1] / w[0] == pytest.approx(6.63, abs=0.01)
    assert w.mean() == pytest.approx(1.0)
    cfg = LossConfig(drw_start_epoch=5, drw_beta=0.99)
    np.testing.assert_array_equal(drw_weights([100, 10], cfg, 4), [1.0, 1.0])


def test_ldam_zero_margin_equals_ce_bitwise():
    rng = np.random.default_rng(0)
    z, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    cfg = LossConfig(ldam_max_margin=0.0, drw_start_epoch=100)
    v, g = ldam_drw_loss(z, y, [50, 10, 5], cfg, 0)
    v0, g0 = cross_entropy(z, y)
    assert v == v0
    assert g.tobytes() == g0.tobytes()


def test_ldam_margin_raises_loss():
    rng = np.random.default_rng(1)
    z, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    v, _ = ldam_drw_loss(z, y, [50, 10, 5], LossConfig(), 0)
    assert v > cross_entropy(z, y)[0]


def test_focal_examples():
    z = np.random.default_rng(2).standard_normal((4, 3))
    y = np.array([0, 2, 1, 1])
    assert focal_loss(z, y, 0.0)[0] == pytest.approx(cross_entropy(z, y)[0])
    assert focal_loss(np.array([[0.0, 0.0]]), np.array([0]), 2.0)[0] == pytest.approx(0.25 * math.log(2))
    assert focal_loss(np.array([[800.0, 0.0]]), np.array([0]), 2.0)[0] == 0.0


def test_individual_loss_examples():
    m = small_model(2)
    x, y = batch(0)
    v, _ = individual_loss(m, x, y, CE)
    parts = [cross_entropy(z, y)[0] for z in m.forward(x).per_expert_logits]
    assert v == pytest.approx(sum(parts))
    m1 = small_model(1)
    assert individual_loss(m1, x, y, CE)[0] == pytest.approx(cross_entropy(m1.forward(x).per_expert_logits[0], y)[0])
    m.heads[1] = m.heads[0].copy()
    assert individual_loss(m, x, y, CE)[0] == pytest.approx(2 * cross_entropy(m.forward(x).per_expert_logits[0], y)[0])


def test_collaborative_loss_examples():
    x, y = batch(1)
    m1 = small_model(1)
    assert collaborative_loss(m1, x, y, CE)[0] == pytest.approx(individual_loss(m1, x, y, CE)[0])
    m = small_model(2)
    m.heads[1] = m.heads[0].copy()
    assert collaborative_loss(m, x, y, CE)[0] == pytest.approx(cross_entropy(m.forward(x).per_expert_logits[0], y)[0])
    z = np.random.default_rng(0).standard_normal((3, 2))
    assert cross_entropy((z + -z) / 2, np.array([0, 1, 0]))[0] == pytest.approx(math.log(2))


def test_temperature_examples():
    np.testing.assert_allclose(class_temperatures([100, 50], alpha=1.0, gamma=1.0), [1.0, 1 / 3])
    np.testing.assert_allclose(class_temperatures([500, 5, 40], alpha=2.0, gamma=0.0), [2.0] * 3)
    np.testing.assert_allclose(class_temperatures([7] * 5, alpha=1.5, gamma=0.8), [1.5] * 5)


def test_temperature_floor():
    t = class_temperatures([500, 5], alpha=1.0, gamma=1.0, floor=0.1)
    assert t.min() == pytest.approx(0.1)


def test_tempered_probs_examples():
    z = np.array([[1.0, 1.0]])
    np.testing.assert_allclose(tempered_probs(z, np.array([1.0, 0.5]))[0], [0.2689, 0.7311], atol=1e-4)
    w = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_allclose(tempered_probs(w, np.ones(4)), softmax(w))
    assert (tempered_probs(w, np.full(4, 3.0)).argmax(1) == w.argmax(1)).all()
    with pytest.raises(ValueError):
        tempered_probs(w, np.zeros(4))


def test_diversity_hand_value():
    p1 = np.log(np.array([[0.9, 0.1]]))
    p2 = np.log(np.array([[0.5, 0.5]]))
    v, _ = diversity_terms([p1, p2], np.ones(2), 0)
    assert v == pytest.approx(-(0.9 * math.log(1.8) + 0.1 * math.log(0.2)), abs=1e-12)
    assert v == pytest.approx(-0.3681, abs=1e-4)


def test_diversity_identical_experts_zero():
    m = small_model(3)
    m.heads[1] = m.heads[0].copy()
    m.heads[2] = m.heads[0].copy()
    x, _ = batch(2)
    v, grads = diversity_loss(m, x, np.ones(4), 2)
    assert v == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(2, 8), st.integers(0, 10**6))
def test_diversity_nonpositive_and_relabel_invariant(n, c, seed):
    rng = np.random.default_rng(seed)
    logits = [rng.normal(0, 2, (3, c)) for _ in range(n)]
    temps = rng.uniform(0.2, 2.0, c)
    vals = [diversity_terms(logits, temps, i)[0] for i in range(n)]
    assert all(v <= 1e-12 for v in vals)
    perm = rng.permutation(n)
    shuffled = [logits[j] for j in perm]
    total = sum(diversity_terms(shuffled, temps, i)[0] for i in range(n))
    assert total == pytest.approx(sum(vals), rel=1e-9, abs=1e-12)


@settings(max_examples=500, deadline=None)
@given(st.lists(st.integers(1, 5000), min_size=2, max_size=60), st.floats(0.05, 50), st.floats(0, 1))
def test_temperature_properties(counts, alpha, gamma):
    t = class_temperatures(counts, alpha, gamma)
    n = np.asarray(counts)
    assert np.all(t[n == n.max()] == pytest.approx(alpha))
    order = np.argsort(n, kind="stable")
    assert np.all(np.diff(t[order]) >= -1e-12)
    balanced = class_temperatures([counts[0]] * len(counts), alpha, gamma)
    assert np.all(balanced == alpha)


def test_total_loss_lambda_zero_is_individual():
    m = small_model(2)
    x, y = batch(3)
    counts = [40, 20, 8, 3]
    cfg = LossConfig(kind="CE", lam=0.0)
    v, g, _ = total_loss(m, x, y, cfg, 0, counts, TemperatureSchedule(start_epoch=0))
    vi, gi = individual_loss(m, x, y, CE)
    assert v == pytest.approx(vi)
    for a, b in zip(g, gi):
        np.testing.assert_allclose(a, b)


def test_total_loss_identical_experts():
    m = small_model(2)
    m.heads[1] = m.heads[0].copy()
    x, y = batch(4)
    v, _, terms = total_loss(m, x, y, LossConfig(kind="CE", lam=0.7), 0, [40, 20, 8, 3],
                             TemperatureSchedule(start_epoch=0))
    assert terms["diversity"] == pytest.approx(0.0, abs=1e-12)
    assert v == pytest.approx(individual_loss(m, x, y, CE)[0])


def test_total_loss_decomposition():
    m = small_model(2)
    x, y = batch(5)
    counts = [40, 20, 8, 3]
    sched = TemperatureSchedule(alpha=1.0, gamma=0.3, start_epoch=0)
    v, _, _ = total_loss(m, x, y, LossConfig(kind="CE", lam=0.5), 0, counts, sched)
    temps = class_temperatures(counts, 1.0, 0.3)
    d1 = diversity_loss(m, x, temps, 1)[0]
    d2 = diversity_loss(m, x, temps, 2)[0]
    assert v == pytest.approx(individual_loss(m, x, y, CE)[0] + 0.5 * (d1 + d2), rel=1e-12)


def test_diversity_waits_for_start_epoch():
    m = small_model(2)
    x, y = batch(6)
    _, _, terms = total_loss(m, x, y, LossConfig(kind="CE", lam=0.5), 3, [40, 20, 8, 3],
                             TemperatureSchedule(start_epoch=4))
    assert terms["diversity"] == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(kind="hinge")
    with pytest.raises(ValueError):
        LossConfig(lam=-1)
    with pytest.raises(ValueError):
        class_temperatures([3, 4], alpha=0)
