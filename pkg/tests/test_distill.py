import math
from dataclasses import replace

import numpy as np
import pytest

from ride_lab.data import exp_longtail_counts, subsample_longtail, synth_gaussian_mixture
from ride_lab.distill import DistillConfig, distill_train, kd_loss
from ride_lab.experts import ConfigError, build_model
from ride_lab.losses import LossConfig, TemperatureSchedule
from ride_lab.training import TrainConfig, train_stage1


def test_identical_logits_zero():
    z = np.random.default_rng(0).standard_normal((4, 5))
    v, g = kd_loss(z, z.copy(), 2.0)
    assert v == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(g, 0, atol=1e-12)


def test_two_point_value():
    v, _ = kd_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 1.0)
    p = math.e / (1 + math.e)
    assert v == pytest.approx(p * math.log(p / (1 - p)) + (1 - p) * math.log((1 - p) / p))
    assert v == pytest.approx(0.4621, abs=1e-4)


def test_high_temperature_vanishes():
    rng = np.random.default_rng(1)
    t, s = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    # the KL itself vanishes; the T**2 rescaled loss tends to a logit-matching quadratic
    kl = [kd_loss(t, s, T)[0] / T**2 for T in (1.0, 10.0, 1000.0)]
    assert kl[2] < kl[1] < kl[0] and kl[2] < 1e-6
    dt, ds = t - t.mean(1, keepdims=True), s - s.mean(1, keepdims=True)
    quad = np.mean(np.sum((dt - ds) ** 2, axis=1)) / (2 * t.shape[1])
    assert kd_loss(t, s, 1000.0)[0] == pytest.approx(quad, rel=1e-3)
    _, g = kd_loss(t, s, 1e4)
    # logit matching direction: gradient ~ (s - mean s) - (t - mean t), up to scale
    target = (s - s.mean(1, keepdims=True)) - (t - t.mean(1, keepdims=True))
    cos = np.sum(g * target) / (np.linalg.norm(g) * np.linalg.norm(target))
    assert cos > 0.999


def test_nonnegative_random():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t, s = rng.normal(0, 3, (2, 6)), rng.normal(0, 3, (2, 6))
        assert kd_loss(t, s, rng.uniform(0.5, 5))[0] >= -1e-12


def test_teacher_gradient_is_zero():
    # the loss only returns a student gradient; the teacher enters as a constant
    rng = np.random.default_rng(3)
    t, s = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    t0 = t.copy()
    kd_loss(t, s, 2.0)
    np.testing.assert_array_equal(t, t0)


def _tiny_task():
    prof = exp_longtail_counts(4, 40, 10)
    base = synth_gaussian_mixture(4, 5, 60, 3.0, 0)
    return subsample_longtail(base, prof, 0)


CFG = TrainConfig(epochs=3, batch_size=16, milestones=())
LOSS = LossConfig(kind="CE", lam=0.1, drw_start_epoch=1)
TEMP = TemperatureSchedule(start_epoch=1)


def test_zero_weight_matches_plain_training():
    train = _tiny_task()
    teacher = build_model(5, [8, 8], 3, 0.75, 4, 9)
    a = build_model(5, [8, 8], 2, 0.75, 4, 1)
    b = a.copy()
    distill_train(teacher, a, train, LOSS, TEMP, CFG, DistillConfig(kd_weight=0.0), 5)
    train_stage1(b, train, LOSS, TEMP, CFG, 5)
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_student_copy_starts_at_zero_kd():
    train = _tiny_task()
    teacher = build_model(5, [8, 8], 1, 1.0, 4, 2)
    student = teacher.copy()
    rows = distill_train(teacher, student, train, LOSS, TEMP, replace(CFG, epochs=1, lr=0.0), DistillConfig(), 0)
    assert rows[0]["extra"] == pytest.approx(0.0, abs=1e-6)


def test_student_larger_than_teacher_rejected():
    train = _tiny_task()
    with pytest.raises(ConfigError):
        distill_train(build_model(5, [8, 8], 2, 0.75, 4, 0), build_model(5, [8, 8], 3, 0.75, 4, 0),
                      train, LOSS, TEMP, CFG, DistillConfig(), 0)
    with pytest.raises(ConfigError):
        distill_train(build_model(5, [8, 8], 2, 0.75, 4, 0), build_model(6, [8, 8], 2, 0.75, 4, 0),
                      train, LOSS, TEMP, CFG, DistillConfig(), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(kd_temperature=0)
    with pytest.raises(ValueError):
        DistillConfig(kd_weight=-1)
