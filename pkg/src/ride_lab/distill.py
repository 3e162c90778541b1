"""Self-distillation from a many-expert teacher into a few-expert student."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .experts import ConfigError, RideModel, log_softmax
from .losses import LossConfig, TemperatureSchedule
from .training import TrainConfig, predict_logits, train_stage1


@dataclass(frozen=True)
class DistillConfig:
    kd_temperature: float = 2.0
    kd_weight: float = 1.0
    teacher: str | None = None  # checkpoint path, used by the CLI

    def __post_init__(self):
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        if not np.isfinite(self.kd_weight) or self.kd_weight < 0:
            raise ValueError("kd_weight must be finite and >= 0")


def kd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, T: float) -> tuple[float, np.ndarray]:
    """``T**2 * KL(softmax(teacher/T) || softmax(student/T))``, batch-averaged.

    The gradient is w.r.t. the student logits only.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError("teacher and student logits differ in shape")
    b = len(student_logits)
    lt = log_softmax(np.asarray(teacher_logits, dtype=student_logits.dtype) / T)
    ls = log_softmax(student_logits / T)
    pt = np.exp(lt)
    value = T * T * np.sum(pt * (lt - ls)) / b
    grad = T * (np.exp(ls) - pt) / b
    return float(value), grad


def distill_train(
    teacher: RideModel,
    student: RideModel,
    train: LabeledDataset,
    loss_cfg: LossConfig,
    temp: TemperatureSchedule,
    train_cfg: TrainConfig,
    config: DistillConfig,
    seed: int,
    on_epoch=None,
) -> list[dict]:
    """Train ``student`` in place on its usual objective plus per-expert KD.

    Every student expert is pulled toward the teacher's mean logits.
    """
    if student.n_experts > teacher.n_experts:
        raise ConfigError("student has more experts than the teacher")
    if student.n_classes != teacher.n_classes or student.meta["d_in"] != teacher.meta["d_in"]:
        raise ConfigError("teacher and student disagree on input or class dims")
    targets = predict_logits(teacher, train.features).astype(student.params()[0].dtype)

    def extra(idx):
        if config.kd_weight == 0:
            return None
        t = targets[idx]

        def hook(out):
            total = 0.0
            grads = []
            for z in out.per_expert_logits:
                v, g = kd_loss(t, z, config.kd_temperature)
                total += config.kd_weight * v
                grads.append(config.kd_weight * g)
            return total, grads

        return hook

    return train_stage1(student, train, loss_cfg, temp, train_cfg, seed, extra, on_epoch)
