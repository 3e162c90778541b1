"""Stage-1 training loop and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .analysis import hardest_negative_scores
from .data import LabeledDataset, LongTailProfile, shot_split
from .experts import RideModel, softmax
from .losses import LossConfig, TemperatureSchedule, total_loss
from .netcore import NumericError, OptimState, StepSchedule, sgd_momentum_step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[tuple[int, float], ...] = ((12, 0.1), (16, 0.1))

    def schedule(self) -> StepSchedule:
        return StepSchedule(self.lr, tuple(tuple(m) for m in self.milestones))


def train_stage1(
    model: RideModel,
    train: LabeledDataset,
    loss_cfg: LossConfig,
    temp: TemperatureSchedule,
    cfg: TrainConfig,
    seed: int,
    extra: Callable | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Jointly train backbone and experts; returns one metrics row per epoch.

    ``extra(batch_idx)`` may return a callback adding loss terms on the
    expert logits of that batch (distillation uses this).
    """
    counts = train.class_counts()
    if np.any(counts == 0):
        raise ValueError("every class needs at least one training instance")
    rng = np.random.default_rng([seed, 3])
    state = OptimState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    schedule = cfg.schedule()
    params = model.params()
    rows = []
    for epoch in range(cfg.epochs):
        state.lr = schedule.lr_at_epoch(epoch)
        order = rng.permutation(len(train))
        sums = {"loss": 0.0, "classify": 0.0, "diversity": 0.0, "extra": 0.0}
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            hook = extra(idx) if extra is not None else None
            try:
                value, grads, terms = total_loss(
                    model, train.features[idx], train.labels[idx], loss_cfg, epoch, counts, temp, hook
                )
                sgd_momentum_step(params, grads, state)
            except NumericError as exc:
                exc.batch_index = bi
                raise
            w = len(idx) / len(train)
            sums["loss"] += value * w
            for k, v in terms.items():
                sums[k] += v * w
        row = {"epoch": epoch, "lr": state.lr, **sums}
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return rows


def predict_logits(model: RideModel, x: np.ndarray, n_active: int | None = None) -> np.ndarray:
    m = model.n_experts if n_active is None else n_active
    return model.forward(x, n_active=m).mean_logits_prefix(m)


def split_accuracy(pred: np.ndarray, truth: np.ndarray, profile: LongTailProfile) -> dict[str, float]:
    correct = pred == truth
    out = {"all": float(correct.mean())}
    for name, members in shot_split(profile).as_dict().items():
        mask = np.isin(truth, sorted(members))
        out[name] = float(correct[mask].mean()) if mask.any() else float("nan")
    return out


def evaluate(model: RideModel, test: LabeledDataset, profile: LongTailProfile, n_active: int | None = None) -> dict:
    """Accuracy and hardest-negative means, overall and per shot split."""
    logits = predict_logits(model, test.features, n_active).astype(np.float64)
    pred = logits.argmax(axis=1)
    _, hn = hardest_negative_scores(softmax(logits), test.labels, shot_split(profile))
    return {
        "accuracy": split_accuracy(pred, test.labels, profile),
        "hardest_negative": {k: v["mean"] for k, v in hn.items()},
        "hardest_negative_hist": {k: v["histogram"] for k, v in hn.items()},
    }


def param_matched_width(target: int, d_in: int, depth: int, c: int, cosine: bool) -> int:
    """Hidden width of a ``depth``-layer single model closest to ``target`` params."""

    def count(w):
        n = d_in * w + w + (depth - 1) * (w * w + w) + w * c
        return n if cosine else n + c

    return min(range(1, 4096), key=lambda w: abs(count(w) - target))
