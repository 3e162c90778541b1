"""Training objectives. Each logit-level loss returns ``(value, dlogits)``;
model-level losses return ``(value, param_grads)`` in ``model.params()`` order.
All losses average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .experts import RideModel, log_softmax, softmax
from .netcore import NumericError

LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class LossConfig:
    kind: str = "LDAM"  # CE | LDAM | focal
    lam: float = 0.2
    ldam_max_margin: float | None = 0.5
    ldam_C: float = 0.5
    ldam_s: float = 30.0
    drw_start_epoch: int = 16
    drw_beta: float = 0.9999
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in ("CE", "LDAM", "focal"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be finite and >= 0")
        if not 0 <= self.drw_beta < 1:
            raise ValueError("drw_beta must lie in [0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")


@dataclass(frozen=True)
class TemperatureSchedule:
    alpha: float = 1.0
    gamma: float = 0.3
    start_epoch: int = 16
    floor: float = 0.1


def _onehot(labels: np.ndarray, c: int, dtype) -> np.ndarray:
    out = np.zeros((len(labels), c), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def _check_finite(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")


def cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``-w_y * log softmax(logits)_y``."""
    _check_finite(logits)
    b, c = logits.shape
    logp = log_softmax(logits)
    rows = np.arange(b)
    w = np.ones(b, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)[labels]
    loss = -np.sum(w * logp[rows, labels]) / b
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad *= (w / b)[:, None]
    return float(loss), grad


def ldam_margins(counts: Sequence[int], C: float) -> np.ndarray:
    """Per-class margins ``C / n_k**0.25``."""
    return C / np.asarray(counts, dtype=np.float64) ** 0.25


def margin_constant(counts: Sequence[int], config: LossConfig) -> float:
    """``C`` such that the smallest class gets ``ldam_max_margin`` (if set)."""
    if config.ldam_max_margin is None:
        return config.ldam_C
    return config.ldam_max_margin * float(min(counts)) ** 0.25


def effective_number_weights(counts: Sequence[int], beta: float) -> np.ndarray:
    """``(1-beta)/(1-beta**n_k)`` rescaled to mean 1."""
    n = np.asarray(counts, dtype=np.float64)
    w = (1 - beta) / (1 - np.power(beta, n))
    return w / w.mean()


def drw_weights(counts: Sequence[int], config: LossConfig, epoch: int) -> np.ndarray:
    if epoch < config.drw_start_epoch:
        return np.ones(len(counts))
    return effective_number_weights(counts, config.drw_beta)


def ldam_drw_loss(
    logits: np.ndarray, labels: np.ndarray, counts: Sequence[int], config: LossConfig, epoch: int
) -> tuple[float, np.ndarray]:
    """CE after subtracting ``s * margin_y`` from the true-class logit.

    Logits are taken to be already multiplied by the logit scale ``s``
    (the cosine head applies it), so ``s`` scales the margin only.
    """
    margins = ldam_margins(counts, margin_constant(counts, config))
    shift = (config.ldam_s * margins[labels]).astype(logits.dtype)
    adjusted = logits.copy()
    adjusted[np.arange(len(labels)), labels] -= shift
    weights = drw_weights(counts, config, epoch)
    return cross_entropy(adjusted, labels, weights)


def focal_loss(logits: np.ndarray, labels: np.ndarray, focal_gamma: float, weights=None) -> tuple[float, np.ndarray]:
    """Mean of ``-(1-p_y)**gamma * log p_y``."""
    _check_finite(logits)
    b, c = logits.shape
    rows = np.arange(b)
    logp = log_softmax(logits)
    p = np.exp(logp)
    lpy = logp[rows, labels]
    py = p[rows, labels]
    q = 1 - py
    w = np.ones(b) if weights is None else np.asarray(weights)[labels]
    loss = -np.sum(w * q**focal_gamma * lpy) / b
    if focal_gamma == 0:
        extra = np.zeros(b)
    else:
        safe_q = np.where(q > 0, q, 1.0)
        extra = np.where(q > 0, focal_gamma * safe_q ** (focal_gamma - 1) * py * lpy, 0.0)
    coef = extra - q**focal_gamma  # dL/dz_k = coef * (onehot_k - p_k)
    grad = (coef * w / b)[:, None] * (_onehot(labels, c, logits.dtype) - p)
    return float(loss), grad.astype(logits.dtype)


def make_classify_loss(config: LossConfig, counts: Sequence[int], epoch: int) -> LossFn:
    """Bind config, class counts and epoch into a ``(logits, labels)`` loss."""
    if config.kind == "CE":
        return lambda z, y: cross_entropy(z, y)
    if config.kind == "LDAM":
        return lambda z, y: ldam_drw_loss(z, y, counts, config, epoch)
    return lambda z, y: focal_loss(z, y, config.focal_gamma, drw_weights(counts, config, epoch))


def individual_loss(model: RideModel, batch: np.ndarray, labels: np.ndarray, base_loss: LossFn):
    """Sum over experts of the base loss on each expert's own logits."""
    out = model.forward(batch, record=True)
    total = 0.0
    grads = []
    for z in out.per_expert_logits:
        v, g = base_loss(z, labels)
        total += v
        grads.append(g)
    return total, model.backward(grads)


def collaborative_loss(model: RideModel, batch: np.ndarray, labels: np.ndarray, base_loss: LossFn):
    """Base loss on the mean logits of all experts."""
    out = model.forward(batch, record=True)
    n = model.n_experts
    v, g = base_loss(out.mean_logits_prefix(n), labels)
    return v, model.backward([g / n] * n)


def class_temperatures(counts: Sequence[int], alpha: float = 1.0, gamma: float = 0.3, floor: float = 0.1) -> np.ndarray:
    """Per-class temperatures growing linearly with class size.

    ``beta_k = gamma*n_k/mean(n) + 1 - gamma``; ``T_k = alpha*(beta_k + 1 - max beta)``,
    clamped below at ``floor*alpha``.
    """
    if alpha <= 0 or not 0 <= gamma <= 1:
        raise ValueError("need alpha > 0 and gamma in [0, 1]")
    n = np.asarray(counts, dtype=np.float64)
    beta = gamma * n / n.mean() + (1 - gamma)
    # written so the largest class gets exactly alpha
    t = alpha * (1 - (beta.max() - beta))
    return np.maximum(t, floor * alpha)


def tempered_probs(logits: np.ndarray, temperatures: np.ndarray) -> np.ndarray:
    temperatures = np.asarray(temperatures)
    if np.any(temperatures <= 0):
        raise ValueError("temperatures must be positive")
    return softmax(logits / temperatures)


def diversity_terms(logits: Sequence[np.ndarray], temperatures: np.ndarray, i: int) -> tuple[float, list[np.ndarray]]:
    """Diversity loss of expert ``i`` (0-based) and its gradient w.r.t. every expert's logits.

    ``-1/(n-1) * sum_{j != i} KL(p_i || p_j)`` on tempered probabilities,
    averaged over the batch. Gradients flow into both KL arguments.
    """
    n = len(logits)
    if n < 2:
        raise ValueError("diversity needs at least two experts")
    t = np.asarray(temperatures, dtype=logits[0].dtype)
    b = logits[0].shape[0]
    logps = [log_softmax(z / t) for z in logits]
    p_i = np.exp(logps[i])
    grads = [np.zeros_like(z) for z in logits]
    total = 0.0
    scale = -1.0 / ((n - 1) * b)
    for j in range(n):
        if j == i:
            continue
        diff = logps[i] - logps[j]
        kl_rows = np.sum(p_i * diff, axis=1, keepdims=True)
        total += kl_rows.sum()
        grads[i] += scale * p_i * (diff - kl_rows) / t
        grads[j] += scale * (np.exp(logps[j]) - p_i) / t
    return float(scale * total), grads


def diversity_loss(model: RideModel, batch: np.ndarray, temperatures: np.ndarray, i: int):
    """Model-level diversity loss of expert ``i`` (1-based)."""
    if model.n_experts < 2:
        raise ValueError("diversity loss is undefined for a single expert")
    out = model.forward(batch, record=True)
    v, g = diversity_terms(out.per_expert_logits, temperatures, i - 1)
    return v, model.backward(g)


def total_loss(
    model: RideModel,
    batch: np.ndarray,
    labels: np.ndarray,
    config: LossConfig,
    epoch: int,
    counts: Sequence[int],
    schedule: TemperatureSchedule = TemperatureSchedule(),
    extra_logit_grads: Callable | None = None,
):
    """Individual classification losses plus ``lam`` times each expert's diversity loss.

    Returns ``(value, grads, terms)``; ``terms`` holds the classify and
    diversity parts. ``extra_logit_grads(out)`` may add further
    ``(value, per-expert grads)`` contributions (used for distillation).
    """
    out = model.forward(batch, record=True)
    base = make_classify_loss(config, counts, epoch)
    grads = []
    classify = 0.0
    for z in out.per_expert_logits:
        v, g = base(z, labels)
        classify += v
        grads.append(g)
    diversity = 0.0
    if config.lam > 0 and model.n_experts >= 2 and epoch >= schedule.start_epoch:
        temps = class_temperatures(counts, schedule.alpha, schedule.gamma, schedule.floor)
        for i in range(model.n_experts):
            v, gs = diversity_terms(out.per_expert_logits, temps, i)
            diversity += v
            for k, g in enumerate(gs):
                grads[k] = grads[k] + config.lam * g
    terms = {"classify": classify, "diversity": diversity}
    value = classify + config.lam * diversity
    if extra_logit_grads is not None:
        v, gs = extra_logit_grads(out)
        terms["extra"] = v
        value += v
        grads = [a + b for a, b in zip(grads, gs)]
    if not np.isfinite(value):
        raise NumericError("non-finite loss")
    return value, model.backward(grads), terms
