"""0-1 bias/variance decomposition over replicate models and confusion stats."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ShotSplits

HIST_BINS = 20


@dataclass
class PredictionMatrix:
    preds: np.ndarray  # (n_models, n_instances)
    truth: np.ndarray  # (n_instances,)
    n_classes: int

    def __post_init__(self):
        self.preds = np.asarray(self.preds, dtype=np.int64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        if self.preds.ndim != 2 or self.preds.shape[0] < 2:
            raise ValueError("need a (n_models >= 2, n_instances) prediction matrix")
        if self.preds.shape[1] != len(self.truth):
            raise ValueError("truth length differs from instance count")
        if self.preds.max(initial=0) >= self.n_classes or self.truth.max(initial=0) >= self.n_classes:
            raise ValueError("label out of range")

    @property
    def n_models(self) -> int:
        return self.preds.shape[0]


def main_prediction(preds) -> int:
    """Mode of ``preds``; ties go to the smallest class index."""
    return int(np.argmax(np.bincount(np.asarray(preds, dtype=np.int64))))


def main_predictions(matrix: PredictionMatrix) -> np.ndarray:
    c = matrix.n_classes
    n_inst = matrix.preds.shape[1]
    votes = np.zeros((n_inst, c), dtype=np.int64)
    np.add.at(votes, (np.broadcast_to(np.arange(n_inst), matrix.preds.shape), matrix.preds), 1)
    return votes.argmax(axis=1)


def instance_bias(matrix: PredictionMatrix) -> np.ndarray:
    return (main_predictions(matrix) != matrix.truth).astype(np.float64)


def instance_variance(matrix: PredictionMatrix) -> np.ndarray:
    return np.mean(matrix.preds != main_predictions(matrix)[None, :], axis=0)


def _class_mean(values: np.ndarray, truth: np.ndarray, c: int) -> np.ndarray:
    sums = np.bincount(truth, weights=values, minlength=c)
    counts = np.bincount(truth, minlength=c)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def zero_one_bias(matrix: PredictionMatrix) -> np.ndarray:
    """Per-class mean of ``[main prediction != truth]``."""
    return _class_mean(instance_bias(matrix), matrix.truth, matrix.n_classes)


def zero_one_variance(matrix: PredictionMatrix) -> np.ndarray:
    """Per-class mean fraction of models disagreeing with the main prediction."""
    return _class_mean(instance_variance(matrix), matrix.truth, matrix.n_classes)


def model_accuracies(matrix: PredictionMatrix) -> np.ndarray:
    return np.mean(matrix.preds == matrix.truth[None, :], axis=1)


@dataclass
class BiasVarReport:
    counts: list[int]
    bias: np.ndarray
    variance: np.ndarray
    accuracy: np.ndarray  # per class, averaged over models
    splits: ShotSplits
    summary: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {
                "class": k,
                "n_k": int(self.counts[k]),
                "split": self.splits.split_of(k),
                "bias": float(self.bias[k]),
                "variance": float(self.variance[k]),
                "accuracy": float(self.accuracy[k]),
            }
            for k in range(len(self.counts))
        ]


def split_means(per_class: np.ndarray, splits: ShotSplits) -> dict[str, float]:
    out = {"all": float(np.nanmean(per_class))}
    for name, members in splits.as_dict().items():
        out[name] = float(np.nanmean(per_class[sorted(members)])) if members else float("nan")
    return out


def decompose(matrix: PredictionMatrix, counts, splits: ShotSplits) -> BiasVarReport:
    bias = zero_one_bias(matrix)
    var = zero_one_variance(matrix)
    correct = np.mean(matrix.preds == matrix.truth[None, :], axis=0)
    acc = _class_mean(correct, matrix.truth, matrix.n_classes)
    summary = {
        "n_models": matrix.n_models,
        "bias": split_means(bias, splits),
        "variance": split_means(var, splits),
        "accuracy": split_means(acc, splits),
        "model_accuracies": [float(a) for a in model_accuracies(matrix)],
    }
    return BiasVarReport(list(counts), bias, var, acc, splits, summary)


def hardest_negative(probs: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Largest probability among the non-ground-truth classes."""
    p = np.array(probs, dtype=np.float64, copy=True)
    p[np.arange(len(truth)), truth] = -np.inf
    return p.max(axis=1)


def hardest_negative_scores(probs: np.ndarray, truth: np.ndarray, splits: ShotSplits) -> tuple[np.ndarray, dict]:
    """Per-instance scores plus per-split ``{mean, histogram}`` on 20 bins over [0, 1]."""
    scores = hardest_negative(probs, truth)
    edges = np.linspace(0, 1, HIST_BINS + 1)
    stats = {}
    groups = {"all": np.ones(len(truth), dtype=bool)}
    for name, members in splits.as_dict().items():
        groups[name] = np.isin(truth, sorted(members))
    for name, mask in groups.items():
        hist, _ = np.histogram(scores[mask], bins=edges)
        stats[name] = {
            "mean": float(scores[mask].mean()) if mask.any() else float("nan"),
            "histogram": hist.tolist(),
        }
    return scores, stats
