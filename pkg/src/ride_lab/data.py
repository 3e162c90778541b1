"""Long-tail datasets: count profiles, subsampling, shot splits, loaders."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ProfileError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class LongTailProfile:
    counts: tuple[int, ...]
    shot_thresholds: tuple[int, int] = (100, 20)

    def __post_init__(self):
        if any(n < 1 for n in self.counts):
            raise ProfileError("every class needs at least one instance")
        many_min, few_max = self.shot_thresholds
        if many_min <= few_max:
            raise ProfileError("many-shot threshold must exceed few-shot threshold")

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    @property
    def imbalance_factor(self) -> float:
        return max(self.counts) / min(self.counts)

    def to_json(self) -> dict:
        return {
            "counts": list(self.counts),
            "imbalance_factor": self.imbalance_factor,
            "shot_thresholds": list(self.shot_thresholds),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LongTailProfile":
        return cls(tuple(int(n) for n in obj["counts"]), tuple(obj.get("shot_thresholds", (100, 20))))


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    ids: np.ndarray = None
    class_index: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if len(self.features) != len(self.labels):
            raise FormatError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise FormatError("label out of range")
        self.class_index = [np.flatnonzero(self.labels == k) for k in range(self.n_classes)]

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def take(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, self.ids[idx])

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = self.features.shape[1]
            w.writerow(["id", "label"] + [f"x{j}" for j in range(d)])
            for i, y, row in zip(self.ids, self.labels, self.features):
                w.writerow([int(i), int(y)] + [repr(float(v)) for v in row])


def exp_longtail_counts(
    c: int, n_max: int, imbalance_factor: float, shot_thresholds: tuple[int, int] = (100, 20)
) -> LongTailProfile:
    """Exponentially decaying counts ``n_k = round(n_max * IF**(-k/(c-1)))``."""
    if c < 2:
        raise ProfileError("need at least two classes")
    if imbalance_factor < 1:
        raise ProfileError("imbalance factor must be >= 1")
    if n_max / imbalance_factor < 1:
        raise ProfileError(f"n_max={n_max} with IF={imbalance_factor} leaves the tail empty")
    counts = tuple(
        max(1, int(round(n_max * imbalance_factor ** (-k / (c - 1))))) for k in range(c)
    )
    return LongTailProfile(counts, tuple(shot_thresholds))


def subsample_longtail(base: LabeledDataset, profile: LongTailProfile, seed) -> LabeledDataset:
    """Draw exactly ``counts[k]`` instances of class k without replacement."""
    if profile.n_classes != base.n_classes:
        raise CapacityError("profile and dataset disagree on class count")
    rng = np.random.default_rng(seed)
    picks = []
    for k, n_k in enumerate(profile.counts):
        pool = base.class_index[k]
        if len(pool) < n_k:
            raise CapacityError(f"class {k} has {len(pool)} instances, profile needs {n_k}")
        picks.append(rng.choice(pool, size=n_k, replace=False))
    idx = np.concatenate(picks)
    rng.shuffle(idx)
    return base.take(idx)


def resample_replicates(base: LabeledDataset, profile: LongTailProfile, n_reps: int, seed) -> list[LabeledDataset]:
    if n_reps < 2:
        raise ValueError("need at least two replicates")
    children = np.random.SeedSequence(seed).spawn(n_reps)
    return [subsample_longtail(base, profile, child) for child in children]


@dataclass(frozen=True)
class ShotSplits:
    many: frozenset[int]
    medium: frozenset[int]
    few: frozenset[int]

    def as_dict(self) -> dict[str, frozenset[int]]:
        return {"many": self.many, "medium": self.medium, "few": self.few}

    def split_of(self, k: int) -> str:
        for name, members in self.as_dict().items():
            if k in members:
                return name
        raise KeyError(k)


def shot_split(profile: LongTailProfile) -> ShotSplits:
    many_min, few_max = profile.shot_thresholds
    many, medium, few = set(), set(), set()
    for k, n in enumerate(profile.counts):
        if n > many_min:
            many.add(k)
        elif n <= few_max:
            few.add(k)
        else:
            medium.add(k)
    return ShotSplits(frozenset(many), frozenset(medium), frozenset(few))


CIFAR_RECORD = 2 + 3072


def load_cifar_binary(path: str | os.PathLike, n_classes: int = 100) -> LabeledDataset:
    """Read the CIFAR-100 binary layout (coarse byte, fine byte, 3072 pixels)."""
    path = Path(path)
    if not path.is_absolute() and os.environ.get("RIDE_LAB_DATA"):
        path = Path(os.environ["RIDE_LAB_DATA"]) / path
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 1].astype(np.int64)
    if labels.max() >= n_classes:
        raise FormatError(f"{path}: fine label {labels.max()} >= {n_classes}")
    features = records[:, 2:].astype(np.float32) / 255.0
    return LabeledDataset(features, labels, n_classes)


def gaussian_means(c: int, d: int, separation: float, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((c, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return separation * dirs


def synth_gaussian_mixture(
    c: int,
    d: int,
    n_per_class: int,
    separation: float,
    seed,
    sample_seed=None,
) -> LabeledDataset:
    """Isotropic unit-variance Gaussians at ``separation * random unit vectors``.

    Means depend on ``seed`` only; ``sample_seed`` (default ``seed``) picks the
    draws, so train and test sets can share a task.
    """
    if c < 2 or d < 2:
        raise ValueError("need c >= 2 and d >= 2")
    means = gaussian_means(c, d, separation, seed)
    rng = np.random.default_rng([1, seed if sample_seed is None else sample_seed])
    labels = np.repeat(np.arange(c), n_per_class)
    x = means[labels] + rng.standard_normal((len(labels), d))
    return LabeledDataset(x.astype(np.float32), labels, c)


def save_profile(profile: LongTailProfile, path: str | os.PathLike, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({**profile.to_json(), **extra}, fh, indent=2)
