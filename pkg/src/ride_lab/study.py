"""Orchestration shared by the CLI and the acceptance suite: data preparation,
building and training a configured model, and replicate bias/variance studies."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analysis import BiasVarReport, PredictionMatrix, decompose, hardest_negative_scores
from .config import DataConfig, ModelSpec, _resolve_data_path
from .data import (
    LabeledDataset,
    LongTailProfile,
    exp_longtail_counts,
    load_cifar_binary,
    resample_replicates,
    shot_split,
    subsample_longtail,
    synth_gaussian_mixture,
)
from .experts import RideModel, build_model, softmax
from .losses import LossConfig, TemperatureSchedule
from .training import TrainConfig, predict_logits, train_stage1


@dataclass
class Task:
    pool: LabeledDataset
    train: LabeledDataset
    test: LabeledDataset
    profile: LongTailProfile


def prepare_task(cfg: DataConfig, seed: int | None = None) -> Task:
    """Long-tailed train split and balanced test split for a data config.

    ``seed`` (default ``cfg.seed``) selects the synthetic task and the
    long-tail subsample.
    """
    seed = cfg.seed if seed is None else seed
    profile = exp_longtail_counts(cfg.n_classes, cfg.n_max, cfg.imbalance_factor, tuple(cfg.shot_thresholds))
    if cfg.source == "synthetic":
        pool = synth_gaussian_mixture(cfg.n_classes, cfg.dim, cfg.pool_per_class, cfg.separation, seed)
        test = synth_gaussian_mixture(
            cfg.n_classes, cfg.dim, cfg.test_per_class, cfg.separation, seed, sample_seed=10_000 + seed
        )
    else:
        pool = load_cifar_binary(_resolve_data_path(cfg.cifar_train), cfg.n_classes)
        test = load_cifar_binary(_resolve_data_path(cfg.cifar_test), cfg.n_classes)
    train = subsample_longtail(pool, profile, seed)
    return Task(pool, train, test, profile)


def build_from_spec(spec: ModelSpec, d_in: int, c: int, seed: int, dtype=np.float32) -> RideModel:
    scale = spec.cosine_scale if spec.classifier == "cosine" else None
    width = spec.width_factor if spec.n_experts > 1 else 1.0
    return build_model(d_in, spec.hidden_dims, spec.n_experts, width, c, seed, spec.split, scale, dtype)


def fit(
    spec: ModelSpec,
    loss: LossConfig,
    temp: TemperatureSchedule,
    train_cfg: TrainConfig,
    train: LabeledDataset,
    seed: int,
    on_epoch=None,
) -> tuple[RideModel, list[dict]]:
    model = build_from_spec(spec, train.features.shape[1], train.n_classes, seed)
    rows = train_stage1(model, train, loss, temp, train_cfg, seed, on_epoch=on_epoch)
    return model, rows


def _replicate_job(args):
    spec, loss, temp, train_cfg, train, test_x, seed = args
    model, _ = fit(spec, loss, temp, train_cfg, train, seed)
    logits = predict_logits(model, test_x).astype(np.float64)
    return logits.argmax(axis=1), softmax(logits)


def biasvar_experiment(
    spec: ModelSpec,
    loss: LossConfig,
    temp: TemperatureSchedule,
    train_cfg: TrainConfig,
    pool: LabeledDataset,
    test: LabeledDataset,
    profile: LongTailProfile,
    n_reps: int,
    seed: int,
    jobs: int = 1,
) -> tuple[BiasVarReport, dict]:
    """Train one model per long-tail replicate and decompose their test errors.

    Returns the report and per-split hardest-negative statistics pooled
    over all replicate models.
    """
    if n_reps < 2:
        raise ValueError("bias/variance needs at least two replicates")
    sets = resample_replicates(pool, profile, n_reps, seed)
    model_seeds = np.random.SeedSequence([seed, 17]).generate_state(n_reps)
    jobs_args = [
        (spec, loss, temp, train_cfg, s, test.features, int(ms)) for s, ms in zip(sets, model_seeds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_replicate_job, jobs_args))
    else:
        results = [_replicate_job(a) for a in jobs_args]
    preds = np.stack([r[0] for r in results])
    splits = shot_split(profile)
    report = decompose(PredictionMatrix(preds, test.labels, test.n_classes), profile.counts, splits)
    probs = np.concatenate([r[1] for r in results])
    _, hn = hardest_negative_scores(probs, np.tile(test.labels, n_reps), splits)
    report.summary["hardest_negative"] = {k: v["mean"] for k, v in hn.items()}
    return report, hn
