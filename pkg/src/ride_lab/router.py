"""Per-stage routers that decide whether to deploy the next expert."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .experts import ExpertOutput, RideModel
from .netcore import OptimState, sgd_momentum_step

_EPS = 1e-12


def sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


@dataclass
class RouterParams:
    """Shared projection ``w1`` (feature_dim x h) and one head per stage.

    ``heads[k-1]`` is the stage-k decision vector over
    ``[relu(W1 f/|f|) ; top-s mean logits]``; ``head_bias[k-1]`` its bias.
    """

    w1: np.ndarray
    b1: np.ndarray
    heads: np.ndarray  # (n-1, h + top_s)
    head_bias: np.ndarray  # (n-1,)
    top_s: int
    omega_on: float = 100.0
    threshold: float = 0.5

    @property
    def n_stages(self) -> int:
        return self.heads.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.heads, self.head_bias]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def macs_per_stage(self) -> int:
        # W1 is evaluated once per instance, but we charge it to every stage
        # for a conservative cost estimate.
        return self.w1.size + self.heads.shape[1]

    def to_json(self) -> dict:
        return {
            "format_version": 1,
            "kind": "ride_router",
            "top_s": self.top_s,
            "omega_on": self.omega_on,
            "threshold": self.threshold,
            "tensors": {k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]}
                        for k, v in zip(("w1", "b1", "heads", "head_bias"), self.params())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RouterParams":
        t = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["tensors"].items()}
        return cls(t["w1"], t["b1"], t["heads"], t["head_bias"], doc["top_s"], doc["omega_on"], doc["threshold"])


def init_router(feature_dim: int, n_experts: int, n_classes: int, hidden: int = 16, top_s: int = 30,
                omega_on: float = 100.0, seed: int = 0) -> RouterParams:
    top_s = min(top_s, n_classes)
    rng = np.random.default_rng([seed, 99])
    w1 = rng.uniform(-1, 1, (feature_dim, hidden)) / np.sqrt(feature_dim)
    heads = rng.uniform(-1, 1, (max(n_experts - 1, 0), hidden + top_s)) / np.sqrt(hidden + top_s)
    return RouterParams(w1, np.zeros(hidden), heads, np.zeros(max(n_experts - 1, 0)), top_s, omega_on)


def top_components(mean_logits: np.ndarray, s: int) -> np.ndarray:
    """The ``s`` largest entries per row, sorted descending."""
    return -np.sort(-mean_logits, axis=1)[:, :s]


def _router_inputs(params: RouterParams, features: np.ndarray):
    f = np.asarray(features, dtype=np.float64)
    norm = np.sqrt(np.sum(f * f, axis=1, keepdims=True))
    u = f / np.maximum(norm, _EPS)
    pre = u @ params.w1 + params.b1
    return u, pre, np.maximum(pre, 0)


def router_activation(params: RouterParams, features: np.ndarray, mean_prefix_logits: np.ndarray, k: int) -> np.ndarray:
    """Stage-``k`` switch-on probability per instance (``1 <= k <= n-1``)."""
    if not 1 <= k <= params.n_stages:
        raise IndexError(f"stage {k} outside 1..{params.n_stages}")
    _, _, hid = _router_inputs(params, features)
    z = np.concatenate([hid, top_components(np.asarray(mean_prefix_logits, dtype=np.float64), params.top_s)], axis=1)
    return sigmoid(z @ params.heads[k - 1] + params.head_bias[k - 1])


def routing_labels(correct: np.ndarray, k: int) -> np.ndarray:
    """Ideal switch-on targets for stage ``k`` from a correctness table.

    ``correct`` is (batch, n) booleans as built by ``correctness_table``.
    The label is 1 iff column k-1 is wrong and some column >= k is right.
    """
    correct = np.asarray(correct, dtype=bool)
    return (~correct[:, k - 1] & correct[:, k:].any(axis=1)).astype(np.int64)


def correctness_table(out: ExpertOutput, labels: np.ndarray, rule: str = "prefix") -> np.ndarray:
    """Column j: under ``"prefix"``, whether the mean logits of experts 1..j+1
    classify correctly; under ``"expert"``, whether expert j+1 alone does."""
    if rule not in ("prefix", "expert"):
        raise ValueError(f"unknown routing label rule {rule!r}")
    n = len(out.per_expert_logits)
    if rule == "prefix":
        cols = [out.mean_logits_prefix(k).argmax(axis=1) == labels for k in range(1, n + 1)]
    else:
        cols = [z.argmax(axis=1) == labels for z in out.per_expert_logits]
    return np.stack(cols, axis=1)


def routing_loss(r: np.ndarray, y_on: np.ndarray, omega_on: float) -> tuple[np.ndarray, np.ndarray]:
    """Weighted BCE per instance and its derivative w.r.t. ``r``."""
    r = np.clip(r, _EPS, 1 - _EPS)
    y = np.asarray(y_on, dtype=np.float64)
    loss = -omega_on * y * np.log(r) - (1 - y) * np.log(1 - r)
    grad = -omega_on * y / r + (1 - y) / (1 - r)
    return loss, grad


def _stage_losses(params: RouterParams, feats, prefix_tops, targets):
    """Mean routing loss summed over stages, plus parameter gradients."""
    u, pre, hid = _router_inputs(params, feats)
    b = len(feats)
    g_heads = np.zeros_like(params.heads)
    g_hb = np.zeros_like(params.head_bias)
    g_hid = np.zeros_like(hid)
    total = 0.0
    h = params.hidden
    for k in range(params.n_stages):
        z = np.concatenate([hid, prefix_tops[k]], axis=1)
        logit = z @ params.heads[k] + params.head_bias[k]
        y = targets[:, k]
        # stable weighted BCE in logit space
        log_r = -np.logaddexp(0, -logit)
        log_1mr = -np.logaddexp(0, logit)
        total += np.sum(-params.omega_on * y * log_r - (1 - y) * log_1mr) / b
        r = sigmoid(logit)
        dlogit = (-params.omega_on * y * (1 - r) + (1 - y) * r) / b
        g_heads[k] = z.T @ dlogit
        g_hb[k] = dlogit.sum()
        g_hid += np.outer(dlogit, params.heads[k][:h])
    g_pre = g_hid * (pre > 0)
    return total, [u.T @ g_pre, g_pre.sum(axis=0), g_heads, g_hb]


def stage_inputs(model: RideModel, x: np.ndarray, top_s: int):
    out = model.forward(x)
    n = model.n_experts
    tops = [top_components(out.mean_logits_prefix(k).astype(np.float64), top_s) for k in range(1, n)]
    return out, tops


def train_router(
    model: RideModel,
    x: np.ndarray,
    labels: np.ndarray,
    params: RouterParams,
    epochs: int = 30,
    lr: float = 0.01,
    batch_size: int = 128,
    seed: int = 0,
    rule: str = "prefix",
    log=None,
) -> RouterParams:
    """Fit all stage routers jointly on frozen experts; updates ``params`` in place."""
    if model.n_experts < 2 or params.n_stages == 0:
        return params
    out, tops = stage_inputs(model, x, params.top_s)
    correct = correctness_table(out, labels, rule)
    targets = np.stack([routing_labels(correct, k) for k in range(1, model.n_experts)], axis=1).astype(np.float64)
    feats = out.features.astype(np.float64)
    rng = np.random.default_rng([seed, 7])
    state = OptimState(lr=lr, momentum=0.9)
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        running = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = _stage_losses(params, feats[idx], [t[idx] for t in tops], targets[idx])
            sgd_momentum_step(params.params(), grads, state)
            running += loss * len(idx)
        if log is not None:
            log(epoch, running / len(x))
    return params


@dataclass
class RoutingTrace:
    experts_used: np.ndarray
    activations: np.ndarray  # (batch, n-1), NaN where a stage was not reached
    predictions: np.ndarray


def cascade_infer(model: RideModel, params: RouterParams | None, x: np.ndarray, threshold: float | None = None) -> RoutingTrace:
    """Deploy experts in order until a router falls below ``threshold``."""
    thr = (params.threshold if params is not None else 0.5) if threshold is None else threshold
    out = model.forward(x)
    n = model.n_experts
    b = len(x)
    used = np.full(b, n, dtype=np.int64)
    acts = np.full((b, max(n - 1, 0)), np.nan)
    active = np.ones(b, dtype=bool)
    for k in range(1, n):
        r = router_activation(params, out.features, out.mean_logits_prefix(k), k)
        acts[active, k - 1] = r[active]
        stop = active & (r < thr)
        used[stop] = k
        active &= ~stop
    preds = np.empty(b, dtype=np.int64)
    for m in np.unique(used):
        sel = used == m
        preds[sel] = out.mean_logits_prefix(m)[sel].argmax(axis=1)
    return RoutingTrace(used, acts, preds)


@dataclass(frozen=True)
class CostModel:
    macs_shared: int
    macs_per_head: int
    macs_router: int
    baseline_macs: int

    def cost(self, m) -> np.ndarray:
        m = np.asarray(m)
        return self.macs_shared + m * self.macs_per_head + (m - 1) * self.macs_router

    @classmethod
    def for_model(cls, model: RideModel, params: RouterParams | None) -> "CostModel":
        router = params.macs_per_stage() if params is not None else 0
        return cls(model.macs_shared(), model.macs_per_head(), router, model.baseline_macs())


def expected_cost(traces: RoutingTrace | np.ndarray, cost_model: CostModel) -> tuple[float, float]:
    """Mean MACs per instance and its ratio to the single-model baseline."""
    used = traces.experts_used if isinstance(traces, RoutingTrace) else np.asarray(traces)
    if used.size == 0:
        raise ValueError("no traces")
    mean = float(np.mean(cost_model.cost(used)))
    return mean, mean / cost_model.baseline_macs


def usage_histogram(used: np.ndarray, labels: np.ndarray, splits, n_experts: int) -> list[dict]:
    """Rows ``{split, experts_used, fraction}`` per shot split and overall."""
    rows = []
    groups = {"all": np.ones(len(labels), dtype=bool)}
    for name, members in splits.as_dict().items():
        groups[name] = np.isin(labels, sorted(members))
    for name, mask in groups.items():
        total = mask.sum()
        for m in range(1, n_experts + 1):
            frac = float(np.sum(used[mask] == m) / total) if total else 0.0
            rows.append({"split": name, "experts_used": m, "fraction": frac})
    return rows


def save_router(params: RouterParams, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_json(), fh)


def load_router(path: str | os.PathLike) -> RouterParams:
    with open(path) as fh:
        return RouterParams.from_json(json.load(fh))
