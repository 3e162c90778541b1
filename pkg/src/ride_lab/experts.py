"""Multi-expert model: shared backbone, width-reduced heads, logit averaging."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .netcore import LayerStack, ShapeError, init_stack

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ExpertOutput:
    features: np.ndarray
    per_expert_logits: list[np.ndarray]

    def mean_logits_prefix(self, k: int) -> np.ndarray:
        """Mean of the first ``k`` experts' logits."""
        return np.mean(self.per_expert_logits[:k], axis=0)


class RideModel:
    """Backbone ``LayerStack`` feeding ``n`` parameter-disjoint head stacks."""

    def __init__(self, backbone: LayerStack, heads: Sequence[LayerStack], meta: dict):
        heads = list(heads)
        if not heads:
            raise ConfigError("need at least one expert")
        for h in heads:
            if h.input_dim != backbone.output_dim:
                raise ShapeError("head input dim differs from backbone output dim")
            if h.output_dim != heads[0].output_dim:
                raise ShapeError("heads disagree on class count")
        self.backbone = backbone
        self.heads = heads
        self.meta = dict(meta)

    @property
    def n_experts(self) -> int:
        return len(self.heads)

    @property
    def n_classes(self) -> int:
        return self.heads[0].output_dim

    @property
    def feature_dim(self) -> int:
        return self.backbone.output_dim

    def params(self) -> list[np.ndarray]:
        out = self.backbone.params()
        for h in self.heads:
            out.extend(h.params())
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, batch: np.ndarray, record: bool = False, n_active: int | None = None) -> ExpertOutput:
        """Run the backbone once and the first ``n_active`` heads on it."""
        m = self.n_experts if n_active is None else n_active
        feats = self.backbone.forward(batch, record=record)
        logits = [h.forward(feats, record=record) for h in self.heads[:m]]
        return ExpertOutput(feats, logits)

    def backward(self, logit_grads: Sequence[np.ndarray | None], feature_grad: np.ndarray | None = None) -> list[np.ndarray]:
        """Backprop per-expert logit gradients; ``None`` entries skip a head.

        Returns gradients in ``params()`` order.
        """
        head_grads = []
        g_feat = None if feature_grad is None else feature_grad.copy()
        for head, g in zip(self.heads, logit_grads):
            if g is None:
                head._tape = None
                head_grads.append([np.zeros_like(p) for p in head.params()])
                continue
            gp, gx = head.backward(g)
            head_grads.append(gp)
            g_feat = gx if g_feat is None else g_feat + gx
        for head in self.heads[len(logit_grads):]:
            head._tape = None
            head_grads.append([np.zeros_like(p) for p in head.params()])
        if g_feat is None:
            self.backbone._tape = None
            bb = [np.zeros_like(p) for p in self.backbone.params()]
        else:
            bb, _ = self.backbone.backward(g_feat)
        return bb + [p for hg in head_grads for p in hg]

    def copy(self) -> "RideModel":
        return RideModel(self.backbone.copy(), [h.copy() for h in self.heads], self.meta)

    def astype(self, dtype) -> "RideModel":
        return RideModel(self.backbone.astype(dtype), [h.astype(dtype) for h in self.heads], self.meta)

    def macs_shared(self) -> int:
        return self.backbone.macs()

    def macs_per_head(self) -> int:
        return self.heads[0].macs()

    def baseline_macs(self) -> int:
        """MACs of the equivalent single model at full head width."""
        ref = reference_dims(self.meta)
        return sum(a * b for a, b in zip(ref, ref[1:]))


def split_point(hidden_dims: Sequence[int], split: int | None) -> int:
    return math.ceil(len(hidden_dims) / 2) if split is None else split


def reference_dims(meta: dict) -> list[int]:
    return [meta["d_in"], *meta["hidden_dims"], meta["n_classes"]]


def head_dims(hidden_dims: Sequence[int], split: int, width_factor: float, c: int) -> list[int]:
    shared_out = hidden_dims[split - 1] if split > 0 else None
    reduced = [int(round(width_factor * w)) for w in hidden_dims[split:]]
    if any(w < 1 for w in reduced):
        raise ConfigError(f"width_factor={width_factor} reduces a head layer to zero units")
    return [shared_out, *reduced, c]


def build_model(
    d_in: int,
    hidden_dims: Sequence[int],
    n_experts: int,
    width_factor: float,
    c: int,
    seed: int,
    split: int | None = None,
    cosine_scale: float | None = None,
    dtype=np.float32,
) -> RideModel:
    """Share the first ``split`` hidden layers; each head gets the rest at reduced width.

    ``split`` defaults to ``ceil(len(hidden_dims)/2)``. Each expert is
    initialized from its own seed offset so heads start distinct.
    """
    if n_experts < 1:
        raise ConfigError("n_experts must be >= 1")
    if not 0 < width_factor <= 1:
        raise ConfigError("width_factor must lie in (0, 1]")
    hidden_dims = list(hidden_dims)
    if not hidden_dims:
        raise ConfigError("need at least one hidden layer to share")
    split = split_point(hidden_dims, split)
    if not 1 <= split <= len(hidden_dims):
        raise ConfigError(f"split must lie in [1, {len(hidden_dims)}]")
    hd = head_dims(hidden_dims, split, width_factor, c)
    backbone = init_stack(
        [d_in, *hidden_dims[:split]], np.random.default_rng([seed, 0]), relu_last=True, dtype=dtype
    )
    heads = [
        init_stack(hd, np.random.default_rng([seed, 1 + i]), cosine_scale=cosine_scale, dtype=dtype)
        for i in range(n_experts)
    ]
    meta = {
        "d_in": d_in,
        "hidden_dims": hidden_dims,
        "n_experts": n_experts,
        "width_factor": width_factor,
        "n_classes": c,
        "seed": seed,
        "split": split,
        "cosine_scale": cosine_scale,
    }
    return RideModel(backbone, heads, meta)


def expert_logits(model: RideModel, batch: np.ndarray, i: int) -> np.ndarray:
    """Logits of expert ``i`` (1-based)."""
    if not 1 <= i <= model.n_experts:
        raise IndexError(f"expert index {i} outside 1..{model.n_experts}")
    feats = model.backbone.forward(batch)
    return model.heads[i - 1].forward(feats)


def ensemble_probs(model: RideModel, batch: np.ndarray, m: int | None = None) -> np.ndarray:
    """Softmax of the mean logits of the first ``m`` experts."""
    m = model.n_experts if m is None else m
    if not 1 <= m <= model.n_experts:
        raise IndexError(f"m={m} outside 1..{model.n_experts}")
    out = model.forward(batch, n_active=m)
    return softmax(out.mean_logits_prefix(m))


def save_checkpoint(model: RideModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    """JSON container: header, then parameter tensors in ``params()`` order."""
    tensors = [
        {"shape": list(p.shape), "data": [float(v) for v in p.reshape(-1)]} for p in model.params()
    ]
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "ride_model",
        "header": {**model.meta, "dtype": str(model.params()[0].dtype)},
        "extra": extra or {},
        "tensors": tensors,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str | os.PathLike) -> RideModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "ride_model":
        raise ConfigError(f"{path}: not a version-{FORMAT_VERSION} model checkpoint")
    h = doc["header"]
    dtype = np.dtype(h.get("dtype", "float32"))
    model = build_model(
        h["d_in"], h["hidden_dims"], h["n_experts"], h["width_factor"], h["n_classes"],
        h["seed"], h["split"], h.get("cosine_scale"), dtype=dtype,
    )
    params = model.params()
    if len(params) != len(doc["tensors"]):
        raise ConfigError(f"{path}: tensor count mismatch")
    for p, t in zip(params, doc["tensors"]):
        if list(p.shape) != t["shape"]:
            raise ConfigError(f"{path}: tensor shape mismatch {p.shape} vs {t['shape']}")
        p[...] = np.asarray(t["data"], dtype=dtype).reshape(p.shape)
    return model
