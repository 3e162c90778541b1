"""Dense-network substrate: layers, manual backprop, SGD with momentum.

Arrays are plain ``numpy.ndarray`` objects; there is no wrapper type.
Training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """Raised on non-finite values; ``batch_index`` is set by training loops."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass
class Layer:
    """Affine map, optionally ReLU-activated.

    With ``cosine_scale`` set the layer has no bias and computes
    ``scale * normalize(x) @ normalize_columns(W)`` (a cosine classifier).
    """

    weight: np.ndarray
    bias: np.ndarray | None
    relu: bool = False
    cosine_scale: float | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def macs(self) -> int:
        return self.in_dim * self.out_dim


_NORM_EPS = 1e-12


class LayerStack:
    """Ordered layers with a recorded tape for one backward pass."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ShapeError("a LayerStack needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = list(layers)
        self._tape: list[tuple] | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def macs(self) -> int:
        return sum(layer.macs() for layer in self.layers)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, batch: np.ndarray, record: bool = False) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeError(f"expected (batch, {self.input_dim}), got {batch.shape}")
        tape = []
        h = batch
        for layer in self.layers:
            if layer.cosine_scale is None:
                z = h @ layer.weight
                if layer.bias is not None:
                    z = z + layer.bias
                tape.append((h, None, None))
            else:
                xnorm = np.maximum(np.sqrt(np.sum(h * h, axis=1, keepdims=True)), _NORM_EPS)
                wnorm = np.maximum(np.sqrt(np.sum(layer.weight * layer.weight, axis=0, keepdims=True)), _NORM_EPS)
                u = h / xnorm
                v = layer.weight / wnorm
                z = layer.cosine_scale * (u @ v)
                tape.append((u, xnorm, (v, wnorm)))
            if layer.relu:
                z = np.maximum(z, 0)
            tape[-1] = tape[-1] + (z,)
            h = z
        if record:
            self._tape = tape
        return h

    def backward(self, loss_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return (parameter gradients in ``params()`` order, input gradient).

        Consumes the tape left by the last ``forward(..., record=True)``.
        """
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass")
        tape, self._tape = self._tape, None
        g = np.asarray(loss_grad)
        grads: list[list[np.ndarray]] = []
        for layer, (inp, xnorm, wstuff, out) in zip(reversed(self.layers), reversed(tape)):
            if g.shape != out.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match output {out.shape}")
            if layer.relu:
                g = g * (out > 0)
            if layer.cosine_scale is None:
                gw = inp.T @ g
                layer_grads = [gw]
                if layer.bias is not None:
                    layer_grads.append(g.sum(axis=0))
                g = g @ layer.weight.T
            else:
                v, wnorm = wstuff
                s = layer.cosine_scale
                gv = s * (inp.T @ g)
                gu = s * (g @ v.T)
                # below the norm floor the map is linear, so no projection
                wproj = np.where(wnorm > _NORM_EPS, np.sum(v * gv, axis=0, keepdims=True), 0)
                layer_grads = [(gv - v * wproj) / wnorm]
                xproj = np.where(xnorm > _NORM_EPS, np.sum(inp * gu, axis=1, keepdims=True), 0)
                g = (gu - inp * xproj) / xnorm
            grads.append(layer_grads)
        flat = [p for layer_grads in reversed(grads) for p in layer_grads]
        return flat, g

    def copy(self) -> "LayerStack":
        return LayerStack(
            [
                Layer(
                    l.weight.copy(),
                    None if l.bias is None else l.bias.copy(),
                    l.relu,
                    l.cosine_scale,
                )
                for l in self.layers
            ]
        )

    def astype(self, dtype) -> "LayerStack":
        out = self.copy()
        for layer in out.layers:
            layer.weight = layer.weight.astype(dtype)
            if layer.bias is not None:
                layer.bias = layer.bias.astype(dtype)
        return out


def init_stack(
    dims: Sequence[int],
    rng: np.random.Generator,
    relu_last: bool = False,
    cosine_scale: float | None = None,
    dtype=np.float32,
) -> LayerStack:
    """Fan-in scaled uniform init (bound ``1/sqrt(fan_in)``), zero biases.

    ReLU follows every layer except the last unless ``relu_last``.
    ``cosine_scale`` turns the last layer into a cosine classifier.
    """
    if any(d <= 0 for d in dims):
        raise ShapeError(f"all layer widths must be positive, got {list(dims)}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        cos = cosine_scale if last else None
        b = None if cos is not None else np.zeros(fan_out, dtype=dtype)
        layers.append(Layer(w, b, relu=(relu_last or not last), cosine_scale=cos))
    return LayerStack(layers)


def forward(stack: LayerStack, batch: np.ndarray) -> np.ndarray:
    return stack.forward(batch)


def backward(stack: LayerStack, loss_grad: np.ndarray) -> list[np.ndarray]:
    return stack.backward(loss_grad)[0]


def grad_check(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    step: float = 1e-5,
    eps: float = 1e-6,
) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``f`` is re-evaluated after each in-place perturbation of ``params``,
    so it must read the arrays it is given (not copies).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    worst = 0.0
    for p, a in zip(params, analytic):
        if p.shape != a.shape:
            raise ShapeError(f"gradient shape {a.shape} != parameter shape {p.shape}")
        flat = p.reshape(-1)
        aflat = np.asarray(a).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = f()
            flat[idx] = orig - step
            fm = f()
            flat[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("non-finite objective during grad_check")
            num = (fp - fm) / (2 * step)
            err = abs(aflat[idx] - num) / (abs(aflat[idx]) + eps)
            worst = max(worst, err)
    return worst


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState) -> None:
    """Heavy-ball update in place: ``v = mu*v + g``; ``p -= lr*v``.

    Weight decay is folded into ``g`` as ``g + wd*p``.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or v.shape != p.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        if state.weight_decay:
            g = g + state.weight_decay * p
        v *= state.momentum
        v += g
        p -= (state.lr * v).astype(p.dtype)


@dataclass(frozen=True)
class StepSchedule:
    base_lr: float
    milestones: tuple[tuple[int, float], ...] = ()

    def lr_at_epoch(self, epoch: int) -> float:
        return lr_at_epoch(self, epoch)


def lr_at_epoch(schedule: StepSchedule, epoch: int) -> float:
    lr = schedule.base_lr
    for milestone, factor in schedule.milestones:
        if epoch >= milestone:
            lr *= factor
    return lr
