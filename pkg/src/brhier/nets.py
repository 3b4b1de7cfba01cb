"""Minimal differentiable function approximators with manual backprop.

Only the fixed architectures used by the hierarchy are supported: tanh/relu
MLPs (selector and critics), linear softmax heads, and linear Gaussian heads
with a state-independent learnable log-std.  Parameters live in flat
ParamVectors so the optimizers and checkpoints stay trivial.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import VARIANCE_FLOOR, Categorical, DiagonalGaussian, RngStream
from .errors import ContractViolation, NumericFault

DEFAULT_CLIP_NORM = 5.0
INIT_LOG_STD = math.log(0.5)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ContractViolation("all layer widths must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ContractViolation(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class SoftmaxHead:
    n_classes: int


@dataclass(frozen=True)
class GaussianHead:
    action_dim: int


@dataclass(frozen=True)
class LinearPolicySpec:
    input_dim: int
    head: SoftmaxHead | GaussianHead

    def __post_init__(self):
        if self.input_dim < 1:
            raise ContractViolation("input_dim must be >= 1")
        if not isinstance(self.head, (SoftmaxHead, GaussianHead)):
            raise ContractViolation("head must be SoftmaxHead or GaussianHead")


class ParamVector:
    """Flat parameter storage with a named (offset, shape) layout.

    The layout must tile the backing vector exactly: offsets ascend with no
    gaps or overlaps.  `version` increments on every in-place update so
    cached activations can detect staleness.
    """

    __slots__ = ("values", "layout", "version")

    def __init__(self, values: np.ndarray, layout: dict[str, tuple[int, tuple[int, ...]]]):
        v = np.asarray(values, dtype=float).reshape(-1)
        offset = 0
        for name, (off, shape) in layout.items():
            if off != offset:
                raise ContractViolation(f"layout gap or overlap at group {name!r}")
            offset += int(np.prod(shape))
        if offset != v.size:
            raise ContractViolation("layout does not tile the value vector")
        self.values = v
        self.layout = dict(layout)
        self.version = 0

    @classmethod
    def from_groups(cls, groups: list[tuple[str, np.ndarray]]) -> "ParamVector":
        layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        flats = []
        offset = 0
        for name, arr in groups:
            a = np.asarray(arr, dtype=float)
            layout[name] = (offset, a.shape)
            flats.append(a.reshape(-1))
            offset += a.size
        return cls(np.concatenate(flats) if flats else np.empty(0), layout)

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def congruent(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.values.size == other.values.size

    def __len__(self) -> int:
        return self.values.size


def _scaled_uniform(shape: tuple[int, ...], fan_in: int, rng: RngStream) -> np.ndarray:
    scale = 1.0 / math.sqrt(fan_in)
    return rng.gen.uniform(-scale, scale, size=shape)


def init_params(spec: MlpSpec | LinearPolicySpec, rng: RngStream,
                init_log_std: float = INIT_LOG_STD) -> ParamVector:
    """Scaled-uniform weights (scale 1/sqrt(fan_in)), zero biases."""
    groups: list[tuple[str, np.ndarray]] = []
    if isinstance(spec, MlpSpec):
        dims = [spec.input_dim, *spec.hidden, spec.output_dim]
        for i in range(len(dims) - 1):
            groups.append((f"layer{i}/W", _scaled_uniform((dims[i + 1], dims[i]), dims[i], rng)))
            groups.append((f"layer{i}/b", np.zeros(dims[i + 1])))
        return ParamVector.from_groups(groups)
    if isinstance(spec, LinearPolicySpec):
        out = spec.head.n_classes if isinstance(spec.head, SoftmaxHead) else spec.head.action_dim
        groups.append(("W", _scaled_uniform((out, spec.input_dim), spec.input_dim, rng)))
        groups.append(("b", np.zeros(out)))
        if isinstance(spec.head, GaussianHead):
            groups.append(("log_std", np.full(spec.head.action_dim, init_log_std)))
        return ParamVector.from_groups(groups)
    raise ContractViolation(f"cannot initialize {type(spec).__name__}")


@dataclass
class Cache:
    """Activations of one forward pass, consumed by backward exactly once."""
    spec: MlpSpec | LinearPolicySpec
    params: ParamVector
    params_version: int
    single: bool
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_acts: list[np.ndarray] = field(default_factory=list)


def _as_batch(x: np.ndarray, input_dim: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        if a.size != input_dim:
            raise ContractViolation(f"input dimension {a.size}, expected {input_dim}")
        return a[None, :], True
    if a.ndim == 2:
        if a.shape[1] != input_dim:
            raise ContractViolation(f"input dimension {a.shape[1]}, expected {input_dim}")
        return a, False
    raise ContractViolation("input must be a vector or a batch of vectors")


def forward(spec: MlpSpec | LinearPolicySpec, params: ParamVector, x: np.ndarray,
            need_cache: bool = True):
    """Deterministic forward pass.

    Returns (output, cache).  MLP and softmax-linear outputs are raw
    pre-softmax values; Gaussian heads return (mean, log_std).  Accepts a
    single input vector or a batch (rows).  `need_cache=False` skips the
    activation record (cache is None) for sampling-only calls.
    """
    if isinstance(spec, MlpSpec):
        h, single = _as_batch(x, spec.input_dim)
        cache = Cache(spec, params, params.version, single) if need_cache else None
        act = np.tanh if spec.activation == "tanh" else lambda z: np.maximum(z, 0.0)
        n_layers = len(spec.hidden) + 1
        for i in range(n_layers):
            if cache is not None:
                cache.inputs.append(h)
            z = h @ params.view(f"layer{i}/W").T + params.view(f"layer{i}/b")
            if i < n_layers - 1:
                if cache is not None:
                    cache.pre_acts.append(z)
                h = act(z)
            else:
                h = z
        return (h[0] if single else h), cache

    if isinstance(spec, LinearPolicySpec):
        h, single = _as_batch(x, spec.input_dim)
        cache = Cache(spec, params, params.version, single) if need_cache else None
        if cache is not None:
            cache.inputs.append(h)
        out = h @ params.view("W").T + params.view("b")
        if isinstance(spec.head, GaussianHead):
            log_std = params.view("log_std").copy()
            return ((out[0] if single else out), log_std), cache
        return (out[0] if single else out), cache

    raise ContractViolation(f"cannot run forward on {type(spec).__name__}")


def backward(cache: Cache, upstream) -> ParamVector:
    """Exact reverse-mode gradient of the matching forward call.

    `upstream` is d(scalar)/d(output); for Gaussian heads pass the pair
    (d_mean, d_log_std).  Gradients are summed over the batch.
    """
    if cache.params.version != cache.params_version:
        raise ContractViolation("stale cache: parameters changed since forward")
    spec, params = cache.spec, cache.params
    grad = params.zeros_like()

    if isinstance(spec, MlpSpec):
        d = np.asarray(upstream, dtype=float)
        if cache.single:
            d = d[None, :]
        n_layers = len(spec.hidden) + 1
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                z = cache.pre_acts[i]
                if spec.activation == "tanh":
                    d = d * (1.0 - np.tanh(z) ** 2)
                else:
                    d = d * (z > 0.0)
            grad.view(f"layer{i}/W")[:] = d.T @ cache.inputs[i]
            grad.view(f"layer{i}/b")[:] = d.sum(axis=0)
            if i > 0:
                d = d @ params.view(f"layer{i}/W")
        return grad

    if isinstance(spec, LinearPolicySpec):
        if isinstance(spec.head, GaussianHead):
            d_mean, d_log_std = upstream
            d_mean = np.asarray(d_mean, dtype=float)
            d_log_std = np.asarray(d_log_std, dtype=float)
            if cache.single:
                d_mean = d_mean[None, :]
            grad.view("log_std")[:] = (d_log_std if d_log_std.ndim == 1
                                       else d_log_std.sum(axis=0))
        else:
            d_mean = np.asarray(upstream, dtype=float)
            if cache.single:
                d_mean = d_mean[None, :]
        grad.view("W")[:] = d_mean.T @ cache.inputs[0]
        grad.view("b")[:] = d_mean.sum(axis=0)
        return grad

    raise ContractViolation(f"cannot run backward on {type(spec).__name__}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_from_logits(logits: np.ndarray) -> Categorical:
    return Categorical(softmax(logits))


def gaussian_from_head(mean: np.ndarray, log_std: np.ndarray) -> DiagonalGaussian:
    var = np.maximum(np.exp(2.0 * np.asarray(log_std, dtype=float)), VARIANCE_FLOOR)
    return DiagonalGaussian(np.asarray(mean, dtype=float), var)


def categorical_logprob_grad(logits: np.ndarray, index) -> tuple:
    """log π(index) under softmax(logits) and its gradient w.r.t. the logits.

    Vectorizes over a batch of logit rows with a matching index array.
    """
    z = np.asarray(logits, dtype=float)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    idx = np.atleast_1d(np.asarray(index, dtype=int))
    if idx.shape[0] != zb.shape[0]:
        raise ContractViolation("index batch does not match logits batch")
    if np.any(idx < 0) or np.any(idx >= zb.shape[1]):
        raise ContractViolation("class index out of range")
    ls = log_softmax(zb)
    logp = ls[np.arange(zb.shape[0]), idx]
    grad = -softmax(zb)
    grad[np.arange(zb.shape[0]), idx] += 1.0
    if single:
        return float(logp[0]), grad[0]
    return logp, grad


def gaussian_logprob_grad(mean: np.ndarray, log_std: np.ndarray, value) -> tuple:
    """log N(value; mean, exp(2·log_std)) and gradients w.r.t. (mean, log_std).

    The variance floor used by DiagonalGaussian applies; inside the floored
    region the log-std gradient is zero.
    """
    m = np.asarray(mean, dtype=float)
    single = m.ndim == 1
    mb = m[None, :] if single else m
    v = np.asarray(value, dtype=float)
    vb = v[None, :] if single else v
    if vb.shape != mb.shape:
        raise ContractViolation("value shape does not match mean")
    raw_var = np.exp(2.0 * np.asarray(log_std, dtype=float))
    var = np.maximum(raw_var, VARIANCE_FLOOR)
    d = vb - mb
    logp = -0.5 * np.sum(d * d / var + np.log(2.0 * np.pi * var), axis=-1)
    d_mean = d / var
    d_log_std = (d * d / var - 1.0) * (raw_var >= VARIANCE_FLOOR)
    if single:
        return float(logp[0]), d_mean[0], d_log_std[0]
    return logp, d_mean, d_log_std


@dataclass
class OptimizerState:
    """SGD or Adam with optional global-norm gradient clipping."""
    kind: str
    learning_rate: float
    clip_norm: float | None = DEFAULT_CLIP_NORM
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def make_optimizer(params: ParamVector, kind: str = "adam", learning_rate: float = 3e-4,
                   clip_norm: float | None = DEFAULT_CLIP_NORM) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ContractViolation(f"unknown optimizer kind {kind!r}")
    if not learning_rate > 0:
        raise ContractViolation("learning_rate must be positive")
    state = OptimizerState(kind=kind, learning_rate=learning_rate, clip_norm=clip_norm)
    if kind == "adam":
        state.m = np.zeros_like(params.values)
        state.v = np.zeros_like(params.values)
    return state


def optimizer_step(state: OptimizerState, params: ParamVector, grad: ParamVector,
                   direction: str = "descend") -> ParamVector:
    """Apply one update in place; returns the same ParamVector.

    Non-finite gradient entries raise NumericFault naming the offending
    parameter group.
    """
    if direction not in ("ascend", "descend"):
        raise ContractViolation(f"direction must be ascend or descend, got {direction!r}")
    if not params.congruent(grad):
        raise ContractViolation("gradient layout does not match parameters")
    if not np.all(np.isfinite(grad.values)):
        for name in grad.layout:
            if not np.all(np.isfinite(grad.view(name))):
                raise NumericFault(f"non-finite gradient in group {name!r}")
    g = grad.values
    if state.clip_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > state.clip_norm:
            g = g * (state.clip_norm / norm)
    sign = 1.0 if direction == "ascend" else -1.0
    state.step += 1
    if state.kind == "sgd":
        params.values += sign * state.learning_rate * g
    else:
        if state.m is None or state.m.shape != g.shape:
            raise ContractViolation("optimizer moments not congruent with parameters")
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        mhat = state.m / (1.0 - state.beta1 ** state.step)
        vhat = state.v / (1.0 - state.beta2 ** state.step)
        params.values += sign * state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)
    params.version += 1
    return params
