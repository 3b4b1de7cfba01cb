"""Finite-distribution and diagonal-Gaussian primitives.

All divergences and entropies are computed in nats internally; bits appear
only in the mutual-information helpers used at reporting boundaries, where
the 1/log(2) conversion is applied exactly once.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DivergenceInfinite

# Floor applied inside logarithms so dead-but-nonzero-support entries do not
# produce -inf.  An infinite divergence is only *signalled* when p assigns
# at least SUPPORT_TOL mass where q is below the floor.
PROB_FLOOR = 1e-12
SUPPORT_TOL = 1e-9
VARIANCE_FLOOR = 1e-6
LN2 = float(np.log(2.0))


def floored_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


class Categorical:
    """Immutable probability mass vector.

    Entries are nonnegative and sum to one (input checked to 1e-9, then
    renormalized exactly).
    """

    __slots__ = ("probs",)

    def __init__(self, probs: Iterable[float]):
        p = np.array(probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ContractViolation("probs must be a nonempty 1-D vector")
        if not np.all(np.isfinite(p)):
            raise ContractViolation("probs must be finite")
        if np.any(p < -1e-12):
            raise ContractViolation("negative probability entry")
        total = float(p.sum())
        if abs(total - 1.0) > 1e-9:
            raise ContractViolation(f"probs sum to {total!r}, not 1")
        p = np.maximum(p, 0.0)
        p /= p.sum()
        p.setflags(write=False)
        self.probs = p

    @classmethod
    def from_weights(cls, weights: Iterable[float]) -> "Categorical":
        w = np.asarray(weights, dtype=float)
        s = float(w.sum())
        if not np.isfinite(s) or s <= 0.0:
            raise ContractViolation("weights must have positive finite sum")
        return cls(w / s)

    @classmethod
    def uniform(cls, n: int) -> "Categorical":
        return cls(np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return int(self.probs.size)

    def log_prob(self, index: int) -> float:
        if not 0 <= index < self.dim:
            raise ContractViolation(f"index {index} out of range for dim {self.dim}")
        return float(np.log(max(self.probs[index], PROB_FLOOR)))

    def sample(self, rng: "RngStream") -> int:
        return int(rng.gen.choice(self.dim, p=self.probs))

    def __repr__(self) -> str:
        return f"Categorical({self.probs.tolist()})"


class DiagonalGaussian:
    """Immutable diagonal Gaussian with variance floored at VARIANCE_FLOOR."""

    __slots__ = ("mean", "variance")

    def __init__(self, mean: Iterable[float], variance: Iterable[float]):
        m = np.array(mean, dtype=float)
        v = np.array(variance, dtype=float)
        if m.ndim != 1 or v.shape != m.shape:
            raise ContractViolation("mean and variance must be 1-D and congruent")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise ContractViolation("mean and variance must be finite")
        if np.any(v < 0.0):
            raise ContractViolation("negative variance entry")
        v = np.maximum(v, VARIANCE_FLOOR)
        m.setflags(write=False)
        v.setflags(write=False)
        self.mean = m
        self.variance = v

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def log_prob(self, value: Iterable[float]) -> float:
        x = np.asarray(value, dtype=float)
        if x.shape != self.mean.shape:
            raise ContractViolation("value dimension mismatch")
        d = x - self.mean
        return float(-0.5 * np.sum(d * d / self.variance + np.log(2.0 * np.pi * self.variance)))

    def sample(self, rng: "RngStream") -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.gen.standard_normal(self.dim)

    def __repr__(self) -> str:
        return f"DiagonalGaussian(mean={self.mean.tolist()}, variance={self.variance.tolist()})"


class RngStream:
    """Deterministic splittable random stream keyed by (seed, stream path).

    Identical (seed, stream) reproduces the identical sample sequence across
    runs; `child` derives statistically independent substreams, one per
    logical task (trajectory, component, ...).  Backed by counter-based
    Philox so substreams never overlap.
    """

    __slots__ = ("seed", "stream", "_gen")

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(i) for i in stream)
        self._gen: np.random.Generator | None = None

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(ids))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def kl_categorical(p: Categorical, q: Categorical) -> float:
    """KL(p || q) in nats; 0*log(0/q) terms contribute zero.

    Signals DivergenceInfinite when p has >= SUPPORT_TOL mass on an entry
    where q is below the probability floor.
    """
    if p.dim != q.dim:
        raise ContractViolation(f"dimension mismatch: {p.dim} vs {q.dim}")
    pp, qq = p.probs, q.probs
    if np.any((pp >= SUPPORT_TOL) & (qq < PROB_FLOOR)):
        raise DivergenceInfinite("p has mass where q has no support")
    mask = pp > 0.0
    val = float(np.sum(pp[mask] * (floored_log(pp[mask]) - floored_log(qq[mask]))))
    return max(val, 0.0)


def kl_gaussian(p: DiagonalGaussian, q: DiagonalGaussian) -> float:
    """Closed-form KL between diagonal Gaussians, in nats."""
    if p.dim != q.dim:
        raise ContractViolation(f"dimension mismatch: {p.dim} vs {q.dim}")
    ratio = p.variance / q.variance
    dm = q.mean - p.mean
    val = 0.5 * float(np.sum(ratio + dm * dm / q.variance - 1.0 - np.log(ratio)))
    return max(val, 0.0)


def entropy(p: Categorical) -> float:
    """Shannon entropy -sum p log p in nats."""
    pp = p.probs
    mask = pp > 0.0
    return max(float(-np.sum(pp[mask] * floored_log(pp[mask]))), 0.0)


def mutual_information_tabular(joint: np.ndarray) -> float:
    """Mutual information of a joint mass table, in bits.

    Equals E_{p(s)}[KL(p(x|s) || p(x))] / log 2 for the induced conditionals.
    """
    j = np.asarray(joint, dtype=float)
    if j.ndim != 2:
        raise ContractViolation("joint must be a 2-D table")
    if np.any(j < -1e-12) or not np.all(np.isfinite(j)):
        raise ContractViolation("joint entries must be nonnegative and finite")
    total = float(j.sum())
    if abs(total - 1.0) > 1e-9:
        raise ContractViolation(f"joint mass is {total!r}, not 1")
    j = np.maximum(j, 0.0)
    ps = j.sum(axis=1, keepdims=True)
    px = j.sum(axis=0, keepdims=True)
    mask = j > 0.0
    outer = ps * px
    val = float(np.sum(j[mask] * (floored_log(j[mask]) - floored_log(outer[mask]))))
    return max(val, 0.0) / LN2


def mi_estimate_from_samples(posteriors: Sequence, marginal: Categorical) -> float:
    """Monte-Carlo mutual-information estimate in bits.

    Averages KL(posterior || marginal) over the sampled posteriors.  Accepts
    either bare Categorical values or (state, Categorical) pairs.
    """
    items = list(posteriors)
    if not items:
        raise ContractViolation("empty sample list")
    total = 0.0
    for item in items:
        post = item[1] if isinstance(item, tuple) else item
        total += kl_categorical(post, marginal)
    return total / len(items) / LN2
