"""Dense float64 arrays, seeded randomness and 1-D empirical histograms.

Tensors are plain ``numpy.ndarray`` objects of rank 1 or 2.  The helpers in
this module accept complex arrays as well: the bilevel attack differentiates
through a TTA step with the complex-step trick, so every elementary op used
on the forward/backward path must stay analytic (max-subtraction uses the
real part only, masks are taken on the real part).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError

DTYPE = np.float64


def as_tensor(values, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected rank-{ndim} tensor, got shape {arr.shape}")
    if arr.ndim not in (1, 2):
        raise DimensionError(f"only rank-1/2 tensors are supported, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def _row_max(z: np.ndarray) -> np.ndarray:
    return np.max(z.real, axis=-1, keepdims=True)


def logsumexp(z: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp, shape ``(n, 1)``."""
    m = _row_max(z)
    return m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - _row_max(z))
    return e / np.sum(e, axis=-1, keepdims=True)


def entropy(z: np.ndarray) -> np.ndarray:
    """Per-row entropy of ``softmax(z)``."""
    logp = log_softmax(z)
    return -np.sum(np.exp(logp) * logp, axis=-1)


def cross_entropy(z: np.ndarray, labels) -> np.ndarray:
    """Per-row cross-entropy of logits against integer labels."""
    labels = np.asarray(labels, dtype=int)
    logp = log_softmax(z)
    return -logp[np.arange(len(labels)), labels]


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), k), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def argmax_rows(z: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(np.real(z), axis=-1)


class Rng:
    """Seeded random stream (PCG64, platform independent)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def derive(cls, master_seed: int, *keys: int) -> "Rng":
        """Child stream keyed by ``(master_seed, *keys)``; order of creation is irrelevant."""
        ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
        return cls(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)


@dataclass(frozen=True)
class Histogram:
    """Empirical 1-D distribution with uniform weight on each sample."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=DTYPE).ravel())
        if s.size == 0:
            raise DomainError("histogram needs at least one sample")
        object.__setattr__(self, "samples", s)

    @classmethod
    def of(cls, values: Sequence[float]) -> "Histogram":
        return cls(np.asarray(values, dtype=DTYPE))

    @property
    def span(self) -> float:
        return float(self.samples[-1] - self.samples[0])


def wasserstein1(a: Histogram, b: Histogram) -> float:
    """1-Wasserstein distance between two empirical distributions."""
    u, v = a.samples, b.samples
    if u.size == v.size:
        return float(np.mean(np.abs(u - v)))
    # integrate |F_u - F_v| over the merged support
    grid = np.concatenate([u, v])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    cdf_u = np.searchsorted(u, grid[:-1], side="right") / u.size
    cdf_v = np.searchsorted(v, grid[:-1], side="right") / v.size
    return float(np.sum(np.abs(cdf_u - cdf_v) * widths))


def wasserstein1_normalized(benign: Histogram, other: Histogram) -> float:
    """``wasserstein1`` scaled by the benign histogram's max-min range."""
    dist = wasserstein1(benign, other)
    span = benign.span
    if span > 0:
        return dist / span
    if dist == 0:
        return 0.0
    raise DomainError("benign reference histogram has zero range")
