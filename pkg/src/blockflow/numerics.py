"""Deterministic dense-matrix kernels and a counter-addressable RNG.

Everything downstream (attention, flow matching, streaming) is built on the
handful of primitives here. Two properties are load-bearing and worth the
unusual implementation choices:

* Reductions run in a fixed left-to-right order. `matmul` accumulates over
  the inner dimension in ascending index order, one multiply and one add per
  term, so a result element is bitwise identical to a naive triple loop.
  BLAS does not guarantee this (blocking/FMA reorder the sum), which is why
  `a @ b` is deliberately not used. Fixed order makes "an excluded attention
  column contributes exactly zero" a bitwise statement, which in turn makes
  sliding-window generation bitwise comparable to full-sequence generation.

* Randomness is counter-based: draw `i` of stream `s` under seed `k` is a
  pure function of (k, s, i), realized as Philox keyed by (seed, stream) and
  an inverse-CDF transform. Per-frame noise streams can then be regenerated
  at any position without materializing prefixes.

All public kernels are float32 in / float32 out; they also accept float64,
which the gradient checker uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.random import Philox
from scipy.special import ndtri

from .errors import ConfigurationError, InvariantViolation

DTYPE = np.float32

# Additive-mask sentinel: most negative finite float32. A score at this value
# underflows to exactly 0.0 after max-subtracted exp.
MASK_FILL = float(np.finfo(np.float32).min)

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


# ----------------------------- jitted kernels ---------------------------------


@njit(cache=True)
def _matmul_kernel(a, b, out):  # pragma: no cover - exercised via matmul()
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for kk in range(k):
            aik = a[i, kk]
            for j in range(n):
                out[i, j] = out[i, j] + aik * b[kk, j]


@njit(cache=True)
def _row_sum_kernel(x, out):  # pragma: no cover - exercised via ordered_row_sum()
    m, n = x.shape
    for i in range(m):
        acc = out[i]  # +0.0 in the input dtype
        for j in range(n):
            acc = acc + x[i, j]
        out[i] = acc


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with left-to-right accumulation over the inner dim.

    Bitwise-equal to `out[i,j] = sum_k a[i,k]*b[k,j]` evaluated as a naive
    ascending-k loop in the input dtype.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    _matmul_kernel(a, b, out)
    return out


def ordered_row_sum(x: np.ndarray) -> np.ndarray:
    """Per-row sum accumulated strictly left to right.

    Exact-zero entries are no-ops under sequential accumulation, so the sum
    of a row is unchanged by interleaving masked (zeroed) columns. np.sum's
    pairwise tree does not have this property.
    """
    x = np.ascontiguousarray(x)
    out = np.zeros(x.shape[0], dtype=x.dtype)
    _row_sum_kernel(x, out)
    return out


def masked_softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax with excluded positions forced to exactly 0.0.

    Exclusion is additive: disallowed scores are replaced by MASK_FILL before
    the max-subtracted exp, then their outputs are pinned to 0.0 so masked
    columns contribute bitwise nothing downstream.
    """
    if scores.shape != mask.shape:
        raise ConfigurationError(f"scores {scores.shape} and mask {mask.shape} shapes differ")
    if mask.dtype != np.bool_:
        mask = mask.astype(np.bool_)
    row_ok = mask.any(axis=1)
    if not row_ok.all():
        bad = int(np.flatnonzero(~row_ok)[0])
        raise InvariantViolation(f"fully-masked row {bad} in attention mask")
    fill = scores.dtype.type(np.finfo(scores.dtype).min)
    s = np.where(mask, scores, fill)
    m = np.max(s, axis=1, keepdims=True)
    e = np.exp(s - m)
    e[~mask] = 0.0
    denom = ordered_row_sum(e)
    return e / denom[:, None]


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-row normalization to mean 0, variance 1 (no learned affine)."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ConfigurationError(f"layer_norm expects a 2-D matrix with >=1 column, got {x.shape}")
    mu = np.mean(x, axis=1, keepdims=True)
    d = x - mu
    var = np.mean(d * d, axis=1, keepdims=True)
    return d / np.sqrt(var + x.dtype.type(eps))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    inner = _GELU_C * (x + _GELU_A * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d gelu / dx for the tanh approximation."""
    inner = _GELU_C * (x + _GELU_A * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * (x * x))


# --------------------------------- RNG -----------------------------------------


@dataclass(frozen=True)
class SeededRng:
    """Addressable randomness root: (seed, stream_id) names an i.i.d. stream."""

    seed: int
    stream_id: int = 0

    def stream(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.seed, stream_id)


def _philox(rng: SeededRng) -> Philox:
    key = np.array([rng.seed & _MASK64, rng.stream_id & _MASK64], dtype=_U64)
    return Philox(key=key)


def _raw_to_unit(raw: np.ndarray) -> np.ndarray:
    # 53-bit uniform strictly inside (0, 1); safe for ndtri.
    return ((raw >> _U64(11)).astype(np.float64) + 0.5) * 2.0**-53


def seeded_uniform(rng: SeededRng, count: int) -> np.ndarray:
    """`count` uniforms in (0,1), float64; draw i is a function of (seed, stream, i)."""
    if count < 0:
        raise ConfigurationError("count must be >= 0")
    if count == 0:
        return np.empty(0, dtype=np.float64)
    return _raw_to_unit(_philox(rng).random_raw(count))


def seeded_gaussian(rng: SeededRng, count: int) -> np.ndarray:
    """`count` standard-normal draws, float32, via inverse CDF of Philox uniforms."""
    return ndtri(seeded_uniform(rng, count)).astype(DTYPE) if count else np.empty(0, dtype=DTYPE)


class RngStream:
    """Stateful sequential view over one (seed, stream) Philox stream.

    Successive calls continue the stream; the whole sequence is still a pure
    function of the root SeededRng.
    """

    def __init__(self, rng: SeededRng):
        self._bg = _philox(rng)

    def uniforms(self, count: int) -> np.ndarray:
        if count == 0:
            return np.empty(0, dtype=np.float64)
        return _raw_to_unit(self._bg.random_raw(count))

    def gaussians(self, count: int) -> np.ndarray:
        if count == 0:
            return np.empty(0, dtype=DTYPE)
        return ndtri(self.uniforms(count)).astype(DTYPE)

    def integers(self, count: int, upper: int) -> np.ndarray:
        """`count` ints uniform on [0, upper)."""
        return np.minimum((self.uniforms(count) * upper).astype(np.int64), upper - 1)


def warmup_kernels() -> None:
    """Force numba compilation of the jitted kernels (both dtypes).

    Benchmarks call this before timing so the first measured chunk does not
    absorb JIT cost.
    """
    for dt in (np.float32, np.float64):
        a = np.ones((2, 3), dtype=dt)
        b = np.ones((3, 2), dtype=dt)
        matmul(a, b)
        ordered_row_sum(a)
