"""Dense float64 tensors and seeded, isolated random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here validate shapes and finiteness at the boundaries the rest of the
package relies on.
"""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

__all__ = [
    "Stream",
    "RngStream",
    "as_tensor",
    "check_finite",
    "elementwise",
    "matmul",
    "reduce",
    "draw",
]


class Stream(enum.IntEnum):
    """Stream tags. Each consumer of randomness owns exactly one."""

    INIT = 0
    GATES = 1
    SHUFFLE = 2
    AUGMENT = 3
    DATA = 4


def as_tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    t = np.asarray(values, dtype=np.float64)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul`` or ``max0`` pointwise.

    ``b`` must have the same shape as ``a`` or be a scalar; ``max0`` ignores it.
    """
    a = as_tensor(a)
    if op == "max0":
        return np.maximum(a, 0.0)
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = as_tensor(b)
    if b.ndim != 0 and b.shape != a.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _ELEMENTWISE[op](a, b)
    return check_finite(out, op)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def reduce(stat: str, t, axis: int) -> np.ndarray:
    """Mean or biased (divide-by-N) variance along ``axis``."""
    t = as_tensor(t)
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for rank {t.ndim}")
    if stat == "mean":
        return t.mean(axis=axis)
    if stat == "var":
        return t.var(axis=axis)
    raise ValueError(f"unknown statistic {stat!r}")


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator keyed through a
    ``SeedSequence`` spawn key, so distinct stream ids never share state.
    """

    def __init__(self, seed: int, stream_id: int):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniform01(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, sigma: float, shape) -> np.ndarray:
        if not sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        return self.generator.standard_normal(shape) * sigma

    def bernoulli(self, p, shape=None) -> np.ndarray:
        p_arr = np.asarray(p, dtype=np.float64)
        if np.any(~(p_arr >= 0)) or np.any(p_arr > 1):
            raise ValueError(f"probability out of [0, 1]: {p}")
        if shape is None:
            shape = p_arr.shape
        return (self.generator.random(shape) < p_arr).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def get_state(self) -> dict:
        """JSON-serializable snapshot of the generator state."""
        return _jsonable(self.generator.bit_generator.state)

    def set_state(self, state: dict) -> None:
        st = dict(state)
        inner = {k: np.asarray(v, dtype=np.uint64) for k, v in st["state"].items()}
        st["state"] = inner
        st["buffer"] = np.asarray(st["buffer"], dtype=np.uint64)
        self.generator.bit_generator.state = st


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def draw(rng: RngStream, dist: str, shape, param: float | None = None) -> np.ndarray:
    """Draw from ``uniform01``, ``normal`` (``param`` is sigma) or ``bernoulli`` (``param`` is p)."""
    if dist == "uniform01":
        return rng.uniform01(shape)
    if dist == "normal":
        return rng.normal(1.0 if param is None else param, shape)
    if dist == "bernoulli":
        if param is None:
            raise ValueError("bernoulli needs p")
        return rng.bernoulli(param, shape)
    raise ValueError(f"unknown distribution {dist!r}")
