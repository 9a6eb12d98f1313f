"""Deterministic numeric kernel: float64 tensors, seeded streams, and a
finite-difference gradient oracle.

Tensors are plain C-contiguous float64 numpy arrays; ``tensor`` is the
normalizing constructor and every public operation keeps outputs finite.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ShapeError

__all__ = [
    "tensor",
    "assert_finite",
    "RngStream",
    "matmul",
    "softmax_rows",
    "gaussian",
    "finite_diff_grad",
]

DEFAULT_FD_STEP = 1e-4  # central differences at f64: truncation ~ h^2, rounding ~ eps/h


def tensor(data) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def assert_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise EvaluationError(f"{what} contains non-finite entries")
    return x


def _mix64(*parts: int) -> int:
    """Collapse integer parts into one 64-bit key (blake2b, order sensitive)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(int(p).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    """Counter-based deterministic random stream.

    Every draw derives a fresh Philox generator from (seed, counter) and
    advances the counter, so the value sequence depends only on the draw
    order, never on draw sizes. ``split`` creates statistically independent
    child streams; workers must each own their own stream.
    """

    seed: int
    counter: int = 0
    _path: tuple[int, ...] = field(default=(), repr=False)

    def split(self, key: int | str) -> "RngStream":
        """Independent child stream identified by an integer or label."""
        if isinstance(key, str):
            key = _mix64(int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little"))
        return RngStream(seed=self.seed, _path=self._path + (int(key),))

    def _generator(self) -> np.random.Generator:
        key = _mix64(self.seed, *self._path, self.counter)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape) -> np.ndarray:
        return self._generator().standard_normal(size=shape, dtype=np.float64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = tensor(a)
    b = tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    m = tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {m.shape}")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def gaussian(stream: RngStream, shape) -> np.ndarray:
    """I.i.d. standard normal draws; advances the stream counter."""
    return stream.normal(shape)


def finite_diff_grad(f, x: np.ndarray, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a tensor.

    (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate. Exact (up to
    rounding) on polynomials of degree <= 2.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    x = tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"finite_diff_grad: non-finite value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
