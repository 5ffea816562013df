"""Seeded counter-based randomness and small dense numerical helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RandomStream:
    """Immutable snapshot of a counter-based random stream.

    Draws are a pure function of ``(seed, stream_id, counter)``: the pair
    ``(seed, stream_id)`` is the Philox key and ``counter`` selects a block
    of the Philox counter space that no other counter value touches.
    Drawing never mutates the snapshot; it returns the advanced one.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        c = self.counter & ((1 << 128) - 1)
        # low words are consumed by the draw itself; the call counter lives above them
        ctr = np.array([0, 0, c & _MASK64, c >> 64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def advance(self, n: int = 1) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id, self.counter + n)

    def substream(self, tag: int) -> "RandomStream":
        """Independent stream for a purpose tag, keyed off this one."""
        mixed = np.random.SeedSequence([self.seed & _MASK64, self.stream_id & _MASK64, tag]).generate_state(
            2, dtype=np.uint64
        )
        return RandomStream(int(mixed[0]), int(mixed[1]), 0)

    def gaussian(self, dim: int, std: float = 1.0) -> tuple[np.ndarray, "RandomStream"]:
        return gaussian_vec(self, dim, std)

    def integers(self, high: int, size: int) -> tuple[np.ndarray, "RandomStream"]:
        """``size`` uniform integers in ``[0, high)``; advances the counter by ``size``."""
        vals = self._generator().integers(0, high, size=size)
        return vals, self.advance(size)

    def uniform(self, low: float, high: float, size: int) -> tuple[np.ndarray, "RandomStream"]:
        vals = self._generator().uniform(low, high, size=size)
        return vals, self.advance(size)


def gaussian_vec(stream: RandomStream, dim: int, std: float) -> tuple[np.ndarray, RandomStream]:
    """I.i.d. ``N(0, std**2)`` entries; returns the vector and the stream advanced by ``dim``."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    nxt = stream.advance(dim)
    if std == 0:
        return np.zeros(dim), nxt
    return std * stream._generator().standard_normal(dim), nxt


def default_step(point: np.ndarray) -> float:
    return 1e-5 * (1.0 + float(np.max(np.abs(point), initial=0.0)))


def finite_diff_grad(
    fn: Callable[[np.ndarray], float], point: np.ndarray, h: float | None = None
) -> np.ndarray:
    """Central-difference gradient of a scalar field."""
    point = np.asarray(point, dtype=float)
    if h is None:
        h = default_step(point)
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    grad = np.empty(point.size)
    x = point.copy()
    for i in range(point.size):
        x[i] = point[i] + h
        fp = fn(x)
        x[i] = point[i] - h
        fm = fn(x)
        x[i] = point[i]
        grad[i] = (fp - fm) / (2 * h)
    return grad


def check_finite(name: str, v: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return v
