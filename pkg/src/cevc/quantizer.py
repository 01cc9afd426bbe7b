"""Integer symbols for inference, additive noise for training."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_L = 255


@dataclass
class LatentCode:
    """Integer grid of symbols in [-L, L] for one frame (or a batch)."""

    symbols: np.ndarray
    origin: int = 0
    clamped: int = 0
    L: int = DEFAULT_L

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int32)
        if self.symbols.size and np.abs(self.symbols).max() > self.L:
            raise ValueError(f"symbols exceed alphabet bound {self.L}")

    @property
    def shape(self):
        return self.symbols.shape

    def __eq__(self, other):
        return isinstance(other, LatentCode) and np.array_equal(self.symbols, other.symbols)

    @classmethod
    def zeros(cls, shape, L=DEFAULT_L):
        return cls(np.zeros(shape, dtype=np.int32), L=L)


# z codes have the same structure
HyperCode = LatentCode


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(y, L=DEFAULT_L, origin=0):
    """Round half away from zero, then clamp to [-L, L]; clamps are counted."""
    data = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    r = round_half_away(data)
    clamped = int(np.count_nonzero(np.abs(r) > L))
    return LatentCode(np.clip(r, -L, L).astype(np.int32), origin=origin, clamped=clamped, L=L)


def noise_quantize(y, rng):
    """y + U(-0.5, 0.5); the noise is a constant on the tape."""
    y = T.as_tensor(y)
    u = rng.uniform(-0.5, 0.5, size=y.shape)
    return y + Tensor(u)


def dequantize(code):
    """Exact cast of a code to a float64 tensor."""
    return Tensor(code.symbols.astype(np.float64))
