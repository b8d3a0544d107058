"""Temporal pooling of encoded frames into one fixed-size vector per song."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class PoolingKind(str, Enum):
    MEAN = "mean"
    MAX_ABS = "max_abs"


@dataclass(frozen=True)
class SongVector:
    """k-dim pooled song representation."""

    values: np.ndarray
    pooling: PoolingKind
    ppk: bool = False
    song_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "pooling", PoolingKind(self.pooling))

    @property
    def k(self) -> int:
        return self.values.shape[0]


def _code_data(codes) -> np.ndarray:
    data = np.atleast_2d(np.asarray(getattr(codes, "data", codes), dtype=np.float64))
    if data.shape[1] < 1:
        raise ValueError("cannot pool an empty code matrix")
    return data


def mean_pool(codes) -> np.ndarray:
    """Column mean; on VQ codes this is the codeword histogram."""
    return _code_data(codes).mean(axis=1)


def max_abs_pool(codes) -> np.ndarray:
    """Signed value of each row's largest-magnitude entry (ties: earliest frame)."""
    data = _code_data(codes)
    idx = np.argmax(np.abs(data), axis=1)  # argmax takes the first maximum
    return data[np.arange(data.shape[0]), idx]


def ppk_transform(v: np.ndarray) -> np.ndarray:
    """Entrywise square root mapping a codeword histogram onto the unit sphere.

    The input must be a non-negative vector summing to 1 within 1e-4; it is
    renormalized before the root so the output norm is exactly 1.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("ppk transform is defined only on non-negative histograms")
    total = v.sum()
    if abs(total - 1.0) > 1e-4:
        raise ValueError(f"histogram sums to {total:.6f}, expected 1 within 1e-4")
    return np.sqrt(v / total)


def pool_song(codes, pooling: PoolingKind, ppk: bool = False,
              song_id: str = "") -> SongVector:
    pooling = PoolingKind(pooling)
    values = mean_pool(codes) if pooling == PoolingKind.MEAN else max_abs_pool(codes)
    if ppk:
        if pooling != PoolingKind.MEAN:
            raise ValueError("ppk applies to mean-pooled codeword histograms only")
        values = ppk_transform(values)
    return SongVector(values=values, pooling=pooling, ppk=ppk,
                      song_id=song_id or getattr(codes, "song_id", ""))
