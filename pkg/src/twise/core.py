"""Shared image containers: depth maps and twin-surface fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: logit clamp applied before every sigmoid, keeps sigma strictly inside (0, 1)
LOGIT_CLAMP = 30.0

DEFAULT_MAX_DEPTH = 90.0


def sigmoid(x):
    """Logistic function with the argument clamped to +-30."""
    x = np.clip(np.asarray(x, dtype=np.float64), -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.log(p) - np.log1p(-p)
    return np.clip(out, -LOGIT_CLAMP, LOGIT_CLAMP)


@dataclass
class DepthMap:
    """Dense H x W depth grid in meters; ``0`` marks an invalid pixel.

    Parameters
    ----------
    data : ndarray of shape (H, W)
        Depth values in meters. Non-positive entries are treated as invalid
        and normalised to exactly 0.
    max_depth : float
        Largest depth that still counts as a return. Values beyond it are
        suppressed (set to 0) on construction.
    """

    data: np.ndarray
    max_depth: float = DEFAULT_MAX_DEPTH

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64, copy=True)
        if d.ndim == 1:
            d = d[None, :]
        if d.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {d.shape}")
        if not self.max_depth > 0:
            raise ValueError("max_depth must be positive")
        bad = ~np.isfinite(d) | (d <= 0) | (d > self.max_depth)
        d[bad] = 0.0
        self.data = d

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.data))

    @classmethod
    def empty(cls, height: int, width: int, max_depth: float = DEFAULT_MAX_DEPTH) -> "DepthMap":
        return cls(np.zeros((height, width)), max_depth)


def as_depth_array(x) -> np.ndarray:
    """Return the float array behind a DepthMap or array-like (invalid = 0)."""
    if isinstance(x, DepthMap):
        return x.data
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    return a


@dataclass
class TwinSurfaceField:
    """Per-pixel foreground depth ``c1``, background depth ``c2`` and fusion logit ``c3``."""

    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray = field(default=None)

    def __post_init__(self):
        self.c1 = np.atleast_2d(np.asarray(self.c1, dtype=np.float64))
        self.c2 = np.atleast_2d(np.asarray(self.c2, dtype=np.float64))
        if self.c3 is None:
            self.c3 = np.zeros_like(self.c1)
        self.c3 = np.atleast_2d(np.asarray(self.c3, dtype=np.float64))
        if not (self.c1.shape == self.c2.shape == self.c3.shape):
            raise ValueError("c1, c2, c3 must share one shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.c1.shape

    @property
    def sigma(self) -> np.ndarray:
        return sigmoid(self.c3)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.c1).all() and np.isfinite(self.c2).all() and np.isfinite(self.c3).all())

    def copy(self) -> "TwinSurfaceField":
        return TwinSurfaceField(self.c1.copy(), self.c2.copy(), self.c3.copy())

    @classmethod
    def constant(cls, shape, c1: float, c2: float, c3: float = 0.0) -> "TwinSurfaceField":
        return cls(np.full(shape, float(c1)), np.full(shape, float(c2)), np.full(shape, float(c3)))

    @classmethod
    def zeros_like(cls, other: "TwinSurfaceField") -> "TwinSurfaceField":
        return cls(np.zeros(other.shape), np.zeros(other.shape), np.zeros(other.shape))
