"""Expected-loss analysis of a pixel whose true depth is a discrete mixture.

If a network sees many training pixels that look alike but whose true depth
is ``d_i`` with probability ``p_i``, training drives its output to the
minimiser of ``E[L(d)] = sum_i p_i L(d - d_i)``. For piecewise-linear losses
that minimiser sits at one of the ``d_i``, which lets us predict whether an
ALE-trained channel reports the foreground or the background depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .losses import pointwise_loss

#: relative tolerance under which two corner values count as a tie
TIE_RTOL = 1e-12

PIECEWISE_LINEAR = ("ale", "rale", "abs")


@dataclass(frozen=True)
class AmbiguityModel:
    """Discrete depth mixture ``{(d_i, p_i)}`` at one pixel.

    Depths must be strictly increasing, so in the binary case ``depths[0]``
    is the foreground and ``depths[1]`` the background.
    """

    depths: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        d = tuple(float(x) for x in self.depths)
        p = tuple(float(x) for x in self.probs)
        if len(d) == 0 or len(d) != len(p):
            raise ValueError("depths and probs must be non-empty and of equal length")
        if not all(math.isfinite(x) for x in d + p):
            raise ValueError("depths and probs must be finite")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("depths must be strictly increasing")
        if any(x < 0 for x in p):
            raise ValueError("probabilities must be non-negative")
        if abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"probabilities must sum to 1, got {math.fsum(p)!r}")
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "probs", p)

    @classmethod
    def binary(cls, d1: float, d2: float, p1: float) -> "AmbiguityModel":
        return cls((d1, d2), (p1, 1.0 - p1))

    @property
    def is_binary(self) -> bool:
        return len(self.depths) == 2

    @property
    def mean(self) -> float:
        return math.fsum(p * d for p, d in zip(self.probs, self.depths))

    def reflected(self) -> "AmbiguityModel":
        """Mixture of ``-d_i``: foreground and background swap roles."""
        return AmbiguityModel(tuple(-d for d in reversed(self.depths)), tuple(reversed(self.probs)))

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(np.asarray(self.depths), size=size, p=np.asarray(self.probs))


class Minimizer(NamedTuple):
    d_star: float
    is_tie: bool


class FusionMinimizer(NamedTuple):
    sigma_star: float
    is_tie: bool


def expected_loss(model: AmbiguityModel, loss: str, gamma: float, d):
    """``sum_i p_i * L(d - d_i)``, vectorised over ``d``."""
    d = np.asarray(d, dtype=np.float64)
    total = np.zeros_like(d)
    for di, pi in zip(model.depths, model.probs):
        total = total + pi * pointwise_loss(loss, d - di, gamma).value
    return total.item() if total.ndim == 0 else total


def _is_tie(a: float, b: float) -> bool:
    return abs(a - b) <= TIE_RTOL * max(abs(a), abs(b), np.finfo(float).tiny)


def minimizer(model: AmbiguityModel, loss: str, gamma: float = 1.0) -> Minimizer:
    """Depth that minimises the expected loss.

    For ALE, RALE and absolute error the expected loss is piecewise linear
    with corners at the mixture depths, so only those are evaluated. Squared
    error is minimised by the mixture mean. When the two best corners agree to
    1e-12 relative, ``is_tie`` is set and the nearer (smaller) depth returned.
    """
    loss = loss.lower()
    if loss == "sq":
        return Minimizer(model.mean, False)
    if loss not in PIECEWISE_LINEAR:
        raise ValueError(f"unsupported loss {loss!r}")
    values = np.asarray(expected_loss(model, loss, gamma, np.asarray(model.depths)), dtype=float)
    order = np.argsort(values, kind="stable")
    best = int(order[0])
    tie = len(values) > 1 and _is_tie(values[order[0]], values[order[1]])
    if tie:
        best = int(min(order[0], order[1]))
    return Minimizer(model.depths[best], bool(tie))


def gamma_threshold(p1: float, p2: float, loss: str = "ale") -> float:
    """Smallest gamma for which the expected-ALE minimiser is the foreground.

    The ALE picks ``d1`` iff ``gamma > sqrt(p2/p1)``. For RALE the ratio is
    inverted: it picks the background ``d2`` iff ``gamma > sqrt(p1/p2)``.
    """
    loss = loss.lower()
    if loss == "rale":
        p1, p2 = p2, p1
    elif loss != "ale":
        raise ValueError("threshold is defined for 'ale' and 'rale'")
    if not p1 > 0:
        raise ValueError("the selected-surface probability must be positive")
    if p2 < 0:
        raise ValueError("probabilities must be non-negative")
    return math.sqrt(p2 / p1)


def fusion_expected_loss(sigma, d1_hat: float, d2_hat: float, p: float,
                         d1: float | None = None, d2: float | None = None):
    """Expected fusion error over sigma when the truth is ``d1`` w.p. ``p``, else ``d2``.

    The true depths default to the surface estimates themselves.
    """
    d1 = d1_hat if d1 is None else d1
    d2 = d2_hat if d2 is None else d2
    sigma = np.asarray(sigma, dtype=np.float64)
    fused = sigma * d1_hat + (1.0 - sigma) * d2_hat
    return p * np.abs(fused - d1) + (1.0 - p) * np.abs(fused - d2)


def fusion_minimizer(p: float) -> FusionMinimizer:
    """Optimal blend weight: 1 (foreground) if ``p > 0.5``, 0 if ``p < 0.5``.

    At ``p == 0.5`` every sigma is optimal; 1 is returned with the tie flag.
    """
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if p == 0.5:
        return FusionMinimizer(1.0, True)
    return FusionMinimizer(1.0 if p > 0.5 else 0.0, False)


def predict_binary(model: AmbiguityModel, gamma: float):
    """Predicted converged ``(c1, c2, sigma)`` for a binary ambiguity."""
    if not model.is_binary:
        raise ValueError("binary model required")
    fg = minimizer(model, "ale", gamma)
    bg = minimizer(model, "rale", gamma)
    sig = fusion_minimizer(model.probs[0])
    return fg, bg, sig


def brute_force_minimizer(model: AmbiguityModel, loss: str, gamma: float,
                          step: float = 1e-3, margin: float = 5.0) -> float:
    """Grid search of the expected loss over ``[d_min - margin, d_max + margin]``."""
    lo = model.depths[0] - margin
    hi = model.depths[-1] + margin
    grid = lo + step * np.arange(int(math.floor((hi - lo) / step)) + 1)
    return float(grid[int(np.argmin(expected_loss(model, loss, gamma, grid)))])


def sweep(p1_values: Sequence[float], gammas: Sequence[float], d1: float = 10.0, d2: float = 20.0):
    """Tabulate thresholds and predictions over a (p1, gamma) grid."""
    rows = []
    for p1 in p1_values:
        model = AmbiguityModel.binary(d1, d2, p1)
        for g in gammas:
            fg, bg, sig = predict_binary(model, g)
            rows.append({
                "p1": float(p1),
                "gamma": float(g),
                "threshold": gamma_threshold(p1, 1.0 - p1) if p1 > 0 else math.inf,
                "predicted": fg.d_star,
                "predicted_c2": bg.d_star,
                "predicted_sigma": sig.sigma_star,
                "tie": fg.is_tie or bg.is_tie or sig.is_tie,
            })
    return rows
