"""Elementwise loss kernels with hand-derived subgradients.

The asymmetric linear error (ALE) penalises over-estimates with slope
``gamma`` and under-estimates with slope ``1/gamma``; minimising it drives an
estimate towards the nearest plausible surface (foreground). Its reflection
(RALE) does the opposite and tracks the background. A third channel blends the
two surfaces through a sigmoid weight and is trained with an absolute error on
the blended depth.

All kernels accept scalars or arrays and broadcast like numpy ufuncs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import DepthMap, TwinSurfaceField, as_depth_array, sigmoid


class LossEval(NamedTuple):
    value: np.ndarray | float
    dvalue: np.ndarray | float


class FusionEval(NamedTuple):
    value: np.ndarray | float
    d_c3: np.ndarray | float
    d_d1: np.ndarray | float
    d_d2: np.ndarray | float


@dataclass(frozen=True)
class LossConfig:
    """Weights of the three-channel loss.

    ``detach_surfaces`` keeps the fusion term from pushing on ``c1``/``c2``;
    set it to False to let the blended-depth error flow into both surfaces.
    """

    gamma: float = 2.0
    omega: tuple[float, float, float] = (1.0, 0.0, 0.0)
    fusion_weight: float = 1.0
    detach_surfaces: bool = True

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        omega = tuple(float(w) for w in self.omega)
        if len(omega) != 3 or any(not np.isfinite(w) or w < 0 for w in omega):
            raise ValueError(f"omega must be three non-negative reals, got {self.omega}")
        object.__setattr__(self, "omega", omega)
        if not np.isfinite(self.fusion_weight) or self.fusion_weight < 0:
            raise ValueError("fusion_weight must be non-negative")


def _check_gamma(gamma):
    g = np.asarray(gamma, dtype=np.float64)
    if not np.all(np.isfinite(g)) or np.any(g < 1):
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    return g.item() if g.ndim == 0 else g


def _check_finite(name, x):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError(f"{name} must be finite")
    return x


def _out(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


def ale(epsilon, gamma) -> LossEval:
    """Asymmetric linear error ``max(-eps/gamma, gamma*eps)``.

    The subgradient at ``eps == 0`` is ``gamma`` (the positive branch).
    """
    gamma = _check_gamma(gamma)
    eps = _check_finite("epsilon", epsilon)
    value = np.maximum(-eps / gamma, gamma * eps) + 0.0  # no negative zero
    dvalue = np.where(eps >= 0, gamma, -1.0 / gamma)
    return LossEval(_out(value), _out(dvalue))


def rale(epsilon, gamma) -> LossEval:
    """Reflected ALE, ``max(eps/gamma, -gamma*eps)`` == ``ale(-eps)``.

    The subgradient at ``eps == 0`` is ``1/gamma`` (the positive branch).
    """
    gamma = _check_gamma(gamma)
    eps = _check_finite("epsilon", epsilon)
    value = np.maximum(-(-eps) / gamma, gamma * (-eps)) + 0.0
    dvalue = np.where(eps >= 0, 1.0 / gamma, -gamma)
    return LossEval(_out(value), _out(dvalue))


def absolute(epsilon) -> LossEval:
    eps = _check_finite("epsilon", epsilon)
    return LossEval(_out(np.abs(eps)), _out(np.sign(eps)))


def squared(epsilon) -> LossEval:
    eps = _check_finite("epsilon", epsilon)
    return LossEval(_out(eps * eps), _out(2.0 * eps))


def l1_l2(epsilon) -> LossEval:
    eps = _check_finite("epsilon", epsilon)
    return LossEval(_out(np.abs(eps) + eps * eps), _out(np.sign(eps) + 2.0 * eps))


def huber(epsilon, delta: float = 1.0) -> LossEval:
    """Huber loss: quadratic ``eps^2/2`` inside ``|eps| <= delta``, linear outside."""
    if not delta > 0:
        raise ValueError("huber delta must be positive")
    eps = _check_finite("epsilon", epsilon)
    a = np.abs(eps)
    inside = a <= delta
    value = np.where(inside, 0.5 * eps * eps, delta * (a - 0.5 * delta))
    dvalue = np.where(inside, eps, delta * np.sign(eps))
    return LossEval(_out(value), _out(dvalue))


LOSS_KINDS = ("ale", "rale", "abs", "sq", "l1", "l2", "l1+l2", "huber")


def pointwise_loss(kind: str, epsilon, gamma: float = 1.0, huber_delta: float = 1.0) -> LossEval:
    """Dispatch on a loss name (case-insensitive)."""
    kind = kind.lower()
    if kind == "ale":
        return ale(epsilon, gamma)
    if kind == "rale":
        return rale(epsilon, gamma)
    if kind in ("abs", "l1"):
        return absolute(epsilon)
    if kind in ("sq", "l2"):
        return squared(epsilon)
    if kind == "l1+l2":
        return l1_l2(epsilon)
    if kind == "huber":
        return huber(epsilon, huber_delta)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")


def fusion_loss(d1_hat, d2_hat, c3, d_true, full_grad: bool = False) -> FusionEval:
    """Absolute error of the blended depth ``s*d1 + (1-s)*d2`` with ``s = sigmoid(c3)``.

    Returns the value and subgradients. With ``full_grad=False`` the surface
    estimates are treated as constants and ``d_d1``/``d_d2`` are zero.
    At a zero residual the subgradient of ``|r|`` is taken as 0.
    """
    d1 = _check_finite("d1_hat", d1_hat)
    d2 = _check_finite("d2_hat", d2_hat)
    dt = _check_finite("d_true", d_true)
    c3 = _check_finite("c3", c3)
    ev = _fusion_given_weight(d1, d2, sigmoid(c3), dt, full_grad)
    return FusionEval(*(_out(v) for v in ev))


def _fusion_given_weight(d1, d2, s, dt, full_grad):
    """Fusion loss terms from an already computed blend weight; no input checks."""
    # written as d2 + s*(d1 - d2) so that equal surfaces blend exactly
    r = d2 + s * (d1 - d2) - dt
    sign = np.sign(r)
    d_c3 = sign * (d1 - d2) * s * (1.0 - s)
    if full_grad:
        d_d1 = sign * s
        d_d2 = sign * (1.0 - s)
    else:
        d_d1 = d_d2 = np.zeros_like(r)
    return FusionEval(np.abs(r), d_c3, d_d1, d_d2)


def twin_terms(c1, c2, c3, d_true, cfg: LossConfig):
    """Per-element three-channel loss and its gradient w.r.t. (c1, c2, c3)."""
    a = ale(np.asarray(c1) - d_true, cfg.gamma)
    r = rale(np.asarray(c2) - d_true, cfg.gamma)
    f = fusion_loss(c1, c2, c3, d_true, full_grad=not cfg.detach_surfaces)
    w = cfg.fusion_weight
    value = a.value + r.value + w * f.value
    g1 = a.dvalue + w * f.d_d1
    g2 = r.dvalue + w * f.d_d2
    g3 = w * f.d_c3
    return value, g1, g2, g3


def combined_loss(field: TwinSurfaceField, target: DepthMap | np.ndarray,
                  cfg: LossConfig) -> tuple[float, TwinSurfaceField]:
    """Mean three-channel loss over valid target pixels, and its gradient.

    Pixels whose target is invalid (``<= 0``) contribute nothing to either the
    value or the gradient. The sum runs over the valid pixels in row-major
    order, so padding a target with invalid pixels leaves the result
    bit-identical.
    """
    t = as_depth_array(target)
    if t.shape != field.shape:
        raise ValueError(f"shape mismatch: field {field.shape} vs target {t.shape}")
    valid = np.isfinite(t) & (t > 0)
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise ValueError("target has no valid pixels")
    value, g1, g2, g3 = twin_terms(field.c1[valid], field.c2[valid], field.c3[valid], t[valid], cfg)
    grad = TwinSurfaceField.zeros_like(field)
    grad.c1[valid] = g1 / n
    grad.c2[valid] = g2 / n
    grad.c3[valid] = g3 / n
    return float(np.sum(value) / n), grad


def _multiscale(fields, targets, cfg, omega):
    if len(fields) != len(targets):
        raise ValueError("fields and targets must have equal length")
    if not 1 <= len(fields) <= 3:
        raise ValueError("between one and three scales are supported")
    omega = cfg.omega if omega is None else tuple(omega)
    total = 0.0
    grads = []
    for w, f, t in zip(omega, fields, targets):
        if w == 0:
            grads.append(TwinSurfaceField.zeros_like(f))
            continue
        v, g = combined_loss(f, t, cfg)
        total += w * v
        grads.append(TwinSurfaceField(w * g.c1, w * g.c2, w * g.c3))
    return total, grads


def multiscale_loss(fields: Sequence[TwinSurfaceField], targets: Sequence[DepthMap],
                    cfg: LossConfig, omega: Sequence[float] | None = None) -> float:
    """Weighted sum ``w1*L1 + w2*L2 + w3*L3`` of per-scale combined losses.

    Scales with zero weight are skipped entirely (their targets may even be
    empty). ``omega`` overrides ``cfg.omega`` when given.
    """
    return _multiscale(fields, targets, cfg, omega)[0]


def multiscale_loss_and_grad(fields, targets, cfg: LossConfig, omega=None):
    """Like :func:`multiscale_loss` but also returns one gradient field per scale."""
    return _multiscale(fields, targets, cfg, omega)
