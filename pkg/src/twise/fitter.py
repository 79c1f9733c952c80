"""Desk-scale training of twin-surface fields.

Two fitters stand in for a network:

* :func:`fit_stochastic_pixel` runs SGD on one pixel's three channels while
  its ground truth is redrawn from an :class:`AmbiguityModel` every step. The
  converged channels should match the expected-loss predictions.
* :func:`fit_kernel_regression` fits a whole field from sparse samples: every
  output position minimises a Gaussian-weighted sum of per-sample losses.
  Near an occlusion edge each position sees a mixture of foreground and
  background samples, so the ALE channel extrapolates the foreground, the
  RALE channel the background, and the blend weight picks between them.

Baselines (L1, L2, L1+L2, Huber) reuse the same machinery with one channel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .ambiguity import AmbiguityModel
from .core import DepthMap, TwinSurfaceField, as_depth_array, sigmoid
from .losses import LossConfig, _fusion_given_weight, ale, fusion_loss, pointwise_loss, rale
from .scenegen import SceneSample, downsample

BASELINES = ("twise", "l1", "l2", "l1+l2", "huber")

#: fraction of the final SGD iterates averaged into the reported channel values
TAIL_FRACTION = 0.2

FIT_JSON_KEYS = ("learning_rate", "iterations", "seed", "bandwidth", "schedule", "baseline",
                 "huber_delta", "gamma", "omega", "fusion_weight")


@dataclass(frozen=True)
class FitConfig:
    """Optimiser settings.

    ``schedule`` is a sequence of ``((start, stop), (w1, w2, w3))`` entries
    giving the multi-scale weights used for iterations ``start <= i < stop``;
    iterations outside every range use the loss config's ``omega``.
    """

    learning_rate: float = 0.05
    iterations: int = 20000
    seed: int = 0
    bandwidth: float = 6.0
    schedule: tuple = ()
    baseline: str = "twise"
    huber_delta: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        base = str(self.baseline).lower()
        if base not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        object.__setattr__(self, "baseline", base)
        object.__setattr__(self, "iterations", int(self.iterations))
        object.__setattr__(self, "seed", int(self.seed))
        sched = []
        prev_stop = -math.inf
        for rng, omega in self.schedule:
            start, stop = (int(x) for x in rng)
            omega = tuple(float(x) for x in omega)
            if start >= stop or start < prev_stop:
                raise ValueError("schedule ranges must be non-empty, disjoint and ordered")
            if len(omega) != 3 or any(w < 0 for w in omega):
                raise ValueError("schedule weights must be three non-negative reals")
            sched.append(((start, stop), omega))
            prev_stop = stop
        object.__setattr__(self, "schedule", tuple(sched))

    def omega_at(self, iteration: int, default) -> tuple[float, float, float]:
        for (start, stop), omega in self.schedule:
            if start <= iteration < stop:
                return omega
        return tuple(default)


def staged_schedule(iterations: int) -> tuple:
    """Three equal stages with weights (1,1,1), (1,.1,.1) and (1,0,0)."""
    a = iterations // 3
    b = 2 * iterations // 3
    return (((0, a), (1.0, 1.0, 1.0)), ((a, b), (1.0, 0.1, 0.1)), ((b, iterations), (1.0, 0.0, 0.0)))


def config_to_json(fit: FitConfig, loss: LossConfig) -> str:
    doc = {
        "learning_rate": fit.learning_rate,
        "iterations": fit.iterations,
        "seed": fit.seed,
        "bandwidth": fit.bandwidth,
        "schedule": [[list(r), list(w)] for r, w in fit.schedule],
        "baseline": fit.baseline,
        "huber_delta": fit.huber_delta,
        "gamma": loss.gamma,
        "omega": list(loss.omega),
        "fusion_weight": loss.fusion_weight,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def config_from_json(text: str | dict, detach_surfaces: bool = True) -> tuple[FitConfig, LossConfig]:
    doc = json.loads(text) if isinstance(text, str) else dict(text)
    unknown = set(doc) - set(FIT_JSON_KEYS)
    if unknown:
        raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
    loss = LossConfig(**{k: doc[k] for k in ("gamma", "omega", "fusion_weight") if k in doc},
                      detach_surfaces=detach_surfaces)
    fit_keys = {k: doc[k] for k in FIT_JSON_KEYS[:7] if k in doc}
    if "schedule" in fit_keys:
        fit_keys["schedule"] = tuple((tuple(r), tuple(w)) for r, w in fit_keys["schedule"])
    return FitConfig(**fit_keys), loss


@dataclass(frozen=True)
class FitReport:
    field: TwinSurfaceField
    loss_trace: np.ndarray
    valid: np.ndarray
    probes: dict
    baseline: str = "twise"
    converged: bool = True
    message: str = ""
    stages: tuple = ()

    @property
    def fused(self) -> DepthMap:
        return DepthMap(np.where(self.valid, fuse(self.field), 0.0), max_depth=np.inf)

    @property
    def ambiguity(self) -> np.ndarray:
        return np.where(self.valid, ambiguity_map(self.field), 0.0)


def fuse(field: TwinSurfaceField) -> np.ndarray:
    """Blend ``sigma*c1 + (1-sigma)*c2`` with ``sigma = sigmoid(c3)``."""
    return field.c2 + field.sigma * (field.c1 - field.c2)


def ambiguity_map(field: TwinSurfaceField) -> np.ndarray:
    """Background minus foreground estimate, ``c2 - c1``."""
    return field.c2 - field.c1


def downsample_field(field: TwinSurfaceField, factor: int) -> TwinSurfaceField:
    """Average-pool every channel by ``factor`` (ragged borders average what exists)."""
    pool = _Pool(field.shape, factor)
    return TwinSurfaceField(pool.down(field.c1), pool.down(field.c2), pool.down(field.c3))


def transition_width(profile, low: float, high: float) -> int:
    """Pixels between the last sample below ``low`` and the next one above ``high``.

    Meant for a rising profile across a near-to-far step; a clean one-pixel
    jump has width 1.
    """
    p = np.asarray(profile, dtype=np.float64).ravel()
    below = np.nonzero(p < low)[0]
    if below.size == 0:
        raise ValueError("profile never drops below the low level")
    above = np.nonzero(p[below[-1]:] > high)[0]
    if above.size == 0:
        raise ValueError("profile never rises above the high level after the last low sample")
    return int(above[0])


# ---------------------------------------------------------------------------
# stochastic single pixel


def fit_stochastic_pixel(model: AmbiguityModel, cfg: LossConfig = LossConfig(),
                         fit: FitConfig = FitConfig()) -> FitReport:
    """SGD on one pixel whose target is redrawn from ``model`` every iteration.

    Channels start at the mixture mean with ``sigma = 0.5``. The reported
    probe values average the last 20 % of iterates, which removes most of the
    jitter a constant step size leaves behind.
    """
    rng = np.random.default_rng(fit.seed)
    targets = model.sample(rng, fit.iterations)
    lr = fit.learning_rate
    n = fit.iterations
    c1 = c2 = float(model.mean)
    c3 = 0.0
    hist = np.empty((n, 3))
    trace = np.empty(n)
    twise = fit.baseline == "twise"
    w = cfg.fusion_weight
    full = not cfg.detach_surfaces
    for i in range(n):
        dt = targets[i]
        if twise:
            a = ale(c1 - dt, cfg.gamma)
            r = rale(c2 - dt, cfg.gamma)
            f = fusion_loss(c1, c2, c3, dt, full_grad=full)
            trace[i] = a.value + r.value + w * f.value
            g1 = a.dvalue + w * f.d_d1
            g2 = r.dvalue + w * f.d_d2
            c3 = c3 - lr * w * f.d_c3
            c1 = c1 - lr * g1
            c2 = c2 - lr * g2
        else:
            e = pointwise_loss(fit.baseline, c1 - dt, huber_delta=fit.huber_delta)
            trace[i] = e.value
            c1 = c2 = c1 - lr * e.dvalue
        hist[i] = (c1, c2, c3)
        if not (math.isfinite(c1) and math.isfinite(c2) and math.isfinite(c3)) or abs(c1) > 1e9 or abs(c2) > 1e9:
            hist, trace = hist[:i + 1], trace[:i + 1]
            break
    finite = bool(np.isfinite(hist).all() and np.isfinite(trace).all() and np.abs(hist[:, :2]).max() < 1e9)
    tail = hist[-max(1, int(round(TAIL_FRACTION * len(hist)))):]
    sig_tail = sigmoid(tail[:, 2]) if twise else np.full(len(tail), 0.5)
    fused_tail = tail[:, 1] + sig_tail * (tail[:, 0] - tail[:, 1])
    probes = {(0, 0): {
        "c1": float(tail[:, 0].mean()),
        "c2": float(tail[:, 1].mean()),
        "sigma": float(sig_tail.mean()),
        "fused": float(fused_tail.mean()),
    }}
    last = hist[-1]
    return FitReport(
        field=TwinSurfaceField([[last[0]]], [[last[1]]], [[last[2] if twise else 0.0]]),
        loss_trace=trace,
        valid=np.ones((1, 1), bool),
        probes=probes,
        baseline=fit.baseline,
        converged=finite,
        message="" if finite else "parameters diverged",
    )


# ---------------------------------------------------------------------------
# kernel regression


class _Pool:
    """Average pooling by ``factor`` and its adjoint, for ragged shapes."""

    def __init__(self, shape, factor):
        self.shape = shape
        self.f = factor
        h, w = shape
        self.coarse = (-(-h // factor), -(-w // factor))
        rows = np.arange(h) // factor
        cols = np.arange(w) // factor
        self.index = (rows[:, None] * self.coarse[1] + cols[None, :]).ravel()
        self.count = np.bincount(self.index, minlength=self.coarse[0] * self.coarse[1]).astype(float)

    def down(self, x):
        if self.f == 1:
            return np.asarray(x, dtype=float)
        s = np.bincount(self.index, weights=np.asarray(x, float).ravel(), minlength=self.count.size)
        return (s / self.count).reshape(self.coarse)

    def up_adjoint(self, g):
        """Gradient w.r.t. the fine grid of a function of the pooled grid."""
        if self.f == 1:
            return g
        return (g.ravel() / self.count)[self.index].reshape(self.shape)


class _Level:
    """Kernel pairs linking coarse output positions to sparse samples at one scale."""

    def __init__(self, scale, sparse, shape, bandwidth, block):
        self.scale = scale
        f = 2 ** scale
        self.pool = _Pool(shape, f)
        target = downsample(sparse, f) if f > 1 else sparse
        t = as_depth_array(target)
        hs, ws = self.pool.coarse
        sv, su = np.nonzero(t > 0)
        h = bandwidth / f
        cv, cu = np.mgrid[0:hs, 0:ws]
        pos_xy = np.column_stack([cu.ravel(), cv.ravel()]).astype(float)
        if sv.size == 0:
            raise ValueError("no sparse samples to fit")
        tree = cKDTree(np.column_stack([su, sv]).astype(float))
        lists = tree.query_ball_point(pos_xy, r=3.0 * h, return_sorted=True)
        lens = np.fromiter((len(x) for x in lists), int, len(lists))
        pos = np.repeat(np.arange(len(lists)), lens)
        smp = np.fromiter((j for x in lists for j in x), int, int(lens.sum()))
        d2 = ((pos_xy[pos] - tree.data[smp]) ** 2).sum(axis=1)
        k = np.exp(-d2 / (2.0 * h * h))
        norm = np.bincount(pos, weights=k, minlength=len(lists))
        self.pos = pos
        self.depth = t[sv, su][smp]
        self.weight = k / norm[pos]
        self.valid = (lens > 0).reshape(hs, ws)
        self.n_valid = int(self.valid.sum())
        # each coarse position lies inside exactly one optimisation block
        block_scale = max(block // f, 1)
        brow = (cv // block_scale).ravel()
        bcol = (cu // block_scale).ravel()
        nbc = -(-shape[1] // block)
        self.block_of_pos = brow * nbc + bcol
        if scale == 0:
            _, nearest = tree.query(pos_xy)
            self.nearest = t[sv[nearest], su[nearest]].reshape(hs, ws)


def _active_scales(fit: FitConfig, cfg: LossConfig) -> list[int]:
    omegas = [cfg.omega] + [w for _, w in fit.schedule]
    return [s for s in range(3) if any(w[s] > 0 for w in omegas)] or [0]


def fit_kernel_regression(scene: SceneSample | None, cfg: LossConfig = LossConfig(),
                          fit: FitConfig = FitConfig(learning_rate=0.5, iterations=300),
                          sparse: DepthMap | None = None, probes: Sequence[tuple[int, int]] = ()) -> FitReport:
    """Fit a twin-surface field (or a one-channel baseline) to sparse depth.

    Each output pixel ``x`` minimises ``sum_s w(x, s) * loss(c(x), d_s)`` over
    sparse samples within ``3h`` pixels, with Gaussian weights of bandwidth
    ``h = fit.bandwidth`` normalised per pixel. Pixels without any sample in
    range are marked invalid in the report.

    Optimisation is full-batch (sub)gradient descent. The foreground,
    background and blend channels take turns, each with per-block step sizes
    that halve whenever a step would raise the block's objective; rejected
    steps are undone. With ``cfg.detach_surfaces=False`` (and for every
    baseline) the objective is the full loss, so the trace never increases
    within a schedule stage. With detached surfaces each channel descends
    only its own term, as its gradient prescribes. Coarse scales (half and quarter resolution) compare average-pooled
    channels against valid-aware downsampled sparse targets and are weighted
    by the multi-scale schedule.
    """
    if sparse is None:
        if scene is None or scene.sparse is None:
            raise ValueError("sparse samples are required")
        sparse = scene.sparse
    shape = as_depth_array(sparse).shape
    scales = _active_scales(fit, cfg)
    block = 2 ** max(scales)
    levels = {s: _Level(s, sparse, shape, fit.bandwidth, block) for s in scales}
    fine = levels.get(0) or _Level(0, sparse, shape, fit.bandwidth, block)
    n_blocks = (-(-shape[0] // block)) * (-(-shape[1] // block))
    fine_block = (np.arange(shape[0])[:, None] // block * (-(-shape[1] // block))
                  + np.arange(shape[1])[None, :] // block)

    twise = fit.baseline == "twise"
    detach = cfg.detach_surfaces or not twise
    c1 = fine.nearest.copy()
    c2 = fine.nearest.copy()
    c3 = np.zeros(shape)
    p_scale = max(fine.n_valid, 1)

    n_parts = 3 if twise else 1

    everything = tuple(range(n_parts))

    def evaluate(params, omega, terms=everything):
        """Per-block loss of the requested terms (ALE, RALE, fusion) and their gradients."""
        parts = np.zeros((n_parts, n_blocks))
        grads = np.zeros((n_parts,) + shape)
        for s, lvl in levels.items():
            ws = omega[s]
            if ws == 0 or lvl.n_valid == 0:
                continue
            d = lvl.depth
            need = range(n_parts) if (2 in terms or not detach) else terms
            k = {i: lvl.pool.down(params[i]).ravel()[lvl.pos] for i in need if i != 2}
            values, slopes = {}, {}
            if twise:
                w = cfg.fusion_weight
                fl = None
                if 2 in terms or not detach:
                    # blend weights per position, then spread over kernel pairs
                    s_pair = sigmoid(lvl.pool.down(params[2])).ravel()[lvl.pos]
                    fl = _fusion_given_weight(k[0], k[1], s_pair, d, not detach)
                    values[2], slopes[2] = w * fl.value, w * fl.d_c3
                if 0 in terms:
                    a = ale(k[0] - d, cfg.gamma)
                    values[0] = a.value
                    slopes[0] = a.dvalue if detach else a.dvalue + w * fl.d_d1
                if 1 in terms:
                    r = rale(k[1] - d, cfg.gamma)
                    values[1] = r.value
                    slopes[1] = r.dvalue if detach else r.dvalue + w * fl.d_d2
            else:
                e = pointwise_loss(fit.baseline, k[0] - d, huber_delta=fit.huber_delta)
                values[0], slopes[0] = e.value, e.dvalue
            npos = lvl.pool.count.size
            wt = lvl.weight * (ws / lvl.n_valid)
            for i in terms:
                per_pos = np.bincount(lvl.pos, weights=wt * values[i], minlength=npos)
                parts[i] += np.bincount(lvl.block_of_pos, weights=per_pos, minlength=n_blocks)
                g = np.bincount(lvl.pos, weights=wt * slopes[i], minlength=npos)
                grads[i] += lvl.pool.up_adjoint(g.reshape(lvl.pool.coarse))
        return parts, grads

    def objective(parts, i):
        # with detached surfaces each channel descends only its own term
        return parts[i] if detach else parts.sum(axis=0)

    params = np.stack([c1, c2, c3])[:n_parts]
    lr = np.full((n_parts, n_blocks), fit.learning_rate)
    trace = np.empty(fit.iterations)
    stages = []
    for it in range(fit.iterations):
        omega = fit.omega_at(it, cfg.omega)
        if not stages or stages[-1][1] != omega:
            stages.append((it, omega))
            parts, grads = evaluate(params, omega)
        # one half-step per channel; a block keeps a step only if it did not
        # raise that block's objective, otherwise the block's step size halves
        for i in range(n_parts):
            # detached, a channel's step changes only its own term, except the
            # fusion term, which is refreshed once the surfaces have moved
            terms = (i,) if detach else everything
            if detach and i == 2:
                cur, cur_g = evaluate(params, omega, terms)
                parts[2], grads[2] = cur[2], cur_g[2]
            trial = params.copy()
            trial[i] = params[i] - lr[i][fine_block] * p_scale * grads[i]
            new_parts, new_grads = evaluate(trial, omega, terms)
            ok = objective(new_parts, i) <= objective(parts, i)
            lr[i][~ok] *= 0.5
            okf = ok[fine_block]
            # every block's loss and gradient depend only on parameters inside
            # that block, so accepted and rejected blocks merge independently
            rows = list(terms)
            params = np.where(okf, trial, params)
            parts[rows] = np.where(ok, new_parts[rows], parts[rows])
            grads[rows] = np.where(okf, new_grads[rows], grads[rows])
        trace[it] = float(parts.sum())

    c1 = params[0]
    c2 = params[1] if twise else params[0]
    c3 = params[2] if twise else np.zeros(shape)
    result = TwinSurfaceField(c1, c2, c3)
    valid = fine.valid
    finite = bool(np.isfinite(trace).all() and result.is_finite())
    fused = fuse(result)
    probe_vals = {}
    for (r, c) in probes:
        probe_vals[(int(r), int(c))] = {
            "c1": float(c1[r, c]), "c2": float(c2[r, c]),
            "sigma": float(result.sigma[r, c]) if twise else 0.5, "fused": float(fused[r, c]),
            "valid": bool(valid[r, c]),
        }
    return FitReport(result, trace, valid, probe_vals, fit.baseline, finite,
                     "" if finite else "non-finite loss or parameters", tuple(stages))
