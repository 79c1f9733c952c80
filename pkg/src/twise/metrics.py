"""Depth-completion metrics, error-difference maps and boundary regions.

Everything is computed in meters internally. Reports scale linear metrics to
the requested unit (millimetres by default, as on the KITTI leaderboard) and
inverse-depth metrics to 1/km.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import DepthMap, as_depth_array

DEFAULT_TRIM = 2.0

_UNIT_SCALE = {"m": 1.0, "cm": 100.0, "mm": 1000.0}

REPORT_FIELDS = ("region", "unit", "valid_count", "mae", "rmse", "imae", "irmse", "tmae", "trmse")


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    imae: float
    irmse: float
    tmae: float
    trmse: float
    valid_count: int
    region: str = "whole"
    unit: str = "mm"

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


@dataclass
class ErrorDiffMap:
    """Per-pixel error differences ``|a - gt| - |b - gt|`` (A) and their squared analogue (S).

    Positive entries mark pixels where prediction ``b`` is closer to the
    truth. Both maps are zero wherever the ground truth is invalid.
    """

    A: np.ndarray
    S: np.ndarray
    valid: np.ndarray


@dataclass
class DiffHistograms:
    edges_a: np.ndarray
    a_wins: np.ndarray
    a_losses: np.ndarray
    edges_s: np.ndarray
    s_wins: np.ndarray
    s_losses: np.ndarray
    n_wins: int
    n_losses: int
    n_ties: int
    n_images: int

    @property
    def wins_per_image(self) -> float:
        return self.n_wins / self.n_images

    @property
    def losses_per_image(self) -> float:
        return self.n_losses / self.n_images

    def summary(self) -> dict:
        return {
            "n_wins": self.n_wins,
            "n_losses": self.n_losses,
            "n_ties": self.n_ties,
            "n_images": self.n_images,
            "wins_per_image": self.wins_per_image,
            "losses_per_image": self.losses_per_image,
        }


def _valid_gt(gt: np.ndarray) -> np.ndarray:
    return np.isfinite(gt) & (gt > 0)


def standard_metrics(pred, gt, trim_threshold: float = DEFAULT_TRIM, *, mask=None,
                     unit: str = "mm", region: str = "whole",
                     allow_missing: bool = False) -> MetricsReport:
    """MAE, RMSE, iMAE, iRMSE and the trimmed tMAE / tRMSE over valid GT pixels.

    Parameters
    ----------
    pred, gt : DepthMap or ndarray
        Depths in meters; ``gt <= 0`` marks pixels without ground truth.
    trim_threshold : float
        Error magnitude ``t`` (meters) at which the trimmed metrics clamp each
        pixel: ``tMAE = mean(min(|e|, t))``, ``tRMSE = sqrt(mean(min(e^2, t^2)))``.
    mask : bool ndarray, optional
        Further restricts evaluation (e.g. to an edge region).
    unit : {"mm", "cm", "m"}
        Unit of the linear metrics. Inverse metrics are always 1/km.
    allow_missing : bool
        If True, GT pixels without a prediction count as error ``t`` in the
        trimmed metrics and the untrimmed metrics become NaN. Otherwise such
        pixels raise ``ValueError``.
    """
    p = as_depth_array(pred)
    g = as_depth_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if unit not in _UNIT_SCALE:
        raise ValueError(f"unit must be one of {sorted(_UNIT_SCALE)}")
    if not trim_threshold > 0:
        raise ValueError("trim threshold must be positive")
    sel = _valid_gt(g)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    n = int(np.count_nonzero(sel))
    if n == 0:
        raise ValueError("no valid ground-truth pixels")
    gv = g[sel]
    pv = p[sel]
    missing = ~(np.isfinite(pv) & (pv > 0))
    if missing.any() and not allow_missing:
        raise ValueError(f"{int(missing.sum())} valid GT pixels have no prediction")

    t = float(trim_threshold)
    scale = _UNIT_SCALE[unit]
    e = np.where(missing, t, pv - gv)
    ae = np.abs(e)
    tmae = float(np.mean(np.minimum(ae, t)))
    trmse = math.sqrt(float(np.mean(np.minimum(e * e, t * t))))
    if missing.any():
        mae = rmse = imae = irmse = math.nan
    else:
        mae = float(np.mean(ae))
        rmse = math.sqrt(float(np.mean(e * e)))
        ie = 1.0 / pv - 1.0 / gv
        imae = float(np.mean(np.abs(ie))) * 1000.0
        irmse = math.sqrt(float(np.mean(ie * ie))) * 1000.0
    return MetricsReport(mae * scale, rmse * scale, imae, irmse, tmae * scale, trmse * scale,
                         n, region, unit)


def region_masks(labels, edge_radius: int = 3, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """Split pixels into an occlusion-edge band and object interiors.

    A boundary pixel is one with an 8-neighbour of a different label. A pixel
    is an edge pixel when its Chebyshev distance to the nearest boundary pixel
    is below ``edge_radius``; for a straight seam and radius 3 that is a band
    three pixels wide on each side. ``inside`` is the rest of ``valid``.
    """
    lab = np.asarray(labels)
    if lab.ndim == 1:
        lab = lab[None, :]
    if edge_radius < 1:
        raise ValueError("edge_radius must be >= 1")
    valid = np.ones(lab.shape, bool) if valid is None else np.asarray(valid, bool)
    # differing label within Chebyshev distance <= r  <=>  within r-1 of a boundary pixel
    size = 2 * int(edge_radius) + 1
    hi = ndimage.maximum_filter(lab, size=size, mode="nearest")
    lo = ndimage.minimum_filter(lab, size=size, mode="nearest")
    near_other = (hi != lab) | (lo != lab)
    edge = near_other & valid
    inside = valid & ~edge
    return edge, inside


def region_metrics(pred, gt, labels=None, edge_radius: int = 3, trim_threshold: float = DEFAULT_TRIM,
                   unit: str = "mm") -> list[MetricsReport]:
    """Reports for the whole image and, given labels, for edge and inside regions."""
    reports = [standard_metrics(pred, gt, trim_threshold, unit=unit, region="whole")]
    if labels is not None:
        edge, inside = region_masks(labels, edge_radius, _valid_gt(as_depth_array(gt)))
        for name, m in (("edge", edge), ("inside", inside)):
            if m.any():
                reports.append(standard_metrics(pred, gt, trim_threshold, mask=m, unit=unit, region=name))
    return reports


def error_diff(pred_a, pred_b, gt) -> ErrorDiffMap:
    """Per-pixel absolute and squared error of ``pred_a`` minus that of ``pred_b``."""
    a = as_depth_array(pred_a)
    b = as_depth_array(pred_b)
    g = as_depth_array(gt)
    if not (a.shape == b.shape == g.shape):
        raise ValueError("pred_a, pred_b and gt must have the same shape")
    valid = _valid_gt(g)
    ea = np.abs(a - g)
    eb = np.abs(b - g)
    A = np.where(valid, ea - eb, 0.0)
    S = np.where(valid, ea * ea - eb * eb, 0.0)
    return ErrorDiffMap(A, S, valid)


def _split_hist(values, bins, upper):
    wins = values[values > 0]
    losses = -values[values < 0]
    if np.ndim(bins) == 0:
        edges = np.linspace(0.0, upper if upper > 0 else 1.0, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    return edges, np.histogram(wins, edges)[0], np.histogram(losses, edges)[0]


def diff_histograms(maps: ErrorDiffMap | Sequence[ErrorDiffMap], bins=20, bins_s=None) -> DiffHistograms:
    """Histogram ``|A|`` and ``|S|`` separately for wins (> 0) and losses (< 0).

    ``maps`` may be one map or a sequence (one per image); counts are pooled
    and per-image averages reported. An integer ``bins`` spans ``[0, max|x|]``.
    """
    if isinstance(maps, ErrorDiffMap):
        maps = [maps]
    maps = list(maps)
    if not maps:
        raise ValueError("no error-difference maps given")
    A = np.concatenate([m.A[m.valid] for m in maps])
    S = np.concatenate([m.S[m.valid] for m in maps])
    if A.size == 0:
        raise ValueError("error-difference maps contain no valid pixels")
    bins_s = bins if bins_s is None else bins_s
    ea, aw, al = _split_hist(A, bins, float(np.max(np.abs(A))))
    es, sw, sl = _split_hist(S, bins_s, float(np.max(np.abs(S))))
    return DiffHistograms(ea, aw, al, es, sw, sl,
                          n_wins=int(np.count_nonzero(A > 0)),
                          n_losses=int(np.count_nonzero(A < 0)),
                          n_ties=int(np.count_nonzero(A == 0)),
                          n_images=len(maps))


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow([_fmt(v) for v in r.as_row().values()])
    return buf.getvalue()


def reports_to_json(reports: Sequence[MetricsReport]) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True)


def histogram_to_csv(edges: np.ndarray, counts: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("bin_left", "bin_right", "count"))
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow((repr(float(lo)), repr(float(hi)), int(c)))
    return buf.getvalue()
