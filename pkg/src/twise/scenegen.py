"""Synthetic depth scenes with exact ground truth and LiDAR-like sampling.

Scenes are unions of planar patches (unbounded planes or axis-aligned
rectangles) seen by a pinhole camera. Depth is the camera-frame ``z`` of the
first ray hit, so dense ground truth is exact and free of outliers. Frontal
rectangles are laid out on half-pixel boundaries of the reference view, which
keeps every pixel centre unambiguously on one surface.

A LiDAR is modelled as 64 elevation rings swept in azimuth from the camera
centre. Subsampled scan patterns keep evenly spaced rings. Semi-dense ground
truth accumulates scans from neighbouring frames whose poses are perturbed
with Gaussian noise, which spreads foreground and background depths across
occlusion boundaries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import DEFAULT_MAX_DEPTH, DepthMap, as_depth_array

N_RINGS = 64
VALID_ROWS = (0, 8, 16, 32, 64)
METRIC_OUTLIER_M = 1.0
KITTI_OUTLIER_PX = 3.0
KITTI_OUTLIER_REL = 0.05


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus a stereo baseline for disparity conversion.

    The default ``focal * baseline`` is 389.0 px*m, a KITTI-like magnitude.
    """

    focal: float = 720.0
    cx: float = 0.0
    cy: float = 0.0
    baseline: float = 389.0 / 720.0

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")

    @property
    def focal_baseline(self) -> float:
        return self.focal * self.baseline

    def rays(self, u, v) -> np.ndarray:
        """Unnormalised viewing rays ``((u-cx)/f, (v-cy)/f, 1)`` stacked on the last axis."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.focal, (v - self.cy) / self.focal, np.ones(np.broadcast(u, v).shape)], -1)

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = pts[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.cx + self.focal * pts[..., 0] / z, self.cy + self.focal * pts[..., 1] / z


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-reference rigid transform ``X_ref = R X_cam + t``.

    ``rotation`` holds Euler angles (rx, ry, rz) in radians composed as
    ``Rz @ Ry @ Rx``; ``translation`` is in meters.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    matrix: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotation)
        tr = tuple(float(a) for a in self.translation)
        if len(rot) != 3 or len(tr) != 3 or not all(map(math.isfinite, rot + tr)):
            raise ValueError("pose needs three finite angles and three finite offsets")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        if self.matrix is None:
            object.__setattr__(self, "matrix", _rot_z(rot[2]) @ _rot_y(rot[1]) @ _rot_x(rot[0]))

    @property
    def R(self) -> np.ndarray:
        return self.matrix

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation)

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        # Euler angles are informational only once a matrix is supplied
        ry = -math.asin(max(-1.0, min(1.0, R[2, 0])))
        rx = math.atan2(R[2, 1], R[2, 2])
        rz = math.atan2(R[1, 0], R[0, 0])
        return cls((rx, ry, rz), tuple(np.asarray(t, float)), np.asarray(R, float))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose.from_rt(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose.from_rt(self.R.T, -self.R.T @ self.t)

    def power(self, k: int) -> "Pose":
        out = Pose()
        step = self if k >= 0 else self.inverse()
        for _ in range(abs(k)):
            out = out.compose(step)
        return out

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t


IDENTITY = Pose()


@dataclass(frozen=True)
class Surface:
    """Plane ``normal . X = offset`` clipped to the box ``lo <= X <= hi``."""

    normal: tuple[float, float, float]
    offset: float
    label: int = 0
    lo: tuple[float, float, float] = (-math.inf, -math.inf, -math.inf)
    hi: tuple[float, float, float] = (math.inf, math.inf, math.inf)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit (``inf`` on a miss) for rays ``origin + t*dirs``."""
        n = np.asarray(self.normal)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ n) / denom
            hit = origin + t[..., None] * dirs
            inside = np.all((hit >= np.asarray(self.lo)) & (hit <= np.asarray(self.hi)), axis=-1)
        ok = np.isfinite(t) & (t > 1e-9) & inside
        return np.where(ok, t, np.inf)


@dataclass
class Scene:
    """Analytic scene geometry and the reference camera that views it."""

    width: int
    height: int
    intrinsics: CameraIntrinsics
    surfaces: list[Surface]
    max_depth: float = DEFAULT_MAX_DEPTH
    spec: dict = field(default_factory=dict)

    def pixel_rays(self) -> np.ndarray:
        v, u = np.mgrid[0:self.height, 0:self.width]
        return self.intrinsics.rays(u, v)

    def cast(self, pose: Pose, rays_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """First-hit camera depth and surface index for camera-frame rays with ``z == 1``.

        Returns depth 0 and index -1 for misses and hits beyond ``max_depth``.
        """
        dirs = rays_cam @ pose.R.T
        origin = pose.t
        ts = np.stack([s.intersect(origin, dirs) for s in self.surfaces], axis=-1)
        idx = np.argmin(ts, axis=-1)
        t = np.take_along_axis(ts, idx[..., None], -1)[..., 0]
        # rays have unit z in the camera frame, so the ray parameter is the depth
        ok = np.isfinite(t) & (t <= self.max_depth)
        return np.where(ok, t, 0.0), np.where(ok, idx, -1)

    def render(self, pose: Pose = IDENTITY) -> tuple[np.ndarray, np.ndarray]:
        return self.cast(pose, self.pixel_rays())

    def labels_for(self, ids: np.ndarray) -> np.ndarray:
        table = np.array([s.label for s in self.surfaces] + [0])
        return table[np.where(ids >= 0, ids, len(self.surfaces))]


@dataclass
class SceneSample:
    dense_gt: DepthMap
    sparse: DepthMap | None = None
    semidense: DepthMap | None = None
    labels: np.ndarray | None = None
    scene: Scene | None = None


# ---------------------------------------------------------------------------
# scene construction


def _frontal_rect(intr: CameraIntrinsics, depth: float, cols, rows, label: int) -> Surface:
    """Frontal rectangle at ``depth`` covering pixel columns/rows ``[c0, c1) x [r0, r1)``."""
    c0, c1 = cols
    r0, r1 = rows
    xs = [(c - 0.5 - intr.cx) / intr.focal * depth for c in (c0, c1)]
    ys = [(r - 0.5 - intr.cy) / intr.focal * depth for r in (r0, r1)]
    lo = (xs[0] if c0 > -math.inf else -math.inf, ys[0] if r0 > -math.inf else -math.inf, -math.inf)
    hi = (xs[1] if c1 < math.inf else math.inf, ys[1] if r1 < math.inf else math.inf, math.inf)
    return Surface((0.0, 0.0, 1.0), float(depth), label, lo, hi)


def _plane_through(p0: np.ndarray, p1: np.ndarray, axis: int, label: int = 0) -> Surface:
    """Plane containing the segment ``p0 -> p1`` and the image axis orthogonal to ``axis``."""
    d = p1 - p0
    n = np.zeros(3)
    n[axis] = d[2]
    n[2] = -d[axis]
    n /= np.linalg.norm(n)
    return Surface(tuple(n), float(n @ p0), label)


_COMMON = {"kind", "width", "height", "focal", "cx", "cy", "max_depth", "seed"}
_KIND_KEYS = {
    "step1d": {"near", "far", "edge"},
    "slope": {"near", "gradient", "axis"},
    "flat": {"depth"},
    "slab2d": {"near", "far", "rect"},
    "pole": {"near", "far", "pole_width", "col"},
    "composite": {"camera_height", "wall", "n_boxes", "n_poles"},
}
_DEFAULT_SIZE = {
    "step1d": (100, 1), "slope": (100, 1), "flat": (100, 1),
    "slab2d": (160, 96), "pole": (160, 96), "composite": (416, 128),
}

SCENE_KINDS = tuple(_KIND_KEYS)


def _camera(spec: dict, width: int, height: int) -> CameraIntrinsics:
    kind = spec["kind"]
    if kind == "composite":
        f, cy = 240.0, 40.0
    elif kind in ("slab2d", "pole"):
        f, cy = 110.0, 30.0
    else:
        f, cy = float(max(width, 1)), (height - 1) / 2.0
    return CameraIntrinsics(float(spec.get("focal", f)), float(spec.get("cx", (width - 1) / 2.0)),
                            float(spec.get("cy", cy)))


def make_scene(spec: dict | str) -> SceneSample:
    """Build a scene from a spec dict (or a JSON string / kind name).

    Every spec has a ``kind`` among :data:`SCENE_KINDS` and optional
    ``width``, ``height``, ``focal``, ``cx``, ``cy``, ``max_depth`` and
    ``seed``; unknown keys are rejected. Random layout choices (rectangle
    placement, box depths) come from ``seed``.
    """
    if isinstance(spec, str):
        spec = json.loads(spec) if spec.lstrip().startswith("{") else {"kind": spec}
    spec = dict(spec)
    kind = spec.get("kind")
    if kind not in _KIND_KEYS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    unknown = set(spec) - _COMMON - _KIND_KEYS[kind]
    if unknown:
        raise ValueError(f"unknown keys for {kind} scene: {sorted(unknown)}")
    w0, h0 = _DEFAULT_SIZE[kind]
    width = int(spec.setdefault("width", w0))
    height = int(spec.setdefault("height", h0))
    if width < 1 or height < 1:
        raise ValueError("scene dimensions must be positive")
    spec.setdefault("seed", 0)
    rng = np.random.default_rng(int(spec["seed"]))
    intr = _camera(spec, width, height)
    max_depth = float(spec.get("max_depth", DEFAULT_MAX_DEPTH))
    surfaces = _BUILDERS[kind](spec, intr, width, height, rng)
    scene = Scene(width, height, intr, surfaces, max_depth, spec)
    depth, ids = scene.render()
    return SceneSample(DepthMap(depth, max_depth), labels=scene.labels_for(ids), scene=scene)


def _build_step(spec, intr, w, h, rng):
    near = float(spec.setdefault("near", 10.0))
    far = float(spec.setdefault("far", 30.0))
    edge = int(spec.setdefault("edge", w // 2))
    if not 0 < near < far:
        raise ValueError("step scene needs 0 < near < far")
    return [_frontal_rect(intr, near, (-math.inf, edge), (-math.inf, math.inf), 1),
            Surface((0.0, 0.0, 1.0), far, 0)]


def _build_flat(spec, intr, w, h, rng):
    depth = float(spec.setdefault("depth", 15.0))
    if not depth > 0:
        raise ValueError("depth must be positive")
    return [Surface((0.0, 0.0, 1.0), depth, 0)]


def _build_slope(spec, intr, w, h, rng):
    near = float(spec.setdefault("near", 10.0))
    grad = float(spec.setdefault("gradient", 0.1))
    axis = spec.setdefault("axis", "x" if h == 1 else "row")
    if axis not in ("x", "row"):
        raise ValueError("slope axis must be 'x' or 'row'")
    n = w if axis == "x" else h
    far = near + grad * (n - 1)
    if not (near > 0 and far > 0):
        raise ValueError("slope depths must stay positive")
    if axis == "x":
        p0 = intr.rays(0, intr.cy) * near
        p1 = intr.rays(w - 1, intr.cy) * far
        return [_plane_through(p0, p1, 0)]
    p0 = intr.rays(intr.cx, 0) * near
    p1 = intr.rays(intr.cx, h - 1) * far
    return [_plane_through(p0, p1, 1)]


def _build_slab(spec, intr, w, h, rng):
    near = float(spec.setdefault("near", 10.0))
    far = float(spec.setdefault("far", 30.0))
    if not 0 < near < far:
        raise ValueError("slab scene needs 0 < near < far")
    rect = spec.get("rect")
    if rect is None:
        rw = int(rng.integers(max(2, int(0.3 * w)), max(3, int(0.6 * w)) + 1))
        rh = int(rng.integers(max(2, int(0.3 * h)), max(3, int(0.6 * h)) + 1))
        c0 = int(rng.integers(1, max(2, w - rw)))
        r0 = int(rng.integers(1, max(2, h - rh)))
        rect = [c0, c0 + rw, r0, r0 + rh]
        spec["rect"] = rect
    c0, c1, r0, r1 = (int(x) for x in rect)
    if not (0 <= c0 < c1 <= w and 0 <= r0 < r1 <= h):
        raise ValueError(f"rect {rect} does not fit a {w}x{h} image")
    return [_frontal_rect(intr, near, (c0, c1), (r0, r1), 1), Surface((0.0, 0.0, 1.0), far, 0)]


def _build_pole(spec, intr, w, h, rng):
    near = float(spec.setdefault("near", 7.0))
    far = float(spec.setdefault("far", 25.0))
    pw = int(spec.setdefault("pole_width", 2))
    if not 0 < near < far or pw < 1 or pw >= w:
        raise ValueError("invalid pole scene parameters")
    col = spec.get("col")
    if col is None:
        col = int(rng.integers(pw, w - 2 * pw))
        spec["col"] = col
    return [_frontal_rect(intr, near, (int(col), int(col) + pw), (-math.inf, math.inf), 1),
            Surface((0.0, 0.0, 1.0), far, 0)]


def _build_composite(spec, intr, w, h, rng):
    cam_h = float(spec.setdefault("camera_height", 1.65))
    wall = float(spec.setdefault("wall", 60.0))
    n_boxes = int(spec.setdefault("n_boxes", 3))
    n_poles = int(spec.setdefault("n_poles", 1))
    surfaces = [Surface((0.0, 1.0, 0.0), cam_h, 0), Surface((0.0, 0.0, 1.0), wall, 0)]
    label = 1
    for _ in range(n_boxes):
        z = float(rng.uniform(8.0, 35.0))
        bw = int(rng.integers(w // 10, w // 4))
        c0 = int(rng.integers(0, w - bw))
        ground_row = intr.cy + intr.focal * cam_h / z
        bottom = int(round(ground_row))
        top = int(round(intr.cy + intr.focal * (cam_h - float(rng.uniform(1.4, 3.0))) / z))
        surfaces.append(_frontal_rect(intr, z, (c0, c0 + bw), (top, bottom), label))
        label += 1
    for _ in range(n_poles):
        z = float(rng.uniform(6.0, 20.0))
        c0 = int(rng.integers(0, w - 3))
        bottom = int(round(intr.cy + intr.focal * cam_h / z))
        surfaces.append(_frontal_rect(intr, z, (c0, c0 + 2), (-math.inf, bottom), label))
        label += 1
    return surfaces


_BUILDERS = {
    "step1d": _build_step,
    "slope": _build_slope,
    "flat": _build_flat,
    "slab2d": _build_slab,
    "pole": _build_pole,
    "composite": _build_composite,
}


# ---------------------------------------------------------------------------
# LiDAR sampling


@dataclass(frozen=True)
class LidarConfig:
    """Ring layout of the simulated scanner (degrees)."""

    elevation_top: float = 2.0
    elevation_bottom: float = -24.8
    azimuth_fov: float = 90.0
    azimuth_step: float = 0.2
    n_rings: int = N_RINGS

    def elevations(self) -> np.ndarray:
        return np.linspace(self.elevation_top, self.elevation_bottom, self.n_rings)

    def azimuths(self, step: float | None = None) -> np.ndarray:
        step = self.azimuth_step if step is None else float(step)
        if not step > 0:
            raise ValueError("azimuth step must be positive")
        half = self.azimuth_fov / 2.0
        n = int(math.floor(self.azimuth_fov / step + 1e-9))
        return -half + step * np.arange(n + 1)


def kept_rings(rows: int, offset: int = 0, n_rings: int = N_RINGS) -> np.ndarray:
    """Ring indices retained when subsampling a 64-ring scan down to ``rows`` rings."""
    if rows not in VALID_ROWS:
        raise ValueError(f"rows must be one of {VALID_ROWS}, got {rows}")
    if rows == 0:
        return np.zeros(0, dtype=int)
    stride = n_rings // rows
    return np.array([i for i in range(n_rings) if (i - offset) % stride == 0])


class _Scan(NamedTuple):
    depth: np.ndarray      # H x W, 0 = no return
    surface: np.ndarray    # H x W surface index, -1 = none


def _scan(scene: Scene, pose: Pose, rows: int, offset: int, azimuth_step, lidar: LidarConfig) -> _Scan:
    h, w = scene.height, scene.width
    depth = np.zeros((h, w))
    surf = np.full((h, w), -1)
    rings = kept_rings(rows, offset, lidar.n_rings)
    if rings.size == 0:
        return _Scan(depth, surf)
    el = np.deg2rad(lidar.elevations()[rings])[:, None]
    az = np.deg2rad(lidar.azimuths(azimuth_step))[None, :]
    # unit-z camera rays: x right, y down, z forward
    rays = np.stack(np.broadcast_arrays(np.tan(az), -np.tan(el) / np.cos(az), np.ones_like(el * az)), -1).reshape(-1, 3)
    u, v = scene.intrinsics.project(rays)
    qu = np.rint(u).astype(int)
    qv = np.rint(v).astype(int)
    inside = (qu >= 0) & (qu < w) & (qv >= 0) & (qv < h)
    rays, qu, qv = rays[inside], qu[inside], qv[inside]
    hit_depth, hit_id = scene.cast(pose, rays)
    # snap each return onto the centre of the pixel it lands in; returns whose
    # surface differs from the one seen through that centre are dropped
    px_depth, px_id = scene.cast(pose, scene.intrinsics.rays(qu, qv))
    keep = (hit_id >= 0) & (hit_id == px_id) & (px_depth > 0)
    qu, qv, val, sid = qu[keep], qv[keep], px_depth[keep], px_id[keep]
    zbuf = np.full((h, w), np.inf)
    np.minimum.at(zbuf, (qv, qu), val)
    filled = np.isfinite(zbuf)
    depth[filled] = zbuf[filled]
    surf[qv, qu] = sid
    return _Scan(depth, np.where(filled, surf, -1))


def _geometry(scene) -> Scene:
    geom = scene.scene if isinstance(scene, SceneSample) else scene
    if not isinstance(geom, Scene):
        raise TypeError("analytic scene geometry is required (use make_scene)")
    return geom


def lidar_sample(scene: SceneSample | Scene, rows: int = 64, offset: int = 0, azimuth_step: float | None = None,
                 pose: Pose = IDENTITY, lidar: LidarConfig = LidarConfig()) -> DepthMap:
    """Structured sparse depth from a scan keeping ``rows`` of the 64 rings.

    Ring ``i`` is kept when ``(i - offset) % (64 // rows) == 0``; ``rows=0``
    gives an empty map. Returns are projected to the nearest pixel with a
    min-depth z-buffer, and carry the exact depth of that pixel.
    """
    geom = _geometry(scene)
    return DepthMap(_scan(geom, pose, rows, offset, azimuth_step, lidar).depth, geom.max_depth)


def grid_sample(scene: SceneSample | DepthMap, step: int, offset: int | tuple[int, int] = 0) -> DepthMap:
    """Keep every ``step``-th pixel of the dense ground truth along each axis."""
    gt = scene.dense_gt if isinstance(scene, SceneSample) else scene
    if step < 1:
        raise ValueError("step must be >= 1")
    oy, ox = (offset, offset) if np.isscalar(offset) else offset
    d = as_depth_array(gt)
    out = np.zeros_like(d)
    rows = np.arange(oy % step, d.shape[0], step) if d.shape[0] > 1 else np.array([0])
    keep = np.ix_(rows, np.arange(ox % step, d.shape[1], step))
    out[keep] = d[keep]
    return DepthMap(out, gt.max_depth if isinstance(gt, DepthMap) else DEFAULT_MAX_DEPTH)


def accumulate_semidense(scene: SceneSample | Scene, frames: int = 5, motion: Pose = Pose(translation=(0.0, 0.0, 0.4)),
                         noise: tuple[float, float] = (0.0, 0.0), seed: int = 0, rows: int = 64,
                         azimuth_step: float | None = None, lidar: LidarConfig = LidarConfig()) -> DepthMap:
    """Semi-dense depth from ``2*frames + 1`` scans merged into the reference view.

    Frame ``k`` (``-frames <= k <= frames``) sits at pose ``motion^k``. Its scan
    is mapped to the reference camera through a believed pose perturbed by
    Gaussian noise ``(sigma_rot [rad], sigma_trans [m])`` per axis; the
    reference frame itself is noise-free. Points hidden from the reference
    viewpoint are culled, and each surviving point is re-snapped onto the
    centre of the pixel it lands in along its (believed) surface plane. Merged
    with a min-depth z-buffer, a noise-free accumulation therefore reproduces
    the ground truth at every covered pixel.
    """
    geom = _geometry(scene)
    if frames < 0:
        raise ValueError("frames must be non-negative")
    sig_r, sig_t = (float(x) for x in noise)
    if sig_r < 0 or sig_t < 0:
        raise ValueError("noise levels must be non-negative")
    rng = np.random.default_rng(seed)
    intr = geom.intrinsics
    h, w = geom.height, geom.width
    ref_depth, ref_id = geom.render()
    zbuf = np.full((h, w), np.inf)
    for k in range(-frames, frames + 1):
        true_pose = motion.power(k)
        if k == 0:
            believed = true_pose
        else:
            # draw noise for every non-reference frame so seeds stay aligned across noise levels
            n_rot = rng.normal(0.0, 1.0, 3) * sig_r
            n_tr = rng.normal(0.0, 1.0, 3) * sig_t
            believed = true_pose.compose(Pose(tuple(n_rot), tuple(n_tr)))
        scan = _scan(geom, true_pose, rows, 0, azimuth_step, lidar)
        qv, qu = np.nonzero(scan.surface >= 0)
        if qv.size == 0:
            continue
        sid = scan.surface[qv, qu]
        pts_cam = intr.rays(qu, qv) * scan.depth[qv, qu][:, None]

        # visibility from the reference camera under the true pose
        pts_true = true_pose.apply(pts_cam)
        tu, tv = intr.project(pts_true)
        tu, tv = np.rint(tu), np.rint(tv)
        vis = (pts_true[:, 2] > 0) & (tu >= 0) & (tu < w) & (tv >= 0) & (tv < h)
        tu_i = np.where(vis, tu, 0).astype(int)
        tv_i = np.where(vis, tv, 0).astype(int)
        vis &= ref_id[tv_i, tu_i] == sid

        pts_b = believed.apply(pts_cam)
        bu, bv = intr.project(pts_b)
        bu, bv = np.rint(bu), np.rint(bv)
        ok = vis & (pts_b[:, 2] > 0) & (bu >= 0) & (bu < w) & (bv >= 0) & (bv < h)
        if not ok.any():
            continue
        bu_i = bu[ok].astype(int)
        bv_i = bv[ok].astype(int)
        sid = sid[ok]

        # surface planes carried through the believed transform
        normals = np.array([geom.surfaces[i].normal for i in sid])
        offsets = np.array([geom.surfaces[i].offset for i in sid])
        n_cam = normals @ true_pose.R
        off_cam = offsets - normals @ true_pose.t
        n_b = n_cam @ believed.R.T
        off_b = off_cam + n_b @ believed.t
        rays = intr.rays(bu_i, bv_i)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = off_b / np.einsum("ij,ij->i", n_b, rays)
        good = np.isfinite(z) & (z > 0) & (z <= geom.max_depth)
        np.minimum.at(zbuf, (bv_i[good], bu_i[good]), z[good])
    out = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return DepthMap(out, geom.max_depth)


# ---------------------------------------------------------------------------
# outliers and disparity


class OutlierStats(NamedTuple):
    metric_fraction: float   # share of compared pixels with |error| > 1 m
    kitti_fraction: float    # disparity error > 3 px and > 5 %
    coverage: float          # percent of image pixels with a candidate depth
    compared: int
    mae: float
    rmse: float


def disparity_depth_convert(value, intr: CameraIntrinsics = CameraIntrinsics(), direction: str = "to_depth"):
    """``depth = f*B / disparity`` and its inverse (the same map, an involution)."""
    if direction not in ("to_depth", "to_disparity"):
        raise ValueError("direction must be 'to_depth' or 'to_disparity'")
    x = np.asarray(value, dtype=np.float64)
    if not np.all(x > 0):
        raise ValueError("disparity and depth must be positive")
    out = intr.focal_baseline / x
    return out.item() if out.ndim == 0 else out


def outlier_stats(candidate, reference, intr: CameraIntrinsics = CameraIntrinsics()) -> OutlierStats:
    """Outlier rates of ``candidate`` against ``reference`` where both are valid."""
    c = as_depth_array(candidate)
    r = as_depth_array(reference)
    if c.shape != r.shape:
        raise ValueError("candidate and reference shapes differ")
    if np.any(c < 0) or np.any(r < 0):
        raise ValueError("depths must be non-negative (0 = invalid)")
    both = (c > 0) & (r > 0)
    n = int(np.count_nonzero(both))
    coverage = 100.0 * np.count_nonzero(c > 0) / c.size
    if n == 0:
        return OutlierStats(0.0, 0.0, coverage, 0, 0.0, 0.0)
    cd, rd = c[both], r[both]
    err = cd - rd
    disp_c = disparity_depth_convert(cd, intr)
    disp_r = disparity_depth_convert(rd, intr)
    derr = np.abs(disp_c - disp_r)
    kitti = (derr > KITTI_OUTLIER_PX) & (derr > KITTI_OUTLIER_REL * disp_r)
    return OutlierStats(float(np.mean(np.abs(err) > METRIC_OUTLIER_M)), float(np.mean(kitti)), coverage, n,
                        float(np.mean(np.abs(err))), math.sqrt(float(np.mean(err * err))))


# ---------------------------------------------------------------------------
# resolution pyramid


def downsample(gt, factor: int) -> DepthMap:
    """Valid-aware mean pooling by 2 or 4.

    A coarse pixel is valid iff at least one of its fine pixels is, and takes
    the mean of the valid ones. Ragged borders are padded with invalid pixels.
    """
    if factor not in (1, 2, 4):
        raise ValueError(f"factor must be 2 or 4, got {factor}")
    d = as_depth_array(gt)
    max_depth = gt.max_depth if isinstance(gt, DepthMap) else DEFAULT_MAX_DEPTH
    if factor == 1:
        return DepthMap(d, max_depth)
    h, w = d.shape
    H, W = -(-h // factor), -(-w // factor)
    pad = np.zeros((H * factor, W * factor))
    pad[:h, :w] = np.where(d > 0, d, 0.0)
    blocks = pad.reshape(H, factor, W, factor)
    total = blocks.sum(axis=(1, 3))
    count = (blocks > 0).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return DepthMap(mean, max_depth)


def pyramid(gt, levels: int = 3) -> list[DepthMap]:
    """Full, half and quarter resolution targets."""
    return [downsample(gt, 2 ** i) for i in range(levels)]
