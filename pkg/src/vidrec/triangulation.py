"""Multi-view box refinement by triangulating 2D box corners.

Each registered frame contributes one ray per box corner. Per corner, the
rays are filtered (near-parallel duplicates and rays that do not meet the
consensus point are dropped) and intersected in the least-squares sense.
The four 3D corners are then projected back into every frame.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .camera import CameraIntrinsics, CameraPose, Ray3, pixel_to_ray, project_point
from .geometry import BBox, Box, bounding_box, clip_box

CORNERS = ("TL", "TR", "BL", "BR")


class TriangulationError(RuntimeError):
    pass


class UnregisteredFrame(TriangulationError):
    pass


class SingularBundle(TriangulationError):
    pass


class TooFewInliers(TriangulationError):
    pass


class InsufficientViews(TriangulationError):
    pass


class LargeResidual(TriangulationError):
    pass


class ReplaceMode(enum.Enum):
    ALWAYS = "always"
    ONLY_ABSENT = "only-absent"
    NEVER = "never"


@dataclass
class TriangulationConfig:
    parallel_cos_thresh: float = math.cos(math.radians(2.0))
    outlier_mad_factor: float = 3.0
    min_inlier_rays: int = 3
    replace_mode: ReplaceMode = ReplaceMode.ONLY_ABSENT
    # RMS re-projection error (pixels) of a corner over its inlier views
    # above which the corner, and hence the box, is rejected
    max_reprojection_px: float = 5.0
    max_condition: float = 1e10

    def __post_init__(self):
        if isinstance(self.replace_mode, str):
            self.replace_mode = ReplaceMode(self.replace_mode)
        if not 0 < self.parallel_cos_thresh < 1:
            raise ValueError("parallel_cos_thresh must lie in (0, 1)")
        if self.min_inlier_rays < 2:
            raise ValueError("min_inlier_rays must be at least 2")


@dataclass(frozen=True)
class CalibratedFrame:
    frame_index: int
    pose: Optional[CameraPose]
    camera_id: int = 1

    @property
    def registered(self) -> bool:
        return self.pose is not None


def corner_rays(box: Box, frame: CalibratedFrame, intr: CameraIntrinsics) -> dict[str, Ray3]:
    if not frame.registered:
        raise UnregisteredFrame(f"frame {frame.frame_index} has no pose")
    pix = {"TL": (box.x1, box.y1), "TR": (box.x2, box.y1),
           "BL": (box.x1, box.y2), "BR": (box.x2, box.y2)}
    return {c: pixel_to_ray(u, v, frame.pose, intr) for c, (u, v) in pix.items()}


def converge_point(rays: Sequence[Ray3], max_condition: float = 1e10) -> tuple[np.ndarray, float]:
    """Least-squares point closest to all rays, and the RMS point-to-ray distance.

    Solves ``sum(I - d d^T) p = sum(I - d d^T) o`` over the bundle.
    """
    if len(rays) < 2:
        raise SingularBundle("need at least two rays")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for r in rays:
        P = np.eye(3) - np.outer(r.direction, r.direction)
        A += P
        b += P @ r.origin
    if np.linalg.cond(A) > max_condition:
        raise SingularBundle("ray bundle is (nearly) parallel")
    p = np.linalg.solve(A, b)
    return p, point_ray_rms(p, rays)


def point_ray_distance(p: np.ndarray, ray: Ray3) -> float:
    w = p - ray.origin
    return float(np.linalg.norm(w - (w @ ray.direction) * ray.direction))


def point_ray_rms(p: np.ndarray, rays: Sequence[Ray3]) -> float:
    return math.sqrt(sum(point_ray_distance(p, r) ** 2 for r in rays) / len(rays))


def closest_midpoint(a: Ray3, b: Ray3) -> Optional[np.ndarray]:
    """Midpoint of the common perpendicular of two lines; None if parallel."""
    w = a.origin - b.origin
    c = a.direction @ b.direction
    denom = 1.0 - c * c
    if denom < 1e-15:
        return None
    da, db = a.direction @ w, b.direction @ w
    s = (c * db - da) / denom
    t = (db - c * da) / denom
    return 0.5 * (a.at(s) + b.at(t))


@dataclass
class CornerBundle:
    corner_id: str
    rays: list[tuple[int, Ray3]]  # (frame_index, ray)
    point: Optional[np.ndarray] = None
    residual: Optional[float] = None
    reprojection_rms: Optional[float] = None
    inlier_frames: list[int] = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "corner": self.corner_id,
            "n_rays": len(self.rays),
            "inlier_frames": list(self.inlier_frames),
            "point": None if self.point is None else [float(v) for v in self.point],
            "residual": self.residual,
            "reprojection_rms": self.reprojection_rms,
        }


def _drop_parallel(rays, cos_thresh):
    kept = []
    for f, r in rays:
        if all(abs(r.direction @ k.direction) <= cos_thresh for _, k in kept):
            kept.append((f, r))
    return kept


def _drop_outliers(rays, factor):
    n = len(rays)
    mids: dict[tuple[int, int], np.ndarray] = {}
    for i in range(n):
        for j in range(i + 1, n):
            m = closest_midpoint(rays[i][1], rays[j][1])
            if m is not None:
                mids[(i, j)] = m
    if not mids:
        return rays
    pts = np.array(list(mids.values()))
    center = np.median(pts, axis=0)
    dist = {k: float(np.linalg.norm(m - center)) for k, m in mids.items()}
    mad = float(np.median(list(dist.values())))
    # scale-aware floor so exact bundles (mad == 0) are not split by rounding
    limit = factor * max(mad, 1e-9 * (1.0 + float(np.linalg.norm(center))))
    kept = []
    for i in range(n):
        own = [d for (a, b), d in dist.items() if i in (a, b)]
        if own and min(own) <= limit:
            kept.append(rays[i])
    return kept


def filter_rays(bundle: CornerBundle, cfg: TriangulationConfig) -> CornerBundle:
    """Drop near-parallel and non-converging rays.

    Near-parallel rays are removed greedily, keeping the earlier frame. The
    outlier step is repeated until nothing changes, so the filter is
    idempotent.
    """
    rays = sorted(bundle.rays, key=lambda fr: fr[0])
    rays = _drop_parallel(rays, cfg.parallel_cos_thresh)
    while len(rays) >= 2:
        nxt = _drop_outliers(rays, cfg.outlier_mad_factor)
        if len(nxt) == len(rays):
            break
        rays = nxt
    if len(rays) < cfg.min_inlier_rays:
        raise TooFewInliers(
            f"corner {bundle.corner_id}: {len(rays)} rays left, need {cfg.min_inlier_rays}")
    return CornerBundle(bundle.corner_id, rays, inlier_frames=[f for f, _ in rays])


@dataclass
class BoxTriangulation:
    corners: dict[str, np.ndarray]
    bundles: dict[str, CornerBundle]

    def corner_array(self) -> np.ndarray:
        return np.array([self.corners[c] for c in CORNERS])


def triangulate_box(boxes: Mapping[int, BBox], frames: Sequence[CalibratedFrame],
                    intrinsics: Mapping[int, CameraIntrinsics],
                    cfg: Optional[TriangulationConfig] = None) -> BoxTriangulation:
    """Recover four independent 3D corner points from per-frame 2D boxes.

    ``intrinsics`` maps camera id to intrinsics. Raises a
    ``TriangulationError`` if any corner cannot be resolved.
    """
    cfg = cfg or TriangulationConfig()
    views = [fr for fr in sorted(frames, key=lambda fr: fr.frame_index)
             if fr.registered and boxes.get(fr.frame_index) is not None]
    if len(views) < cfg.min_inlier_rays:
        raise InsufficientViews(f"{len(views)} usable views, need {cfg.min_inlier_rays}")
    by_frame = {fr.frame_index: fr for fr in views}
    rays: dict[str, list] = {c: [] for c in CORNERS}
    pixels: dict[tuple[str, int], tuple[float, float]] = {}
    for fr in views:
        box = boxes[fr.frame_index]
        for c, r in corner_rays(box, fr, intrinsics[fr.camera_id]).items():
            rays[c].append((fr.frame_index, r))
        pixels.update({("TL", fr.frame_index): (box.x1, box.y1), ("TR", fr.frame_index): (box.x2, box.y1),
                       ("BL", fr.frame_index): (box.x1, box.y2), ("BR", fr.frame_index): (box.x2, box.y2)})

    bundles, corners = {}, {}
    for c in CORNERS:
        b = filter_rays(CornerBundle(c, rays[c]), cfg)
        p, res = converge_point([r for _, r in b.rays], cfg.max_condition)
        b.point, b.residual = p, res
        errs = []
        for f in b.inlier_frames:
            fr = by_frame[f]
            uv = project_point(p, fr.pose, intrinsics[fr.camera_id])
            if uv is None:
                errs.append(math.inf)
            else:
                errs.append((uv[0] - pixels[(c, f)][0]) ** 2 + (uv[1] - pixels[(c, f)][1]) ** 2)
        b.reprojection_rms = math.sqrt(sum(errs) / len(errs))
        bundles[c] = b
        if not b.reprojection_rms <= cfg.max_reprojection_px:
            raise LargeResidual(
                f"corner {c}: re-projection RMS {b.reprojection_rms:.3g}px exceeds {cfg.max_reprojection_px}px")
        corners[c] = p
    return BoxTriangulation(corners, bundles)


def reproject_box(corners, frame: CalibratedFrame, intr: CameraIntrinsics) -> BBox:
    """Image-clipped hull of the projected corners; None when not visible."""
    if not frame.registered:
        raise UnregisteredFrame(f"frame {frame.frame_index} has no pose")
    if isinstance(corners, Mapping):
        corners = [corners[c] for c in CORNERS]
    uv = [project_point(p, frame.pose, intr) for p in corners]
    uv = [p for p in uv if p is not None]
    if len(uv) < 2:
        return None
    return clip_box(bounding_box(uv), intr.width, intr.height)


@dataclass
class RefineResult:
    boxes: dict[int, BBox]
    failed: bool
    error: Optional[str]
    triangulation: Optional[BoxTriangulation]
    replaced_frames: list[int]

    def diagnostics(self) -> dict:
        return {
            "failed": self.failed,
            "error": self.error,
            "replaced_frames": list(self.replaced_frames),
            "corners": [] if self.triangulation is None else
            [b.diagnostics() for b in self.triangulation.bundles.values()],
        }


def refine_clip(predictions: Mapping[int, BBox], frames: Sequence[CalibratedFrame],
                intrinsics: Mapping[int, CameraIntrinsics],
                cfg: Optional[TriangulationConfig] = None) -> RefineResult:
    """Replace 2D predictions by re-projected triangulated boxes per ``replace_mode``.

    Triangulation failures leave the predictions untouched and set ``failed``.
    """
    cfg = cfg or TriangulationConfig()
    out = dict(predictions)
    try:
        tri = triangulate_box(predictions, frames, intrinsics, cfg)
    except TriangulationError as exc:
        return RefineResult(out, True, f"{type(exc).__name__}: {exc}", None, [])
    replaced = []
    if cfg.replace_mode is not ReplaceMode.NEVER:
        for fr in sorted(frames, key=lambda fr: fr.frame_index):
            if not fr.registered or fr.frame_index not in predictions:
                continue
            if cfg.replace_mode is ReplaceMode.ONLY_ABSENT and predictions[fr.frame_index] is not None:
                continue
            box = reproject_box(tri.corners, fr, intrinsics[fr.camera_id])
            if cfg.replace_mode is ReplaceMode.ALWAYS or box is not None:
                if box != out[fr.frame_index]:
                    replaced.append(fr.frame_index)
                out[fr.frame_index] = box
    return RefineResult(out, False, None, tri, replaced)
