"""Synthetic scenes with exactly known geometry, boxes and scores.

A scene is a planar target rectangle (plus optional distractor rectangles)
seen by a simple-radial camera moving along a trajectory. Ground-truth boxes
are the image-clipped hull of the projected target corners; detections are
noisy copies of the target and distractor boxes with scores drawn around
0.9 (target) and 0.4 (distractors). Camera poses are exact, so any
triangulation error is algorithmic.

``oracle_metrics`` recomputes every split metric by rasterizing boxes on a
sub-pixel grid, independently of ``vidrec.metrics``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

from .camera import CameraIntrinsics, CameraPose, project_point
from .data_io import AnnotatedClip, ColmapImage, ColmapReconstruction, PredictedClip
from .geometry import BBox, Box, bounding_box, clip_box, make_box
from .metrics import SplitReport
from .triangulation import CalibratedFrame


class DegenerateSpec(ValueError):
    pass


DEFAULT_TARGET = [[-0.5, -0.4, 0.0], [0.5, -0.4, 0.0], [-0.5, 0.4, 0.0], [0.5, 0.4, 0.0]]
DEFAULT_DISTRACTOR = [[1.0, -0.4, 0.0], [2.0, -0.4, 0.0], [1.0, 0.4, 0.0], [2.0, 0.4, 0.0]]


@dataclass
class SceneSpec:
    """Scene parameters. Corner order is TL, TR, BL, BR.

    ``trajectory`` is a dict with ``kind`` one of:

    - ``orbit``: camera centers on a circle of ``radius`` in the plane
      ``z = -distance``, all looking along +z;
    - ``dolly``: lateral sweep over ``[-span, span]`` (target leaves the view
      near the ends for large spans);
    - ``shake``: jitter of ``amplitude`` (world units) and ``rotation``
      (radians) around the on-axis position.

    With ``k = 0`` and the orbit or dolly trajectory the projected target is
    an exact axis-aligned rectangle, so box corners back-project onto the
    true 3D corners.
    """

    seed: int = 0
    clip_id: str = "synth_000"
    expression: str = "the box in front"
    trajectory: dict = field(default_factory=lambda: {"kind": "orbit", "radius": 1.0, "n_frames": 12})
    distance: float = 5.0
    target_box3d: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_TARGET))
    distractors: list = field(default_factory=list)
    noise: dict = field(default_factory=lambda: {"pixel_sigma": 0.0, "score_noise": 0.0, "dropout_prob": 0.0})
    moving_target: bool = False
    target_velocity: list = field(default_factory=lambda: [0.15, 0.0, 0.0])
    occlusion_prob: float = 0.0
    camera: dict = field(default_factory=lambda: {"width": 640, "height": 480, "f": 500.0, "k": 0.0})
    quantize: Optional[int] = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DegenerateSpec(f"unknown scene keys: {sorted(unknown)}")
        spec = cls(**{k: copy.deepcopy(v) for k, v in d.items() if k not in ("noise", "camera")})
        spec.noise.update(d.get("noise", {}))
        spec.camera.update(d.get("camera", {}))
        return spec

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    @property
    def n_frames(self) -> int:
        return int(self.trajectory.get("n_frames", 12))


@dataclass
class SyntheticScene:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    frames: list[CalibratedFrame]
    gt: dict[int, BBox]
    detections: dict[int, list[tuple[Box, float]]]
    target_corners: dict[int, np.ndarray]  # 4x3 per frame (differs per frame when moving)

    @property
    def clip_id(self) -> str:
        return self.spec.clip_id

    @property
    def tags(self) -> dict:
        return {
            "uniqueness": "multiple" if self.spec.distractors else "single",
            "movement": "moving" if self.spec.moving_target else "static",
        }

    def annotation(self) -> AnnotatedClip:
        return AnnotatedClip(self.clip_id, dict(self.gt), self.spec.expression, 2.0, self.tags)

    def predictions(self) -> PredictedClip:
        return PredictedClip(self.clip_id, {f: list(d) for f, d in self.detections.items()})

    def reconstruction(self) -> ColmapReconstruction:
        images = {
            fr.frame_index + 1: ColmapImage(fr.frame_index + 1, fr.pose, 1, f"frame_{fr.frame_index:06d}.jpg")
            for fr in self.frames
        }
        return ColmapReconstruction({1: self.intrinsics}, images)

    def perfect_predictions(self) -> dict[int, BBox]:
        return dict(self.gt)


def _rotation(rng, angle_sigma: float) -> np.ndarray:
    w = rng.normal(0.0, angle_sigma, 3)
    theta = float(np.linalg.norm(w))
    if theta == 0.0:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * K @ K


def camera_poses(spec: SceneSpec, rng) -> list[CameraPose]:
    traj = spec.trajectory
    kind = traj.get("kind", "orbit")
    n = spec.n_frames
    D = spec.distance
    poses = []
    if kind == "orbit":
        r = float(traj.get("radius", 1.0))
        for i in range(n):
            th = 2 * math.pi * i / n
            poses.append(CameraPose.look_from([r * math.cos(th), r * math.sin(th), -D], np.eye(3)))
    elif kind == "dolly":
        span = float(traj.get("span", 2.0))
        forward = float(traj.get("forward", 0.0))
        for i in range(n):
            s = i / (n - 1)
            poses.append(CameraPose.look_from([-span + 2 * span * s, 0.0, -D + forward * s], np.eye(3)))
    elif kind == "shake":
        amp = float(traj.get("amplitude", 0.3))
        rot = float(traj.get("rotation", 0.02))
        for _ in range(n):
            c = np.array([0.0, 0.0, -D]) + rng.normal(0.0, amp, 3)
            poses.append(CameraPose.look_from(c, _rotation(rng, rot)))
    else:
        raise DegenerateSpec(f"unknown trajectory kind {kind!r}")
    return poses


def _check_rect(corners, what: str) -> np.ndarray:
    pts = np.asarray(corners, dtype=float)
    if pts.shape != (4, 3):
        raise DegenerateSpec(f"{what} needs 4 corners of 3 coordinates")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-9 * max(1.0, sv[0]):
        raise DegenerateSpec(f"{what} corners are collinear")
    if sv[2] > 1e-9 * max(1.0, sv[0]):
        raise DegenerateSpec(f"{what} corners are not coplanar")
    return pts


def render_box(corners, pose: CameraPose, intr: CameraIntrinsics) -> BBox:
    uv = [project_point(p, pose, intr) for p in corners]
    if any(p is None for p in uv):
        return None
    return clip_box(bounding_box(uv), intr.width, intr.height)


def _quantize(box: BBox, q: Optional[int]) -> BBox:
    if box is None or not q:
        return box
    c = [round(v * q) / q for v in box.as_list()]
    return make_box(*c)


def generate(spec: SceneSpec) -> SyntheticScene:
    """Build one scene. Identical specs give identical scenes."""
    if spec.n_frames < 2:
        raise DegenerateSpec("a scene needs at least two frames")
    cam = spec.camera
    intr = CameraIntrinsics(int(cam["width"]), int(cam["height"]), float(cam["f"]),
                            float(cam.get("cx", cam["width"] / 2)), float(cam.get("cy", cam["height"] / 2)),
                            float(cam.get("k", 0.0)))
    target = _check_rect(spec.target_box3d, "target")
    distractors = [_check_rect(d, "distractor") for d in spec.distractors]
    noise = spec.noise
    sigma = float(noise.get("pixel_sigma", 0.0))
    score_noise = float(noise.get("score_noise", 0.0))
    dropout = float(noise.get("dropout_prob", 0.0))

    rng = np.random.default_rng(spec.seed)
    poses = camera_poses(spec, rng)
    velocity = np.asarray(spec.target_velocity, dtype=float)

    frames, gt, dets, corners_by_frame = [], {}, {}, {}
    for i, pose in enumerate(poses):
        frames.append(CalibratedFrame(i, pose, 1))
        corners = target + (velocity * i if spec.moving_target else 0.0)
        corners_by_frame[i] = corners
        # fixed number of draws per frame keeps the stream aligned across options
        occluded = rng.random() < spec.occlusion_prob
        dropped = rng.random() < dropout
        t_noise = rng.normal(0.0, 1.0, 4) * sigma
        t_score = rng.normal(0.0, score_noise) if score_noise > 0 else 0.0
        box = None if occluded else render_box(corners, pose, intr)
        gt[i] = _quantize(box, spec.quantize)
        cands = []
        if gt[i] is not None and not dropped:
            c = np.array(gt[i].as_list()) + t_noise
            x1, x2 = sorted((c[0], c[2]))
            y1, y2 = sorted((c[1], c[3]))
            det = clip_box(make_box(float(x1), float(y1), float(x2), float(y2)), intr.width, intr.height)
            det = _quantize(det, spec.quantize)
            if det is not None:
                cands.append((det, min(max(0.9 - t_score, 0.0), 1.0)))
        for d in distractors:
            d_noise = rng.normal(0.0, 1.0, 4) * sigma
            d_score = rng.normal(0.0, score_noise) if score_noise > 0 else 0.0
            dbox = render_box(d, pose, intr)
            if dbox is None:
                continue
            c = np.array(dbox.as_list()) + d_noise
            x1, x2 = sorted((c[0], c[2]))
            y1, y2 = sorted((c[1], c[3]))
            dbox = _quantize(clip_box(make_box(float(x1), float(y1), float(x2), float(y2)),
                                      intr.width, intr.height), spec.quantize)
            if dbox is not None:
                cands.append((dbox, min(max(0.4 + d_score, 0.0), 1.0)))
        perm = rng.permutation(len(cands)) if cands else []
        dets[i] = [cands[j] for j in perm]
    return SyntheticScene(spec, intr, frames, gt, dets, corners_by_frame)


def default_specs(seed: int = 0) -> list[SceneSpec]:
    """Four-clip split covering orbit, dolly, shake and a moving target."""
    noisy = {"pixel_sigma": 1.0, "score_noise": 0.1, "dropout_prob": 0.1}
    return [
        SceneSpec(seed=seed, clip_id="synth_000_orbit",
                  trajectory={"kind": "orbit", "radius": 1.0, "n_frames": 12},
                  distractors=[copy.deepcopy(DEFAULT_DISTRACTOR)], noise=dict(noisy)),
        SceneSpec(seed=seed + 1, clip_id="synth_001_dolly",
                  trajectory={"kind": "dolly", "span": 4.0, "n_frames": 16},
                  distractors=[copy.deepcopy(DEFAULT_DISTRACTOR)], noise=dict(noisy)),
        SceneSpec(seed=seed + 2, clip_id="synth_002_shake",
                  trajectory={"kind": "shake", "amplitude": 0.3, "rotation": 0.02, "n_frames": 12},
                  noise=dict(noisy), occlusion_prob=0.2),
        SceneSpec(seed=seed + 3, clip_id="synth_003_moving",
                  trajectory={"kind": "orbit", "radius": 1.0, "n_frames": 12},
                  distractors=[copy.deepcopy(DEFAULT_DISTRACTOR)], noise=dict(noisy), moving_target=True),
    ]


def specs_from_doc(doc: Any) -> list[SceneSpec]:
    """Scene specs from a JSON document: one scene object or ``{"scenes": [...]}``."""
    if isinstance(doc, Mapping) and "scenes" in doc:
        if set(doc) != {"scenes"}:
            raise DegenerateSpec("a split spec holds only 'scenes'")
        items = doc["scenes"]
    else:
        items = [doc]
    specs = [SceneSpec.from_dict(d) for d in items]
    ids = [s.clip_id for s in specs]
    if len(set(ids)) != len(ids):
        raise DegenerateSpec("scene clip_ids must be unique")
    return specs


# ---------------------------------------------------------------- raster oracle

def raster_areas(p: BBox, t: BBox, resolution: int = 1) -> tuple[int, int]:
    """(intersection, union) cell counts of two boxes on a 1/resolution-pixel grid.

    A cell counts as covered when its center lies inside the box; counts
    are exact for corners on the grid.
    """
    boxes = [b for b in (p, t) if b is not None]
    if not boxes:
        return 0, 0
    x0 = math.floor(min(b.x1 for b in boxes) * resolution)
    y0 = math.floor(min(b.y1 for b in boxes) * resolution)
    x1 = math.ceil(max(b.x2 for b in boxes) * resolution)
    y1 = math.ceil(max(b.y2 for b in boxes) * resolution)
    xs = (np.arange(x0, x1) + 0.5) / resolution
    ys = (np.arange(y0, y1) + 0.5) / resolution
    X, Y = np.meshgrid(xs, ys)

    def mask(b):
        if b is None:
            return np.zeros_like(X, dtype=bool)
        return (X > b.x1) & (X < b.x2) & (Y > b.y1) & (Y < b.y2)

    mp, mt = mask(p), mask(t)
    return int(np.count_nonzero(mp & mt)), int(np.count_nonzero(mp | mt))


def oracle_metrics(annotations: Mapping[str, AnnotatedClip], selections: Mapping[str, Mapping[int, BBox]],
                   resolution: int = 1) -> SplitReport:
    """Split report from rasterized areas, with clip-then-split averaging.

    ``selections`` maps clip id to the predicted box per frame; frames
    missing from it count as predicting no object.
    """
    st, miou, ap, miou_n, ap_n = [], [], [], [], []
    n_img = n_tgt = n_vac = 0
    for cid in sorted(annotations):
        clip = annotations[cid]
        sel = selections.get(cid, {})
        inter_sum = union_sum = 0
        v_m, v_n = [], []
        for f in sorted(clip.frames):
            t = clip.frames[f]
            p = sel.get(f)
            inter, union = raster_areas(p, t, resolution)
            inter_sum += inter
            union_sum += union
            v = 1.0 if union == 0 else inter / union
            v_n.append(v)
            if t is not None:
                v_m.append(v)
        n_img += len(v_n)
        n_tgt += len(v_m)
        if union_sum == 0:
            st.append(1.0)
            n_vac += 1
        else:
            st.append(inter_sum / union_sum)
        miou_n.append(sum(v_n) / len(v_n))
        ap_n.append(sum(1 for v in v_n if v > 0.5) / len(v_n))
        if v_m:
            miou.append(sum(v_m) / len(v_m))
            ap.append(sum(1 for v in v_m if v > 0.5) / len(v_m))
    return SplitReport(
        mSTIoU=sum(st) / len(st),
        mIoU_plus_n=sum(miou_n) / len(miou_n),
        mAP50_plus_n=sum(ap_n) / len(ap_n),
        mIoU=sum(miou) / len(miou) if miou else None,
        mAP50=sum(ap) / len(ap) if ap else None,
        n_clips=len(st), n_images=n_img, n_images_with_target=n_tgt, n_vacuous_clips=n_vac,
    )
