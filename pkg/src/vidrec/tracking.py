"""Tracking-by-detection over per-frame grounding outputs and score fusion.

The tracker follows ByteTrack's two-stage association (high-score
detections first, then low-score ones against still-unmatched tracks),
with a constant-velocity Kalman filter in (cx, cy, aspect, h) space and
GIoU as the similarity. Matching is greedy on descending GIoU.

``fuse_scores`` then lifts each detection's confidence to the mean
confidence of its track when that mean is higher, and re-selects the top
box per frame.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import Box, giou, make_box, nms


class NonPositiveHeight(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    frame_index: int
    box: Box
    score: float

    def __post_init__(self):
        if self.box is None:
            raise ValueError("detections must carry a present box")


@dataclass
class TrackerConfig:
    track_high_thresh: float = 0.1
    track_low_thresh: float = -0.5
    match_score_thresh: float = 0.9
    match_giou_thresh: float = 0.9
    nms_iou_thresh: float = 0.5
    max_lost_frames: int = 30
    # second matching tier: any pair with GIoU above permissive_giou_thresh;
    # disable to keep only the strict score/GIoU gate
    permissive_match: bool = True
    permissive_giou_thresh: float = 0.0

    def __post_init__(self):
        if self.track_low_thresh > self.track_high_thresh:
            raise ValueError("track_low_thresh must not exceed track_high_thresh")
        if self.max_lost_frames < 0:
            raise ValueError("max_lost_frames must be non-negative")


def box_to_xyah(box: Box) -> np.ndarray:
    return np.array([(box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2,
                     box.width / box.height, box.height])


def xyah_to_box(xyah) -> Optional[Box]:
    cx, cy, a, h = xyah[:4]
    w = a * h
    if not (h > 0 and w > 0):
        return None
    return make_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def box(self) -> Optional[Box]:
        return xyah_to_box(self.mean)


class KalmanFilter:
    """Constant-velocity box filter with height-scaled noise."""

    std_weight_position = 1.0 / 20
    std_weight_velocity = 1.0 / 160

    def __init__(self):
        ndim = 4
        self._motion = np.eye(2 * ndim)
        for i in range(ndim):
            self._motion[i, ndim + i] = 1.0
        self._observe = np.eye(ndim, 2 * ndim)

    def initiate(self, box: Box) -> KalmanState:
        z = box_to_xyah(box)
        h = z[3]
        std = [
            2 * self.std_weight_position * h, 2 * self.std_weight_position * h, 1e-2,
            2 * self.std_weight_position * h,
            10 * self.std_weight_velocity * h, 10 * self.std_weight_velocity * h, 1e-5,
            10 * self.std_weight_velocity * h,
        ]
        return KalmanState(np.r_[z, np.zeros(4)], np.diag(np.square(std)))

    def predict(self, state: KalmanState, dt: int = 1) -> KalmanState:
        if dt < 1:
            raise ValueError("dt must be at least one frame")
        mean, cov = state.mean.copy(), state.covariance.copy()
        for _ in range(dt):
            h = mean[3]
            std = [
                self.std_weight_position * h, self.std_weight_position * h, 1e-2,
                self.std_weight_position * h,
                self.std_weight_velocity * h, self.std_weight_velocity * h, 1e-5,
                self.std_weight_velocity * h,
            ]
            mean = self._motion @ mean
            cov = self._motion @ cov @ self._motion.T + np.diag(np.square(std))
        return KalmanState(mean, 0.5 * (cov + cov.T))

    def update(self, state: KalmanState, box: Optional[Box]) -> KalmanState:
        if box is None:
            raise NonPositiveHeight("measurement box is absent")
        z = box_to_xyah(box)
        h = state.mean[3]
        if not h > 0:
            raise NonPositiveHeight(f"state height {h} is not positive")
        std = [self.std_weight_position * h, self.std_weight_position * h, 1e-1,
               self.std_weight_position * h]
        H, P = self._observe, state.covariance
        R = np.diag(np.square(std))
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        mean = state.mean + K @ (z - H @ state.mean)
        # Joseph form keeps the covariance symmetric PSD
        A = np.eye(8) - K @ H
        cov = A @ P @ A.T + K @ R @ K.T
        if not mean[3] > 0:
            raise NonPositiveHeight(f"corrected height {mean[3]} is not positive")
        return KalmanState(mean, 0.5 * (cov + cov.T))


_KF = KalmanFilter()


def kalman_predict(state: KalmanState, dt: int = 1) -> KalmanState:
    return _KF.predict(state, dt)


def kalman_update(state: KalmanState, measurement: Optional[Box]) -> KalmanState:
    return _KF.update(state, measurement)


class TrackStatus(enum.Enum):
    ACTIVE = "active"
    LOST = "lost"
    REMOVED = "removed"


@dataclass(frozen=True)
class TrackEntry:
    frame_index: int
    det_index: int  # position of the detection within its frame's input list
    box: Box
    score: float


@dataclass
class Track:
    track_id: int
    entries: list[TrackEntry]
    state: KalmanState
    state_frame: int
    status: TrackStatus = TrackStatus.ACTIVE
    fused_score: Optional[float] = None

    @property
    def last_frame(self) -> int:
        return self.entries[-1].frame_index

    @property
    def frames(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "track_id": self.track_id,
            "status": self.status.value,
            "fused_score": self.fused_score,
            "entries": [
                {"frame_index": e.frame_index, "det_index": e.det_index,
                 "box": e.box.as_list(), "score": e.score}
                for e in self.entries
            ],
        }


def _greedy_match(tracks: Sequence[Track], dets: Sequence[tuple[int, Detection]],
                  cfg: TrackerConfig) -> list[tuple[int, int]]:
    """Two-tier greedy GIoU matching. Returns (track position, det position) pairs."""
    strict, loose = [], []
    for ti, trk in enumerate(tracks):
        pred = trk.state.box
        if pred is None:
            continue
        for di, (order, det) in enumerate(dets):
            g = giou(pred, det.box)
            key = (-g, -det.score, order, trk.track_id, ti, di)
            if det.score > cfg.match_score_thresh and g > cfg.match_giou_thresh:
                strict.append(key)
            elif cfg.permissive_match and g > cfg.permissive_giou_thresh:
                loose.append(key)
    used_t, used_d, pairs = set(), set(), []
    for tier in (strict, loose):
        for *_, ti, di in sorted(tier):
            if ti not in used_t and di not in used_d:
                used_t.add(ti)
                used_d.add(di)
                pairs.append((ti, di))
    return pairs


class Tracker:
    """Stateful per-clip tracker; feed frames in increasing index order."""

    def __init__(self, cfg: Optional[TrackerConfig] = None):
        self.cfg = cfg or TrackerConfig()
        self.kf = KalmanFilter()
        self.tracks: list[Track] = []
        self._next_id = 1
        self._frame: Optional[int] = None

    def _live(self) -> list[Track]:
        return [t for t in self.tracks if t.status is not TrackStatus.REMOVED]

    def step(self, frame_index: int, detections: Sequence[Detection]) -> None:
        if self._frame is not None and frame_index <= self._frame:
            raise ValueError(f"frame {frame_index} is not after frame {self._frame}")
        self._frame = frame_index
        cfg = self.cfg
        for t in self._live():
            # expire before association so a stale track cannot be revived
            if frame_index - t.last_frame > cfg.max_lost_frames:
                t.status = TrackStatus.REMOVED
                continue
            t.state = self.kf.predict(t.state, frame_index - t.state_frame)
            t.state_frame = frame_index

        keep = nms([(d.box, d.score) for d in detections], cfg.nms_iou_thresh) if detections else []
        kept = sorted(keep)
        high = [(i, detections[i]) for i in kept if detections[i].score >= cfg.track_high_thresh]
        low = [(i, detections[i]) for i in kept
               if cfg.track_low_thresh <= detections[i].score < cfg.track_high_thresh]

        pool = sorted(self._live(), key=lambda t: t.track_id)
        matched: set[int] = set()
        unmatched_high = set(range(len(high)))
        for ti, di in _greedy_match(pool, high, cfg):
            self._assign(pool[ti], *high[di])
            matched.add(pool[ti].track_id)
            unmatched_high.discard(di)

        rest = [t for t in pool if t.track_id not in matched and t.status is TrackStatus.ACTIVE]
        for ti, di in _greedy_match(rest, low, cfg):
            self._assign(rest[ti], *low[di])
            matched.add(rest[ti].track_id)

        for t in pool:
            if t.track_id in matched:
                continue
            t.status = TrackStatus.LOST

        for di in sorted(unmatched_high):
            order, det = high[di]
            self.tracks.append(Track(
                track_id=self._next_id,
                entries=[TrackEntry(frame_index, order, det.box, det.score)],
                state=self.kf.initiate(det.box),
                state_frame=frame_index,
            ))
            self._next_id += 1

    def _assign(self, track: Track, order: int, det: Detection) -> None:
        track.state = self.kf.update(track.state, det.box)
        track.entries.append(TrackEntry(det.frame_index, order, det.box, det.score))
        track.status = TrackStatus.ACTIVE


def run_tracker(detections: Mapping[int, Sequence[Detection]],
                cfg: Optional[TrackerConfig] = None) -> list[Track]:
    """Track a whole clip. Frames without detections may be omitted."""
    tracker = Tracker(cfg)
    for f in sorted(detections):
        tracker.step(f, detections[f])
    return sorted(tracker.tracks, key=lambda t: t.track_id)


@dataclass(frozen=True)
class Selection:
    box: Box
    score: float           # effective score after fusion
    original_score: float
    track_id: Optional[int] = None


def fuse_scores(tracks: Sequence[Track], detections: Mapping[int, Sequence[Detection]],
                no_object_threshold: Optional[float] = None) -> dict[int, Optional[Selection]]:
    """Re-score detections with their track mean and pick the top box per frame.

    Each tracked detection's effective score is ``max(original, track mean)``;
    untracked detections keep their score. Frames whose best effective score
    falls below ``no_object_threshold`` (or that have no detections) map to
    None.
    """
    effective: dict[tuple[int, int], tuple[float, int]] = {}
    for trk in tracks:
        trk.fused_score = math.fsum(e.score for e in trk.entries) / len(trk.entries)
        for e in trk.entries:
            effective[(e.frame_index, e.det_index)] = (max(e.score, trk.fused_score), trk.track_id)

    out: dict[int, Optional[Selection]] = {}
    for f in sorted(detections):
        best = None
        for i, det in enumerate(detections[f]):
            score, tid = effective.get((f, i), (det.score, None))
            if best is None or score > best.score:
                best = Selection(det.box, score, det.score, tid)
        if best is not None and no_object_threshold is not None and best.score < no_object_threshold:
            best = None
        out[f] = best
    return out


def top1(detections: Mapping[int, Sequence[Detection]]) -> dict[int, Optional[Selection]]:
    """Highest-score detection per frame without tracking (first wins ties)."""
    out = {}
    for f in sorted(detections):
        best = None
        for det in detections[f]:
            if best is None or det.score > best.score:
                best = Selection(det.box, det.score, det.score)
        out[f] = best
    return out
