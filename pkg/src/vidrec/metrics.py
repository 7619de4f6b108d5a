"""Video grounding metrics: STIoU, IoU+n, AP@50(+n), split aggregation, ROC.

Per clip, ``clip_metrics`` reduces a sequence of frames to one record; a
split report is the unweighted mean of clip records (images first, then
clips). ``pooled=True`` in ``split_aggregate`` gives the image-pooled
alternative.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .geometry import BBox, intersection_area, iou, union_area

log = logging.getLogger(__name__)

MIN_TARGET_FRAMES = 4


class EmptySplit(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    gt: BBox
    pred: BBox
    pred_score: Optional[float] = None


@dataclass
class ClipEvaluation:
    clip_id: str
    frames: list[FrameRecord]
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"clip {self.clip_id!r} has no frames")
        idx = [f.frame_index for f in self.frames]
        if len(set(idx)) != len(idx):
            raise ValueError(f"clip {self.clip_id!r} has duplicate frame indices")
        if len(self.target_frames) < MIN_TARGET_FRAMES:
            log.debug("clip %s has %d target frames (< %d)", self.clip_id,
                      len(self.target_frames), MIN_TARGET_FRAMES)

    @property
    def target_frames(self) -> list[FrameRecord]:
        return [f for f in self.frames if f.gt is not None]


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    stiou: float
    stiou_vacuous: bool
    mean_iou: Optional[float]
    ap50: Optional[float]
    mean_iou_plus_n: float
    ap50_plus_n: float
    n_images: int
    n_images_with_target: int
    # raw per-frame values, kept for pooled aggregation
    ious: tuple = ()
    ious_plus_n: tuple = ()


@dataclass(frozen=True)
class SplitReport:
    mSTIoU: float
    mIoU_plus_n: float
    mAP50_plus_n: float
    mIoU: Optional[float]
    mAP50: Optional[float]
    n_clips: int
    n_images: int
    n_images_with_target: int
    n_vacuous_clips: int = 0
    pooled: bool = False

    COLUMNS = ("mSTIoU", "mIoU+n", "mAP@50+n", "mIoU", "mAP@50")

    def values(self) -> tuple:
        return (self.mSTIoU, self.mIoU_plus_n, self.mAP50_plus_n, self.mIoU, self.mAP50)

    def to_dict(self) -> dict:
        return {
            "mSTIoU": self.mSTIoU,
            "mIoU+n": self.mIoU_plus_n,
            "mAP@50+n": self.mAP50_plus_n,
            "mIoU": self.mIoU,
            "mAP@50": self.mAP50,
            "n_clips": self.n_clips,
            "n_images": self.n_images,
            "n_images_with_target": self.n_images_with_target,
            "n_vacuous_clips": self.n_vacuous_clips,
            "pooled": self.pooled,
        }


def iou_plus_n(p: BBox, t: BBox) -> float:
    """IoU that scores a correct "no object" answer as 1."""
    if p is None and t is None:
        return 1.0
    return iou(p, t)


def stiou_with_flag(frames: Iterable[FrameRecord]) -> tuple[float, bool]:
    """STIoU plus a flag set when every frame is empty in both boxes.

    That case has zero total union; it is reported as 1.0 (nothing was
    predicted and nothing was there).
    """
    inter = union = 0.0
    for f in frames:
        inter += intersection_area(f.pred, f.gt)
        union += union_area(f.pred, f.gt)
    if union == 0.0:
        return 1.0, True
    return inter / union, False


def stiou(clip: ClipEvaluation) -> float:
    return stiou_with_flag(clip.frames)[0]


def clip_metrics(clip: ClipEvaluation) -> ClipRecord:
    st, vacuous = stiou_with_flag(clip.frames)
    ious = tuple(iou(f.pred, f.gt) for f in clip.target_frames)
    ious_n = tuple(iou_plus_n(f.pred, f.gt) for f in clip.frames)
    return ClipRecord(
        clip_id=clip.clip_id,
        stiou=st,
        stiou_vacuous=vacuous,
        mean_iou=math.fsum(ious) / len(ious) if ious else None,
        ap50=sum(v > 0.5 for v in ious) / len(ious) if ious else None,
        mean_iou_plus_n=math.fsum(ious_n) / len(ious_n),
        ap50_plus_n=sum(v > 0.5 for v in ious_n) / len(ious_n),
        n_images=len(clip.frames),
        n_images_with_target=len(ious),
        ious=ious,
        ious_plus_n=ious_n,
    )


def _mean(values: Sequence[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


def split_aggregate(records: Sequence[ClipRecord], pooled: bool = False) -> SplitReport:
    """Average clip records into a split report.

    Clip-averaged by default. With ``pooled`` the four image-level metrics
    are averaged over all images of the split instead; mSTIoU is always a
    mean over clips.
    """
    if not records:
        raise EmptySplit("no clips to aggregate")
    records = sorted(records, key=lambda r: r.clip_id)
    if pooled:
        all_iou = [v for r in records for v in r.ious]
        all_n = [v for r in records for v in r.ious_plus_n]
        miou, map50 = _mean(all_iou), _mean([float(v > 0.5) for v in all_iou])
        miou_n, map50_n = _mean(all_n), _mean([float(v > 0.5) for v in all_n])
    else:
        with_target = [r for r in records if r.mean_iou is not None]
        miou = _mean([r.mean_iou for r in with_target])
        map50 = _mean([r.ap50 for r in with_target])
        miou_n = _mean([r.mean_iou_plus_n for r in records])
        map50_n = _mean([r.ap50_plus_n for r in records])
    return SplitReport(
        mSTIoU=_mean([r.stiou for r in records]),
        mIoU_plus_n=miou_n,
        mAP50_plus_n=map50_n,
        mIoU=miou,
        mAP50=map50,
        n_clips=len(records),
        n_images=sum(r.n_images for r in records),
        n_images_with_target=sum(r.n_images_with_target for r in records),
        n_vacuous_clips=sum(r.stiou_vacuous for r in records),
        pooled=pooled,
    )


def evaluate_clips(clips: Sequence[ClipEvaluation], pooled: bool = False) -> SplitReport:
    return split_aggregate([clip_metrics(c) for c in clips], pooled=pooled)


@dataclass(frozen=True)
class RocCurve:
    points: tuple  # ((fpr, tpr), ...) from the highest threshold down
    thresholds: tuple
    auc: float

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "fpr": [p[0] for p in self.points],
            "tpr": [p[1] for p in self.points],
            # the leading +inf threshold is written as null
            "thresholds": [None if math.isinf(t) else t for t in self.thresholds],
        }


def roc_curve(scores: Sequence[tuple[Optional[float], bool]]) -> RocCurve:
    """ROC of the "referred object is present" decision.

    ``scores`` pairs a top-1 confidence (None counts as 0) with whether the
    frame contains the target. Thresholds sweep the distinct scores from
    high to low; a tied group moves the curve diagonally, which gives tied
    positive/negative pairs half credit in the trapezoidal AUC.
    """
    pairs = [(0.0 if s is None else float(s), bool(y)) for s, y in scores]
    n_pos = sum(y for _, y in pairs)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positive / {n_neg} negative")
    pairs.sort(key=lambda p: -p[0])
    points = [(0.0, 0.0)]
    thresholds = [math.inf]
    tp = fp = 0
    i = 0
    while i < len(pairs):
        s = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == s:
            if pairs[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos))
        thresholds.append(s)
    auc = math.fsum((x1 - x0) * (y0 + y1) / 2.0
                    for (x0, y0), (x1, y1) in zip(points, points[1:]))
    return RocCurve(tuple(points), tuple(thresholds), auc)

