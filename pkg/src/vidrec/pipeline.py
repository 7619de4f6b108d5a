"""File-level workflows shared by the CLI: evaluate, ROC, fuse, triangulate."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, TypeVar

from .data_io import (AnnotatedClip, ColmapReconstruction, PredictedClip, load_reconstruction)
from .geometry import BBox, Box
from .metrics import (ClipEvaluation, ClipRecord, FrameRecord, RocCurve, SplitReport, clip_metrics, roc_curve,
                      split_aggregate)
from .tracking import Detection, TrackerConfig, fuse_scores, run_tracker
from .triangulation import RefineResult, TriangulationConfig, refine_clip

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class MissingClip(KeyError):
    def __init__(self, ids: Sequence[str]):
        super().__init__(f"predictions reference clips missing from annotations: {', '.join(sorted(ids))}")
        self.ids = sorted(ids)

    def __str__(self):
        return self.args[0]


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Ordered map, optionally over a thread pool."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def top1_box(boxes: Sequence[tuple[Box, float]], threshold: Optional[float] = None
             ) -> tuple[BBox, Optional[float]]:
    best = None
    for b, s in boxes:
        if best is None or s > best[1]:
            best = (b, s)
    if best is None:
        return None, None
    if threshold is not None and best[1] < threshold:
        return None, best[1]
    return best


def check_clip_ids(annotations: Mapping[str, AnnotatedClip], predictions: Mapping[str, PredictedClip]) -> None:
    missing = set(predictions) - set(annotations)
    if missing:
        raise MissingClip(sorted(missing))


def clip_evaluations(annotations: Mapping[str, AnnotatedClip], predictions: Mapping[str, PredictedClip],
                     threshold: Optional[float] = None) -> list[ClipEvaluation]:
    """Pair annotated frames with the top-1 prediction of the same frame.

    Unannotated prediction frames are ignored; annotated frames without
    predictions (or below ``threshold``) count as predicting no object.
    """
    check_clip_ids(annotations, predictions)
    out = []
    for cid in sorted(annotations):
        ann = annotations[cid]
        pred = predictions.get(cid)
        if pred is None:
            log.warning("clip %s has no predictions; scoring it as all-absent", cid)
        frames = []
        for f in sorted(ann.frames):
            box, score = top1_box(pred.frames.get(f, []) if pred else [], threshold)
            frames.append(FrameRecord(f, ann.frames[f], box, score))
        out.append(ClipEvaluation(cid, frames, dict(ann.tags)))
    return out


def evaluate(annotations, predictions, threshold=None, pooled=False, group_by=None, threads=1
             ) -> tuple[dict[str, SplitReport], list[ClipRecord]]:
    """Split reports keyed by group name (``"all"`` without grouping), plus clip records."""
    clips = clip_evaluations(annotations, predictions, threshold)
    records = parallel_map(clip_metrics, clips, threads)
    groups: dict[str, list] = {}
    if group_by is None:
        groups["all"] = records
    else:
        for clip, rec in zip(clips, records):
            groups.setdefault(clip.tags.get(group_by, "untagged"), []).append(rec)
    reports = {name: split_aggregate(recs, pooled=pooled) for name, recs in sorted(groups.items())}
    return reports, records


def roc_scores(annotations, predictions) -> list[tuple[Optional[float], bool]]:
    check_clip_ids(annotations, predictions)
    scores = []
    for cid in sorted(annotations):
        ann, pred = annotations[cid], predictions.get(cid)
        for f in sorted(ann.frames):
            _, s = top1_box(pred.frames.get(f, []) if pred else [])
            scores.append((s, ann.frames[f] is not None))
    return scores


def roc(annotations, predictions) -> RocCurve:
    return roc_curve(roc_scores(annotations, predictions))


def fuse_clip(clip: PredictedClip, cfg: TrackerConfig, threshold: Optional[float] = None,
              write_fused_scores: bool = False):
    """Track one clip and return (fused clip with one box per frame, tracks).

    Fused scores decide the selected box and the no-object cut. The output
    keeps the selected detection's own score unless ``write_fused_scores``.
    """
    dets = {f: [Detection(f, b, s) for b, s in boxes] for f, boxes in clip.frames.items()}
    tracks = run_tracker(dets, cfg)
    selection = fuse_scores(tracks, dets, threshold)
    frames = {}
    for f, sel in selection.items():
        if sel is None:
            frames[f] = []
        else:
            frames[f] = [(sel.box, sel.score if write_fused_scores else sel.original_score)]
    return PredictedClip(clip.clip_id, frames), tracks


def fuse(predictions: Mapping[str, PredictedClip], cfg: TrackerConfig, threshold=None, threads=1,
         write_fused_scores=False):
    results = parallel_map(lambda cid: fuse_clip(predictions[cid], cfg, threshold, write_fused_scores),
                           sorted(predictions), threads)
    fused = {r[0].clip_id: r[0] for r in results}
    tracks = {r[0].clip_id: r[1] for r in results}
    return fused, tracks


def find_reconstruction(colmap_dir, clip_id: str, n_clips: int) -> Optional[Path]:
    root = Path(colmap_dir)
    if (root / clip_id / "cameras.txt").exists():
        return root / clip_id
    if n_clips == 1 and (root / "cameras.txt").exists():
        return root
    return None


def triangulate_clip(clip: PredictedClip, recon: Optional[ColmapReconstruction], cfg: TriangulationConfig,
                     name_map=None) -> tuple[PredictedClip, dict]:
    top = {f: top1_box(boxes) for f, boxes in clip.frames.items()}
    if recon is None:
        frames = {f: list(b) for f, b in clip.frames.items()}
        return PredictedClip(clip.clip_id, frames), {
            "failed": True, "error": "no reconstruction", "replaced_frames": [], "corners": []}
    cal = recon.calibrated_frames(sorted(clip.frames), name_map)
    result: RefineResult = refine_clip({f: b for f, (b, _) in top.items()}, cal, recon.cameras, cfg)
    known = [s for b, s in top.values() if b is not None]
    fill = math.fsum(known) / len(known) if known else 0.0
    frames = {}
    for f in sorted(clip.frames):
        box = result.boxes[f]
        if f not in result.replaced_frames:
            frames[f] = list(clip.frames[f])
        elif box is None:
            frames[f] = []
        else:
            # re-projected boxes inherit the frame's score, or the clip mean when it had none
            s = top[f][1]
            frames[f] = [(box, fill if s is None else s)]
    return PredictedClip(clip.clip_id, frames), result.diagnostics()


def triangulate(predictions: Mapping[str, PredictedClip], colmap_dir, cfg: TriangulationConfig,
                threads=1, name_map=None):
    """Refine every clip; raises ``ParseError`` for unreadable reconstructions."""
    recons = {}
    for cid in sorted(predictions):
        d = find_reconstruction(colmap_dir, cid, len(predictions))
        recons[cid] = load_reconstruction(d) if d is not None else None
    results = parallel_map(lambda cid: triangulate_clip(predictions[cid], recons[cid], cfg, name_map),
                           sorted(predictions), threads)
    refined = {r[0].clip_id: r[0] for r in results}
    diagnostics = {r[0].clip_id: r[1] for r in results}
    return refined, diagnostics
