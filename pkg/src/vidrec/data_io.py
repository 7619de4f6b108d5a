"""File formats: COLMAP text reconstructions and the JSON clip schemas.

COLMAP ``cameras.txt`` / ``images.txt`` are parsed and written in the text
layout COLMAP itself uses; only the SIMPLE_RADIAL camera model is accepted.
JSON files are validated against the schemas in ``vidrec/schemas`` and
written canonically (sorted keys, two-space indent) so repeated runs give
byte-identical files.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

import jsonschema

from .camera import CameraIntrinsics, CameraPose
from .geometry import BBox, Box, BoxError, box_from_list
from .triangulation import CalibratedFrame


class ParseError(ValueError):
    pass


class MalformedLine(ParseError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnsupportedModel(MalformedLine):
    pass


class MalformedPose(MalformedLine):
    pass


class SchemaViolation(ParseError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


# ---------------------------------------------------------------- COLMAP text

def _num(tok: str, line_no: int, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise MalformedLine(line_no, f"{what} is not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise MalformedLine(line_no, f"{what} is not finite: {tok!r}")
    return v


def _int(tok: str, line_no: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise MalformedLine(line_no, f"{what} is not an integer: {tok!r}") from None


def parse_cameras(text: str) -> dict[int, CameraIntrinsics]:
    cameras: dict[int, CameraIntrinsics] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        if len(elems) < 4:
            raise MalformedLine(line_no, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS...")
        cam_id = _int(elems[0], line_no, "CAMERA_ID")
        model = elems[1]
        if model != "SIMPLE_RADIAL":
            raise UnsupportedModel(line_no, f"camera model {model} is not supported")
        if len(elems) != 8:
            raise MalformedLine(line_no, f"SIMPLE_RADIAL takes 4 params, got {len(elems) - 4}")
        if cam_id in cameras:
            raise MalformedLine(line_no, f"duplicate camera id {cam_id}")
        width = _int(elems[2], line_no, "WIDTH")
        height = _int(elems[3], line_no, "HEIGHT")
        f, cx, cy, k = (_num(t, line_no, "param") for t in elems[4:])
        try:
            cameras[cam_id] = CameraIntrinsics(width, height, f, cx, cy, k)
        except ValueError as exc:
            raise MalformedLine(line_no, str(exc)) from None
    return cameras


def serialize_cameras(cameras: Mapping[int, CameraIntrinsics]) -> str:
    lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len(cameras)}",
    ]
    for cid in sorted(cameras):
        c = cameras[cid]
        lines.append(f"{cid} {c.model} {c.width} {c.height} {c.f!r} {c.cx!r} {c.cy!r} {c.k!r}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ColmapImage:
    image_id: int
    pose: CameraPose
    camera_id: int
    name: str


def parse_images(text: str) -> dict[int, ColmapImage]:
    """Parse ``images.txt``. The 2D point line of each image is validated and dropped."""
    images: dict[int, ColmapImage] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        line_no = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        if len(elems) != 10:
            raise MalformedLine(line_no, f"image line needs 10 fields, got {len(elems)}")
        image_id = _int(elems[0], line_no, "IMAGE_ID")
        q = [_num(t, line_no, "quaternion") for t in elems[1:5]]
        t = [_num(v, line_no, "translation") for v in elems[5:8]]
        camera_id = _int(elems[8], line_no, "CAMERA_ID")
        name = elems[9]
        if i >= len(lines):
            raise MalformedLine(line_no, "image line without a following points line")
        pts = lines[i].split()
        if len(pts) % 3 != 0:
            raise MalformedLine(i + 1, "points line must hold (X, Y, POINT3D_ID) triples")
        for tok in pts:
            _num(tok, i + 1, "point value")
        i += 1
        norm = math.sqrt(sum(v * v for v in q))
        if abs(norm - 1.0) >= 1e-3:
            raise MalformedPose(line_no, f"quaternion norm {norm:.6g} is not close to 1")
        if abs(norm - 1.0) > 1e-12:
            q = [v / norm for v in q]
        if image_id in images:
            raise MalformedLine(line_no, f"duplicate image id {image_id}")
        images[image_id] = ColmapImage(image_id, CameraPose(tuple(q), tuple(t)), camera_id, name)
    return images


def serialize_images(images: Mapping[int, ColmapImage]) -> str:
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
        f"# Number of images: {len(images)}, mean observations per image: 0",
    ]
    for iid in sorted(images):
        im = images[iid]
        nums = " ".join(repr(v) for v in (*im.pose.qvec, *im.pose.tvec))
        lines.append(f"{iid} {nums} {im.camera_id} {im.name}")
        lines.append("")
    return "\n".join(lines) + "\n"


@dataclass
class ColmapReconstruction:
    cameras: dict[int, CameraIntrinsics]
    images: dict[int, ColmapImage]

    def __post_init__(self):
        for im in self.images.values():
            if im.camera_id not in self.cameras:
                raise ParseError(f"image {im.image_id} references unknown camera {im.camera_id}")

    def calibrated_frames(self, frame_indices, name_map: Optional[Mapping[str, int]] = None
                          ) -> list[CalibratedFrame]:
        """Frames for the given indices; indices without a registered image get no pose.

        Images are matched to frames by the trailing integer of the file-name
        stem (``frame_000012.jpg`` -> 12) unless ``name_map`` maps names to
        frame indices explicitly.
        """
        by_frame: dict[int, ColmapImage] = {}
        for im in self.images.values():
            idx = name_map.get(im.name) if name_map is not None else frame_index_from_name(im.name)
            if idx is not None:
                by_frame[idx] = im
        out = []
        for f in sorted(frame_indices):
            im = by_frame.get(f)
            out.append(CalibratedFrame(f, im.pose if im else None, im.camera_id if im else 1))
        return out


_STEM_INT = re.compile(r"(\d+)$")


def frame_index_from_name(name: str) -> Optional[int]:
    m = _STEM_INT.search(Path(name).stem)
    return int(m.group(1)) if m else None


def load_reconstruction(directory) -> ColmapReconstruction:
    d = Path(directory)
    try:
        cams = parse_cameras((d / "cameras.txt").read_text())
        imgs = parse_images((d / "images.txt").read_text())
    except MalformedLine as exc:
        raise ParseError(f"{d}: {exc}") from exc
    return ColmapReconstruction(cams, imgs)


def write_reconstruction(recon: ColmapReconstruction, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "cameras.txt").write_text(serialize_cameras(recon.cameras))
    (d / "images.txt").write_text(serialize_images(recon.images))


# ---------------------------------------------------------------- JSON

_SCHEMAS: dict[str, dict] = {}


def schema(name: str) -> dict:
    if name not in _SCHEMAS:
        text = resources.files("vidrec").joinpath("schemas", f"{name}.schema.json").read_text()
        _SCHEMAS[name] = json.loads(text)
    return _SCHEMAS[name]


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def validate(doc: Any, name: str) -> None:
    validator = jsonschema.Draft202012Validator(schema(name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise SchemaViolation(_pointer(e.absolute_path), e.message)


def _box(coords, pointer: str) -> BBox:
    try:
        return box_from_list(coords)
    except BoxError as exc:
        raise SchemaViolation(pointer, str(exc)) from None


def _check_increasing(frames, pointer: str) -> None:
    prev = None
    for j, fr in enumerate(frames):
        if prev is not None and fr["frame_index"] <= prev:
            raise SchemaViolation(f"{pointer}/{j}/frame_index", "frame_index must be strictly increasing")
        prev = fr["frame_index"]


def dumps_canonical(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _read_json(source) -> Any:
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, (str, Path)) else source.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


@dataclass
class AnnotatedClip:
    clip_id: str
    frames: dict[int, BBox]
    expression: str = ""
    fps_annotated: float = 2.0
    tags: dict = field(default_factory=dict)


@dataclass
class PredictedClip:
    clip_id: str
    frames: dict[int, list[tuple[Box, float]]]


def annotations_from_doc(doc: Any) -> dict[str, AnnotatedClip]:
    validate(doc, "annotations")
    clips: dict[str, AnnotatedClip] = {}
    for ci, c in enumerate(doc["clips"]):
        ptr = f"/clips/{ci}"
        if c["clip_id"] in clips:
            raise SchemaViolation(f"{ptr}/clip_id", f"duplicate clip_id {c['clip_id']!r}")
        _check_increasing(c["frames"], f"{ptr}/frames")
        frames = {fr["frame_index"]: _box(fr["gt_box"], f"{ptr}/frames/{j}/gt_box")
                  for j, fr in enumerate(c["frames"])}
        clips[c["clip_id"]] = AnnotatedClip(
            c["clip_id"], frames, c.get("expression", ""), float(c.get("fps_annotated", 2.0)),
            dict(c.get("tags", {})))
    return clips


def annotations_to_doc(clips: Mapping[str, AnnotatedClip]) -> dict:
    out = []
    for cid in sorted(clips):
        c = clips[cid]
        entry = {
            "clip_id": c.clip_id,
            "expression": c.expression,
            "fps_annotated": float(c.fps_annotated),
            "frames": [{"frame_index": f, "gt_box": None if b is None else b.as_list()}
                       for f, b in sorted(c.frames.items())],
        }
        if c.tags:
            entry["tags"] = dict(c.tags)
        out.append(entry)
    return {"clips": out}


def predictions_from_doc(doc: Any) -> dict[str, PredictedClip]:
    validate(doc, "predictions")
    clips: dict[str, PredictedClip] = {}
    for ci, c in enumerate(doc["clips"]):
        ptr = f"/clips/{ci}"
        if c["clip_id"] in clips:
            raise SchemaViolation(f"{ptr}/clip_id", f"duplicate clip_id {c['clip_id']!r}")
        _check_increasing(c["frames"], f"{ptr}/frames")
        frames = {}
        for j, fr in enumerate(c["frames"]):
            boxes = []
            for k, b in enumerate(fr["boxes"]):
                box = _box(b["box"], f"{ptr}/frames/{j}/boxes/{k}/box")
                if box is None:
                    raise SchemaViolation(f"{ptr}/frames/{j}/boxes/{k}/box",
                                          "zero-area box; omit it to predict no object")
                boxes.append((box, float(b["score"])))
            frames[fr["frame_index"]] = boxes
        clips[c["clip_id"]] = PredictedClip(c["clip_id"], frames)
    return clips


def predictions_to_doc(clips: Mapping[str, PredictedClip]) -> dict:
    return {"clips": [
        {"clip_id": cid, "frames": [
            {"frame_index": f, "boxes": [{"box": b.as_list(), "score": float(s)} for b, s in boxes]}
            for f, boxes in sorted(clips[cid].frames.items())
        ]}
        for cid in sorted(clips)
    ]}


def load_annotations(source) -> dict[str, AnnotatedClip]:
    return annotations_from_doc(_read_json(source))


def load_predictions(source) -> dict[str, PredictedClip]:
    return predictions_from_doc(_read_json(source))


def write_annotations(clips: Mapping[str, AnnotatedClip], path) -> None:
    Path(path).write_text(dumps_canonical(annotations_to_doc(clips)), encoding="utf-8")


def write_predictions(clips: Mapping[str, PredictedClip], path) -> None:
    Path(path).write_text(dumps_canonical(predictions_to_doc(clips)), encoding="utf-8")


def tracks_to_doc(tracks_by_clip: Mapping[str, list]) -> dict:
    doc = {"clips": [{"clip_id": cid, "tracks": [t.to_dict() for t in tracks_by_clip[cid]]}
                     for cid in sorted(tracks_by_clip)]}
    validate(doc, "tracks")
    return doc


def write_tracks(tracks_by_clip: Mapping[str, list], path) -> None:
    Path(path).write_text(dumps_canonical(tracks_to_doc(tracks_by_clip)), encoding="utf-8")


def load_tracks(source) -> dict:
    doc = _read_json(source)
    validate(doc, "tracks")
    return {c["clip_id"]: c["tracks"] for c in doc["clips"]}


def _fixed(obj: Any, indent: int = 0) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        return f"{obj:.6f}"
    if isinstance(obj, (int, str)):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k), ensure_ascii=False)}: {_fixed(obj[k], indent + 1)}"
                 for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _fixed(v, indent + 1) for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_report(report: Mapping) -> str:
    """Report text: sorted keys and every float written with six decimals."""
    return _fixed(report) + "\n"


def write_report(report: Mapping, path) -> None:
    Path(path).write_text(dumps_report(report), encoding="utf-8")
