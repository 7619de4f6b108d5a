"""Command-line front end.

Subcommands: evaluate, roc, fuse, triangulate, synth. Reports go to stdout,
diagnostics to stderr; the exit status is 0 only when no error occurred.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import __version__
from .data_io import (ParseError, SchemaViolation, dumps_canonical, load_annotations,
                      load_predictions, schema, write_annotations, write_predictions,
                      write_reconstruction, write_report, write_tracks)
from .metrics import DegenerateLabels, EmptySplit, SplitReport
from .pipeline import MissingClip, evaluate, fuse, roc, triangulate
from .synth import DegenerateSpec, default_specs, generate, specs_from_doc
from .tracking import TrackerConfig
from .triangulation import TriangulationConfig

log = logging.getLogger("vidrec")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib

        with p.open("rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise SchemaViolation("", f"invalid TOML: {exc}") from None
    else:
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaViolation("", f"invalid JSON: {exc}") from None
    errors = list(jsonschema.Draft202012Validator(schema("config")).iter_errors(doc))
    if errors:
        e = errors[0]
        raise SchemaViolation("".join(f"/{x}" for x in e.absolute_path), e.message)
    return doc


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def format_reports(reports: dict[str, SplitReport], fmt: str = "table") -> str:
    header = ("group",) + SplitReport.COLUMNS
    rows = [(name,) + tuple(_fmt(v) for v in rep.values()) for name, rep in reports.items()]
    if fmt in ("tsv", "csv"):
        sep = "\t" if fmt == "tsv" else ","
        return "\n".join(sep.join(r) for r in [header, *rows]) + "\n"
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = []
    for r in [header, *rows]:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def _threads(args, cfg) -> int:
    return args.threads if args.threads is not None else int(cfg.get("threads", 1))


def cmd_evaluate(args, cfg) -> int:
    ann = load_annotations(args.annotations)
    pred = load_predictions(args.predictions)
    reports, records = evaluate(ann, pred, threshold=args.threshold, pooled=args.pooled_images,
                                group_by=args.group_by, threads=_threads(args, cfg))
    sys.stdout.write(format_reports(reports, args.format))
    if args.out:
        doc = {
            "groups": {k: v.to_dict() for k, v in reports.items()},
            "clips": [{
                "clip_id": r.clip_id, "stiou": r.stiou, "stiou_vacuous": r.stiou_vacuous,
                "mIoU": r.mean_iou, "mAP@50": r.ap50, "mIoU+n": r.mean_iou_plus_n,
                "mAP@50+n": r.ap50_plus_n, "n_images": r.n_images,
                "n_images_with_target": r.n_images_with_target,
            } for r in records],
            "options": {"group_by": args.group_by, "pooled_images": args.pooled_images,
                        "threshold": args.threshold},
        }
        write_report(doc, args.out)
    if args.plot:
        from .plotting import plot_clip_stiou

        plot_clip_stiou([r.clip_id for r in records], [r.stiou for r in records], args.plot)
    return 0


def cmd_roc(args, cfg) -> int:
    ann = load_annotations(args.annotations)
    pred = load_predictions(args.predictions)
    curve = roc(ann, pred)
    sys.stdout.write(f"AUC {100 * curve.auc:.1f}\n")
    if args.out:
        write_report(curve.to_dict(), args.out)
    if args.plot:
        from .plotting import plot_roc

        plot_roc({Path(args.predictions).stem: curve}, args.plot)
    return 0


def cmd_fuse(args, cfg) -> int:
    tcfg = TrackerConfig(**cfg.get("tracker", {}))
    dets = load_predictions(args.detections)
    fused, tracks = fuse(dets, tcfg, threshold=args.threshold, threads=_threads(args, cfg),
                         write_fused_scores=args.write_fused_scores)
    write_predictions(fused, args.out)
    if args.tracks:
        write_tracks(tracks, args.tracks)
    n_frames = sum(len(c.frames) for c in fused.values())
    log.info("fused %d clips, %d frames", len(fused), n_frames)
    return 0


def cmd_triangulate(args, cfg) -> int:
    tri = dict(cfg.get("triangulation", {}))
    if args.mode is not None:
        tri["replace_mode"] = args.mode
    tcfg = TriangulationConfig(**tri)
    name_map = None
    if args.name_map:
        name_map = {str(k): int(v) for k, v in json.loads(Path(args.name_map).read_text()).items()}
    pred = load_predictions(args.predictions)
    refined, diagnostics = triangulate(pred, args.colmap, tcfg, threads=_threads(args, cfg), name_map=name_map)
    write_predictions(refined, args.out)
    if args.diagnostics:
        write_report({"clips": diagnostics, "replace_mode": tcfg.replace_mode.value}, args.diagnostics)
    failed = sorted(c for c, d in diagnostics.items() if d["failed"])
    for cid in failed:
        log.warning("clip %s: triangulation failed (%s); predictions passed through", cid, diagnostics[cid]["error"])
    sys.stdout.write(f"refined {len(refined) - len(failed)}/{len(refined)} clips\n")
    return 0


def cmd_synth(args, cfg) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if args.spec:
        specs = specs_from_doc(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        if seed is not None:
            for i, s in enumerate(specs):
                s.seed = seed + i
    else:
        specs = default_specs(seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [generate(s) for s in specs]
    write_annotations({s.clip_id: s.annotation() for s in scenes}, out / "annotations.json")
    write_predictions({s.clip_id: s.predictions() for s in scenes}, out / "predictions.json")
    for s in scenes:
        write_reconstruction(s.reconstruction(), out / "colmap" / s.clip_id)
    (out / "spec.json").write_text(dumps_canonical({"scenes": [s.to_dict() for s in specs]}), encoding="utf-8")
    log.info("wrote %d clips to %s", len(scenes), out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file with tracker/triangulation settings")
    common.add_argument("--threads", type=int, default=None, help="clip-parallel workers (default 1)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    # common options live on the subcommands only: parent-level defaults would be
    # overwritten by the subparser's
    p = argparse.ArgumentParser(prog="vidrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("evaluate", parents=[common], help="mSTIoU / mIoU(+n) / mAP@50(+n) report")
    e.add_argument("--annotations", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--group-by", choices=["uniqueness", "movement"])
    e.add_argument("--pooled-images", action="store_true", help="average image metrics over all images")
    e.add_argument("--threshold", type=float, help="top-1 score below which a frame predicts no object")
    e.add_argument("--format", choices=["table", "tsv", "csv"], default="table")
    e.add_argument("--out", help="JSON report path")
    e.add_argument("--plot", help="per-clip STIoU figure (svg/png/pdf)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("roc", parents=[common], help="ROC/AUC of no-referred-object detection")
    r.add_argument("--annotations", required=True)
    r.add_argument("--predictions", required=True)
    r.add_argument("--out", help="curve JSON path")
    r.add_argument("--plot", help="ROC figure (svg/png/pdf)")
    r.set_defaults(func=cmd_roc)

    f = sub.add_parser("fuse", parents=[common], help="track detections and fuse confidence scores")
    f.add_argument("--detections", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--threshold", type=float, help="no-object threshold on the fused score")
    f.add_argument("--tracks", help="also write tracks JSON here")
    f.add_argument("--write-fused-scores", action="store_true",
                   help="write each selected box's fused score instead of its detector score")
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("triangulate", parents=[common], help="refine predictions by 3D corner triangulation")
    t.add_argument("--predictions", required=True)
    t.add_argument("--colmap", required=True, help="directory with <clip_id>/cameras.txt, images.txt")
    t.add_argument("--mode", choices=["always", "only-absent", "never"])
    t.add_argument("--name-map", help="JSON object mapping image NAME to frame_index")
    t.add_argument("--out", required=True)
    t.add_argument("--diagnostics")
    t.set_defaults(func=cmd_triangulate)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic fixture directory")
    s.add_argument("--spec", help="scene spec JSON (one scene or {'scenes': [...]})")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    # own handler rather than basicConfig, which is a no-op once the root logger is configured
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    log.propagate = False
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ParseError, MissingClip, DegenerateLabels, DegenerateSpec, EmptySplit, OSError,
            ValueError, TypeError) as exc:
        print(f"vidrec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
