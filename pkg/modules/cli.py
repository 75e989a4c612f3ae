"""Command-line surface: encode, decode, roundtrip, eval, tile, render, synth"""
import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from modules.data_io import (
    SynthSpec,
    crop_scene_to_tile,
    dump_dataset,
    dump_scene,
    letterbox,
    load_dataset,
    load_scene_file,
    read_class_names,
    read_planes,
    synth_scene,
    tile_grid,
    write_planes,
)
from modules.decoder import (
    DecodeConfig,
    DecodeMode,
    decode,
    dump_detections_jsonl,
    format_dota_detections,
    load_detections_jsonl,
    unletterbox,
)
from modules.evaluation import ApMethod, EvalConfig, evaluate
from modules.report_generator import (
    format_table,
    generate_ablation_table,
    generate_class_columns_table,
    generate_eval_table,
    generate_roundtrip_table,
    report_to_json,
)
from modules.roundtrip_engine import Ablation, generate_summary, run_ablation, run_roundtrip
from modules.target_codec import Denominator, EncoderConfig, HeatmapKind, encode_scene
from src.config import APP_NAME, APP_TITLE, APP_VERSION, LETTERBOX_TARGET, load_config_file, resolve_section
from utils.calculations import write_atomic
from utils.errors import DetectorCoreError, Diagnostic
from utils.lookup_tables import CLASS_TABLES, EXIT_INPUT_ERROR, EXIT_OK, EXIT_THRESHOLD_FAILURE

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Shared flags and config resolution
# ---------------------------------------------------------------------------

def _add_encoder_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("encoder")
    group.add_argument("--down-ratio", type=int, help="output stride d (default 4)")
    group.add_argument("--mu", type=float, help="heatmap spread μ (default 0.125)")
    group.add_argument("--heatmap-kind", choices=[k.value for k in HeatmapKind], help="centre heatmap kernel")
    group.add_argument("--gaussian-sigma", type=float, help="fixed σ for the Gaussian kernel (cells)")
    group.add_argument("--vertex-shrink", type=float, help="training vertex position along centre→vertex (default 0.9)")
    group.add_argument("--value-floor", type=float, help="heatmap truncation floor")
    group.add_argument("--denominator", choices=[d.value for d in Denominator], help="kernel denominator μ·h or μ·h²")


def _add_decoder_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("decoder")
    group.add_argument("--top-k", type=int, help="peaks kept per plane (default 200)")
    group.add_argument("--score-threshold", type=float, help="minimum centre confidence (default 0.25)")
    group.add_argument("--match-radius-factor", type=float, help="vertex search radius as a fraction of h")
    group.add_argument("--mode", choices=[m.value for m in DecodeMode], help="vertex matching mode")
    group.add_argument("--nms-iou", type=float, help="rotated NMS IoU (default 0.5)")
    group.add_argument("--single-image-nms", action="store_true", default=None, help="apply NMS to every decode")


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("synthetic scenes")
    group.add_argument("--seed", type=int, default=0, help="PRNG seed (default 0)")
    group.add_argument("--count", type=int, default=10, help="number of scenes (default 10)")
    group.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), help="synthetic image size")
    group.add_argument("--min-instances", type=int, help="minimum instances per scene")
    group.add_argument("--max-instances", type=int, help="maximum instances per scene")
    group.add_argument("--num-classes", type=int, help="number of synthetic classes")
    group.add_argument("--max-aspect", type=float, help="largest aspect ratio h/w")


def _encoder_overrides(args) -> Dict:
    return {
        "down_ratio": args.down_ratio,
        "mu": args.mu,
        "heatmap_kind": args.heatmap_kind,
        "gaussian_sigma": args.gaussian_sigma,
        "vertex_shrink": args.vertex_shrink,
        "value_floor": args.value_floor,
        "denominator": args.denominator,
    }


def _decoder_overrides(args) -> Dict:
    return {
        "top_k": args.top_k,
        "score_threshold": args.score_threshold,
        "match_radius_factor": args.match_radius_factor,
        "mode": args.mode,
        "nms_iou": args.nms_iou,
        "single_image_nms": args.single_image_nms,
    }


def _synth_overrides(args) -> Dict:
    width, height = args.image_size if args.image_size else (None, None)
    return {
        "image_width": width,
        "image_height": height,
        "min_instances": args.min_instances,
        "max_instances": args.max_instances,
        "num_classes": args.num_classes,
        "max_aspect": args.max_aspect,
    }


def _class_table(args) -> Sequence[str]:
    return CLASS_TABLES[args.classes]


def _emit_diagnostics(diagnostics: Sequence[Diagnostic]) -> None:
    for diag in diagnostics:
        sys.stderr.write(json.dumps(diag.to_dict(), sort_keys=True) + "\n")


def _write(path: str, text: str) -> None:
    write_atomic(path, text)
    logger.info("wrote %s", path)


def _echo_config(command: str, config: Dict) -> None:
    """Resolved configuration as one JSON line on stderr"""
    sys.stderr.write(json.dumps({"command": command, "config": config}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_encode(args, file_cfg: Dict) -> int:
    """Scene file → plane files + planes.json"""
    classes = _class_table(args)
    parsed = load_scene_file(args.scene, classes)
    _emit_diagnostics(parsed.diagnostics)
    if not parsed.ok:
        logger.error("%s has malformed lines; nothing written", args.scene)
        return EXIT_INPUT_ERROR

    cfg = resolve_section(
        EncoderConfig(num_classes=parsed.scene.num_classes), file_cfg.get("encoder"), _encoder_overrides(args))
    maps = encode_scene(parsed.scene, cfg)
    _emit_diagnostics(maps.diagnostics)
    write_planes(maps, args.out, parsed.scene.class_names)
    return EXIT_OK


def cmd_decode(args, file_cfg: Dict) -> int:
    """Plane files → detections (JSON lines or DOTA text)"""
    maps = read_planes(args.planes)
    overrides = _decoder_overrides(args)
    overrides["down_ratio"] = maps.down_ratio
    overrides["vertex_shrink"] = maps.config.get("vertex_shrink")
    cfg = resolve_section(DecodeConfig(), file_cfg.get("decoder"), overrides)

    echo = {"decoder": cfg.to_dict()}
    detections = decode(maps, cfg)
    if args.unletterbox:
        transform = letterbox(tuple(args.unletterbox), tuple(args.target))
        detections = unletterbox(detections, transform)
        echo["letterbox"] = transform.to_dict()
    _echo_config("decode", echo)

    classes = read_class_names(args.planes) or _class_table(args)
    if args.format == "dota":
        text = format_dota_detections(sorted(detections, key=lambda d: d.sort_key()), classes)
    else:
        text = dump_detections_jsonl(detections, classes, args.image_id)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_roundtrip(args, file_cfg: Dict) -> int:
    """Seeded synthetic round trip (or ablation); exit 1 when a clean run misses thresholds"""
    spec = resolve_section(SynthSpec(), file_cfg.get("synth"), _synth_overrides(args))
    enc_cfg = resolve_section(
        EncoderConfig(num_classes=spec.num_classes), file_cfg.get("encoder"), _encoder_overrides(args))
    dec_overrides = _decoder_overrides(args)
    dec_overrides["down_ratio"] = enc_cfg.down_ratio
    dec_overrides["vertex_shrink"] = enc_cfg.vertex_shrink
    dec_cfg = resolve_section(DecodeConfig(), file_cfg.get("decoder"), dec_overrides)

    if args.ablation:
        report = run_ablation(Ablation(args.ablation), args.seed, args.count, spec, enc_cfg, dec_cfg, args.jobs)
        table = generate_ablation_table(report)
        status = EXIT_OK
    else:
        report = run_roundtrip(args.seed, args.count, spec, enc_cfg, dec_cfg, jobs=args.jobs)
        table = generate_roundtrip_table(report)
        summary = generate_summary(report)
        report["summary"] = summary
        status = EXIT_OK if summary["passed"] else EXIT_THRESHOLD_FAILURE

    if args.out:
        _write(args.out, report_to_json(report))
    else:
        sys.stdout.write(report_to_json(report))
    sys.stderr.write(format_table(table))
    return status


def cmd_eval(args, file_cfg: Dict) -> int:
    """Detections JSONL + ground-truth dataset JSON → per-class AP and mAP"""
    with open(args.gt, "r", encoding="utf-8") as handle:
        gts, class_names = load_dataset(handle.read())
    with open(args.detections, "r", encoding="utf-8") as handle:
        dets = load_detections_jsonl(handle.read(), class_names)

    overrides = {"iou_threshold": args.iou_threshold, "ap_method": args.ap_method}
    cfg = resolve_section(EvalConfig(), file_cfg.get("evaluation"), overrides)
    report = evaluate(dets, gts, cfg, class_names)

    _echo_config("eval", {"evaluation": cfg.to_dict()})
    if args.out:
        _write(args.out, report_to_json(report.to_dict()))
    if args.table:
        _write(args.table, format_table(generate_class_columns_table(report)))
    sys.stdout.write(format_table(generate_eval_table(report)))
    return EXIT_OK


def cmd_tile(args, file_cfg: Dict) -> int:
    """Scene → one scene JSON per tile + tiles.json"""
    parsed = load_scene_file(args.scene, _class_table(args))
    _emit_diagnostics(parsed.diagnostics)
    if not parsed.ok:
        return EXIT_INPUT_ERROR

    scene = parsed.scene
    grid = tile_grid((scene.image_width, scene.image_height), args.tile_size, args.gap)
    manifest = grid.to_dict()
    manifest["tiles"] = []
    for x, y in grid.origins:
        tile_scene, diagnostics = crop_scene_to_tile(scene, (x, y), args.tile_size)
        _emit_diagnostics(diagnostics)
        name = f"tile_{x}_{y}.json"
        _write(os.path.join(args.out, name), dump_scene(tile_scene))
        manifest["tiles"].append({"origin": [x, y], "file": name, "annotations": len(tile_scene.annotations)})
    _write(os.path.join(args.out, "tiles.json"), report_to_json(manifest))
    return EXIT_OK


def plane_to_pgm(plane: np.ndarray) -> bytes:
    """Binary P5 graymap, linear [0, 1] → [0, 255]"""
    rows, cols = plane.shape
    pixels = np.rint(np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def cmd_render(args, file_cfg: Dict) -> int:
    """One PGM per class plane of a heatmap"""
    maps = read_planes(args.planes)
    plane = maps.center_hm if args.plane == "center_hm" else maps.vertex_hm
    _echo_config("render", {"plane": args.plane, "encoder": maps.config})
    for class_id in range(plane.shape[0]):
        path = os.path.join(args.out, f"{args.plane}_c{class_id}.pgm")
        write_atomic(path, plane_to_pgm(plane[class_id]))
        logger.info("wrote %s", path)
    return EXIT_OK


def cmd_synth(args, file_cfg: Dict) -> int:
    """Seeded synthetic scenes as scene JSON files plus one dataset.json"""
    spec = resolve_section(SynthSpec(), file_cfg.get("synth"), _synth_overrides(args))
    scenes = {}
    for index in range(args.count):
        image_id = f"scene_{index:04d}"
        scenes[image_id] = synth_scene(args.seed, spec, index)
        _write(os.path.join(args.out, image_id + ".json"), dump_scene(scenes[image_id]))
    _write(os.path.join(args.out, "dataset.json"), dump_dataset(scenes, spec.names))
    echo = {"seed": args.seed, "count": args.count, "config": {"synth": spec.to_dict()}}
    _write(os.path.join(args.out, "synth.json"), report_to_json(echo))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=APP_NAME,
        description=APP_TITLE,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes: 0 success, 1 acceptance-threshold failure, 2 input error.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    parser.add_argument("--config", help="JSON config file (sections: encoder, decoder, evaluation, synth)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a scene into target planes")
    p.add_argument("scene", help="DOTA .txt or scene .json")
    p.add_argument("--out", required=True, help="output directory for planes")
    p.add_argument("--classes", choices=sorted(CLASS_TABLES), default="dota", help="class table for DOTA text")
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode planes into detections")
    p.add_argument("planes", help="directory written by encode")
    p.add_argument("--out", help="output file (stdout when omitted)")
    p.add_argument("--format", choices=["jsonl", "dota"], default="jsonl")
    p.add_argument("--image-id", help="image id stamped on each JSON line")
    p.add_argument("--classes", choices=sorted(CLASS_TABLES), default="dota",
                   help="class table when the planes carry no class names")
    p.add_argument("--unletterbox", type=int, nargs=2, metavar=("W", "H"),
                   help="map detections back to an original W×H image")
    p.add_argument("--target", type=int, nargs=2, metavar=("W", "H"), default=list(LETTERBOX_TARGET),
                   help="letterbox canvas size (default 800 800)")
    _add_decoder_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("roundtrip", help="synthetic encode → decode round trip")
    _add_synth_flags(p)
    _add_encoder_flags(p)
    _add_decoder_flags(p)
    p.add_argument("--ablation", choices=[a.value for a in Ablation], help="side-by-side ablation report")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--out", help="JSON report path (stdout when omitted)")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("eval", help="per-class AP / mAP of detections against ground truth")
    p.add_argument("detections", help="detections JSON lines with image_id")
    p.add_argument("gt", help="dataset JSON")
    p.add_argument("--iou-threshold", type=float, help="match IoU (default 0.5)")
    p.add_argument("--ap-method", choices=[m.value for m in ApMethod], help="AP interpolation")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--table", help="plain-text table path, one column per class")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tile", help="cut a scene into overlapping tiles")
    p.add_argument("scene", help="DOTA .txt or scene .json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", choices=sorted(CLASS_TABLES), default="dota")
    p.add_argument("--tile-size", type=int, default=1024)
    p.add_argument("--gap", type=int, default=200)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("render", help="heatmap planes as PGM images")
    p.add_argument("planes", help="directory written by encode")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plane", choices=["center_hm", "vertex_hm"], default="center_hm")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="write seeded synthetic scenes")
    _add_synth_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    return parser


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command line; errors become exit codes"""
    try:
        file_cfg = load_config_file(args.config)
        return args.func(args, file_cfg)
    except (DetectorCoreError, OSError, json.JSONDecodeError, UnicodeDecodeError, MemoryError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    return run(build_parser().parse_args(argv))
