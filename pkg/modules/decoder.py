"""Inference-side assembly: peak extraction, vertex–centre matching, box rebuild, rotated NMS & tile merging"""
import enum
import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from modules.geometry import (
    ObbSpec,
    Point2,
    RotatedQuad,
    direction_vector,
    may_overlap,
    obb_to_quad,
    quad_iou,
    relative_direction,
)
from src.config import (
    DOWN_RATIO,
    MATCH_RADIUS_FACTOR,
    MIN_MATCH_RADIUS,
    NMS_IOU,
    SCORE_THRESHOLD,
    TOP_K,
    VERTEX_SHRINK,
    config_to_dict,
)
from utils.errors import ConfigError, DegenerateBox, FormatError

logger = logging.getLogger(__name__)


class DecodeMode(str, enum.Enum):
    ANGLE_ONLY = "angle_only"
    KEYPOINT_MATCH = "keypoint_match"


class Provenance(str, enum.Enum):
    MATCHED_VERTEX = "matched_vertex"
    DIRECTION_FALLBACK = "direction_fallback"


@dataclass(frozen=True)
class DecodeConfig:
    top_k: int = TOP_K
    score_threshold: float = SCORE_THRESHOLD
    match_radius_factor: float = MATCH_RADIUS_FACTOR
    min_match_radius: float = MIN_MATCH_RADIUS
    mode: DecodeMode = DecodeMode.KEYPOINT_MATCH
    nms_iou: float = NMS_IOU
    single_image_nms: bool = False
    down_ratio: int = DOWN_RATIO
    vertex_shrink: float = VERTEX_SHRINK

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be ≥ 1, got {self.top_k}")
        if not 0 < self.score_threshold < 1:
            raise ConfigError(f"score_threshold must be in (0, 1), got {self.score_threshold}")
        if not 0 <= self.nms_iou <= 1:
            raise ConfigError(f"nms_iou must be in [0, 1], got {self.nms_iou}")
        if self.match_radius_factor < 0 or self.min_match_radius < 0:
            raise ConfigError("match radius parameters must be ≥ 0")
        if self.down_ratio < 1 or not 0 < self.vertex_shrink <= 1:
            raise ConfigError("down_ratio must be ≥ 1 and vertex_shrink in (0, 1]")
        object.__setattr__(self, "mode", DecodeMode(self.mode))

    def to_dict(self) -> Dict:
        return config_to_dict(self)


@dataclass(frozen=True)
class Detection:
    quad: RotatedQuad
    class_id: int
    score: float
    provenance: Provenance = Provenance.DIRECTION_FALLBACK

    @property
    def center(self) -> Point2:
        return self.quad.center

    def sort_key(self) -> Tuple:
        """Descending score, then class, centre x, centre y"""
        c = self.center
        return (-self.score, self.class_id, c.x, c.y)

    def translated(self, dx: float, dy: float) -> "Detection":
        return Detection(self.quad.translated(dx, dy), self.class_id, self.score, self.provenance)

    def to_dict(self, class_names: Sequence[str] = ()) -> Dict:
        name = class_names[self.class_id] if self.class_id < len(class_names) else self.class_id
        return {
            "class": name,
            "score": self.score,
            "corners": [[c.x, c.y] for c in self.quad.corners],
            "provenance": self.provenance.value,
        }


class Peak(NamedTuple):
    cell: Tuple[int, int]    # (x, y) = (col, row)
    class_id: int
    score: float


def local_maxima(plane: np.ndarray) -> np.ndarray:
    """
    Boolean mask of 3×3 local maxima for a (C, rows, cols) or (rows, cols) plane.

    A cell must be strictly greater than neighbours that precede it in (row, col)
    order and not smaller than those that follow, so a plateau yields exactly
    its lexicographically first cell.
    """
    values = np.asarray(plane, dtype=np.float64)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[None]
    channels, rows, cols = values.shape
    padded = np.full((channels, rows + 2, cols + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = values

    keep = np.ones(values.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neighbour = padded[:, 1 + dy:1 + dy + rows, 1 + dx:1 + dx + cols]
            if (dy, dx) < (0, 0):
                keep &= values > neighbour
            else:
                keep &= values >= neighbour
    return keep[0] if squeeze else keep


def extract_peaks(plane: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> List[Peak]:
    """Local maxima sorted by score descending (ties: class, row, col), cut to top_k, then thresholded"""
    values = np.asarray(plane, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    mask = local_maxima(values)
    class_ids, ys, xs = np.nonzero(mask)
    scores = values[class_ids, ys, xs]

    # lexsort: last key is primary
    order = np.lexsort((xs, ys, class_ids, -scores))[:cfg.top_k]
    peaks = []
    for i in order:
        if scores[i] < cfg.score_threshold:
            continue
        peaks.append(Peak((int(xs[i]), int(ys[i])), int(class_ids[i]), float(scores[i])))
    return peaks


def _check_shapes(maps) -> None:
    num_classes, rows, cols = maps.center_hm.shape
    expected = {
        "vertex_hm": (num_classes, rows, cols),
        "size_map": (2, rows, cols),
        "offset_map": (4, rows, cols),
        "direction_map": (1, rows, cols),
    }
    for name, shape in expected.items():
        actual = getattr(maps, name).shape
        if actual != shape:
            raise ConfigError(f"{name} has shape {actual}, expected {shape}")


def _match_vertex(expected: Tuple[float, float], radius: float, candidates: List[Peak]) -> Optional[Peak]:
    """Closest vertex peak to the expected grid position within radius (ties: higher score, then cell)"""
    best = None
    best_key = None
    for peak in candidates:
        dist = math.hypot(peak.cell[0] - expected[0], peak.cell[1] - expected[1])
        if dist > radius:
            continue
        key = (dist, -peak.score, peak.cell[1], peak.cell[0])
        if best_key is None or key < best_key:
            best, best_key = peak, key
    return best


def decode(maps, cfg: DecodeConfig = DecodeConfig()) -> List[Detection]:
    """
    Turn predicted planes into oriented detections.

    For each centre peak: sub-pixel centre (cell + offset)·d, size (w, h) and
    direction θ read at the peak. KeypointMatch looks for a same-class vertex
    peak near c + shrink·(h/2)·(cos θ, sin θ); a hit fixes the long axis from
    the un-shrunk vertex, otherwise θ is used (DirectionFallback).
    """
    _check_shapes(maps)
    d = cfg.down_ratio
    size_map = np.asarray(maps.size_map, dtype=np.float64)
    offset_map = np.asarray(maps.offset_map, dtype=np.float64)
    direction_map = np.asarray(maps.direction_map, dtype=np.float64)

    center_peaks = extract_peaks(maps.center_hm, cfg)
    if not center_peaks:
        return []

    vertex_by_class: Dict[int, List[Peak]] = {}
    if cfg.mode == DecodeMode.KEYPOINT_MATCH:
        for peak in extract_peaks(maps.vertex_hm, cfg):
            vertex_by_class.setdefault(peak.class_id, []).append(peak)

    detections = []
    matched = 0
    for peak in center_peaks:
        col, row = peak.cell
        w_cells, h_cells = size_map[0, row, col], size_map[1, row, col]
        h_cells, w_cells = max(h_cells, w_cells), min(h_cells, w_cells)
        if not w_cells > 0:
            logger.debug("centre peak %s has no size; skipped", peak.cell)
            continue

        center = Point2((col + offset_map[0, row, col]) * d, (row + offset_map[1, row, col]) * d)
        theta = float(direction_map[0, row, col])
        h, w = h_cells * d, w_cells * d

        ux, uy = direction_vector(theta)
        provenance = Provenance.DIRECTION_FALLBACK
        if cfg.mode == DecodeMode.KEYPOINT_MATCH:
            reach = cfg.vertex_shrink * 0.5 * h
            expected = ((center.x + reach * ux) / d, (center.y + reach * uy) / d)
            radius = max(cfg.min_match_radius, cfg.match_radius_factor * h_cells)
            hit = _match_vertex(expected, radius, vertex_by_class.get(peak.class_id, []))
            if hit is not None:
                shrunk = Point2(
                    (hit.cell[0] + offset_map[2, row, col]) * d,
                    (hit.cell[1] + offset_map[3, row, col]) * d,
                )
                vx = center.x + (shrunk.x - center.x) / cfg.vertex_shrink
                vy = center.y + (shrunk.y - center.y) / cfg.vertex_shrink
                length = math.hypot(vx - center.x, vy - center.y)
                if length > 0:
                    ux, uy = (vx - center.x) / length, (vy - center.y) / length
                    provenance = Provenance.MATCHED_VERTEX
                    matched += 1

        vertex = Point2(center.x + 0.5 * h * ux, center.y + 0.5 * h * uy)
        try:
            obb = ObbSpec(center, vertex, h, w, relative_direction(center, vertex))
            quad = obb_to_quad(obb, class_id=peak.class_id)
        except DegenerateBox as exc:
            logger.debug("centre peak %s gave a degenerate box: %s", peak.cell, exc)
            continue
        detections.append(Detection(quad, peak.class_id, peak.score, provenance))

    logger.debug("decoded %d detections (%d matched vertices)", len(detections), matched)
    if cfg.single_image_nms:
        detections = rotated_nms(detections, cfg.nms_iou)
    return detections


def rotated_nms(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy per-class suppression under rotated IoU, in Detection.sort_key order"""
    ordered = sorted(detections, key=lambda det: det.sort_key())
    keep: List[Detection] = []
    for det in ordered:
        suppressed = False
        for kept in keep:
            if (kept.class_id == det.class_id and may_overlap(kept.quad, det.quad)
                    and quad_iou(kept.quad, det.quad) > iou_threshold):
                suppressed = True
                break
        if not suppressed:
            keep.append(det)
    return keep


def merge_tiles(per_tile: Sequence[Tuple[Tuple[float, float], Sequence[Detection]]],
                cfg: DecodeConfig = DecodeConfig()) -> List[Detection]:
    """Shift tile detections by their tile origin, then rotated NMS at cfg.nms_iou"""
    pooled = []
    for (origin_x, origin_y), detections in per_tile:
        pooled.extend(det.translated(origin_x, origin_y) for det in detections)
    return rotated_nms(pooled, cfg.nms_iou)


def unletterbox(detections: Sequence[Detection], transform) -> List[Detection]:
    """Map detections from the letterboxed frame back to the original image frame"""
    inverse = 1.0 / transform.scale
    return [
        Detection(
            det.quad.transformed(inverse, -transform.offset_x * inverse, -transform.offset_y * inverse),
            det.class_id,
            det.score,
            det.provenance,
        )
        for det in detections
    ]


def format_dota_detections(detections: Sequence[Detection], class_names: Sequence[str]) -> str:
    """One line per detection: 8 coordinates, class name, score"""
    lines = []
    for det in detections:
        coords = " ".join(f"{v:.3f}" for v in det.quad.flat())
        name = class_names[det.class_id] if det.class_id < len(class_names) else str(det.class_id)
        lines.append(f"{coords} {name} {det.score:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


def detection_from_dict(item: Dict, class_names: Sequence[str] = ()) -> Detection:
    label = item["class"]
    if isinstance(label, str):
        if label not in class_names:
            raise FormatError(f"unknown class '{label}'")
        class_id = list(class_names).index(label)
    else:
        class_id = int(label)
    quad = RotatedQuad.from_coords(item["corners"], class_id)
    provenance = Provenance(item.get("provenance", Provenance.DIRECTION_FALLBACK.value))
    return Detection(quad, class_id, float(item["score"]), provenance)


def dump_detections_jsonl(detections: Sequence[Detection], class_names: Sequence[str] = (),
                          image_id: Optional[str] = None) -> str:
    """One JSON object per line, in Detection.sort_key order"""
    lines = []
    for det in sorted(detections, key=lambda d: d.sort_key()):
        record = det.to_dict(class_names)
        if image_id is not None:
            record["image_id"] = image_id
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def load_detections_jsonl(text: str, class_names: Sequence[str] = ()) -> Dict[str, List[Detection]]:
    """Detections grouped by their "image_id" field ("" when absent)"""
    by_image: Dict[str, List[Detection]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
            det = detection_from_dict(item, class_names)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, DegenerateBox) as exc:
            raise FormatError(f"detections line {line_no}: {exc}") from exc
        by_image.setdefault(str(item.get("image_id", "")), []).append(det)
    return by_image
