"""Target encoding: solar-corona / Gaussian centre heatmaps, vertex heatmap, size, offset & direction planes"""
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from modules.geometry import (
    ObbSpec,
    Point2,
    RotatedQuad,
    quad_to_obb,
    relative_direction,
)
from src.config import DOWN_RATIO, GAUSSIAN_SIGMA_RULE, MU, VALUE_FLOOR, VERTEX_SHRINK, config_to_dict
from utils.calculations import output_grid_shape, split_grid_offset
from utils.errors import ConfigError, DegenerateBox, Diagnostic

logger = logging.getLogger(__name__)

# Inside-rectangle tolerance in output-grid units
SUPPORT_TOL = 1e-9


class HeatmapKind(str, enum.Enum):
    SOLAR_CORONA = "solar_corona"
    GAUSSIAN = "gaussian"


class Denominator(str, enum.Enum):
    LINEAR = "linear"      # μ·h, μ·w (literal)
    SQUARED = "squared"    # μ·h², μ·w² (experimental)


@dataclass(frozen=True)
class EncoderConfig:
    down_ratio: int = DOWN_RATIO
    mu: float = MU
    num_classes: int = 1
    heatmap_kind: HeatmapKind = HeatmapKind.SOLAR_CORONA
    # Gaussian baseline: σ = (short side in cells + 1) / rule, unless gaussian_sigma is set
    gaussian_sigma_rule: float = GAUSSIAN_SIGMA_RULE
    gaussian_sigma: float = 0.0
    vertex_shrink: float = VERTEX_SHRINK
    value_floor: float = VALUE_FLOOR
    denominator: Denominator = Denominator.LINEAR

    def __post_init__(self):
        if self.down_ratio < 1:
            raise ConfigError(f"down_ratio must be ≥ 1, got {self.down_ratio}")
        if not self.mu > 0:
            raise ConfigError(f"mu must be > 0, got {self.mu}")
        if not 0 < self.vertex_shrink <= 1:
            raise ConfigError(f"vertex_shrink must be in (0, 1], got {self.vertex_shrink}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be ≥ 1, got {self.num_classes}")
        if not self.gaussian_sigma_rule > 0 or self.gaussian_sigma < 0:
            raise ConfigError("gaussian sigma parameters must be positive")
        if not 0 <= self.value_floor < 1:
            raise ConfigError(f"value_floor must be in [0, 1), got {self.value_floor}")
        object.__setattr__(self, "heatmap_kind", HeatmapKind(self.heatmap_kind))
        object.__setattr__(self, "denominator", Denominator(self.denominator))

    def to_dict(self) -> Dict:
        return config_to_dict(self)


@dataclass(frozen=True)
class Scene:
    image_width: int
    image_height: int
    annotations: Tuple[RotatedQuad, ...] = ()
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError(f"image size must be positive, got {self.image_width}×{self.image_height}")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return max((q.class_id for q in self.annotations), default=0) + 1


@dataclass(frozen=True, eq=False)
class TargetMaps:
    """
    The encoded planes, channel-first, float32:
      center_hm, vertex_hm  (C, H/d, W/d)
      size_map              (2, H/d, W/d)  [w, h] in output cells
      offset_map            (4, H/d, W/d)  [centre dx, dy, vertex dx, dy]
      direction_map         (1, H/d, W/d)  degrees
      pos_mask              (2, C, H/d, W/d) [centre peaks, vertex peaks]
    """
    center_hm: np.ndarray
    vertex_hm: np.ndarray
    size_map: np.ndarray
    offset_map: np.ndarray
    direction_map: np.ndarray
    pos_mask: np.ndarray
    image_width: int
    image_height: int
    down_ratio: int
    config: Dict = field(default_factory=dict)
    diagnostics: Tuple[Diagnostic, ...] = ()

    def __post_init__(self):
        for name in ("center_hm", "vertex_hm", "size_map", "offset_map", "direction_map", "pos_mask"):
            plane = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            plane.setflags(write=False)
            object.__setattr__(self, name, plane)
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))

    @property
    def num_classes(self) -> int:
        return self.center_hm.shape[0]

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.center_hm.shape[1], self.center_hm.shape[2]

    def planes(self) -> Dict[str, np.ndarray]:
        return {
            "center_hm": self.center_hm,
            "vertex_hm": self.vertex_hm,
            "size_map": self.size_map,
            "offset_map": self.offset_map,
            "direction_map": self.direction_map,
            "pos_mask": self.pos_mask,
        }

    def replace(self, **planes) -> "TargetMaps":
        """Copy with some planes swapped (used to build simulated predictions)"""
        values = dict(self.planes())
        values.update(planes)
        return TargetMaps(
            image_width=self.image_width,
            image_height=self.image_height,
            down_ratio=self.down_ratio,
            config=dict(self.config),
            diagnostics=self.diagnostics,
            **values,
        )


class PeakTruth(NamedTuple):
    cell: Tuple[int, int]    # (x, y) = (col, row)
    class_id: int
    kind: str                # "center" | "vertex"


def _denominator(length, mu: float, mode: Denominator):
    return mu * length * length if mode == Denominator.SQUARED else mu * length


def _inside_rectangle(dx, dy, axis: Tuple[float, float], h: float, w: float):
    """Point-in-rotated-rectangle test on offsets from the rectangle centre"""
    ux, uy = axis
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    return (np.abs(along) <= 0.5 * h + SUPPORT_TOL) & (np.abs(across) <= 0.5 * w + SUPPORT_TOL)


def sch_kernel(dist_sq, h: float, w: float, mu: float, denominator: Denominator = Denominator.LINEAR):
    """½(e^{−D²/(μh)} + e^{−D²/(μw)}), no support mask"""
    dist_sq = np.asarray(dist_sq, dtype=np.float64)
    long_term = np.exp(-dist_sq / _denominator(h, mu, denominator))
    short_term = np.exp(-dist_sq / _denominator(w, mu, denominator))
    return 0.5 * (long_term + short_term)


def sch_center_value(p: Point2, obb: ObbSpec, mu: float = MU,
                     denominator: Denominator = Denominator.LINEAR) -> float:
    """
    Solar-corona centre confidence at p (p and obb in the same units).

    Inside the instance rectangle T: ½(e^{−D²/(μh)} + e^{−D²/(μw)}), D = |p − c|;
    outside T: 0. h is the long side, w the short side.
    """
    dx = p.x - obb.center.x
    dy = p.y - obb.center.y
    if not _inside_rectangle(dx, dy, obb.axis, obb.h, obb.w):
        return 0.0
    return float(sch_kernel(dx * dx + dy * dy, obb.h, obb.w, mu, denominator))


def vertex_value(p: Point2, vertex: Point2, h: float, mu: float = MU,
                 value_floor: float = VALUE_FLOOR,
                 denominator: Denominator = Denominator.LINEAR) -> float:
    """Vertex confidence e^{−|p − t|²/(μh)}, truncated to 0 below value_floor"""
    if not h > 0:
        raise DegenerateBox(f"long side must be positive, got {h}")
    dist_sq = (p.x - vertex.x) ** 2 + (p.y - vertex.y) ** 2
    value = math.exp(-dist_sq / _denominator(h, mu, denominator))
    return value if value >= value_floor else 0.0


def gaussian_value(p: Point2, center: Point2, sigma: float) -> float:
    """Isotropic Gaussian bump exp(−|p − c|² / 2σ²)"""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    dist_sq = (p.x - center.x) ** 2 + (p.y - center.y) ** 2
    return math.exp(-dist_sq / (2.0 * sigma * sigma))


def gaussian_sigma_for(w_cells: float, cfg: EncoderConfig) -> float:
    """σ for the Gaussian baseline: fixed value, or (short side + 1) / rule"""
    if cfg.gaussian_sigma > 0:
        return cfg.gaussian_sigma
    return (w_cells + 1.0) / cfg.gaussian_sigma_rule


def _window(cx: int, cy: int, rx: float, ry: float, rows: int, cols: int):
    """Integer cell window around (cx, cy), clipped to the grid"""
    x0 = max(cx - int(math.ceil(rx)), 0)
    x1 = min(cx + int(math.ceil(rx)) + 1, cols)
    y0 = max(cy - int(math.ceil(ry)), 0)
    y1 = min(cy + int(math.ceil(ry)) + 1, rows)
    return x0, x1, y0, y1


def draw_center(plane: np.ndarray, obb_grid: ObbSpec, peak: Tuple[int, int],
                cfg: EncoderConfig, amplitude: float = 1.0) -> None:
    """
    Max-merge one instance's centre kernel into a (rows, cols) plane, in place.

    The kernel is centred on the integer peak cell so the peak holds exactly
    `amplitude`; the solar-corona support is the instance rectangle moved onto
    that cell.
    """
    rows, cols = plane.shape
    px, py = peak
    floor_value = cfg.value_floor

    if cfg.heatmap_kind == HeatmapKind.GAUSSIAN:
        sigma = gaussian_sigma_for(obb_grid.w, cfg)
        radius = sigma * math.sqrt(2.0 * math.log(1.0 / floor_value)) if floor_value > 0 else 3.0 * sigma
        x0, x1, y0, y1 = _window(px, py, radius, radius, rows, cols)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        dist_sq = (xs - px) ** 2 + (ys - py) ** 2
        values = np.exp(-dist_sq / (2.0 * sigma * sigma))
    else:
        ux, uy = obb_grid.axis
        ext_x = abs(ux) * 0.5 * obb_grid.h + abs(uy) * 0.5 * obb_grid.w
        ext_y = abs(uy) * 0.5 * obb_grid.h + abs(ux) * 0.5 * obb_grid.w
        x0, x1, y0, y1 = _window(px, py, ext_x, ext_y, rows, cols)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        dx = (xs - px).astype(np.float64)
        dy = (ys - py).astype(np.float64)
        values = sch_kernel(dx * dx + dy * dy, obb_grid.h, obb_grid.w, cfg.mu, cfg.denominator)
        values = np.where(_inside_rectangle(dx, dy, (ux, uy), obb_grid.h, obb_grid.w), values, 0.0)

    values = np.where(values >= floor_value, values * amplitude, 0.0)
    region = plane[y0:y1, x0:x1]
    np.maximum(region, values, out=region)


def draw_vertex(plane: np.ndarray, peak: Tuple[int, int], h_cells: float, cfg: EncoderConfig) -> None:
    """Max-merge a vertex kernel e^{−D²/(μh)} centred on the peak cell, full-plane support truncated at value_floor"""
    rows, cols = plane.shape
    px, py = peak
    denom = _denominator(h_cells, cfg.mu, cfg.denominator)
    floor_value = cfg.value_floor
    radius = math.sqrt(denom * math.log(1.0 / floor_value)) if floor_value > 0 else 4.0 * math.sqrt(denom)

    x0, x1, y0, y1 = _window(px, py, radius, radius, rows, cols)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dist_sq = (xs - px) ** 2 + (ys - py) ** 2
    values = np.exp(-dist_sq / denom)
    values = np.where(values >= floor_value, values, 0.0)
    region = plane[y0:y1, x0:x1]
    np.maximum(region, values, out=region)


def shrink_vertex(obb: ObbSpec, shrink: float) -> Point2:
    """Training vertex t′ = c + shrink·(t − c)"""
    return Point2(
        obb.center.x + shrink * (obb.vertex.x - obb.center.x),
        obb.center.y + shrink * (obb.vertex.y - obb.center.y),
    )


def _outside_image(quad: RotatedQuad, width: int, height: int) -> bool:
    pts = quad.as_array()
    return bool(
        np.any(pts[:, 0] < 0) or np.any(pts[:, 0] > width)
        or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] > height)
    )


class EncodableInstance(NamedTuple):
    index: int
    class_id: int
    obb: ObbSpec           # pixels
    peak: Tuple[int, int]  # (x, y) output cell


def encodable_instances(scene: Scene, cfg: EncoderConfig) -> Tuple[List[EncodableInstance], List[Diagnostic]]:
    """Annotations that get a centre peak, plus the diagnostics for the rest"""
    d = cfg.down_ratio
    rows, cols = output_grid_shape(scene.image_width, scene.image_height, d)
    num_classes = cfg.num_classes
    diagnostics: List[Diagnostic] = []

    encoded = []
    for index, quad in enumerate(scene.annotations):
        if not 0 <= quad.class_id < num_classes:
            raise ConfigError(f"annotation {index}: class id {quad.class_id} outside [0, {num_classes})")
        try:
            obb = quad_to_obb(quad)
        except DegenerateBox as exc:
            diagnostics.append(Diagnostic("DegenerateBox", str(exc), index=index))
            logger.warning("annotation %d skipped: %s", index, exc)
            continue

        if _outside_image(quad, scene.image_width, scene.image_height):
            diagnostics.append(Diagnostic("ClampedAnnotation", "annotation extends beyond the image", index=index))
            logger.warning("annotation %d extends beyond the image", index)

        cx, _ = split_grid_offset(obb.center.x, d)
        cy, _ = split_grid_offset(obb.center.y, d)
        if not (0 <= cx < cols and 0 <= cy < rows):
            diagnostics.append(Diagnostic("CenterOutsideGrid", "centre falls outside the output grid", index=index))
            logger.warning("annotation %d skipped: centre outside grid", index)
            continue

        if obb.w / d < 1.0 or obb.h / d < 1.0:
            diagnostics.append(Diagnostic("SubCellInstance", "instance smaller than one output cell", index=index))
            logger.warning("annotation %d is smaller than one output cell", index)

        encoded.append(EncodableInstance(index, quad.class_id, obb, (cx, cy)))

    return encoded, diagnostics


def encode_scene(scene: Scene, cfg: EncoderConfig) -> TargetMaps:
    """
    Encode ground truth into the five training planes (+ peak mask).

    Per instance: peak cell = floor(centre / d); centre heatmap max-merged in
    its class plane; vertex heatmap around the shrunk vertex; size, offset and
    direction written at the peak cell. At a shared peak cell the larger
    instance (then the lower annotation index) owns the regression values.
    """
    d = cfg.down_ratio
    rows, cols = output_grid_shape(scene.image_width, scene.image_height, d)
    num_classes = cfg.num_classes

    center_hm = np.zeros((num_classes, rows, cols), dtype=np.float64)
    vertex_hm = np.zeros((num_classes, rows, cols), dtype=np.float64)
    size_map = np.zeros((2, rows, cols), dtype=np.float64)
    offset_map = np.zeros((4, rows, cols), dtype=np.float64)
    direction_map = np.zeros((1, rows, cols), dtype=np.float64)
    pos_mask = np.zeros((2, num_classes, rows, cols), dtype=np.float64)

    encoded, diagnostics = encodable_instances(scene, cfg)

    # Heatmaps: per-cell max, order independent
    for index, class_id, obb, peak in encoded:
        obb_grid = obb.scaled(1.0 / d).recentered(Point2(*peak))
        draw_center(center_hm[class_id], obb_grid, peak, cfg)
        pos_mask[0, class_id, peak[1], peak[0]] = 1.0

        t_shrunk = shrink_vertex(obb, cfg.vertex_shrink)
        vx, _ = split_grid_offset(t_shrunk.x, d)
        vy, _ = split_grid_offset(t_shrunk.y, d)
        if 0 <= vx < cols and 0 <= vy < rows:
            draw_vertex(vertex_hm[class_id], (vx, vy), obb.h / d, cfg)
            pos_mask[1, class_id, vy, vx] = 1.0

    # Regression planes: larger area first, then lower index
    owners: Dict[Tuple[int, int], int] = {}
    for index, class_id, obb, peak in sorted(encoded, key=lambda item: (-item.obb.area, item.index)):
        if peak in owners:
            diagnostics.append(Diagnostic(
                "PeakCollision",
                f"peak cell {peak} already owned by annotation {owners[peak]}",
                index=index,
                extra={"cell": list(peak), "owner": owners[peak]},
            ))
            logger.warning("annotation %d collides with %d at cell %s", index, owners[peak], peak)
            continue
        owners[peak] = index

        px, py = peak
        t_shrunk = shrink_vertex(obb, cfg.vertex_shrink)
        _, off_cx = split_grid_offset(obb.center.x, d)
        _, off_cy = split_grid_offset(obb.center.y, d)
        _, off_vx = split_grid_offset(t_shrunk.x, d)
        _, off_vy = split_grid_offset(t_shrunk.y, d)

        size_map[:, py, px] = (obb.w / d, obb.h / d)
        offset_map[:, py, px] = (off_cx, off_cy, off_vx, off_vy)
        direction_map[0, py, px] = relative_direction(obb.center, t_shrunk)

    return TargetMaps(
        center_hm=center_hm,
        vertex_hm=vertex_hm,
        size_map=size_map,
        offset_map=offset_map,
        direction_map=direction_map,
        pos_mask=pos_mask,
        image_width=scene.image_width,
        image_height=scene.image_height,
        down_ratio=d,
        config=cfg.to_dict(),
        diagnostics=diagnostics,
    )


def heatmap_peak_truth(maps: TargetMaps) -> List[PeakTruth]:
    """Every encoded peak cell (ρ′ = 1), centre peaks first, then by class, row, col"""
    peaks = []
    for kind_index, kind in enumerate(("center", "vertex")):
        class_ids, ys, xs = np.nonzero(maps.pos_mask[kind_index])
        for class_id, y, x in zip(class_ids, ys, xs):
            peaks.append(PeakTruth((int(x), int(y)), int(class_id), kind))
    return sorted(peaks, key=lambda p: (p.kind != "center", p.class_id, p.cell[1], p.cell[0]))


def peak_collisions(maps: TargetMaps) -> List[Diagnostic]:
    return [diag for diag in maps.diagnostics if diag.kind == "PeakCollision"]
