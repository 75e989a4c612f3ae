"""Annotation parsing (DOTA text), scene / dataset JSON, letterbox, tiling, synthetic scenes, plane files"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.geometry import (
    AREA_EPS,
    ObbSpec,
    Point2,
    RotatedQuad,
    area_inside_rect,
    direction_vector,
    is_convex,
    may_overlap,
    obb_to_quad,
    quad_iou,
)
from modules.target_codec import Scene, TargetMaps
from src.config import LETTERBOX_TARGET, MAX_INFERRED_IMAGE_SIDE, TILE_GAP, TILE_SIZE, config_to_dict
from utils.calculations import write_atomic
from utils.errors import ConfigError, DegenerateBox, Diagnostic, FormatError, PlacementError
from utils.lookup_tables import (
    DOTA_CLASSES,
    DOTA_HEADER_PREFIXES,
    OFFSET_CHANNELS,
    PLANE_NAMES,
    PLANES_SCHEMA_VERSION,
    SCENE_SCHEMA_VERSION,
    SIZE_CHANNELS,
)

logger = logging.getLogger(__name__)

# Fraction of a quad's area that must stay inside the image / tile
MIN_INSIDE_FRACTION = 0.5

PLANES_SIDECAR = "planes.json"
PLANE_SUFFIX = ".f32"
PLANE_DTYPE = "<f4"


# ---------------------------------------------------------------------------
# DOTA text
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParseResult:
    scene: Scene
    diagnostics: Tuple[Diagnostic, ...] = ()

    @property
    def ok(self) -> bool:
        return not any(d.kind in ("ParseError", "UnknownClass") for d in self.diagnostics)


def _parse_float(token: str) -> Optional[float]:
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def clamp_to_image(quad: RotatedQuad, width: float, height: float) -> Tuple[bool, float]:
    """(keep, inside fraction) under the ≥ 50 % area rule"""
    area = quad.area
    if area <= 0:
        return False, 0.0
    fraction = area_inside_rect(quad, width, height) / area
    return fraction >= MIN_INSIDE_FRACTION, fraction


def parse_dota(text: Union[str, bytes], class_table: Sequence[str] = DOTA_CLASSES,
               image_size: Optional[Tuple[int, int]] = None) -> ParseResult:
    """
    Parse DOTA annotation text: "x1 y1 x2 y2 x3 y3 x4 y4 class [difficult]" per line.

    Header lines (imagesource:, gsd:) and blank lines are skipped. Every other
    line yields an annotation or a diagnostic, never an exception. Without
    image_size the image is taken as the bounding extent of all corners, and
    a corner beyond MAX_INFERRED_IMAGE_SIDE is a ParseError.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    class_ids = {name: i for i, name in enumerate(class_table)}

    diagnostics: List[Diagnostic] = []
    candidates: List[Tuple[int, RotatedQuad]] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.lower().startswith(DOTA_HEADER_PREFIXES):
            continue

        tokens = line.split()
        if len(tokens) not in (9, 10):
            diagnostics.append(Diagnostic("ParseError", f"expected 9 or 10 fields, got {len(tokens)}", line=line_no))
            continue

        coords = [_parse_float(tok) for tok in tokens[:8]]
        if any(v is None for v in coords):
            bad = tokens[coords.index(None)]
            diagnostics.append(Diagnostic("ParseError", f"non-numeric coordinate '{bad}'", line=line_no))
            continue

        name = tokens[8]
        if name not in class_ids:
            diagnostics.append(Diagnostic("UnknownClass", f"unknown class '{name}'", line=line_no))
            continue

        difficult = False
        if len(tokens) == 10:
            if tokens[9] not in ("0", "1"):
                diagnostics.append(Diagnostic("ParseError", f"difficulty flag '{tokens[9]}' is not 0/1", line=line_no))
                continue
            difficult = tokens[9] == "1"

        if image_size is None and max(coords) > MAX_INFERRED_IMAGE_SIDE:
            diagnostics.append(Diagnostic(
                "ParseError", f"coordinate {max(coords):g} exceeds {MAX_INFERRED_IMAGE_SIDE} without an image size",
                line=line_no))
            continue

        quad = RotatedQuad.from_coords(coords, class_ids[name], difficult)
        if quad.area <= AREA_EPS or not is_convex(quad.as_array()):
            diagnostics.append(Diagnostic("DegenerateBox", "zero-area or non-convex quad", line=line_no))
            continue
        candidates.append((line_no, quad))

    if image_size is None:
        xs = [c.x for _, q in candidates for c in q.corners]
        ys = [c.y for _, q in candidates for c in q.corners]
        width = max(int(math.ceil(max(xs, default=1.0))), 1)
        height = max(int(math.ceil(max(ys, default=1.0))), 1)
    else:
        width, height = image_size

    annotations = []
    for line_no, quad in candidates:
        keep, fraction = clamp_to_image(quad, width, height)
        if not keep:
            diagnostics.append(Diagnostic(
                "DroppedAnnotation", f"only {fraction:.1%} of the quad lies in the image", line=line_no))
            continue
        if fraction < 1.0 - 1e-12:
            diagnostics.append(Diagnostic(
                "ClampedAnnotation", f"{fraction:.1%} of the quad lies in the image", line=line_no))
        annotations.append(quad)

    for diag in diagnostics:
        logger.debug("line %s: %s %s", diag.line, diag.kind, diag.message)

    scene = Scene(width, height, tuple(annotations), tuple(class_table))
    return ParseResult(scene, tuple(diagnostics))


def format_dota(scene: Scene) -> str:
    """Scene → DOTA text (difficult flag always written)"""
    names = scene.class_names
    lines = []
    for quad in scene.annotations:
        coords = " ".join(f"{v:.3f}" for v in quad.flat())
        name = names[quad.class_id] if quad.class_id < len(names) else str(quad.class_id)
        lines.append(f"{coords} {name} {int(quad.difficult)}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Scene / dataset JSON
# ---------------------------------------------------------------------------

def _annotation_to_dict(quad: RotatedQuad, class_names: Sequence[str]) -> Dict:
    name = class_names[quad.class_id] if quad.class_id < len(class_names) else quad.class_id
    return {
        "class": name,
        "corners": [[c.x, c.y] for c in quad.corners],
        "difficult": quad.difficult,
    }


def _annotation_from_dict(item: Dict, class_ids: Dict[str, int]) -> RotatedQuad:
    label = item["class"]
    if isinstance(label, str):
        if label not in class_ids:
            raise FormatError(f"unknown class '{label}'")
        class_id = class_ids[label]
    else:
        class_id = int(label)
    return RotatedQuad.from_coords(item["corners"], class_id, bool(item.get("difficult", False)))


def scene_to_dict(scene: Scene) -> Dict:
    return {
        "schema_version": SCENE_SCHEMA_VERSION,
        "image_width": scene.image_width,
        "image_height": scene.image_height,
        "class_names": list(scene.class_names),
        "annotations": [_annotation_to_dict(q, scene.class_names) for q in scene.annotations],
    }


def _check_schema(data: Dict, what: str) -> None:
    if not isinstance(data, dict):
        raise FormatError(f"{what} must be a JSON object")
    version = data.get("schema_version")
    if version != SCENE_SCHEMA_VERSION:
        raise FormatError(f"{what}: unsupported schema_version {version!r}")


def scene_from_dict(data: Dict, class_names: Optional[Sequence[str]] = None) -> Scene:
    if class_names is None:
        _check_schema(data, "scene")
        class_names = data.get("class_names", [])
    class_ids = {name: i for i, name in enumerate(class_names)}
    try:
        annotations = tuple(_annotation_from_dict(item, class_ids) for item in data.get("annotations", []))
        return Scene(int(data["image_width"]), int(data["image_height"]), annotations, tuple(class_names))
    except (KeyError, TypeError, ValueError, DegenerateBox, ConfigError) as exc:
        raise FormatError(f"malformed scene: {exc}") from exc


def dump_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=2, sort_keys=True) + "\n"


def load_scene(text: str) -> Scene:
    return scene_from_dict(json.loads(text))


def dump_dataset(scenes: Dict[str, Scene], class_names: Sequence[str]) -> str:
    """Dataset JSON: image id → scene, sharing one class table"""
    images = {}
    for image_id, scene in scenes.items():
        entry = scene_to_dict(scene)
        for key in ("schema_version", "class_names"):
            entry.pop(key)
        images[image_id] = entry
    data = {"schema_version": SCENE_SCHEMA_VERSION, "class_names": list(class_names), "images": images}
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def load_dataset(text: str) -> Tuple[Dict[str, Scene], Tuple[str, ...]]:
    data = json.loads(text)
    _check_schema(data, "dataset")
    class_names = tuple(data.get("class_names", []))
    images = data.get("images")
    if not isinstance(images, dict):
        raise FormatError("dataset: 'images' must be an object keyed by image id")
    return {str(k): scene_from_dict(v, class_names) for k, v in images.items()}, class_names


def load_scene_file(path: str, class_table: Sequence[str] = DOTA_CLASSES) -> ParseResult:
    """Read a scene from .json (scene schema) or any other extension (DOTA text)"""
    with open(path, "rb") as handle:
        payload = handle.read()
    if path.lower().endswith(".json"):
        try:
            scene = load_scene(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return ParseResult(scene)
    return parse_dota(payload, class_table)


# ---------------------------------------------------------------------------
# Letterbox
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LetterboxTransform:
    """
    Aspect-preserving resize into a fixed canvas: p' = scale·p + (offset_x, offset_y).

    With pad_leading the padding sits left/top and the content starts at
    (pad_x, pad_y); otherwise content sits at the origin and (pad_x, pad_y)
    fills the right/bottom remainder, as letterbox() builds it.
    """
    scale: float = 1.0
    pad_x: float = 0.0
    pad_y: float = 0.0
    target_w: int = LETTERBOX_TARGET[0]
    target_h: int = LETTERBOX_TARGET[1]
    pad_leading: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"letterbox scale must be > 0, got {self.scale}")
        if self.pad_x < 0 or self.pad_y < 0:
            raise ConfigError(f"letterbox padding must be ≥ 0, got ({self.pad_x}, {self.pad_y})")

    @property
    def offset_x(self) -> float:
        return self.pad_x if self.pad_leading else 0.0

    @property
    def offset_y(self) -> float:
        return self.pad_y if self.pad_leading else 0.0

    def forward(self, x: float, y: float) -> Tuple[float, float]:
        return self.scale * x + self.offset_x, self.scale * y + self.offset_y

    def inverse(self, x: float, y: float) -> Tuple[float, float]:
        return (x - self.offset_x) / self.scale, (y - self.offset_y) / self.scale

    def to_dict(self) -> Dict:
        return config_to_dict(self)


def letterbox(image_dims: Tuple[int, int], target: Tuple[int, int] = LETTERBOX_TARGET) -> LetterboxTransform:
    """
    Scale = min(target_w / W, target_h / H); content at the origin, zero fill right/bottom.

    Example: 1600×800 → 800×800 gives scale 0.5, pad (0, 400)
    """
    width, height = image_dims
    target_w, target_h = target
    if width <= 0 or height <= 0 or target_w <= 0 or target_h <= 0:
        raise ConfigError(f"letterbox needs positive sizes, got {image_dims} → {target}")
    scale = min(target_w / width, target_h / height)
    return LetterboxTransform(
        scale=scale,
        pad_x=max(target_w - width * scale, 0.0),
        pad_y=max(target_h - height * scale, 0.0),
        target_w=target_w,
        target_h=target_h,
        pad_leading=False,
    )


def apply_letterbox(scene: Scene, transform: LetterboxTransform) -> Scene:
    """Move a scene's annotations into the letterboxed frame"""
    annotations = tuple(
        q.transformed(transform.scale, transform.offset_x, transform.offset_y) for q in scene.annotations
    )
    return Scene(transform.target_w, transform.target_h, annotations, scene.class_names)


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TileGrid:
    tile_size: int = TILE_SIZE
    gap: int = TILE_GAP
    origins: Tuple[Tuple[int, int], ...] = ()
    image_width: int = 0
    image_height: int = 0

    @property
    def stride(self) -> int:
        return self.tile_size - self.gap

    def __len__(self) -> int:
        return len(self.origins)

    def to_dict(self) -> Dict:
        return {
            "tile_size": self.tile_size,
            "gap": self.gap,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "origins": [list(o) for o in self.origins],
        }


def _axis_origins(length: int, tile_size: int, stride: int) -> List[int]:
    origins = []
    position = 0
    while position + tile_size < length:
        origins.append(position)
        position += stride
    # last tile ends at the border (0 for images smaller than a tile)
    last = max(length - tile_size, 0)
    if not origins or origins[-1] != last:
        origins.append(last)
    return origins


def tile_grid(image_dims: Tuple[int, int], tile_size: int = TILE_SIZE, gap: int = TILE_GAP) -> TileGrid:
    """
    Overlapping tile origins, row-major.

    Origins step by stride = tile_size − gap; the final one is clamped to
    dim − tile_size. 2048 px with 1024/200 gives {0, 824, 1024} per axis.
    """
    if not tile_size > gap >= 0:
        raise ConfigError(f"need tile_size > gap ≥ 0, got {tile_size}, {gap}")
    width, height = image_dims
    if width <= 0 or height <= 0:
        raise ConfigError(f"image size must be positive, got {image_dims}")
    stride = tile_size - gap
    xs = _axis_origins(width, tile_size, stride)
    ys = _axis_origins(height, tile_size, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return TileGrid(tile_size, gap, origins, width, height)


def crop_scene_to_tile(scene: Scene, origin: Tuple[int, int], tile_size: int) -> Tuple[Scene, List[Diagnostic]]:
    """Annotations in tile coordinates; those with < 50 % of their area in the tile are dropped"""
    ox, oy = origin
    kept = []
    diagnostics = []
    for index, quad in enumerate(scene.annotations):
        local = quad.translated(-ox, -oy)
        keep, fraction = clamp_to_image(local, tile_size, tile_size)
        if keep:
            kept.append(local)
        elif fraction > 0:
            diagnostics.append(Diagnostic(
                "DroppedAnnotation", f"{fraction:.1%} inside tile {origin}", index=index))
    return Scene(tile_size, tile_size, tuple(kept), scene.class_names), diagnostics


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """
    Random rotated rectangles. Placement keeps every box inside the image,
    centres at least min_separation apart and boxes at least `margin` apart.
    """
    image_width: int = 512
    image_height: int = 512
    min_instances: int = 1
    max_instances: int = 20
    num_classes: int = 1
    min_aspect: float = 1.0
    max_aspect: float = 12.0
    min_short_side: float = 12.0
    max_short_side: float = 20.0
    max_long_side: float = 192.0
    min_separation: float = 48.0
    margin: float = 8.0
    max_retries: int = 2000
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("synthetic image size must be positive")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 0 ≤ min_instances ≤ max_instances")
        if not 1.0 <= self.min_aspect <= self.max_aspect:
            raise ConfigError("need 1 ≤ min_aspect ≤ max_aspect")
        if not 0 < self.min_short_side <= self.max_short_side:
            raise ConfigError("need 0 < min_short_side ≤ max_short_side")
        if self.max_long_side < self.min_short_side * self.min_aspect:
            raise ConfigError("max_long_side is below the smallest possible long side")
        if self.num_classes < 1 or self.max_retries < 1:
            raise ConfigError("num_classes and max_retries must be ≥ 1")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ConfigError("class_names must have num_classes entries")
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def names(self) -> Tuple[str, ...]:
        return self.class_names or tuple(f"class{i}" for i in range(self.num_classes))

    def to_dict(self) -> Dict:
        return config_to_dict(self)


def scene_rng(seed: int, index: int = 0, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for scene `index` of run `seed`; stream > 0 gives an independent side stream"""
    entropy = [int(seed), int(index)] + ([int(stream)] if stream else [])
    return np.random.Generator(np.random.PCG64(entropy))


def _sample_box(rng: np.random.Generator, spec: SynthSpec) -> Tuple[float, float, float]:
    """(h, w, θ) with h ≤ max_long_side"""
    while True:
        w = rng.uniform(spec.min_short_side, spec.max_short_side)
        aspect = rng.uniform(spec.min_aspect, spec.max_aspect)
        theta = rng.uniform(0.0, 360.0)
        h = w * aspect
        if h <= spec.max_long_side:
            return h, w, theta


def synth_scene(rng_seed: int, spec: SynthSpec = SynthSpec(), index: int = 0) -> Scene:
    """
    Reproducible synthetic scene. The PRNG is numpy's PCG64 seeded with
    [rng_seed, index]; draws happen in a fixed order so scenes are identical
    on every platform.
    """
    rng = scene_rng(rng_seed, index)
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))

    placed: List[Tuple[RotatedQuad, RotatedQuad]] = []    # (box, box grown by margin)
    for instance in range(count):
        for _ in range(spec.max_retries):
            h, w, theta = _sample_box(rng, spec)
            ux, uy = direction_vector(theta)
            ext_x = abs(ux) * 0.5 * h + abs(uy) * 0.5 * w
            ext_y = abs(uy) * 0.5 * h + abs(ux) * 0.5 * w
            class_id = int(rng.integers(0, spec.num_classes))
            if 2 * ext_x >= spec.image_width or 2 * ext_y >= spec.image_height:
                continue
            cx = rng.uniform(ext_x, spec.image_width - ext_x)
            cy = rng.uniform(ext_y, spec.image_height - ext_y)

            if any(math.hypot(cx - q.center.x, cy - q.center.y) < spec.min_separation for q, _ in placed):
                continue

            center = Point2(cx, cy)
            vertex = Point2(cx + 0.5 * h * ux, cy + 0.5 * h * uy)
            box = obb_to_quad(ObbSpec.from_keypoints(center, vertex, h, w), class_id=class_id)
            grown_vertex = Point2(cx + (0.5 * h + spec.margin) * ux, cy + (0.5 * h + spec.margin) * uy)
            grown = obb_to_quad(ObbSpec.from_keypoints(center, grown_vertex, h + 2 * spec.margin, w + 2 * spec.margin))
            if any(may_overlap(grown, other) and quad_iou(grown, other) > 0.0 for _, other in placed):
                continue
            placed.append((box, grown))
            break
        else:
            raise PlacementError(
                f"placed {instance} of {count} instances after {spec.max_retries} retries (seed {rng_seed})"
            )

    return Scene(spec.image_width, spec.image_height, tuple(q for q, _ in placed), spec.names)


# ---------------------------------------------------------------------------
# Plane files
# ---------------------------------------------------------------------------

def write_planes(maps: TargetMaps, out_dir: str, class_names: Sequence[str] = ()) -> List[str]:
    """
    One flat little-endian float32 file per plane plus planes.json
    (schema version, shapes, image size, class names, config echo, diagnostics).
    """
    written = []
    shapes = {}
    for name, plane in maps.planes().items():
        path = os.path.join(out_dir, name + PLANE_SUFFIX)
        write_atomic(path, np.ascontiguousarray(plane, dtype=PLANE_DTYPE).tobytes())
        shapes[name] = list(plane.shape)
        written.append(path)

    sidecar = {
        "schema_version": PLANES_SCHEMA_VERSION,
        "channels": {"size_map": list(SIZE_CHANNELS), "offset_map": list(OFFSET_CHANNELS)},
        "dtype": PLANE_DTYPE,
        "plane_names": list(PLANE_NAMES),
        "shapes": shapes,
        "image_width": maps.image_width,
        "image_height": maps.image_height,
        "down_ratio": maps.down_ratio,
        "class_names": list(class_names),
        "config": maps.config,
        "diagnostics": [d.to_dict() for d in maps.diagnostics],
    }
    path = os.path.join(out_dir, PLANES_SIDECAR)
    write_atomic(path, json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    written.append(path)
    logger.info("wrote %d plane files to %s", len(written), out_dir)
    return written


def _diagnostic_from_dict(item: Dict) -> Diagnostic:
    extra = {k: v for k, v in item.items() if k not in ("kind", "message", "line", "index")}
    return Diagnostic(item["kind"], item["message"], item.get("line"), item.get("index"), extra)


def _read_sidecar(in_dir: str) -> Dict:
    sidecar_path = os.path.join(in_dir, PLANES_SIDECAR)
    try:
        with open(sidecar_path, "r", encoding="utf-8") as handle:
            sidecar = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read {sidecar_path}: {exc}") from exc
    if not isinstance(sidecar, dict):
        raise FormatError(f"{sidecar_path} must hold a JSON object")
    return sidecar


def read_class_names(in_dir: str) -> Tuple[str, ...]:
    """Class names recorded next to the planes (empty when none were given)"""
    return tuple(_read_sidecar(in_dir).get("class_names", []))


def read_planes(in_dir: str) -> TargetMaps:
    """Inverse of write_planes; any size or schema mismatch raises FormatError"""
    sidecar = _read_sidecar(in_dir)

    if sidecar.get("schema_version") != PLANES_SCHEMA_VERSION:
        raise FormatError(f"unsupported planes schema_version {sidecar.get('schema_version')!r}")
    if sidecar.get("dtype") != PLANE_DTYPE:
        raise FormatError(f"unsupported dtype {sidecar.get('dtype')!r}")
    channels = sidecar.get("channels", {})
    if channels.get("size_map", list(SIZE_CHANNELS)) != list(SIZE_CHANNELS) or \
            channels.get("offset_map", list(OFFSET_CHANNELS)) != list(OFFSET_CHANNELS):
        raise FormatError(f"unsupported regression channel layout {channels!r}")

    planes = {}
    for name in PLANE_NAMES:
        shape = tuple(sidecar.get("shapes", {}).get(name, ()))
        if not shape:
            raise FormatError(f"sidecar has no shape for {name}")
        path = os.path.join(in_dir, name + PLANE_SUFFIX)
        try:
            with open(path, "rb") as handle:
                payload = handle.read()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        expected = int(np.prod(shape)) * 4
        if len(payload) != expected:
            raise FormatError(f"{path}: {len(payload)} bytes, sidecar shape {shape} needs {expected}")
        planes[name] = np.frombuffer(payload, dtype=PLANE_DTYPE).reshape(shape)

    try:
        return TargetMaps(
            image_width=int(sidecar["image_width"]),
            image_height=int(sidecar["image_height"]),
            down_ratio=int(sidecar["down_ratio"]),
            config=sidecar.get("config", {}),
            diagnostics=tuple(_diagnostic_from_dict(d) for d in sidecar.get("diagnostics", [])),
            **planes,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed sidecar: {exc}") from exc
