"""Rotated-box geometry: two-keypoint form, quad conversions, relative direction, rotated IoU"""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from utils.calculations import wrap_degrees
from utils.errors import DegenerateBox, DegenerateDirection

logger = logging.getLogger(__name__)

# Degeneracy thresholds (64-bit geometry everywhere)
AREA_EPS = 1e-9
LENGTH_EPS = 1e-9
SQUARE_TOL = 1e-6

Coord = Tuple[float, float]


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        x, y = float(self.x), float(self.y)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DegenerateBox(f"non-finite point ({self.x}, {self.y})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def as_tuple(self) -> Coord:
        return (self.x, self.y)

    def distance_to(self, other: "Point2") -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


@dataclass(frozen=True)
class RotatedQuad:
    """
    Four ordered corners of an oriented box plus its label.

    Canonical quads (obb_to_quad output) are clockwise in image coordinates,
    i.e. positive shoelace area with y pointing down.
    """
    corners: Tuple[Point2, Point2, Point2, Point2]
    class_id: int = 0
    difficult: bool = False

    def __post_init__(self):
        corners = tuple(c if isinstance(c, Point2) else Point2(*c) for c in self.corners)
        if len(corners) != 4:
            raise DegenerateBox(f"a quad needs 4 corners, got {len(corners)}")
        object.__setattr__(self, "corners", corners)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "difficult", bool(self.difficult))

    @classmethod
    def from_coords(cls, coords: Sequence, class_id: int = 0, difficult: bool = False) -> "RotatedQuad":
        """Build from 8 flat numbers or 4 (x, y) pairs"""
        values = np.asarray(coords, dtype=np.float64).reshape(4, 2)
        return cls(tuple(Point2(x, y) for x, y in values), class_id, difficult)

    def as_array(self) -> np.ndarray:
        return np.array([c.as_tuple() for c in self.corners], dtype=np.float64)

    def flat(self) -> List[float]:
        return [v for c in self.corners for v in c.as_tuple()]

    @property
    def signed_area(self) -> float:
        return polygon_signed_area(self.as_array())

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    @property
    def center(self) -> Point2:
        pts = self.as_array()
        return Point2(pts[:, 0].mean(), pts[:, 1].mean())

    @property
    def circumradius(self) -> float:
        """Largest centre-to-corner distance"""
        c = self.center
        return max(c.distance_to(p) for p in self.corners)

    def transformed(self, scale: float = 1.0, dx: float = 0.0, dy: float = 0.0) -> "RotatedQuad":
        """Apply p' = scale·p + (dx, dy)"""
        pts = self.as_array() * scale + np.array([dx, dy])
        return RotatedQuad.from_coords(pts, self.class_id, self.difficult)

    def translated(self, dx: float, dy: float) -> "RotatedQuad":
        return self.transformed(1.0, dx, dy)


@dataclass(frozen=True)
class ObbSpec:
    """Two-keypoint box: centre, short-edge midpoint ("vertex"), long side h, short side w, θ in degrees"""
    center: Point2
    vertex: Point2
    h: float
    w: float
    theta: float

    @classmethod
    def from_keypoints(cls, center: Point2, vertex: Point2, h: float, w: float) -> "ObbSpec":
        return cls(center, vertex, float(h), float(w), relative_direction(center, vertex))

    @property
    def axis(self) -> Coord:
        """Unit vector centre → vertex"""
        dx = self.vertex.x - self.center.x
        dy = self.vertex.y - self.center.y
        length = math.hypot(dx, dy)
        if length < LENGTH_EPS:
            raise DegenerateBox("vertex coincides with centre")
        return dx / length, dy / length

    @property
    def area(self) -> float:
        return self.h * self.w

    @property
    def aspect_ratio(self) -> float:
        return self.h / self.w

    def scaled(self, factor: float) -> "ObbSpec":
        """Same box in a scaled frame (e.g. factor 1/d for output-grid units)"""
        return ObbSpec(
            Point2(self.center.x * factor, self.center.y * factor),
            Point2(self.vertex.x * factor, self.vertex.y * factor),
            self.h * factor,
            self.w * factor,
            self.theta,
        )

    def recentered(self, center: Point2) -> "ObbSpec":
        """Same box shape and direction, moved so its centre sits at `center`"""
        dx = center.x - self.center.x
        dy = center.y - self.center.y
        return ObbSpec(center, Point2(self.vertex.x + dx, self.vertex.y + dy), self.h, self.w, self.theta)


@dataclass(frozen=True)
class IoUResult:
    intersection_area: float
    union_area: float
    iou: float


def polygon_signed_area(points) -> float:
    """Shoelace formula; positive for clockwise order in image (y-down) coordinates"""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def is_convex(points) -> bool:
    """True when every turn has the same sign (collinear turns allowed)"""
    pts = np.asarray(points, dtype=np.float64)
    edges = np.roll(pts, -1, axis=0) - pts
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    return bool(np.all(cross >= -AREA_EPS) or np.all(cross <= AREA_EPS))


def relative_direction(center: Point2, vertex: Point2) -> float:
    """
    Relative direction θ of the centre→vertex vector, in [0, 360).

    Two-branch form of the piecewise arc-cosine:
        θ = acos(Δx/|Δ|)          when Δy ≥ 0
        θ = 360 − acos(Δx/|Δ|)    otherwise
    on raw pixel deltas (y-down, no flip). acos(Δx/|Δ|) is evaluated as
    atan2(|Δy|, Δx), the same angle without acos's precision loss near 0° and 180°.
    """
    dx = vertex.x - center.x
    dy = vertex.y - center.y
    if dx == 0.0 and dy == 0.0:
        raise DegenerateDirection("zero-length centre→vertex vector")

    alpha = math.degrees(math.atan2(abs(dy), dx))
    theta = alpha if dy >= 0.0 else 360.0 - alpha
    return wrap_degrees(theta)


def relative_direction_array(dx, dy) -> np.ndarray:
    """Vectorised relative_direction over arrays of deltas"""
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if np.any((dx == 0.0) & (dy == 0.0)):
        raise DegenerateDirection("zero-length centre→vertex vector")

    alpha = np.degrees(np.arctan2(np.abs(dy), dx))
    theta = np.where(dy >= 0.0, alpha, 360.0 - alpha)
    return np.where(theta >= 360.0, theta - 360.0, theta)


def direction_vector(theta: float) -> Coord:
    """Unit vector for θ in the same pixel convention as relative_direction"""
    rad = math.radians(theta)
    return math.cos(rad), math.sin(rad)


def quad_to_obb(quad: RotatedQuad) -> ObbSpec:
    """
    Convert 4 corners to the two-keypoint form.

    centre = corner mean, vertex = midpoint of edge (corner1, corner2).
    When edge (1,2) is clearly the long edge the order is rotated by one so
    the vertex lands on a short edge and h ≥ w holds.
    """
    pts = quad.as_array()
    if abs(polygon_signed_area(pts)) <= AREA_EPS:
        raise DegenerateBox(f"quad area ≤ {AREA_EPS}: {quad.flat()}")

    edge_12 = np.linalg.norm(pts[1] - pts[0])
    edge_23 = np.linalg.norm(pts[2] - pts[1])
    if edge_12 > edge_23 + SQUARE_TOL:
        pts = np.roll(pts, -1, axis=0)

    center = pts.mean(axis=0)
    vertex = 0.5 * (pts[0] + pts[1])
    half = float(np.linalg.norm(vertex - center))
    if half < LENGTH_EPS:
        raise DegenerateBox("vertex coincides with centre")

    u = (vertex - center) / half
    normal = np.array([-u[1], u[0]])
    proj = (pts - center) @ normal
    h = 2.0 * half
    w = float(proj.max() - proj.min())
    if w <= LENGTH_EPS:
        raise DegenerateBox("zero short side")
    if w > h:
        # only reachable for non-rectangular quads
        logger.debug("quad perpendicular extent %.6f exceeds long side %.6f; clamped", w, h)
        w = h

    c = Point2(center[0], center[1])
    t = Point2(vertex[0], vertex[1])
    return ObbSpec(c, t, h, w, relative_direction(c, t))


def obb_to_quad(obb: ObbSpec, class_id: int = 0, difficult: bool = False) -> RotatedQuad:
    """
    Rebuild the corners of a two-keypoint box.

    Corners 1,2 are the ends of the short edge at the vertex side, corner 1
    first in clockwise (image-coordinate) order; the long axis follows
    (vertex − centre) and the long side is taken from obb.h.
    """
    if not (obb.w > 0.0) or obb.h < obb.w - SQUARE_TOL:
        raise DegenerateBox(f"invalid sides h={obb.h}, w={obb.w}")

    ux, uy = obb.axis
    nx, ny = -uy, ux
    cx, cy = obb.center.x, obb.center.y
    half_h, half_w = 0.5 * obb.h, 0.5 * obb.w

    top_x, top_y = cx + half_h * ux, cy + half_h * uy
    bot_x, bot_y = cx - half_h * ux, cy - half_h * uy
    corners = (
        Point2(top_x - half_w * nx, top_y - half_w * ny),
        Point2(top_x + half_w * nx, top_y + half_w * ny),
        Point2(bot_x + half_w * nx, bot_y + half_w * ny),
        Point2(bot_x - half_w * nx, bot_y - half_w * ny),
    )
    return RotatedQuad(corners, class_id, difficult)


def _oriented_polygon(quad: RotatedQuad) -> List[Coord]:
    """Corner list with positive signed area, validated for IoU use"""
    pts = quad.as_array()
    area = polygon_signed_area(pts)
    if abs(area) <= AREA_EPS:
        raise DegenerateBox(f"quad area ≤ {AREA_EPS}: {quad.flat()}")
    if not is_convex(pts):
        raise DegenerateBox(f"quad is not convex: {quad.flat()}")
    if area < 0.0:
        pts = pts[::-1]
    return [(float(x), float(y)) for x, y in pts]


def clip_polygon(subject: Sequence[Coord], clipper: Sequence[Coord]) -> List[Coord]:
    """
    Sutherland–Hodgman clipping of `subject` by the convex polygon `clipper`.

    `clipper` must have positive signed area; its interior lies to the left
    of every edge in the shoelace orientation.
    """
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        candidates = output
        output = []
        prev = candidates[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in candidates:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    output.append(_edge_crossing(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0.0:
                output.append(_edge_crossing(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _edge_crossing(p: Coord, q: Coord, side_p: float, side_q: float) -> Coord:
    t = side_p / (side_p - side_q)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a: RotatedQuad, b: RotatedQuad) -> IoUResult:
    """Exact IoU of two convex quads: Sutherland–Hodgman intersection + shoelace areas"""
    poly_a = _oriented_polygon(a)
    poly_b = _oriented_polygon(b)

    # Same operand order for (a, b) and (b, a) keeps the result exactly symmetric
    if poly_b < poly_a:
        poly_a, poly_b = poly_b, poly_a

    area_a = polygon_signed_area(poly_a)
    area_b = polygon_signed_area(poly_b)

    inter_poly = clip_polygon(poly_a, poly_b)
    inter = polygon_signed_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    inter = min(max(inter, 0.0), area_a, area_b)

    union = area_a + area_b - inter
    iou = min(max(inter / union, 0.0), 1.0)
    return IoUResult(intersection_area=inter, union_area=union, iou=iou)


def quad_iou(a: RotatedQuad, b: RotatedQuad) -> float:
    return rotated_iou(a, b).iou


def area_inside_rect(quad: RotatedQuad, width: float, height: float) -> float:
    """Area of the part of a convex quad that lies in [0, width] × [0, height]"""
    poly = _oriented_polygon(quad)
    # positive orientation in the shoelace sense
    rect = [(0.0, 0.0), (float(width), 0.0), (float(width), float(height)), (0.0, float(height))]
    clipped = clip_polygon(poly, rect)
    return max(polygon_signed_area(clipped), 0.0) if len(clipped) >= 3 else 0.0


def may_overlap(a: RotatedQuad, b: RotatedQuad) -> bool:
    """Bounding-circle test; False means the quads cannot intersect"""
    return a.center.distance_to(b.center) <= a.circumradius + b.circumradius
