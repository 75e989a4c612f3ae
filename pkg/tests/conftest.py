import hypothesis
import numpy as np
import pytest

from modules.decoder import Detection, Provenance
from modules.geometry import ObbSpec, Point2, RotatedQuad, direction_vector, obb_to_quad
from modules.target_codec import Scene

np.seterr(all="warn")

hypothesis.settings.register_profile("default", deadline=None, max_examples=100)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("default")


def make_obb(cx, cy, h, w, theta) -> ObbSpec:
    ux, uy = direction_vector(theta)
    center = Point2(cx, cy)
    return ObbSpec.from_keypoints(center, Point2(cx + 0.5 * h * ux, cy + 0.5 * h * uy), h, w)


def make_quad(cx, cy, h, w, theta, class_id=0, difficult=False) -> RotatedQuad:
    return obb_to_quad(make_obb(cx, cy, h, w, theta), class_id=class_id, difficult=difficult)


def axis_box(x0, y0, x1, y1, class_id=0, difficult=False) -> RotatedQuad:
    return RotatedQuad.from_coords([x0, y0, x1, y0, x1, y1, x0, y1], class_id, difficult)


def det(quad: RotatedQuad, score: float, class_id: int = 0) -> Detection:
    return Detection(RotatedQuad(quad.corners, class_id), class_id, score, Provenance.MATCHED_VERTEX)


@pytest.fixture
def slender_scene() -> Scene:
    """Three well separated instances, one per direction quadrant"""
    annotations = (
        make_quad(100.5, 120.25, 96.0, 16.0, 30.0),
        make_quad(300.0, 100.0, 60.0, 20.0, 200.0),
        make_quad(220.75, 300.5, 150.0, 14.0, 300.0, class_id=1),
    )
    return Scene(512, 512, annotations, ("ship", "vehicle"))


def eval_data():
    """
    3 images, 2 classes.

    img_a: two class-0 boxes, one class-1 box
    img_b: one class-0 box, one difficult class-1 box
    img_c: one class-1 box
    """
    gts = {
        "img_a": Scene(200, 200, (
            axis_box(10, 10, 50, 30),
            axis_box(100, 100, 140, 120),
            axis_box(60, 150, 90, 190, class_id=1),
        ), ("car", "ship")),
        "img_b": Scene(200, 200, (
            axis_box(20, 20, 60, 40),
            axis_box(120, 60, 150, 100, class_id=1, difficult=True),
        ), ("car", "ship")),
        "img_c": Scene(200, 200, (
            axis_box(30, 30, 60, 70, class_id=1),
        ), ("car", "ship")),
    }
    dets = {
        "img_a": [
            det(axis_box(10, 10, 50, 30), 0.9),              # TP
            det(axis_box(11, 10, 51, 30), 0.8),              # duplicate → FP
            det(axis_box(60, 150, 90, 190), 0.7, 1),         # TP
        ],
        "img_b": [
            det(axis_box(20, 20, 60, 40), 0.6),              # TP
            det(axis_box(120, 60, 150, 100), 0.95, 1),       # difficult → ignored
            det(axis_box(0, 150, 20, 170), 0.5, 1),          # FP
        ],
        "img_c": [
            det(axis_box(30, 30, 60, 70), 0.4, 1),           # TP
        ],
    }
    return dets, gts


@pytest.fixture
def eval_fixture():
    return eval_data()
