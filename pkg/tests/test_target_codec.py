import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_obb, make_quad
from modules.geometry import Point2, RotatedQuad
from modules.target_codec import (
    Denominator,
    EncoderConfig,
    HeatmapKind,
    Scene,
    encode_scene,
    gaussian_value,
    heatmap_peak_truth,
    peak_collisions,
    sch_center_value,
    sch_kernel,
    vertex_value,
)
from utils.errors import ConfigError


def kinds(maps):
    return [diag.kind for diag in maps.diagnostics]


class TestSolarCoronaValue:
    def test_center_is_one(self):
        obb = make_obb(3.0, 4.0, 30.0, 6.0, 17.0)
        assert sch_center_value(obb.center, obb) == 1.0

    def test_square_unit_exponent(self):
        obb = make_obb(0.0, 0.0, 8.0, 8.0, 0.0)
        assert sch_center_value(Point2(1.0, 0.0), obb, mu=0.125) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_slender_box(self):
        obb = make_obb(0.0, 0.0, 32.0, 8.0, 0.0)
        value = sch_center_value(Point2(2.0, 0.0), obb, mu=0.125)
        assert value == pytest.approx(0.5 * (math.exp(-1.0) + math.exp(-4.0)), abs=1e-12)
        assert value == pytest.approx(0.193103, abs=1e-6)

    def test_outside_rectangle_is_zero(self):
        obb = make_obb(0.0, 0.0, 32.0, 8.0, 0.0)
        assert sch_center_value(Point2(0.0, 5.0), obb) == 0.0

    def test_squared_denominator_is_wider(self):
        obb = make_obb(0.0, 0.0, 32.0, 8.0, 0.0)
        p = Point2(3.0, 1.0)
        assert sch_center_value(p, obb, denominator=Denominator.SQUARED) > sch_center_value(p, obb)

    @given(
        st.floats(min_value=1.0, max_value=100.0),
        st.floats(min_value=1.0, max_value=12.0),
        st.floats(min_value=0.0, max_value=359.0),
        st.floats(min_value=-0.5, max_value=0.5),
        st.floats(min_value=-0.5, max_value=0.5),
    )
    def test_sandwich_inside_support(self, w, aspect, theta, along, across):
        h = w * aspect
        obb = make_obb(0.0, 0.0, h, w, theta)
        ux, uy = obb.axis
        p = Point2(along * h * ux - across * w * uy, along * h * uy + across * w * ux)
        dist_sq = p.x * p.x + p.y * p.y
        value = sch_center_value(p, obb, mu=0.125)
        lower = math.exp(-dist_sq / (0.125 * w))
        upper = math.exp(-dist_sq / (0.125 * h))
        assert lower <= value <= upper

    def test_kernel_is_radially_monotone(self):
        dist_sq = np.arange(0, 400, dtype=np.float64)
        values = sch_kernel(dist_sq, 40.0, 4.0, 0.125)
        assert values[0] == 1.0
        assert np.all(np.diff(values) <= 0)


class TestVertexAndGaussianValues:
    def test_vertex_peak(self):
        assert vertex_value(Point2(2, 3), Point2(2, 3), h=10.0) == 1.0

    def test_vertex_unit_exponent(self):
        # μh = 1
        assert vertex_value(Point2(1, 0), Point2(0, 0), h=8.0, mu=0.125) == pytest.approx(math.exp(-1.0))

    def test_vertex_below_floor(self):
        assert vertex_value(Point2(10, 0), Point2(0, 0), h=8.0, mu=0.125, value_floor=1e-4) == 0.0

    def test_gaussian(self):
        sigma = 1.5
        assert gaussian_value(Point2(4, 4), Point2(4, 4), sigma) == 1.0
        assert gaussian_value(Point2(4 + sigma * math.sqrt(2), 4), Point2(4, 4), sigma) == pytest.approx(math.exp(-1))
        assert gaussian_value(Point2(1e4, 0), Point2(0, 0), sigma) == 0.0

    def test_gaussian_needs_positive_sigma(self):
        with pytest.raises(ConfigError):
            gaussian_value(Point2(0, 0), Point2(0, 0), 0.0)


class TestEncoderConfig:
    @pytest.mark.parametrize("kwargs", [
        {"down_ratio": 0},
        {"mu": 0.0},
        {"vertex_shrink": 1.5},
        {"num_classes": 0},
        {"value_floor": 1.0},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            EncoderConfig(**kwargs)

    def test_enum_from_string(self):
        cfg = EncoderConfig(heatmap_kind="gaussian")
        assert cfg.heatmap_kind is HeatmapKind.GAUSSIAN
        assert cfg.to_dict()["heatmap_kind"] == "gaussian"


class TestEncodeScene:
    def test_empty_scene(self):
        maps = encode_scene(Scene(64, 48), EncoderConfig())
        assert maps.grid_shape == (12, 16)
        for plane in maps.planes().values():
            assert not plane.any()
        assert heatmap_peak_truth(maps) == []

    def test_peak_cell_and_offset(self):
        scene = Scene(512, 512, (make_quad(413.0, 221.0, 40.0, 12.0, 0.0),))
        maps = encode_scene(scene, EncoderConfig())
        assert maps.center_hm[0, 55, 103] == 1.0
        assert maps.pos_mask[0, 0, 55, 103] == 1.0
        assert maps.offset_map[0, 55, 103] == pytest.approx(0.25)
        assert maps.offset_map[1, 55, 103] == pytest.approx(0.25)
        assert tuple(maps.size_map[:, 55, 103]) == pytest.approx((3.0, 10.0))
        assert maps.direction_map[0, 55, 103] == pytest.approx(0.0, abs=1e-4)

    def test_planes_are_float32_and_read_only(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        assert maps.center_hm.dtype == np.float32
        assert maps.pos_mask.shape == (2, 2, 128, 128)
        with pytest.raises(ValueError):
            maps.center_hm[0, 0, 0] = 1.0

    def test_peaks_match_instances(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        truth = heatmap_peak_truth(maps)
        centers = [p for p in truth if p.kind == "center"]
        vertices = [p for p in truth if p.kind == "vertex"]
        assert len(centers) == 3
        assert len(vertices) == 3
        assert sorted(p.class_id for p in centers) == [0, 0, 1]
        for peak in centers:
            x, y = peak.cell
            assert maps.center_hm[peak.class_id, y, x] == 1.0

    def test_direction_at_peaks(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        expected = {(25, 30): 30.0, (75, 25): 200.0, (55, 75): 300.0}
        for (x, y), theta in expected.items():
            assert maps.direction_map[0, y, x] == pytest.approx(theta, abs=1e-4)

    def test_peak_collision(self):
        big = make_quad(100.5, 100.5, 40.0, 10.0, 0.0)
        small = make_quad(101.0, 101.0, 20.0, 8.0, 90.0)
        maps = encode_scene(Scene(256, 256, (small, big)), EncoderConfig())
        assert int(maps.pos_mask[0].sum()) == 1
        collisions = peak_collisions(maps)
        assert len(collisions) == 1
        # the larger box owns the regression values
        assert collisions[0].index == 0
        assert collisions[0].extra["owner"] == 1
        assert tuple(maps.size_map[:, 25, 25]) == pytest.approx((2.5, 10.0))

    def test_sub_cell_instance_still_encoded(self):
        maps = encode_scene(Scene(128, 128, (make_quad(50.0, 50.0, 3.0, 2.0, 0.0),)), EncoderConfig())
        assert "SubCellInstance" in kinds(maps)
        assert maps.pos_mask[0].sum() == 1.0

    def test_clamped_annotation(self):
        maps = encode_scene(Scene(128, 128, (make_quad(5.0, 50.0, 30.0, 8.0, 0.0),)), EncoderConfig())
        assert kinds(maps) == ["ClampedAnnotation"]
        assert maps.pos_mask[0].sum() == 1.0

    def test_center_outside_grid(self):
        maps = encode_scene(Scene(128, 128, (make_quad(140.0, 50.0, 30.0, 8.0, 0.0),)), EncoderConfig())
        assert "CenterOutsideGrid" in kinds(maps)
        assert not maps.pos_mask.any()

    def test_degenerate_annotation(self):
        flat = RotatedQuad.from_coords([0, 0, 10, 0, 20, 0, 30, 0])
        maps = encode_scene(Scene(128, 128, (flat,)), EncoderConfig())
        assert kinds(maps) == ["DegenerateBox"]

    def test_unknown_class_id(self):
        with pytest.raises(ConfigError):
            encode_scene(Scene(128, 128, (make_quad(50, 50, 20, 8, 0, class_id=3),)), EncoderConfig())

    def test_deterministic(self, slender_scene):
        cfg = EncoderConfig(num_classes=2)
        first, second = encode_scene(slender_scene, cfg), encode_scene(slender_scene, cfg)
        for name, plane in first.planes().items():
            assert np.array_equal(plane, second.planes()[name]), name

    def test_order_independent_heatmaps(self, slender_scene):
        cfg = EncoderConfig(num_classes=2)
        reversed_scene = Scene(512, 512, slender_scene.annotations[::-1], slender_scene.class_names)
        assert np.array_equal(encode_scene(slender_scene, cfg).center_hm, encode_scene(reversed_scene, cfg).center_hm)

    def test_solar_corona_support_is_the_rectangle(self):
        scene = Scene(512, 512, (make_quad(256.0, 256.0, 160.0, 16.0, 0.0),))
        sch = encode_scene(scene, EncoderConfig())
        gauss = encode_scene(scene, EncoderConfig(heatmap_kind=HeatmapKind.GAUSSIAN))
        # 3 cells across the long axis is outside the 4-cell-wide box
        assert sch.center_hm[0, 67, 64] == 0.0
        assert gauss.center_hm[0, 67, 64] > 0.0
        # 5 cells along the long axis the corona is still lit
        assert sch.center_hm[0, 64, 69] > 0.0
        assert gauss.center_hm[0, 64, 69] == 0.0
