import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import axis_box, det, make_quad
from modules.data_io import LetterboxTransform, apply_letterbox, letterbox
from modules.decoder import (
    DecodeConfig,
    DecodeMode,
    Detection,
    Provenance,
    decode,
    dump_detections_jsonl,
    extract_peaks,
    format_dota_detections,
    load_detections_jsonl,
    local_maxima,
    merge_tiles,
    rotated_nms,
    unletterbox,
)
from modules.geometry import quad_iou, quad_to_obb
from modules.target_codec import EncoderConfig, Scene, encode_scene, heatmap_peak_truth
from utils.calculations import angle_difference
from utils.errors import ConfigError, FormatError


def best_iou(quad, detections):
    return max((quad_iou(quad, d.quad) for d in detections if d.class_id == quad.class_id), default=0.0)


class TestPeaks:
    def test_single_spike(self):
        plane = np.zeros((1, 8, 8))
        plane[0, 3, 5] = 1.0
        peaks = extract_peaks(plane)
        assert [(p.cell, p.class_id, p.score) for p in peaks] == [((5, 3), 0, 1.0)]

    def test_zero_plane(self):
        assert extract_peaks(np.zeros((2, 8, 8))) == []

    def test_plateau_yields_first_cell(self):
        plane = np.zeros((6, 6))
        plane[2, 2:4] = 0.7
        mask = local_maxima(plane)
        assert mask[2, 2]
        assert not mask[2, 3]

    def test_ordering_and_top_k(self):
        plane = np.zeros((2, 10, 10))
        plane[0, 1, 1] = 0.5
        plane[1, 1, 1] = 0.5
        plane[0, 7, 7] = 0.9
        plane[0, 4, 8] = 0.3
        peaks = extract_peaks(plane, DecodeConfig(top_k=3))
        assert [(p.cell, p.class_id) for p in peaks] == [((7, 7), 0), ((1, 1), 0), ((1, 1), 1)]

    def test_threshold(self):
        plane = np.zeros((1, 8, 8))
        plane[0, 2, 2] = 0.2
        plane[0, 5, 5] = 0.25
        peaks = extract_peaks(plane)
        assert [p.cell for p in peaks] == [(5, 5)]

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_scores_non_increasing(self, seed):
        plane = np.random.default_rng(seed).uniform(size=(2, 16, 16))
        peaks = extract_peaks(plane, DecodeConfig(top_k=20))
        assert len(peaks) <= 20
        assert all(a.score >= b.score for a, b in zip(peaks, peaks[1:]))

    def test_encoded_peaks_are_the_truth(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        truth = [p for p in heatmap_peak_truth(maps) if p.kind == "center"]
        found = extract_peaks(maps.center_hm)
        assert sorted((p.cell, p.class_id) for p in found) == sorted((p.cell, p.class_id) for p in truth)


class TestDecodeConfig:
    @pytest.mark.parametrize("kwargs", [{"top_k": 0}, {"score_threshold": 1.5}, {"nms_iou": 2.0},
                                        {"vertex_shrink": 0.0}])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DecodeConfig(**kwargs)


class TestDecode:
    def test_round_trip(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        detections = decode(maps)
        assert len(detections) == 3
        for quad in slender_scene.annotations:
            assert best_iou(quad, detections) >= 0.95
        assert all(d.provenance == Provenance.MATCHED_VERTEX for d in detections)

    def test_direction_recovered(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        for quad in slender_scene.annotations:
            expected = quad_to_obb(quad).theta
            match = max(decode(maps), key=lambda d: quad_iou(quad, d.quad) if d.class_id == quad.class_id else -1)
            assert angle_difference(quad_to_obb(match.quad).theta, expected) <= 1.0

    def test_empty_prediction(self):
        maps = encode_scene(Scene(128, 128), EncoderConfig())
        assert decode(maps) == []

    def test_vertex_plane_zeroed_falls_back(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        blind = maps.replace(vertex_hm=np.zeros_like(maps.vertex_hm))
        detections = decode(blind)
        assert len(detections) == 3
        assert all(d.provenance == Provenance.DIRECTION_FALLBACK for d in detections)
        for quad in slender_scene.annotations:
            assert best_iou(quad, detections) >= 0.95

    def test_modes_agree_on_exact_planes(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        matched = sorted(decode(maps), key=lambda d: d.sort_key())
        angle = sorted(decode(maps, DecodeConfig(mode=DecodeMode.ANGLE_ONLY)), key=lambda d: d.sort_key())
        assert len(matched) == len(angle)
        for a, b in zip(matched, angle):
            assert a.class_id == b.class_id
            assert np.allclose(a.quad.as_array(), b.quad.as_array(), atol=1e-3)

    def test_gaussian_encoding_round_trip(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2, heatmap_kind="gaussian"))
        detections = decode(maps)
        for quad in slender_scene.annotations:
            assert best_iou(quad, detections) >= 0.95

    def test_shape_mismatch(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        broken = maps.replace(size_map=np.zeros((2, 4, 4), dtype=np.float32))
        with pytest.raises(ConfigError):
            decode(broken)

    def test_single_image_nms(self):
        # peaks two cells apart, boxes overlapping at IoU ~0.6
        pair = (make_quad(100, 100, 60, 12, 10.0), make_quad(108.5, 100, 60, 12, 10.0))
        maps = encode_scene(Scene(256, 256, pair), EncoderConfig())
        assert len(decode(maps)) == 2
        kept = decode(maps, DecodeConfig(single_image_nms=True))
        assert len(kept) == 1
        assert kept[0].center.x == pytest.approx(100.0)


class TestNmsAndTiles:
    def test_duplicate_suppressed(self):
        box = make_quad(50, 50, 40, 10, 30.0)
        keep = rotated_nms([det(box, 0.8), det(box, 0.9)], 0.5)
        assert [d.score for d in keep] == [0.9]

    def test_other_class_kept(self):
        box = make_quad(50, 50, 40, 10, 30.0)
        keep = rotated_nms([det(box, 0.8, class_id=1), det(box, 0.9)], 0.5)
        assert len(keep) == 2

    def test_single_tile_identity(self):
        dets = [det(axis_box(0, 0, 10, 20), 0.7)]
        merged = merge_tiles([((0, 0), dets)])
        assert merged == dets

    def test_duplicate_across_overlapping_tiles(self):
        # same box seen from tiles at x = 0 and x = 824
        global_box = axis_box(900, 100, 960, 120)
        left = [det(global_box, 0.9)]
        right = [det(global_box.translated(-824, 0), 0.85)]
        merged = merge_tiles([((0, 0), left), ((824, 0), right)])
        assert len(merged) == 1
        assert merged[0].score == 0.9

    def test_tile_order_does_not_matter(self):
        tiles = [
            ((0, 0), [det(axis_box(10, 10, 50, 20), 0.5), det(axis_box(900, 40, 950, 50), 0.7)]),
            ((824, 0), [det(axis_box(76, 40, 126, 50), 0.7), det(axis_box(300, 300, 340, 310), 0.6)]),
            ((0, 824), [det(axis_box(5, 5, 45, 15), 0.4, class_id=1)]),
        ]
        forward = merge_tiles(tiles)
        backward = merge_tiles(tiles[::-1])
        assert [d.sort_key() for d in forward] == [d.sort_key() for d in backward]
        assert len(forward) == 4


class TestUnletterbox:
    def test_identity(self):
        dets = [det(axis_box(1, 2, 30, 40), 0.5)]
        back = unletterbox(dets, LetterboxTransform(1.0, 0, 0, 800, 800))
        assert np.allclose(back[0].quad.as_array(), dets[0].quad.as_array())

    def test_scale_and_leading_pad(self):
        transform = LetterboxTransform(scale=0.5, pad_x=0, pad_y=100)
        box = det(axis_box(10, 110, 30, 130), 0.5)
        back = unletterbox([box], transform)[0]
        assert back.quad.corners[0].as_tuple() == pytest.approx((20.0, 20.0))

    def test_trailing_pad_does_not_shift(self):
        transform = LetterboxTransform(scale=0.5, pad_x=0, pad_y=100, pad_leading=False)
        back = unletterbox([det(axis_box(10, 110, 30, 130), 0.5)], transform)[0]
        assert back.quad.corners[0].as_tuple() == pytest.approx((20.0, 220.0))

    @settings(max_examples=50)
    @given(st.integers(200, 4000), st.integers(200, 4000))
    def test_inverse_of_letterbox(self, width, height):
        scene = Scene(width, height, (make_quad(width / 2, height / 2, 80, 20, 33.0),))
        transform = letterbox((width, height))
        boxed = apply_letterbox(scene, transform)
        back = unletterbox([det(boxed.annotations[0], 0.9)], transform)[0]
        assert np.allclose(back.quad.as_array(), scene.annotations[0].as_array(), atol=1e-9)


class TestSerialization:
    def test_jsonl_reload(self, slender_scene):
        maps = encode_scene(slender_scene, EncoderConfig(num_classes=2))
        detections = decode(maps)
        text = dump_detections_jsonl(detections, slender_scene.class_names, image_id="P0001")
        loaded = load_detections_jsonl(text, slender_scene.class_names)
        assert list(loaded) == ["P0001"]
        assert [d.sort_key() for d in loaded["P0001"]] == sorted(d.sort_key() for d in detections)
        assert loaded["P0001"][0].provenance == Provenance.MATCHED_VERTEX

    def test_jsonl_is_deterministic(self, slender_scene):
        detections = decode(encode_scene(slender_scene, EncoderConfig(num_classes=2)))
        names = slender_scene.class_names
        assert dump_detections_jsonl(detections, names) == dump_detections_jsonl(detections[::-1], names)

    def test_unknown_class_name(self):
        line = '{"class": "plane", "score": 0.5, "corners": [[0, 0], [1, 0], [1, 1], [0, 1]]}'
        with pytest.raises(FormatError):
            load_detections_jsonl(line, ("ship",))

    def test_bad_line(self):
        with pytest.raises(FormatError):
            load_detections_jsonl('{"class": 0, "score": 0.5}\n', ())

    def test_dota_export(self):
        text = format_dota_detections([det(axis_box(0, 0, 10, 4), 0.5)], ("plane",))
        assert text == "0.000 0.000 10.000 0.000 10.000 4.000 0.000 4.000 plane 0.500000\n"

    def test_detection_dict(self):
        record = Detection(axis_box(0, 0, 2, 1), 0, 0.25).to_dict(("plane",))
        assert record == {
            "class": "plane",
            "score": 0.25,
            "corners": [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]],
            "provenance": "direction_fallback",
        }
