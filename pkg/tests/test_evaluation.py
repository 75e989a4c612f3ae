import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import axis_box, det, eval_data
from modules.data_io import SynthSpec, synth_scene
from modules.evaluation import (
    ApMethod,
    EvalConfig,
    MatchLabel,
    average_precision,
    evaluate,
    match_detections,
    precision_recall,
)
from modules.geometry import quad_iou
from modules.target_codec import Scene
from utils.errors import ConfigError, FormatError

TP, FP, IGNORED = MatchLabel.TP, MatchLabel.FP, MatchLabel.IGNORED
VOC07 = EvalConfig(ap_method=ApMethod.VOC07)
CONTINUOUS = EvalConfig(ap_method=ApMethod.CONTINUOUS)


def oracle_ap(labels, num_gt, method):
    """Hand enumeration of the P-R points"""
    tp = fp = 0
    points = []
    for label in labels:
        if label == IGNORED:
            continue
        tp += label == TP
        fp += label == FP
        points.append((tp / num_gt, tp / (tp + fp)))
    if not points:
        return 0.0
    if method == ApMethod.VOC07:
        total = 0.0
        for step in range(11):
            reached = [p for r, p in points if r >= step / 10]
            total += max(reached) if reached else 0.0
        return total / 11
    ap, previous = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        ap += (r - previous) * max(p for _, p in points[k:])
        previous = r
    return ap


def oracle_labels(dets, gts, threshold):
    ranked = sorted(dets, key=lambda d: -d.score)
    used = set()
    labels = []
    for d in ranked:
        options = [(quad_iou(d.quad, g), -i) for i, g in enumerate(gts) if i not in used and g.class_id == d.class_id]
        best = max(options, default=(0.0, 0))
        if best[0] >= threshold and best[0] > 0:
            used.add(-best[1])
            labels.append(TP)
        else:
            labels.append(FP)
    return labels


class TestMatching:
    def test_exact_hit(self):
        gts = Scene(100, 100, (axis_box(10, 10, 30, 20),))
        results = match_detections([det(axis_box(10, 10, 30, 20), 0.9)], gts)
        assert [r.label for r in results] == [TP]
        assert results[0].gt_index == 0
        assert results[0].iou == pytest.approx(1.0)

    def test_second_detection_on_same_gt(self):
        gts = Scene(100, 100, (axis_box(10, 10, 30, 20),))
        results = match_detections([det(axis_box(11, 10, 31, 20), 0.6), det(axis_box(10, 10, 30, 20), 0.9)], gts)
        assert [(r.detection.score, r.label) for r in results] == [(0.9, TP), (0.6, FP)]

    def test_below_threshold(self):
        gts = Scene(100, 100, (axis_box(10, 10, 30, 20),))
        results = match_detections([det(axis_box(20, 10, 40, 20), 0.9)], gts)
        assert results[0].label == FP

    def test_other_class_never_matches(self):
        gts = Scene(100, 100, (axis_box(10, 10, 30, 20, class_id=1),))
        assert match_detections([det(axis_box(10, 10, 30, 20), 0.9)], gts)[0].label == FP

    def test_difficult_is_ignored_and_not_consumed(self):
        gts = Scene(100, 100, (axis_box(10, 10, 30, 20, difficult=True),))
        results = match_detections([det(axis_box(10, 10, 30, 20), 0.9), det(axis_box(10, 10, 30, 20), 0.8)], gts)
        assert [r.label for r in results] == [IGNORED, IGNORED]

    def test_prefers_unmatched_gt(self):
        gts = Scene(100, 100, (axis_box(10, 10, 30, 20), axis_box(12, 10, 32, 20)))
        results = match_detections([det(axis_box(10, 10, 30, 20), 0.9), det(axis_box(10, 10, 30, 20), 0.8)], gts)
        assert [(r.label, r.gt_index) for r in results] == [(TP, 0), (TP, 1)]

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_oracle(self, seed):
        rng = random.Random(seed)
        gts = []
        for _ in range(10):
            x, y = rng.uniform(0, 200), rng.uniform(0, 200)
            gts.append(axis_box(x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30), class_id=rng.randrange(2)))
        dets = []
        for _ in range(20):
            base = rng.choice(gts)
            dx, dy = rng.uniform(-6, 6), rng.uniform(-6, 6)
            dets.append(det(base.translated(dx, dy), rng.random(), class_id=rng.choice([base.class_id, 0, 1])))
        scene = Scene(300, 300, tuple(gts))
        labels = [r.label for r in match_detections(dets, scene)]
        assert labels == oracle_labels(dets, gts, 0.5)


class TestAveragePrecision:
    @pytest.mark.parametrize("cfg", [VOC07, CONTINUOUS])
    def test_single_hit(self, cfg):
        assert average_precision([TP], 1, cfg) == 1.0

    @pytest.mark.parametrize("cfg", [VOC07, CONTINUOUS])
    def test_false_then_true(self, cfg):
        assert average_precision([FP, TP], 1, cfg) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("cfg", [VOC07, CONTINUOUS])
    def test_no_detections(self, cfg):
        assert average_precision([], 3, cfg) == 0.0

    def test_no_ground_truth(self):
        assert average_precision([FP], 0) is None

    def test_negative_count(self):
        with pytest.raises(ConfigError):
            average_precision([], -1)

    def test_precision_recall_arrays(self):
        precision, recall = precision_recall([TP, IGNORED, FP, TP], 4)
        assert precision.tolist() == pytest.approx([1.0, 0.5, 2 / 3])
        assert recall.tolist() == pytest.approx([0.25, 0.25, 0.5])

    @pytest.mark.parametrize("method", list(ApMethod))
    @settings(max_examples=100)
    @given(labels=st.lists(st.sampled_from([TP, FP, IGNORED]), max_size=30), extra_gt=st.integers(0, 5))
    def test_matches_enumeration(self, method, labels, extra_gt):
        num_gt = labels.count(TP) + extra_gt
        if num_gt == 0:
            return
        got = average_precision(labels, num_gt, EvalConfig(ap_method=method))
        assert got == pytest.approx(oracle_ap(labels, num_gt, method), abs=1e-9)
        assert 0.0 <= got <= 1.0

    @pytest.mark.parametrize("method", list(ApMethod))
    @given(labels=st.lists(st.sampled_from([TP, FP]), max_size=20))
    def test_trailing_false_positive_never_helps(self, method, labels):
        num_gt = labels.count(TP) + 1
        cfg = EvalConfig(ap_method=method)
        assert average_precision(labels + [FP], num_gt, cfg) <= average_precision(labels, num_gt, cfg) + 1e-12

    @pytest.mark.parametrize("method", list(ApMethod))
    @given(labels=st.lists(st.sampled_from([TP, FP]), max_size=20))
    def test_leading_true_positive_never_hurts(self, method, labels):
        num_gt = labels.count(TP) + 1
        cfg = EvalConfig(ap_method=method)
        assert average_precision([TP] + labels, num_gt, cfg) >= average_precision(labels, num_gt, cfg) - 1e-12


class TestEvaluate:
    def test_fixture_continuous(self, eval_fixture):
        dets, gts = eval_fixture
        report = evaluate(dets, gts, CONTINUOUS, ("car", "ship"))
        assert report.per_class[0].ap == pytest.approx(5 / 9, abs=1e-9)
        assert report.per_class[1].ap == pytest.approx(5 / 6, abs=1e-9)
        assert report.map == pytest.approx(25 / 36, abs=1e-9)

    def test_fixture_voc07(self, eval_fixture):
        dets, gts = eval_fixture
        report = evaluate(dets, gts, VOC07, ("car", "ship"))
        assert report.per_class[0].ap == pytest.approx(6 / 11, abs=1e-9)
        assert report.per_class[1].ap == pytest.approx(28 / 33, abs=1e-9)
        assert report.map == pytest.approx(23 / 33, abs=1e-9)

    def test_fixture_counts(self, eval_fixture):
        dets, gts = eval_fixture
        report = evaluate(dets, gts, CONTINUOUS, ("car", "ship"))
        car, ship = report.per_class[0], report.per_class[1]
        assert (car.name, car.tp, car.fp, car.num_gt) == ("car", 2, 1, 3)
        assert (ship.name, ship.tp, ship.fp, ship.num_gt) == ("ship", 2, 1, 2)
        assert np.all(np.diff(car.recall) >= 0)

    @pytest.mark.parametrize("method", list(ApMethod))
    def test_fixture_matches_oracle(self, eval_fixture, method):
        dets, gts = eval_fixture
        report = evaluate(dets, gts, EvalConfig(ap_method=method))
        expected = {0: [TP, FP, TP], 1: [IGNORED, TP, FP, TP]}
        for class_id, labels in expected.items():
            num_gt = report.per_class[class_id].num_gt
            assert report.per_class[class_id].ap == pytest.approx(oracle_ap(labels, num_gt, method), abs=1e-9)

    @pytest.mark.parametrize("cfg", [VOC07, CONTINUOUS])
    def test_perfect_detections(self, cfg):
        scenes = {f"img{i}": synth_scene(5, SynthSpec(num_classes=3), index=i) for i in range(4)}
        dets = {k: [det(q, 1.0, q.class_id) for q in s.annotations] for k, s in scenes.items()}
        assert evaluate(dets, scenes, cfg).map == 1.0

    @pytest.mark.parametrize("cfg", [VOC07, CONTINUOUS])
    def test_empty_detections(self, cfg, eval_fixture):
        _, gts = eval_fixture
        report = evaluate({}, gts, cfg)
        assert report.map == 0.0
        assert all(r.ap == 0.0 for r in report.per_class.values())

    def test_class_without_ground_truth_left_out(self, eval_fixture):
        dets, gts = eval_fixture
        extra = dict(dets)
        extra["img_c"] = list(dets["img_c"]) + [det(axis_box(0, 0, 5, 5), 0.3, class_id=2)]
        report = evaluate(extra, gts, CONTINUOUS)
        assert report.per_class[2].ap is None
        assert report.map == pytest.approx(25 / 36, abs=1e-9)

    def test_unknown_image_id(self, eval_fixture):
        dets, gts = eval_fixture
        with pytest.raises(FormatError):
            evaluate({"img_z": dets["img_a"]}, gts)

    @settings(max_examples=20)
    @given(st.randoms(use_true_random=False))
    def test_permutation_invariant(self, rnd):
        dets, gts = eval_data()
        baseline = evaluate(dets, gts, CONTINUOUS)
        keys = list(dets)
        rnd.shuffle(keys)
        shuffled = {}
        for key in keys:
            items = list(dets[key])
            rnd.shuffle(items)
            shuffled[key] = items
        again = evaluate(shuffled, dict(reversed(list(gts.items()))), CONTINUOUS)
        assert again.map == baseline.map
        assert {k: r.ap for k, r in again.per_class.items()} == {k: r.ap for k, r in baseline.per_class.items()}

    def test_adding_best_ranked_hit_helps(self, eval_fixture):
        dets, gts = eval_fixture
        baseline = evaluate(dets, gts, CONTINUOUS).per_class[0].ap
        more = dict(dets)
        more["img_a"] = list(dets["img_a"]) + [det(axis_box(100, 100, 140, 120), 0.99)]
        assert evaluate(more, gts, CONTINUOUS).per_class[0].ap >= baseline

    def test_report_dict(self, eval_fixture):
        dets, gts = eval_fixture
        data = evaluate(dets, gts, VOC07, ("car", "ship")).to_dict()
        assert data["config"] == {"iou_threshold": 0.5, "ap_method": "voc07"}
        assert sorted(data["per_class"]) == ["0", "1"]
        assert data["per_class"]["1"]["name"] == "ship"


def test_invalid_threshold():
    with pytest.raises(ConfigError):
        EvalConfig(iou_threshold=1.0)
