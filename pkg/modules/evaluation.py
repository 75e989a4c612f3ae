"""Rotated-IoU detection matching and VOC-style AP / mAP"""
import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from modules.decoder import Detection
from modules.geometry import quad_iou
from modules.target_codec import Scene
from src.config import EVAL_IOU_THRESHOLD, config_to_dict
from utils.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)


class ApMethod(str, enum.Enum):
    VOC07 = "voc07"              # 11-point interpolation
    CONTINUOUS = "continuous"    # area under the interpolated P-R curve


class MatchLabel(str, enum.Enum):
    TP = "tp"
    FP = "fp"
    IGNORED = "ignored"          # matched a difficult ground truth


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = EVAL_IOU_THRESHOLD
    ap_method: ApMethod = ApMethod.CONTINUOUS

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ConfigError(f"iou_threshold must be in (0, 1), got {self.iou_threshold}")
        object.__setattr__(self, "ap_method", ApMethod(self.ap_method))

    def to_dict(self) -> Dict:
        return config_to_dict(self)


class MatchResult(NamedTuple):
    image_id: str
    detection: Detection
    label: MatchLabel
    gt_index: Optional[int]
    iou: float


@dataclass(frozen=True, eq=False)
class ClassResult:
    name: str
    ap: Optional[float]          # None when the class has no scorable ground truth
    precision: np.ndarray
    recall: np.ndarray
    tp: int
    fp: int
    num_gt: int

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "ap": self.ap,
            "tp": self.tp,
            "fp": self.fp,
            "num_gt": self.num_gt,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
        }


@dataclass(frozen=True)
class EvalReport:
    per_class: Dict[int, ClassResult] = field(default_factory=dict)
    map: float = 0.0
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "map": self.map,
            "config": self.config,
            "per_class": {str(k): v.to_dict() for k, v in sorted(self.per_class.items())},
        }


def ranking_key(image_id: str, det: Detection) -> Tuple:
    """Global detection order: score descending, then class, image id, centre x, centre y"""
    c = det.center
    return (-det.score, det.class_id, image_id, c.x, c.y)


def _greedy_match(ranked: Sequence[Tuple[str, Detection]], gts_by_image: Mapping[str, Scene],
                  cfg: EvalConfig) -> List[MatchResult]:
    """Each detection takes the highest-IoU unmatched same-class ground truth, in ranked order"""
    used: Dict[str, set] = {}
    results = []
    for image_id, det in ranked:
        scene = gts_by_image[image_id]
        taken = used.setdefault(image_id, set())

        best_index, best_iou = None, 0.0
        for index, gt in enumerate(scene.annotations):
            if gt.class_id != det.class_id or index in taken:
                continue
            iou = quad_iou(det.quad, gt)
            if iou > best_iou:
                best_index, best_iou = index, iou

        if best_index is None or best_iou < cfg.iou_threshold:
            results.append(MatchResult(image_id, det, MatchLabel.FP, None, best_iou))
        elif scene.annotations[best_index].difficult:
            # difficult ground truth stays available for later detections
            results.append(MatchResult(image_id, det, MatchLabel.IGNORED, best_index, best_iou))
        else:
            taken.add(best_index)
            results.append(MatchResult(image_id, det, MatchLabel.TP, best_index, best_iou))
    return results


def match_detections(dets: Sequence[Detection], gts: Scene, cfg: EvalConfig = EvalConfig(),
                     image_id: str = "") -> List[MatchResult]:
    """TP / FP / ignored label per detection of one image, in ranking order"""
    ranked = sorted(((image_id, d) for d in dets), key=lambda item: ranking_key(*item))
    return _greedy_match(ranked, {image_id: gts}, cfg)


def precision_recall(labels: Sequence[MatchLabel], num_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    scored = [label for label in labels if label != MatchLabel.IGNORED]
    tp = np.cumsum([label == MatchLabel.TP for label in scored], dtype=np.float64)
    fp = np.cumsum([label == MatchLabel.FP for label in scored], dtype=np.float64)
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return precision, recall


def average_precision(labels: Sequence[MatchLabel], num_gt: int,
                      cfg: EvalConfig = EvalConfig()) -> Optional[float]:
    """
    AP from ranked match labels.

    VOC07: mean over t ∈ {0, 0.1, …, 1} of max precision at recall ≥ t.
    Continuous: area under the precision envelope.
    num_gt = 0 → None (class left out of mAP).
    """
    if num_gt < 0:
        raise ConfigError(f"num_gt must be ≥ 0, got {num_gt}")
    if num_gt == 0:
        return None
    precision, recall = precision_recall(labels, num_gt)
    if len(precision) == 0:
        return 0.0

    if cfg.ap_method == ApMethod.VOC07:
        total = 0.0
        for t in np.arange(11) / 10.0:
            reached = precision[recall >= t]
            total += np.max(reached) if reached.size else 0.0
        return float(total / 11.0)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    # mpre[i + 1] is the precision on (mrec[i], mrec[i + 1]]; equal-precision runs are summed as one span
    levels = mpre[1:]
    ap = 0.0
    start = 0
    for i in range(1, levels.size + 1):
        if i == levels.size or levels[i] != levels[start]:
            ap += (mrec[i] - mrec[start]) * levels[start]
            start = i
    return float(ap)


def evaluate(dets_by_image: Mapping[str, Sequence[Detection]], gts_by_image: Mapping[str, Scene],
             cfg: EvalConfig = EvalConfig(), class_names: Sequence[str] = ()) -> EvalReport:
    """
    Per-class AP over detections pooled across images; mAP = plain mean over
    classes with at least one non-difficult ground truth.
    """
    unknown = sorted(set(dets_by_image) - set(gts_by_image))
    if unknown:
        raise FormatError(f"detections for unknown image ids: {', '.join(map(str, unknown))}")

    num_gt: Dict[int, int] = {}
    for scene in gts_by_image.values():
        for gt in scene.annotations:
            num_gt.setdefault(gt.class_id, 0)
            if not gt.difficult:
                num_gt[gt.class_id] += 1

    ranked = sorted(
        ((image_id, det) for image_id, dets in dets_by_image.items() for det in dets),
        key=lambda item: ranking_key(*item),
    )
    class_ids = sorted(set(num_gt) | {det.class_id for _, det in ranked})

    per_class = {}
    for class_id in class_ids:
        results = _greedy_match([item for item in ranked if item[1].class_id == class_id], gts_by_image, cfg)
        labels = [r.label for r in results]
        n = num_gt.get(class_id, 0)
        precision, recall = precision_recall(labels, n)
        name = class_names[class_id] if class_id < len(class_names) else str(class_id)
        per_class[class_id] = ClassResult(
            name=name,
            ap=average_precision(labels, n, cfg),
            precision=precision,
            recall=recall,
            tp=labels.count(MatchLabel.TP),
            fp=labels.count(MatchLabel.FP),
            num_gt=n,
        )

    scored = [r.ap for r in per_class.values() if r.ap is not None]
    mean_ap = float(np.mean(scored)) if scored else 0.0
    logger.info("mAP %.4f over %d classes", mean_ap, len(scored))
    return EvalReport(per_class=per_class, map=mean_ap, config=cfg.to_dict())
