"""Loss terms with analytic gradients: smooth L1, variant focal loss, direction / offset / size, weighted total"""
import enum
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from src.config import config_to_dict
from utils.calculations import signed_angle_residual
from utils.errors import ConfigError
from utils.lookup_tables import DEFAULT_LOSS_WEIGHTS

logger = logging.getLogger(__name__)


class Normalization(str, enum.Enum):
    PIXELS = "pixels"      # N_pos = cells with truth > 0
    OBJECTS = "objects"    # N_pos = cells with truth = 1


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0
    eps: float = 1e-12
    normalization: Normalization = Normalization.PIXELS

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("focal exponents must be ≥ 0")
        if not 0 < self.eps < 0.5:
            raise ConfigError(f"eps must be in (0, 0.5), got {self.eps}")
        object.__setattr__(self, "normalization", Normalization(self.normalization))

    def to_dict(self) -> Dict:
        return config_to_dict(self)


@dataclass(frozen=True)
class LossWeights:
    """λ0..λ4 for L_ht, L_hc, L_Reg, L_offsets, L_D"""
    vertex_heatmap: float = DEFAULT_LOSS_WEIGHTS["vertex_heatmap"]
    center_heatmap: float = DEFAULT_LOSS_WEIGHTS["center_heatmap"]
    size: float = DEFAULT_LOSS_WEIGHTS["size"]
    offsets: float = DEFAULT_LOSS_WEIGHTS["offsets"]
    direction: float = DEFAULT_LOSS_WEIGHTS["direction"]

    def __post_init__(self):
        for name, value in config_to_dict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be ≥ 0, got {value}")

    def to_dict(self) -> Dict:
        return config_to_dict(self)


@dataclass(frozen=True)
class LossComponents:
    vertex_heatmap: float = 0.0
    center_heatmap: float = 0.0
    size: float = 0.0
    offsets: float = 0.0
    direction: float = 0.0

    def to_dict(self) -> Dict:
        return config_to_dict(self)


@dataclass(frozen=True, eq=False)
class FocalLossResult:
    loss: float
    grad: np.ndarray
    n_pos: float
    flagged: bool


def smooth_l1(x):
    """
    Smooth L1 and its derivative.

    f(x) = 0.5x² if |x| < 1 else |x| − 0.5;  f'(x) = x or sign(x)
    Scalars in → floats out; arrays in → arrays out.
    """
    arr = np.asarray(x, dtype=np.float64)
    small = np.abs(arr) < 1.0
    value = np.where(small, 0.5 * arr * arr, np.abs(arr) - 0.5)
    grad = np.where(small, arr, np.sign(arr))
    if arr.ndim == 0:
        return float(value), float(grad)
    return value, grad


def heatmap_focal_loss(pred, truth, n_pos: Optional[float] = None,
                       params: FocalParams = FocalParams()) -> FocalLossResult:
    """
    Variant focal loss over a heatmap plane, with its gradient w.r.t. pred.

    L = −(1/N_pos)·Σ { (1−ρ)^α log ρ                 where ρ′ = 1
                     { (1−ρ′)^β ρ^α log(1−ρ)         elsewhere
    ρ is clamped to [eps, 1 − eps]; the gradient is 0 where clamping is active.
    N_pos = 0 is replaced by 1 and flagged.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ConfigError(f"pred shape {pred.shape} != truth shape {truth.shape}")

    alpha, beta, eps = params.alpha, params.beta, params.eps
    positive = truth == 1.0

    if n_pos is None:
        if params.normalization == Normalization.OBJECTS:
            n_pos = float(np.count_nonzero(positive))
        else:
            n_pos = float(np.count_nonzero(truth > 0.0))
    flagged = n_pos <= 0
    if flagged:
        logger.debug("focal loss with no positive cells; normalising by 1")
        n_pos = 1.0

    rho = np.clip(pred, eps, 1.0 - eps)
    active = (pred > eps) & (pred < 1.0 - eps)
    one_minus = 1.0 - rho

    # ρ′ = 1 cells
    pos_term = one_minus ** alpha * np.log(rho)
    pos_grad = -alpha * one_minus ** (alpha - 1.0) * np.log(rho) + one_minus ** alpha / rho

    # ρ′ ≠ 1 cells
    weight = (1.0 - truth) ** beta
    neg_term = weight * rho ** alpha * np.log(one_minus)
    neg_grad = weight * (
        alpha * rho ** (alpha - 1.0) * np.log(one_minus) - rho ** alpha / one_minus
    )

    terms = np.where(positive, pos_term, neg_term)
    grads = np.where(positive, pos_grad, neg_grad)

    loss = -float(np.sum(terms)) / n_pos
    grad = np.where(active, -grads / n_pos, 0.0)
    return FocalLossResult(loss=loss, grad=grad, n_pos=n_pos, flagged=flagged)


def _paired(pred, truth, width: int) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, width) if np.size(pred) else np.zeros((0, width))
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, width) if np.size(truth) else np.zeros((0, width))
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction count {len(pred)} != truth count {len(truth)}")
    return pred, truth


def direction_loss(pred_theta, true_theta, wrap: bool = False) -> float:
    """
    Mean smooth L1 of θ − θ̂ over supervised peaks, raw degrees.

    wrap=True takes the residual on the circle, in [−180, 180).
    """
    pred, truth = _paired(pred_theta, true_theta, 1)
    if len(pred) == 0:
        return 0.0
    residual = signed_angle_residual(truth, pred) if wrap else truth - pred
    value, _ = smooth_l1(residual)
    return float(np.mean(value))


def offset_loss(pred, truth) -> float:
    """Smooth L1 summed over the 4 offset components, mean over peaks"""
    pred, truth = _paired(pred, truth, 4)
    if len(pred) == 0:
        return 0.0
    value, _ = smooth_l1(truth - pred)
    return float(np.mean(np.sum(value, axis=1)))


def size_loss(pred_wh, truth_wh) -> float:
    """Smooth L1 summed over (w, h), mean over peaks"""
    pred, truth = _paired(pred_wh, truth_wh, 2)
    if len(pred) == 0:
        return 0.0
    value, _ = smooth_l1(truth - pred)
    return float(np.mean(np.sum(value, axis=1)))


def total_loss(components: LossComponents, weights: LossWeights = LossWeights()) -> float:
    """L = λ0·L_ht + λ1·L_hc + λ2·L_Reg + λ3·L_offsets + λ4·L_D"""
    return (
        weights.vertex_heatmap * components.vertex_heatmap
        + weights.center_heatmap * components.center_heatmap
        + weights.size * components.size
        + weights.offsets * components.offsets
        + weights.direction * components.direction
    )


def compute_loss_components(pred, truth, params: FocalParams = FocalParams(),
                            wrap_direction: bool = False) -> LossComponents:
    """
    All five loss terms for one scene, from a predicted and a target TargetMaps.

    Regression terms are read only at centre peak cells (ρ′ = 1).
    """
    if pred.center_hm.shape != truth.center_hm.shape or pred.size_map.shape != truth.size_map.shape:
        raise ConfigError("prediction and target planes differ in shape")

    vertex = heatmap_focal_loss(pred.vertex_hm, truth.vertex_hm, params=params)
    center = heatmap_focal_loss(pred.center_hm, truth.center_hm, params=params)

    peak_rows, peak_cols = np.nonzero(np.any(truth.pos_mask[0] > 0, axis=0))

    def gather(plane):
        return np.asarray(plane, dtype=np.float64)[:, peak_rows, peak_cols].T

    return LossComponents(
        vertex_heatmap=vertex.loss,
        center_heatmap=center.loss,
        size=size_loss(gather(pred.size_map), gather(truth.size_map)),
        offsets=offset_loss(gather(pred.offset_map), gather(truth.offset_map)),
        direction=direction_loss(gather(pred.direction_map), gather(truth.direction_map), wrap=wrap_direction),
    )
