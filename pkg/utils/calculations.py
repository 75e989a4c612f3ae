"""Utility functions for numeric work (angles, grid mapping, gradients)"""
import math
import os
import tempfile
from typing import Callable, Tuple, Union

import numpy as np


def wrap_degrees(angle: float) -> float:
    """Map any angle to [0, 360)"""
    wrapped = math.fmod(angle, 360.0)
    if wrapped < 0.0:
        wrapped += 360.0
    # fmod of a tiny negative value can round up to exactly 360
    if wrapped >= 360.0:
        wrapped = 0.0
    return wrapped


def angle_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in degrees, in [0, 180]"""
    diff = abs(wrap_degrees(a) - wrap_degrees(b))
    return min(diff, 360.0 - diff)


def signed_angle_residual(a, b):
    """a − b wrapped to [−180, 180); works on scalars and arrays"""
    return np.mod(np.asarray(a, dtype=np.float64) - b + 180.0, 360.0) - 180.0


def split_grid_offset(coord: float, down_ratio: int) -> Tuple[int, float]:
    """
    Split a pixel coordinate into output cell index and fractional offset.

    Formula: cell = floor(coord / d), offset = coord / d − cell
    """
    scaled = coord / down_ratio
    cell = math.floor(scaled)
    return cell, scaled - cell


def output_grid_shape(image_width: int, image_height: int, down_ratio: int) -> Tuple[int, int]:
    """(rows, cols) of the output grid; partial cells count (image padded to a multiple of d)"""
    rows = -(-image_height // down_ratio)
    cols = -(-image_width // down_ratio)
    return rows, cols


def central_difference(
    func: Callable[[np.ndarray], float],
    x: Union[float, np.ndarray],
    step: float = 1e-4,
) -> np.ndarray:
    """
    Numerical gradient of a scalar function by central differences.

    Formula: g_i = (f(x + h·e_i) − f(x − h·e_i)) / 2h
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + step
        f_plus = func(x.copy())
        flat_x[i] = original - step
        f_minus = func(x.copy())
        flat_x[i] = original
        flat_g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Max elementwise |a − n| / max(|a|, |n|, floor)"""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def write_atomic(path: str, data: Union[bytes, str]) -> None:
    """Write a file via temp file + rename so readers never see a partial file"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
