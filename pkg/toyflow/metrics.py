"""Flow accuracy metrics and the statistics the experiments report."""

import logging

import numpy as np
from scipy import stats

from config import F1_ABS_THRESHOLD, F1_REL_THRESHOLD
from numerics.tensor_ops import ShapeError, Tensor, as_tensor

logger = logging.getLogger(__name__)


def _endpoint_errors(f: Tensor, f_gt: Tensor) -> Tensor:
    f, f_gt = as_tensor(f), as_tensor(f_gt)
    if f.shape != f_gt.shape or f.shape[0] != 2:
        raise ShapeError(f"Flow shapes must match and start with 2, got {f.shape} and {f_gt.shape}")
    diff = f - f_gt
    return np.hypot(diff[0], diff[1])


def epe(f: Tensor, f_gt: Tensor) -> float:
    """Average end-point error over pixels."""
    return float(np.mean(_endpoint_errors(f, f_gt)))


def f1_all(
    f: Tensor,
    f_gt: Tensor,
    abs_thresh: float = F1_ABS_THRESHOLD,
    rel_thresh: float = F1_REL_THRESHOLD,
) -> float:
    """Percentage of pixels whose error exceeds ``abs_thresh`` and ``rel_thresh * |f_gt|``."""
    errors = _endpoint_errors(f, f_gt)
    magnitude = np.hypot(f_gt[0], f_gt[1])
    outliers = (errors > abs_thresh) & (errors > rel_thresh * magnitude)
    return 100.0 * float(np.mean(outliers))


def mean_flow_magnitude(f: Tensor) -> float:
    """Average per-pixel flow norm."""
    f = as_tensor(f)
    return float(np.mean(np.hypot(f[0], f[1])))


def pearson_r(xs, ys) -> float | None:
    """
    Pearson correlation of two equally long series.

    Returns:
        The coefficient, or None when either series has zero variance (or
        fewer than two points), where it is undefined.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeError(f"Expected two 1-d series of equal length, got {xs.shape} and {ys.shape}")
    if xs.size < 2 or np.ptp(xs) == 0.0 or np.ptp(ys) == 0.0:
        logger.warning(f"Pearson r undefined for {xs.size} samples with a constant series.")
        return None
    return float(stats.pearsonr(xs, ys).statistic)
