"""Pattern metrics and threshold baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .grids import BinaryImage, Field2D

DEFAULT_WINDOW_PX = 21


@dataclass(frozen=True)
class EpeReport:
    epe_mean_nm: float
    epe_max_nm: float
    site_count: int
    capped: bool = False


@dataclass(frozen=True)
class VarThresholdParams:
    """Local threshold ``m1 + m2 * (local max of the aerial image)``."""

    m1: float
    m2: float
    window_px: int = DEFAULT_WINDOW_PX

    def __post_init__(self):
        if int(self.window_px) != self.window_px or self.window_px < 1 or self.window_px % 2 == 0:
            raise InvalidArgument(f"window_px must be an odd integer >= 1, got {self.window_px}")


def _same_grid(a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.pitch_nm != b.pitch_nm:
        raise InvalidArgument(f"pitch mismatch: {a.pitch_nm} vs {b.pitch_nm}")


def pixel_difference(pred: BinaryImage, gt: BinaryImage) -> float:
    """Percentage of pixels where the two patterns disagree."""
    _same_grid(pred, gt)
    return 100.0 * np.count_nonzero(pred.values != gt.values) / pred.values.size


def boundary_mask(values: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-connected background neighbour (outside counts as background)."""
    fg = values.astype(bool)
    padded = np.pad(fg, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return fg & ~interior


def extract_boundary(img: BinaryImage) -> set[tuple[int, int]]:
    rows, cols = np.nonzero(boundary_mask(img.values))
    return set(zip(rows.tolist(), cols.tolist()))


def epe_stats(pred: BinaryImage, gt: BinaryImage, cap_nm: float | None = None) -> EpeReport:
    """Distance from each ground-truth boundary pixel to the nearest predicted one.

    When exactly one of the two boundaries is empty the distance is undefined;
    ``cap_nm`` (default: the image diagonal) is reported instead and the
    report is flagged as capped.
    """
    _same_grid(pred, gt)
    gt_edge = boundary_mask(gt.values)
    pred_edge = boundary_mask(pred.values)
    sites = int(np.count_nonzero(gt_edge))
    has_pred = bool(pred_edge.any())
    if sites == 0 and not has_pred:
        return EpeReport(0.0, 0.0, 0)
    if sites == 0 or not has_pred:
        if cap_nm is None:
            cap_nm = math.hypot(*gt.shape) * gt.pitch_nm
        return EpeReport(cap_nm, cap_nm, sites, capped=True)
    # pixel-unit distances are square roots of exact integers; scale afterwards
    dist = ndimage.distance_transform_edt(~pred_edge)
    samples = dist[gt_edge] * gt.pitch_nm
    return EpeReport(float(samples.mean()), float(samples.max()), sites)


def fixed_threshold_predict(aerial: Field2D, thr: float) -> BinaryImage:
    return BinaryImage((aerial.values > thr).astype(np.uint8), aerial.pitch_nm)


def local_max(values: np.ndarray, window_px: int) -> np.ndarray:
    # edge replication gives the max over the window clipped to the image
    return ndimage.maximum_filter(values, size=window_px, mode="nearest")


def variable_threshold_predict(aerial: Field2D, p: VarThresholdParams) -> BinaryImage:
    tau = p.m1 + p.m2 * local_max(aerial.values, p.window_px)
    return BinaryImage((aerial.values > tau).astype(np.uint8), aerial.pitch_nm)


@dataclass(frozen=True)
class BaselineFit:
    variant: str
    thr: float | None
    var: VarThresholdParams | None
    pixel_difference: float


def best_threshold(score: np.ndarray, label: np.ndarray) -> tuple[float, int]:
    """Exact 1D search: the cut ``c`` minimizing errors of ``score > c`` vs ``label``.

    Returns the cut (midway inside the optimal gap) and its error count.
    """
    order = np.argsort(score, kind="stable")
    s = score[order]
    y = label[order].astype(np.int64)
    # cutting after position i predicts 1 for s[i+1:], 0 for s[:i+1]
    ones_below = np.concatenate(([0], np.cumsum(y)))
    zeros_above = np.count_nonzero(y == 0) - np.concatenate(([0], np.cumsum(1 - y)))
    errors = ones_below + zeros_above
    # only cut between distinct values (or outside the range)
    valid = np.ones(s.size + 1, dtype=bool)
    valid[1:-1] = s[1:] > s[:-1]
    errors = np.where(valid, errors, np.iinfo(np.int64).max)
    best = int(np.argmin(errors))
    if best == 0:
        cut = s[0] - 1e-6 * max(1.0, abs(s[0]))
    elif best == s.size:
        cut = s[-1] + 1e-6 * max(1.0, abs(s[-1]))
    else:
        cut = 0.5 * (s[best - 1] + s[best])
    return float(cut), int(errors[best])


def fit_threshold_baseline(dataset: Sequence, variant: str = "fixed",
                           window_px: int = DEFAULT_WINDOW_PX, m2_range: tuple[float, float] = (-1.0, 1.0),
                           grid: int = 41, rounds: int = 4) -> BaselineFit:
    """Fit a threshold baseline by minimizing pixel difference on the calibration split.

    The fixed threshold is searched exactly over every cut between distinct
    aerial values.  The variable threshold reuses that exact search for
    ``m1`` at each ``m2`` and refines ``m2`` on successively finer grids;
    ``m2 = 0`` is always a candidate, so it can never lose to the fixed fit.
    """
    calib = [r for r in dataset if getattr(r, "split", "calibration") == "calibration"]
    if not calib:
        raise InvalidArgument("calibration split is empty")
    aerial = np.concatenate([r.aerial.values.ravel() for r in calib])
    label = np.concatenate([r.wafer.values.ravel() for r in calib])
    total = aerial.size

    thr, err = best_threshold(aerial, label)
    if variant == "fixed":
        return BaselineFit("fixed", thr, None, 100.0 * err / total)
    if variant != "variable":
        raise InvalidArgument(f"unknown baseline variant {variant!r}")

    VarThresholdParams(0.0, 0.0, window_px)  # validates the window
    rmax = np.concatenate([local_max(r.aerial.values, window_px).ravel() for r in calib])
    best = (err, thr, 0.0)
    lo, hi = m2_range
    for _ in range(rounds):
        for m2 in np.linspace(lo, hi, grid):
            m1, e = best_threshold(aerial - m2 * rmax, label)
            if e < best[0]:
                best = (e, m1, float(m2))
        step = (hi - lo) / (grid - 1)
        lo, hi = best[2] - step, best[2] + step
    err, m1, m2 = best
    return BaselineFit("variable", None, VarThresholdParams(m1, m2, window_px), 100.0 * err / total)
