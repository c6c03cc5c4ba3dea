"""Interpretation scoring: slice averaging, thresholds, top-k masks, Dice, MAE.

Ground truth is the striatal segmentation of the slice-averaged SPECT image
(threshold 0.63 for NC, 0.69 for PD); predictions are top-k% binarizations of
the slice-averaged attention map. Both live on the same 2D (y, x) grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .phantom import Volume

logger = logging.getLogger(__name__)

SLICE_WINDOW_FULL = (35, 48)  # transaxial indices, inclusive, on the 91-slice grid
FULL_GRID_SLICES = 91

THRESHOLD_NC = 0.63
THRESHOLD_PD = 0.69


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def slice_window(n_slices: int) -> tuple[int, int]:
    """The striatal slice window, scaled proportionally on reduced grids."""
    lo, hi = SLICE_WINDOW_FULL
    if n_slices == FULL_GRID_SLICES:
        return lo, hi
    start = _round_half_up(lo * n_slices / FULL_GRID_SLICES)
    end = _round_half_up(hi * n_slices / FULL_GRID_SLICES)
    if not 0 <= start < end < n_slices:
        raise ShapeError(
            f"volume with {n_slices} transaxial slices cannot host the scaled "
            f"striatal window [{start}, {end}]"
        )
    return start, end


@dataclass
class SliceImage:
    """2D scalar field in [0, 1] plus provenance of how it was produced."""

    data: np.ndarray  # (Y, X)
    provenance: dict = field(default_factory=dict)


@dataclass
class BinaryMask2D:
    data: np.ndarray  # (Y, X) bool
    provenance: dict = field(default_factory=dict)


def slice_average(volume) -> SliceImage:
    """Normalize each striatal-window slice to [0,1], average, renormalize.

    Constant (zero-range) slices pass through as zeros and are recorded in the
    provenance.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got {data.ndim}D")
    start, end = slice_window(data.shape[0])
    window = data[start : end + 1].astype(np.float64)
    zero_range = []
    normalized = np.zeros_like(window)
    for i, sl in enumerate(window):
        lo, hi = sl.min(), sl.max()
        if hi > lo:
            normalized[i] = (sl - lo) / (hi - lo)
        else:
            zero_range.append(start + i)
    mean = normalized.mean(axis=0)
    lo, hi = mean.min(), mean.max()
    if hi > lo:
        mean = (mean - lo) / (hi - lo)
    prov = {"window": [start, end], "n_slices": end - start + 1}
    if zero_range:
        prov["zero_range_slices"] = zero_range
        logger.warning("slice_average: %d zero-range slices passed as zeros", len(zero_range))
    return SliceImage(data=mean, provenance=prov)


def segment_ground_truth(slice_img: SliceImage, label: str) -> BinaryMask2D:
    """Threshold the slice-averaged image at the class-specific level."""
    if label == "NC":
        threshold = THRESHOLD_NC
    elif label == "PD":
        threshold = THRESHOLD_PD
    else:
        raise ConfigError(f"unknown label {label!r}; expected NC or PD")
    mask = slice_img.data >= threshold
    if not mask.any():
        logger.warning("segment_ground_truth: empty mask at threshold %.2f", threshold)
    return BinaryMask2D(
        data=mask,
        provenance={"kind": "ground-truth", "threshold": threshold, "label": label},
    )


def topk_binarize(slice_img, k_percent: float) -> BinaryMask2D:
    """Keep exactly round(k% * pixel count) highest pixels; ties to lowest index."""
    data = slice_img.data if isinstance(slice_img, SliceImage) else np.asarray(slice_img)
    if not 0 < k_percent <= 100:
        raise ConfigError(f"k must be in (0, 100], got {k_percent}")
    n = data.size
    n_set = _round_half_up(k_percent / 100.0 * n)
    order = np.argsort(-data.reshape(-1), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:n_set]] = True
    return BinaryMask2D(
        data=mask.reshape(data.shape),
        provenance={"kind": "topk", "k_percent": k_percent, "n_set": n_set},
    )


def dice(p: BinaryMask2D, g: BinaryMask2D) -> float:
    """2|P∩G| / (|P|+|G|); 0 when both masks are empty (logged)."""
    pd_, gd = p.data, g.data
    if pd_.shape != gd.shape:
        raise ShapeError(f"mask extents differ: {pd_.shape} vs {gd.shape}")
    denom = int(pd_.sum()) + int(gd.sum())
    if denom == 0:
        logger.warning("dice: both masks empty, defining overlap as 0")
        return 0.0
    return 2.0 * int((pd_ & gd).sum()) / denom


def mae_map(masks_pred: list[BinaryMask2D], masks_gt: list[BinaryMask2D]):
    """Per-pixel mean absolute error between paired binary masks.

    Returns the 2D error field and its spatial mean.
    """
    if not masks_pred or len(masks_pred) != len(masks_gt):
        raise ConfigError("need equally sized, nonempty mask lists")
    shape = masks_pred[0].data.shape
    acc = np.zeros(shape, dtype=np.float64)
    for p, g in zip(masks_pred, masks_gt):
        if p.data.shape != shape or g.data.shape != shape:
            raise ShapeError("all masks must share one extent")
        acc += np.abs(p.data.astype(np.float64) - g.data.astype(np.float64))
    field_ = acc / len(masks_pred)
    return field_, float(field_.mean())


def mean_segmented_heatmap(masks: list[BinaryMask2D]) -> SliceImage:
    """Pixelwise average of binary masks; values in [0, 1]."""
    if not masks:
        raise ConfigError("need at least one mask")
    shape = masks[0].data.shape
    acc = np.zeros(shape, dtype=np.float64)
    for m in masks:
        if m.data.shape != shape:
            raise ShapeError("all masks must share one extent")
        acc += m.data
    return SliceImage(
        data=acc / len(masks),
        provenance={"kind": "mean-segmented-heatmap", "n_subjects": len(masks)},
    )


@dataclass(frozen=True)
class InterpRecord:
    """One Dice measurement: subject x model x method x threshold."""

    subject_id: str
    model: str
    method: str
    fold: int
    k_percent: float
    dice: float
    excluded: bool = False
    reason: str = ""


def aggregate_dice(records: list[InterpRecord]):
    """mean ± SD per (model, method, k_percent), excluded records dropped."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if r.excluded:
            continue
        groups.setdefault((r.model, r.method, r.k_percent), []).append(r.dice)
    out = {}
    for key, vals in sorted(groups.items()):
        arr = np.array(vals)
        sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out[key] = {"mean": float(arr.mean()), "sd": sd, "n": len(arr)}
    return out
