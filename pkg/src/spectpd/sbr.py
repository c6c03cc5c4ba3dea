"""Traditional baseline: striatal binding ratio features and a linear SVM.

The pipeline mirrors the classic semi-quantification recipe: Gaussian 6 mm
smoothing, averaging the 8 hottest transaxial slices, ROI count densities,
and SBR = target density / reference density - 1 for left/right caudate and
putamen. A deterministic hinge-loss SVM on the four SBRs is the benchmark
classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import filters, phantom
from .errors import ConfigError, ShapeError
from .phantom import Grid, Volume


def sigma_voxels(fwhm_mm: float, voxel_mm: float) -> float:
    return fwhm_mm / filters.FWHM_PER_SIGMA / voxel_mm


def gaussian_smooth_3d(volume: Volume, fwhm_mm: float = 6.0) -> Volume:
    """Separable Gaussian smoothing in mm units (unit-sum kernel, edge renorm)."""
    data = filters.gaussian_smooth(volume.data, fwhm_mm, volume.voxel_mm)
    return Volume(
        data=data.astype(volume.data.dtype),
        voxel_mm=volume.voxel_mm,
        meta=dict(volume.meta, smoothed_fwhm_mm=fwhm_mm),
    )


HOT_WINDOW = 8


def hottest_slice_average(volume: Volume | np.ndarray) -> np.ndarray:
    """Average the 8 hottest transaxial slices around the peak-uptake slice.

    The peak slice is the one maximizing summed intensity (lowest index wins
    ties); the window is centered on it and clamped at the boundaries.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got {data.ndim}D")
    n_z = data.shape[0]
    if n_z < HOT_WINDOW:
        raise ShapeError(f"volume has {n_z} transaxial slices; need >= {HOT_WINDOW}")
    sums = data.sum(axis=(1, 2))
    j = int(sums.argmax())  # argmax returns the first maximum
    start = min(max(j - HOT_WINDOW // 2 + 1, 0), n_z - HOT_WINDOW)
    return data[start : start + HOT_WINDOW].mean(axis=0)


@dataclass(frozen=True)
class RoiMask:
    """Named pixel sets on the averaged slice; targets disjoint, reference nonempty."""

    left_caudate: np.ndarray
    right_caudate: np.ndarray
    left_putamen: np.ndarray
    right_putamen: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        targets = [self.left_caudate, self.right_caudate, self.left_putamen, self.right_putamen]
        names = ["left_caudate", "right_caudate", "left_putamen", "right_putamen"]
        for i in range(len(targets)):
            for j in range(i + 1, len(targets)):
                if (targets[i] & targets[j]).any():
                    raise ConfigError(f"ROI masks {names[i]} and {names[j]} overlap")
        if not self.reference.any():
            raise ConfigError("reference ROI is empty")
        for name, m in zip(names, targets):
            if not m.any():
                raise ConfigError(f"ROI mask {name} is empty")


def _ellipse_2d(cy, cx, center, semi) -> np.ndarray:
    return (((cy - center[0]) / semi[0]) ** 2)[:, None] + (
        ((cx - center[1]) / semi[1]) ** 2
    )[None, :] <= 1.0


ROI_SHRINK = 0.9


def default_roi_masks(grid) -> RoiMask:
    """Template-aligned ROIs projected onto the (y, x) plane of the averaged slice."""
    g = phantom.resolve_grid(grid)
    _, cy, cx = phantom._axis_centers(g)
    cau_c = (phantom.CAUDATE_OFFSET_MM[1], phantom.CAUDATE_OFFSET_MM[2])
    cau_s = tuple(s * ROI_SHRINK for s in phantom.CAUDATE_SEMI_MM[1:])
    put_c = (phantom.PUTAMEN_OFFSET_MM[1], phantom.PUTAMEN_OFFSET_MM[2])
    put_s = tuple(s * ROI_SHRINK for s in phantom.PUTAMEN_SEMI_MM[1:])
    left_cau = _ellipse_2d(cy, cx, cau_c, cau_s)
    right_cau = np.flip(left_cau, axis=1)
    left_put = _ellipse_2d(cy, cx, put_c, put_s)
    right_put = np.flip(left_put, axis=1)
    # caudate takes precedence where the projections touch
    left_put &= ~(left_cau | right_cau)
    right_put &= ~(left_cau | right_cau)
    ref = (
        ((cy >= phantom.OCCIPITAL_Y_MM[0]) & (cy <= phantom.OCCIPITAL_Y_MM[1]))[:, None]
        & ((cx >= phantom.OCCIPITAL_X_MM[0]) & (cx <= phantom.OCCIPITAL_X_MM[1]))[None, :]
    )
    return RoiMask(
        left_caudate=left_cau,
        right_caudate=right_cau,
        left_putamen=left_put,
        right_putamen=right_put,
        reference=ref,
    )


@dataclass(frozen=True)
class SbrFeatures:
    """The four binding ratios; SBR > -1 whenever densities are positive."""

    left_caudate: float
    right_caudate: float
    left_putamen: float
    right_putamen: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.left_caudate, self.right_caudate, self.left_putamen, self.right_putamen]
        )


def compute_sbr(slice_img: np.ndarray, masks: RoiMask) -> SbrFeatures:
    """SBR of each target = target count density / reference count density - 1."""
    if slice_img.shape != masks.reference.shape:
        raise ShapeError(
            f"slice {slice_img.shape} and ROI masks {masks.reference.shape} differ"
        )
    ref_density = float(slice_img[masks.reference].mean())
    if ref_density <= 0:
        raise ConfigError("reference region count density is zero")

    def sbr(mask):
        return float(slice_img[mask].mean()) / ref_density - 1.0

    return SbrFeatures(
        left_caudate=sbr(masks.left_caudate),
        right_caudate=sbr(masks.right_caudate),
        left_putamen=sbr(masks.left_putamen),
        right_putamen=sbr(masks.right_putamen),
    )


# ---------------------------------------------------------------------------
# Linear soft-margin SVM by deterministic subgradient descent with
# backtracking, so the hinge objective is nonincreasing by construction.
# ---------------------------------------------------------------------------


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    C: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    objective_history: list[float]


def svm_objective(w, b, X, y, C) -> float:
    margins = y * (X @ w + b)
    return float(0.5 * w @ w + C * np.maximum(0.0, 1.0 - margins).sum())


def _svm_subgradient(w, b, X, y, C):
    margins = y * (X @ w + b)
    active = margins < 1.0
    g_w = w - C * (y[active, None] * X[active]).sum(axis=0)
    g_b = -C * y[active].sum()
    return g_w, g_b


def svm_train(features, labels, C: float = 1.0, epochs: int = 2000, step0: float = 0.5) -> SvmModel:
    """Train on standardized features; labels are {0, 1} with 1 the positive class.

    Deterministic full-batch subgradient descent with a diminishing step and
    best-iterate tracking (the subgradient method is not a descent method, so
    the reported objective history is the running best, which is nonincreasing
    by construction). The returned weights are the best iterate seen.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise ShapeError("features must be (n, d) aligned with labels")
    if len(np.unique(labels)) < 2:
        raise ConfigError("SVM training needs both classes present")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Xs = (X - mean) / std
    y = np.where(labels == 1, 1.0, -1.0)
    w = np.zeros(X.shape[1])
    b = 0.0
    best_w, best_b = w.copy(), b
    history = [svm_objective(w, b, Xs, y, C)]
    for t in range(1, epochs + 1):
        g_w, g_b = _svm_subgradient(w, b, Xs, y, C)
        step = step0 / np.sqrt(t)
        w = w - step * g_w
        b = b - step * g_b
        obj = svm_objective(w, b, Xs, y, C)
        if obj < history[-1]:
            best_w, best_b = w.copy(), b
        history.append(min(obj, history[-1]))
    return SvmModel(
        w=best_w, b=float(best_b), C=C, feature_mean=mean, feature_std=std,
        objective_history=history,
    )


def svm_predict(model: SvmModel, features) -> tuple[np.ndarray, np.ndarray]:
    """Predicted {0,1} labels and signed margin scores."""
    X = (np.asarray(features, dtype=np.float64) - model.feature_mean) / model.feature_std
    margins = X @ model.w + model.b
    return (margins >= 0).astype(int), margins
