"""Six interpretation methods, each yielding a per-voxel attention map.

Gradient family: plain backpropagation of the class logit (saliency map),
guided backpropagation (negative backward signals gated at ReLUs), Grad-CAM
(channel-weighted feature maps), and their fusion guided Grad-CAM. Additive
family: DeepLIFT with the Rescale rule against a reference input, and kernel
SHAP over super-voxel groups solved by constrained weighted least squares.

All computations run in 64-bit regardless of the model's training precision;
the class score is the pre-softmax logit throughout.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import models, ops
from .errors import ConfigError, NumericalError, ShapeError
from .filters import nearest_resize, trilinear_resize
from .models import ForwardTrace, NetworkParams, NetworkSpec
from .phantom import Volume

METHODS = (
    "saliency",
    "guided_backprop",
    "grad_cam",
    "guided_grad_cam",
    "deeplift",
    "kernel_shap",
)


@dataclass
class AttentionMap:
    """Per-voxel contribution scores for one subject and target class."""

    data: np.ndarray  # (Z, Y, X)
    method: str
    target_class: int
    subject_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.data).all():
            raise NumericalError(f"{self.method}: attention map contains non-finite values")


def _as_volume_array(volume) -> np.ndarray:
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.ndim != 3:
        raise ShapeError(f"expected a single (Z,Y,X) volume, got {data.ndim}D")
    return data.astype(np.float64)


def _prep(spec: NetworkSpec, params: NetworkParams, volume):
    x = _as_volume_array(volume)
    for name, n, e in zip(ops.AXIS_NAMES, x.shape, spec.input_extents):
        if n != e:
            raise ShapeError(f"axis {name}: volume extent {n} != network input extent {e}")
    return params.astype(np.float64), x[None]


def _logit_grad(spec, params64, x, class_idx, relu_rule):
    trace = models.forward(spec, params64, x, mode="infer")
    g = models.logit_gradient_seed(models.N_CLASSES, class_idx)
    d_input, _ = models.backward(
        spec, params64, trace, g, relu_rule=relu_rule, need_param_grads=False
    )
    return d_input[0, 0], trace


def saliency(spec, params, volume, class_idx, subject_id="") -> AttentionMap:
    """Gradient of the class logit with respect to the input volume."""
    params64, x = _prep(spec, params, volume)
    grad, _ = _logit_grad(spec, params64, x, class_idx, "gradient")
    return AttentionMap(grad, "saliency", class_idx, subject_id)


def guided_backprop(spec, params, volume, class_idx, subject_id="") -> AttentionMap:
    """Saliency variant that zeroes negative backward signals at every ReLU."""
    params64, x = _prep(spec, params, volume)
    grad, _ = _logit_grad(spec, params64, x, class_idx, "guided")
    return AttentionMap(grad, "guided_backprop", class_idx, subject_id)


def _conv_activation_sites(spec: NetworkSpec):
    """(layer index to read, spatial extents) per conv block, shallowest first.

    The activation is the ReLU output following each conv layer (the conv
    output itself when no ReLU follows).
    """
    chain = spec.shape_chain()
    sites = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, models.Conv3dLayer):
            j = i
            if i + 1 < len(spec.layers) and isinstance(spec.layers[i + 1], models.ReluLayer):
                j = i + 1
            sites.append((j, chain[j][1:]))
    return sites


def grad_cam(
    spec,
    params,
    volume,
    class_idx,
    conv_index: int | None = None,
    upsample: str = "trilinear",
    subject_id="",
) -> AttentionMap:
    """Channel-weighted sum of a conv layer's feature maps, ReLU-rectified.

    Channel weights are the spatially summed logit gradients on that layer.
    By default the deepest conv activation with spatial extent > 1 on every
    axis is used; selecting a collapsed (1x1x1-like) layer falls back to the
    next shallower usable one with a warning. The coarse map is upsampled to
    the input extents (trilinear by default, nearest for ablation).
    """
    if upsample not in ("trilinear", "nearest"):
        raise ConfigError(f"unknown upsample mode {upsample!r}")
    params64, x = _prep(spec, params, volume)
    sites = _conv_activation_sites(spec)
    usable = [s for s in sites if all(e > 1 for e in s[1])]
    if not usable:
        raise ConfigError(f"{spec.name}: no conv activation with spatial extent > 1")
    if conv_index is None:
        site = usable[-1]
    else:
        if not 0 <= conv_index < len(sites):
            raise ConfigError(
                f"conv index {conv_index} outside [0, {len(sites)}) for {spec.name}"
            )
        site = sites[conv_index]
        if not all(e > 1 for e in site[1]):
            fallback = [s for s in usable if s[0] < site[0]]
            if not fallback:
                raise ConfigError(
                    f"{spec.name}: conv {conv_index} has collapsed extents {site[1]} "
                    "and no shallower usable layer exists"
                )
            site = fallback[-1]
            warnings.warn(
                f"{spec.name}: selected conv layer has spatial extents "
                f"{sites[conv_index][1]}; falling back to the upper conv activation "
                f"with extents {site[1]}",
                stacklevel=2,
            )
    layer_idx, extents = site
    trace = models.forward(spec, params64, x, mode="infer")
    g = models.logit_gradient_seed(models.N_CLASSES, class_idx)
    d_act, _ = models.backward(
        spec, params64, trace, g, relu_rule="gradient", need_param_grads=False,
        stop_at=layer_idx,
    )
    feature_maps = trace.outputs[layer_idx][0]  # (K, az, ay, ax)
    alphas = d_act[0].sum(axis=(1, 2, 3))  # spatial sum per channel
    small = np.maximum((alphas[:, None, None, None] * feature_maps).sum(axis=0), 0.0)
    resize = trilinear_resize if upsample == "trilinear" else nearest_resize
    data = resize(small, spec.input_extents)
    return AttentionMap(
        data, "grad_cam", class_idx, subject_id,
        meta={"layer_index": layer_idx, "map_extents": list(extents), "upsample": upsample},
    )


def guided_grad_cam(spec, params, volume, class_idx, subject_id="") -> AttentionMap:
    """Voxelwise product of the upsampled Grad-CAM map and guided backprop."""
    cam = grad_cam(spec, params, volume, class_idx, subject_id=subject_id)
    guided = guided_backprop(spec, params, volume, class_idx, subject_id=subject_id)
    return AttentionMap(
        cam.data * guided.data, "guided_grad_cam", class_idx, subject_id,
        meta={"grad_cam": cam.meta},
    )


# ---------------------------------------------------------------------------
# DeepLIFT (Rescale rule)
# ---------------------------------------------------------------------------


@dataclass
class ReferenceInput:
    """Baseline volume and its traced forward pass through the same model."""

    volume: np.ndarray  # (Z, Y, X) float64
    trace: ForwardTrace


def make_reference(spec, params, baseline=None) -> ReferenceInput:
    """Trace a baseline volume (all-zeros when not given) through the model."""
    params64 = params.astype(np.float64)
    if baseline is None:
        x0 = np.zeros(spec.input_extents, dtype=np.float64)
    else:
        x0 = _as_volume_array(baseline)
    for name, n, e in zip(ops.AXIS_NAMES, x0.shape, spec.input_extents):
        if n != e:
            raise ShapeError(f"axis {name}: reference extent {n} != network input extent {e}")
    trace = models.forward(spec, params64, x0[None], mode="infer")
    return ReferenceInput(volume=x0, trace=trace)


RESCALE_EPS = 1e-7


def _deeplift_pool(m, d_in, d_out, layer) -> np.ndarray:
    """Conserving multiplier routing through a max-pool layer.

    Each output's delta is assigned to the window position with the largest
    input delta magnitude (|d_out| <= max|d_in| over the window, so the
    multiplier ratio is bounded by 1); collisions accumulate.
    """
    win = ops._windows(d_in, layer.pool, layer.stride)
    flat = win.reshape(win.shape[:5] + (-1,))
    sel = np.abs(flat).argmax(axis=-1)
    d_sel = np.take_along_axis(flat, sel[..., None], axis=-1)[..., 0]
    ratio = np.divide(
        d_out, d_sel, out=np.zeros_like(d_out), where=np.abs(d_sel) > 0
    )
    flat_idx = ops.window_index_to_flat(sel, layer.pool, layer.stride, d_in.shape[2:])
    return ops.maxpool3d_backward(d_in.shape, flat_idx, m * ratio)


def deeplift_rescale(
    spec, params, volume, reference: ReferenceInput, class_idx, subject_id=""
) -> AttentionMap:
    """Contribution scores against a reference, satisfying sum-to-delta.

    Linear layers (conv, dense, inference batchnorm) propagate multipliers by
    their linear coefficients; ReLUs use the Rescale rule m = delta_out /
    delta_in (identity pass-through below 1e-7); max-pools route each output
    delta to the largest-delta window position. The voxel contributions sum to
    the logit difference between the subject and the reference.
    """
    params64, x = _prep(spec, params, volume)
    trace_x = models.forward(spec, params64, x, mode="infer")
    trace_0 = reference.trace
    if trace_0.inputs[0].shape != trace_x.inputs[0].shape:
        raise ShapeError("reference extents do not match the subject volume")
    m = models.logit_gradient_seed(models.N_CLASSES, class_idx)
    channels = 1
    channels_per_layer = []
    for layer in spec.layers:
        channels_per_layer.append(channels)
        if isinstance(layer, models.Conv3dLayer):
            channels = layer.out_channels
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        p = params64.layers[i]
        if isinstance(layer, models.DenseLayer):
            m = m @ p["w"].T
        elif isinstance(layer, models.FlattenLayer):
            m = m.reshape(trace_x.inputs[i].shape)
        elif isinstance(layer, models.BatchNormLayer):
            m = ops.batchnorm_backward_infer(p["gamma"], p["running_var"], m)
        elif isinstance(layer, models.ReluLayer):
            d_in = trace_x.inputs[i] - trace_0.inputs[i]
            d_out = trace_x.outputs[i] - trace_0.outputs[i]
            ratio = np.divide(
                d_out, d_in, out=np.ones_like(d_out), where=np.abs(d_in) >= RESCALE_EPS
            )
            m = m * ratio
        elif isinstance(layer, models.MaxPool3dLayer):
            d_in = trace_x.inputs[i] - trace_0.inputs[i]
            d_out = trace_x.outputs[i] - trace_0.outputs[i]
            m = _deeplift_pool(m, d_in, d_out, layer)
        elif isinstance(layer, models.Conv3dLayer):
            cs = ops.ConvSpec(
                channels_per_layer[i], layer.out_channels, layer.kernel, layer.stride
            )
            m = ops.conv3d_backward(
                trace_x.inputs[i], p["w"], cs, m, need_param_grads=False
            ).d_input
    contributions = m * (trace_x.inputs[0] - trace_0.inputs[0])
    delta = float(trace_x.logits[0, class_idx] - trace_0.logits[0, class_idx])
    data = contributions[0, 0]
    residual = float(data.sum() - delta)
    return AttentionMap(
        data, "deeplift", class_idx, subject_id,
        meta={"delta": delta, "sum_to_delta_residual": residual},
    )


# ---------------------------------------------------------------------------
# Kernel SHAP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupervoxelPartition:
    """Assignment of masked voxels to one of n_groups super-voxel groups."""

    labels: np.ndarray  # (Z,Y,X) int64, -1 outside the mask
    n_groups: int

    def __post_init__(self):
        if self.n_groups < 2:
            raise ConfigError(f"need at least 2 super-voxel groups, got {self.n_groups}")
        present = np.unique(self.labels[self.labels >= 0])
        if len(present) != self.n_groups or present.max() != self.n_groups - 1:
            raise ConfigError("group labels must cover 0..n_groups-1 exactly")

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_groups)


def brain_mask(volume, threshold: float = 0.05) -> np.ndarray:
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    return data > threshold


def build_supervoxels(mask: np.ndarray, block=(4, 4, 4)) -> SupervoxelPartition:
    """Partition masked voxels into axis-aligned blocks intersected with the mask."""
    if mask.ndim != 3:
        raise ShapeError(f"expected a 3D mask, got {mask.ndim}D")
    if not mask.any():
        raise ConfigError("mask is empty; no super-voxels to build")
    bz, by, bx = block
    iz, iy, ix = np.indices(mask.shape)
    block_id = (iz // bz, iy // by, ix // bx)
    n_by = math.ceil(mask.shape[1] / by)
    n_bx = math.ceil(mask.shape[2] / bx)
    flat_block = (block_id[0] * n_by + block_id[1]) * n_bx + block_id[2]
    labels = np.full(mask.shape, -1, dtype=np.int64)
    masked_blocks = np.unique(flat_block[mask])
    renumber = {int(b): i for i, b in enumerate(masked_blocks)}
    labels[mask] = np.vectorize(renumber.__getitem__)(flat_block[mask])
    return SupervoxelPartition(labels=labels, n_groups=len(masked_blocks))


def shapley_kernel_weight(m: int, s: int) -> float:
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _solve_constrained_wls(Z, y, weights, delta):
    """Solve the additive model under sum(phi) = delta by eliminating phi_M."""
    m = Z.shape[1]
    A = Z[:, :-1] - Z[:, -1:]
    rhs = y - Z[:, -1] * delta
    sw = np.sqrt(weights)
    Aw = A * sw[:, None]
    bw = rhs * sw
    phi_head, _, rank, _ = np.linalg.lstsq(Aw, bw, rcond=None)
    if rank < m - 1:
        raise NumericalError(
            f"singular regression system (rank {rank} < {m - 1}); increase the "
            "coalition sample budget to at least the number of super-voxel groups"
        )
    phi = np.empty(m)
    phi[:-1] = phi_head
    phi[-1] = delta - phi_head.sum()
    return phi


def kernel_shap_values(
    f,
    x: np.ndarray,
    x0: np.ndarray,
    partition: SupervoxelPartition,
    n_samples: int = 2048,
    rng: np.random.Generator | None = None,
    batch_size: int = 16,
):
    """Shapley-value estimates per group for a black-box scalar function.

    f maps a stacked batch (N, *x.shape) to (N,) scores. Coalitions are fully
    enumerated when the group count M <= 16, otherwise sampled; rows are
    weighted by the Shapley kernel and solved by constrained weighted least
    squares so that phi_0 = f(x0) and sum(phi) = f(x) - f(x0) hold exactly.
    """
    rng = rng or np.random.default_rng(0)
    m = partition.n_groups
    inside = partition.labels >= 0
    x_full = np.where(inside, x, x0)  # h_x of the full coalition
    f0, fx = (float(v) for v in f(np.stack([x0, x_full])))
    delta = fx - f0
    if m <= 16:
        rows = []
        for bits in range(1, 2**m - 1):
            z = np.array([(bits >> i) & 1 for i in range(m)], dtype=np.float64)
            rows.append(z)
        Z = np.array(rows)
        sizes = Z.sum(axis=1).astype(int)
        weights = np.array([shapley_kernel_weight(m, s) for s in sizes])
        enumerated = True
    else:
        if n_samples < m:
            raise NumericalError(
                f"coalition budget {n_samples} < {m} super-voxel groups; the "
                "regression system would be singular, increase the budget"
            )
        sizes = rng.integers(1, m, size=n_samples)
        Z = np.zeros((n_samples, m))
        for r, s in enumerate(sizes):
            Z[r, rng.choice(m, size=s, replace=False)] = 1.0
        # kernel weight divided by the uniform-size sampling density; the
        # binomial factor cancels, leaving 1/(s*(M-s)) up to scale
        weights = 1.0 / (sizes * (m - sizes))
        enumerated = False
    # evaluate the model on masked inputs, absent groups replaced by reference
    ys = np.empty(len(Z))
    group_of_voxel = partition.labels
    for start in range(0, len(Z), batch_size):
        chunk = Z[start : start + batch_size]
        batch = np.empty((len(chunk),) + x.shape, dtype=x.dtype)
        for r, z in enumerate(chunk):
            present = z[np.maximum(group_of_voxel, 0)] > 0
            present &= group_of_voxel >= 0
            batch[r] = np.where(present, x, x0)
        ys[start : start + len(chunk)] = f(batch)
    phi = _solve_constrained_wls(Z, ys - f0, weights, delta)
    return phi, f0, fx, len(Z), enumerated


def kernel_shap(
    spec,
    params,
    volume,
    partition: SupervoxelPartition | None = None,
    reference=None,
    class_idx: int = models.CLASS_PD,
    n_samples: int = 2048,
    seed: int = 0,
    batch_size: int = 16,
    block=(4, 4, 4),
    subject_id="",
) -> AttentionMap:
    """Kernel SHAP attention map; each voxel gets its group's phi / group size.

    Model-agnostic: coalition evaluations run in the model's native precision
    (no gradients are taken); the weighted least squares solve is 64-bit.
    """
    _, x = _prep(spec, params, volume)
    x = x[0]
    if partition is None:
        partition = build_supervoxels(brain_mask(x), block=block)
    if partition.labels.shape != x.shape:
        raise ShapeError("super-voxel partition extents do not match the volume")
    if reference is None:
        x0 = np.zeros_like(x)
    else:
        x0 = _as_volume_array(reference if not isinstance(reference, ReferenceInput) else reference.volume)
    dtype = params.layers[-1]["w"].dtype
    x = x.astype(dtype)
    x0 = x0.astype(dtype)

    def f(batch):
        trace = models.forward(spec, params, batch, mode="infer", keep_trace=False)
        return trace.logits[:, class_idx].astype(np.float64)

    phi, f0, fx, n_rows, enumerated = kernel_shap_values(
        f, x, x0, partition, n_samples=n_samples,
        rng=np.random.default_rng(seed), batch_size=batch_size,
    )
    sizes = partition.group_sizes()
    data = np.zeros(x.shape)
    inside = partition.labels >= 0
    data[inside] = (phi / sizes)[partition.labels[inside]]
    return AttentionMap(
        data, "kernel_shap", class_idx, subject_id,
        meta={
            "phi0": f0,
            "fx": fx,
            "n_groups": partition.n_groups,
            "n_rows": n_rows,
            "enumerated": enumerated,
            "local_accuracy_residual": float(phi.sum() + f0 - fx),
        },
    )


def compute_attention(
    method: str,
    spec,
    params,
    volume,
    class_idx,
    reference: ReferenceInput | None = None,
    subject_id: str = "",
    shap_samples: int = 2048,
    shap_block=(4, 4, 4),
    seed: int = 0,
) -> AttentionMap:
    """Dispatch one of the six methods by name."""
    if method not in METHODS:
        raise ConfigError(f"unknown attribution method {method!r}; expected one of {METHODS}")
    if method == "saliency":
        return saliency(spec, params, volume, class_idx, subject_id)
    if method == "guided_backprop":
        return guided_backprop(spec, params, volume, class_idx, subject_id)
    if method == "grad_cam":
        return grad_cam(spec, params, volume, class_idx, subject_id=subject_id)
    if method == "guided_grad_cam":
        return guided_grad_cam(spec, params, volume, class_idx, subject_id)
    if method == "deeplift":
        if reference is None:
            reference = make_reference(spec, params)
        return deeplift_rescale(spec, params, volume, reference, class_idx, subject_id)
    ref_vol = reference.volume if reference is not None else None
    return kernel_shap(
        spec, params, volume, reference=ref_vol, class_idx=class_idx,
        n_samples=shap_samples, seed=seed, block=shap_block, subject_id=subject_id,
    )
