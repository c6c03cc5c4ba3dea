"""Dense 3D layer kernels with hand-derived adjoints.

All kernels are pure functions over numpy arrays laid out as
(batch, channel, z, y, x) with x fastest. Convolution is cross-correlation
(no kernel flip) with no padding; output extents follow floor((n-k)/s)+1.
Every backward kernel is checked against central finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

Axes3 = tuple[int, int, int]

AXIS_NAMES = ("z", "y", "x")


def _as_axes3(v) -> Axes3:
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 spatial extents, got {len(t)}")
    return t


def conv_out_extent(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    """Valid (unpadded) 3D cross-correlation geometry."""

    in_channels: int
    out_channels: int
    kernel: Axes3
    stride: Axes3

    def __post_init__(self):
        object.__setattr__(self, "kernel", _as_axes3(self.kernel))
        object.__setattr__(self, "stride", _as_axes3(self.stride))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ShapeError("kernel and stride extents must be >= 1")

    def out_extents(self, in_extents: Axes3) -> Axes3:
        out = []
        for name, n, k, s in zip(AXIS_NAMES, in_extents, self.kernel, self.stride):
            m = conv_out_extent(n, k, s)
            if m < 1:
                raise ShapeError(
                    f"axis {name}: extent {n} with kernel {k} stride {s} "
                    f"gives output extent {m} < 1"
                )
            out.append(m)
        return tuple(out)


@dataclass
class LayerGradients:
    """Gradients of a scalar loss with respect to a layer's input and parameters.

    Each entry has exactly the shape of the quantity it differentiates.
    """

    d_input: np.ndarray
    d_params: dict[str, np.ndarray]


def _check_5d(x: np.ndarray, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what} must be 5D (batch, channel, z, y, x), got {x.ndim}D")


def _windows(x: np.ndarray, kernel: Axes3, stride: Axes3) -> np.ndarray:
    """Strided view (B, C, OZ, OY, OX, kz, ky, kx) of all kernel windows."""
    win = sliding_window_view(x, kernel, axis=(2, 3, 4))
    return win[:, :, :: stride[0], :: stride[1], :: stride[2]]


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Valid cross-correlation of x (B,C,Z,Y,X) with w (O,C,kz,ky,kx) plus bias."""
    _check_5d(x, "conv input")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"axis channel: input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    expect_w = (spec.out_channels, spec.in_channels) + spec.kernel
    if w.shape != expect_w:
        raise ShapeError(f"conv weights shape {w.shape} != expected {expect_w}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias shape {b.shape} != ({spec.out_channels},)")
    spec.out_extents(x.shape[2:])  # validates extents, names the axis on failure
    win = _windows(x, spec.kernel, spec.stride)
    # contract channel + kernel axes: (B,OZ,OY,OX,O)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    out += b[None, :, None, None, None]
    return out


def conv3d_backward(
    x: np.ndarray, w: np.ndarray, spec: ConvSpec, g_out: np.ndarray,
    need_param_grads: bool = True,
) -> LayerGradients:
    """Adjoint of conv3d_forward: returns dL/dx, dL/dw, dL/db given dL/dout.

    need_param_grads=False skips the weight/bias gradients (attribution
    backward passes only propagate to the input).
    """
    _check_5d(x, "conv input")
    out_extents = spec.out_extents(x.shape[2:])
    expect = (x.shape[0], spec.out_channels) + out_extents
    if g_out.shape != expect:
        raise ShapeError(f"upstream gradient shape {g_out.shape} != forward output {expect}")
    d_params = {}
    if need_param_grads:
        win = _windows(x, spec.kernel, spec.stride)
        d_params["w"] = np.tensordot(g_out, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        d_params["b"] = g_out.sum(axis=(0, 2, 3, 4))
    # dL/dx: route each output gradient back through the kernel taps.
    # G[b,oz,oy,ox,c,i,j,k] = sum_o g[b,o,oz,oy,ox] * w[o,c,i,j,k]
    G = np.tensordot(g_out, w, axes=([1], [0]))
    d_x = np.zeros_like(x, dtype=np.result_type(x, g_out, w))
    sz, sy, sx = spec.stride
    oz, oy, ox = out_extents
    for i in range(spec.kernel[0]):
        for j in range(spec.kernel[1]):
            for k in range(spec.kernel[2]):
                d_x[
                    :, :, i : i + sz * oz : sz, j : j + sy * oy : sy, k : k + sx * ox : sx
                ] += np.moveaxis(G[..., i, j, k], -1, 1)
    return LayerGradients(d_input=d_x, d_params=d_params)


def maxpool3d_forward(
    x: np.ndarray, pool: Axes3, stride: Axes3
) -> tuple[np.ndarray, np.ndarray]:
    """Per-window maximum plus an argmax map of flat spatial input indices.

    Ties break to the first index in scan order (z, then y, then x) so that
    attribution backward passes are deterministic.
    """
    _check_5d(x, "pool input")
    pool = _as_axes3(pool)
    stride = _as_axes3(stride)
    for name, n, p in zip(AXIS_NAMES, x.shape[2:], pool):
        if p > n:
            raise ShapeError(f"axis {name}: pool window {p} larger than input extent {n}")
    for name, n, p, s in zip(AXIS_NAMES, x.shape[2:], pool, stride):
        if conv_out_extent(n, p, s) < 1:
            raise ShapeError(f"axis {name}: pooled output extent < 1")
    win = _windows(x, pool, stride)
    flat = win.reshape(win.shape[:5] + (-1,))
    arg = flat.argmax(axis=-1)  # first max in scan order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    argmax = window_index_to_flat(arg, pool, stride, x.shape[2:])
    return np.ascontiguousarray(out), argmax


def window_index_to_flat(
    arg: np.ndarray, pool: Axes3, stride: Axes3, in_spatial: tuple[int, int, int]
) -> np.ndarray:
    """Convert window-local indices (B,C,OZ,OY,OX) to flat (Z*Y*X) input indices."""
    pz, py, px = pool
    iz, rem = np.divmod(arg, py * px)
    iy, ix = np.divmod(rem, px)
    oz = np.arange(arg.shape[2])[:, None, None]
    oy = np.arange(arg.shape[3])[None, :, None]
    ox = np.arange(arg.shape[4])[None, None, :]
    z_in = oz * stride[0] + iz
    y_in = oy * stride[1] + iy
    x_in = ox * stride[2] + ix
    Z, Y, X = in_spatial
    return ((z_in * Y + y_in) * X + x_in).astype(np.int64)


def maxpool3d_backward(
    input_shape: tuple[int, ...], argmax: np.ndarray, g_out: np.ndarray
) -> np.ndarray:
    """Route upstream gradient to argmax positions, summing on collisions."""
    if g_out.shape != argmax.shape:
        raise ShapeError(f"upstream gradient shape {g_out.shape} != argmax map {argmax.shape}")
    B, C = input_shape[0], input_shape[1]
    n_spatial = int(np.prod(input_shape[2:]))
    d = np.zeros((B * C, n_spatial), dtype=g_out.dtype)
    rows = np.repeat(np.arange(B * C), argmax[0, 0].size)
    np.add.at(d, (rows, argmax.reshape(B * C, -1).ravel()), g_out.reshape(B * C, -1).ravel())
    return d.reshape(input_shape)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x_pre: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Pass upstream gradient where the pre-activation was > 0, else 0."""
    if g_out.shape != x_pre.shape:
        raise ShapeError(f"upstream gradient shape {g_out.shape} != input {x_pre.shape}")
    return g_out * (x_pre > 0)


def guided_relu_backward(x_pre: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """ReLU adjoint that additionally zeroes negative incoming gradients.

    The gradient is dropped where the forward pre-activation was <= 0 OR the
    incoming backward gradient is < 0 (exact zeros pass).
    """
    if g_out.shape != x_pre.shape:
        raise ShapeError(f"upstream gradient shape {g_out.shape} != input {x_pre.shape}")
    return g_out * ((x_pre > 0) & (g_out >= 0))


BN_EPS = 1e-5
BN_MOMENTUM = 0.99

_BN_AXES = (0, 2, 3, 4)


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None, None]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray  # per channel
    batch_mean: np.ndarray
    batch_var: np.ndarray


def batchnorm_forward_train(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = BN_EPS
) -> tuple[np.ndarray, BatchNormCache]:
    """Normalize per channel with batch statistics (biased variance)."""
    _check_5d(x, "batchnorm input")
    mean = x.mean(axis=_BN_AXES)
    var = x.var(axis=_BN_AXES)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - _per_channel(mean)) * _per_channel(inv_std)
    y = _per_channel(gamma) * x_hat + _per_channel(beta)
    return y, BatchNormCache(x_hat=x_hat, inv_std=inv_std, batch_mean=mean, batch_var=var)


def batchnorm_forward_infer(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = BN_EPS,
) -> np.ndarray:
    """Affine map per channel using frozen running moments."""
    _check_5d(x, "batchnorm input")
    inv_std = 1.0 / np.sqrt(var + eps)
    return _per_channel(gamma * inv_std) * (x - _per_channel(mean)) + _per_channel(beta)


def batchnorm_backward_train(
    cache: BatchNormCache, gamma: np.ndarray, g_out: np.ndarray
) -> LayerGradients:
    x_hat, inv_std = cache.x_hat, cache.inv_std
    if g_out.shape != x_hat.shape:
        raise ShapeError(f"upstream gradient shape {g_out.shape} != input {x_hat.shape}")
    n = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3] * x_hat.shape[4]
    d_gamma = (g_out * x_hat).sum(axis=_BN_AXES)
    d_beta = g_out.sum(axis=_BN_AXES)
    d_xhat = g_out * _per_channel(gamma)
    d_x = (
        _per_channel(inv_std)
        / n
        * (
            n * d_xhat
            - _per_channel(d_xhat.sum(axis=_BN_AXES))
            - x_hat * _per_channel((d_xhat * x_hat).sum(axis=_BN_AXES))
        )
    )
    return LayerGradients(d_input=d_x, d_params={"gamma": d_gamma, "beta": d_beta})


def batchnorm_backward_infer(
    gamma: np.ndarray, var: np.ndarray, g_out: np.ndarray, eps: float = BN_EPS
) -> np.ndarray:
    return g_out * _per_channel(gamma / np.sqrt(var + eps))


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map: x (B,F) @ w (F,O) + b (O,)."""
    if x.ndim != 2:
        raise ShapeError(f"dense input must be 2D (batch, features), got {x.ndim}D")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"axis feature: input has {x.shape[1]} features, weights expect {w.shape[0]}")
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, g_out: np.ndarray) -> LayerGradients:
    if g_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"upstream gradient shape {g_out.shape} != ({x.shape[0]}, {w.shape[1]})")
    return LayerGradients(
        d_input=g_out @ w.T,
        d_params={"w": x.T @ g_out, "b": g_out.sum(axis=0)},
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Class-weighted cross-entropy over a batch of logits.

    loss = -sum_i w[y_i] log softmax(logits_i)[y_i] / sum_i w[y_i]; returns the
    loss and its gradient with respect to the logits.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2D (batch, classes), got {logits.ndim}D")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside class range [0, {k})")
    if class_weights is None:
        class_weights = np.ones(k, dtype=logits.dtype)
    class_weights = np.asarray(class_weights, dtype=logits.dtype)
    if class_weights.shape != (k,):
        raise ShapeError(f"class_weights shape {class_weights.shape} != ({k},)")
    if np.any(class_weights <= 0):
        raise ValueError("class weights must be strictly positive")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    w_i = class_weights[labels]
    w_sum = w_i.sum()
    loss = float(-(w_i * log_probs[np.arange(n), labels]).sum() / w_sum)
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w_i / w_sum)[:, None]
    return loss, grad


def glorot_uniform(
    shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32
) -> np.ndarray:
    """Uniform init on +-sqrt(6/(fan_in+fan_out)); deterministic under a fixed rng."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ShapeError("glorot init needs at least 2 axes to define fans")
    if len(shape) == 2:  # dense (fan_in, fan_out)
        fan_in, fan_out = shape
    else:  # conv (out_channels, in_channels, *kernel)
        receptive = int(np.prod(shape[2:]))
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
