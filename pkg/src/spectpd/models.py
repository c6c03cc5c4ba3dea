"""The four network architectures and their traced execution engine.

Architectures are declarative layer pipelines validated at build time: every
variant must end in exactly 256 features feeding a 2-logit dense head
(classes: 0 = NC, 1 = PD, with PD the positive class).
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .ops import Axes3, ConvSpec

MODEL_NAMES = ("pdnet", "pdnet_bn", "deep_pdnet", "deep_pdnet_bn")
GRID_EXTENTS = {"full": (91, 109, 91), "half": (46, 55, 46)}

CLASS_NC = 0
CLASS_PD = 1
N_CLASSES = 2
FEATURES_BEFORE_DENSE = 256


@dataclass(frozen=True)
class Conv3dLayer:
    out_channels: int
    kernel: Axes3
    stride: Axes3
    kind: str = field(default="conv3d", init=False)


@dataclass(frozen=True)
class MaxPool3dLayer:
    pool: Axes3
    stride: Axes3
    kind: str = field(default="maxpool3d", init=False)


@dataclass(frozen=True)
class ReluLayer:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class BatchNormLayer:
    kind: str = field(default="batchnorm", init=False)


@dataclass(frozen=True)
class FlattenLayer:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class DenseLayer:
    out_features: int
    kind: str = field(default="dense", init=False)


Layer = Conv3dLayer | MaxPool3dLayer | ReluLayer | BatchNormLayer | FlattenLayer | DenseLayer


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer pipeline plus the input extents it was designed for."""

    name: str
    input_extents: Axes3
    layers: tuple[Layer, ...]

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes, (channels, z, y, x) or (features,).

        Raises ShapeError if the pipeline arithmetic is inconsistent anywhere.
        """
        channels = 1
        extents: tuple[int, ...] | None = tuple(self.input_extents)
        features: int | None = None
        chain: list[tuple[int, ...]] = []
        for layer in self.layers:
            if isinstance(layer, Conv3dLayer):
                if extents is None:
                    raise ShapeError(f"{self.name}: conv after flatten")
                spec = ConvSpec(channels, layer.out_channels, layer.kernel, layer.stride)
                extents = spec.out_extents(extents)
                channels = layer.out_channels
            elif isinstance(layer, MaxPool3dLayer):
                if extents is None:
                    raise ShapeError(f"{self.name}: pool after flatten")
                for name, n, p, s in zip(ops.AXIS_NAMES, extents, layer.pool, layer.stride):
                    if p > n or ops.conv_out_extent(n, p, s) < 1:
                        raise ShapeError(
                            f"{self.name}: axis {name}: pool {p} stride {s} "
                            f"invalid for extent {n}"
                        )
                extents = tuple(
                    ops.conv_out_extent(n, p, s)
                    for n, p, s in zip(extents, layer.pool, layer.stride)
                )
            elif isinstance(layer, FlattenLayer):
                if extents is None:
                    raise ShapeError(f"{self.name}: repeated flatten")
                features = channels * int(np.prod(extents))
                extents = None
            elif isinstance(layer, DenseLayer):
                if features is None:
                    raise ShapeError(f"{self.name}: dense before flatten")
                features = layer.out_features
            # relu / batchnorm preserve shape
            if extents is not None:
                chain.append((channels,) + extents)
            else:
                chain.append((features,))
        return chain

    def feature_count(self) -> int:
        """Flattened feature count entering the dense head."""
        for layer, shape in zip(self.layers, self.shape_chain()):
            if isinstance(layer, FlattenLayer):
                return shape[0]
        raise ShapeError(f"{self.name}: no flatten layer")

    def validate(self) -> None:
        chain = self.shape_chain()
        if not isinstance(self.layers[-1], DenseLayer) or chain[-1] != (N_CLASSES,):
            raise ShapeError(f"{self.name}: pipeline must end in exactly {N_CLASSES} logits")
        if self.feature_count() != FEATURES_BEFORE_DENSE:
            raise ShapeError(
                f"{self.name}: dense layer receives {self.feature_count()} features, "
                f"contract requires {FEATURES_BEFORE_DENSE}"
            )


def _conv_block(out_ch, kernel, stride, batchnorm, pool=True):
    layers: list[Layer] = [Conv3dLayer(out_ch, kernel, stride), ReluLayer()]
    if batchnorm:
        layers.append(BatchNormLayer())
    if pool:
        layers.append(MaxPool3dLayer((3, 3, 3), (2, 2, 2)))
    return layers


def build_network(name: str, grid: str = "full") -> NetworkSpec:
    """Construct one of the four architectures for the given grid.

    On the half grid the first convolution is scaled down so that the rest of
    the pipeline (and hence the 256-feature contract) is identical to the
    full-grid variant.
    """
    if name not in MODEL_NAMES:
        raise ConfigError(f"unknown model tag {name!r}; expected one of {MODEL_NAMES}")
    if grid not in GRID_EXTENTS:
        raise ConfigError(f"unknown grid {grid!r}; expected one of {tuple(GRID_EXTENTS)}")
    bn = name.endswith("_bn")
    layers: list[Layer] = []
    if name.startswith("pdnet"):
        if grid == "full":
            layers += _conv_block(16, (7, 7, 7), (4, 4, 4), bn)
        else:
            layers += _conv_block(16, (4, 4, 4), (2, 2, 2), bn)
        layers += _conv_block(64, (5, 5, 5), (1, 1, 1), bn)
        layers += _conv_block(256, (2, 3, 2), (1, 1, 1), bn, pool=False)
    else:
        layers += _conv_block(16, (5, 5, 5), (2, 2, 2), bn, pool=(grid == "full"))
        layers += _conv_block(32, (3, 3, 3), (1, 1, 1), bn)
        layers += _conv_block(64, (3, 3, 3), (1, 1, 1), bn)
        layers += _conv_block(128, (3, 3, 3), (1, 1, 1), bn, pool=False)
        layers += _conv_block(256, (1, 2, 1), (1, 1, 1), bn, pool=False)
    layers += [FlattenLayer(), DenseLayer(N_CLASSES)]
    spec = NetworkSpec(name=name, input_extents=GRID_EXTENTS[grid], layers=tuple(layers))
    spec.validate()
    return spec


@dataclass
class NetworkParams:
    """Learned parameters aligned with a NetworkSpec's layer list."""

    layers: list[dict[str, np.ndarray]]
    epoch: int = 0
    bn_initialized: bool = False

    def clone(self) -> "NetworkParams":
        return NetworkParams(
            layers=[{k: v.copy() for k, v in p.items()} for p in self.layers],
            epoch=self.epoch,
            bn_initialized=self.bn_initialized,
        )

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            layers=[{k: v.astype(dtype) for k, v in p.items()} for p in self.layers],
            epoch=self.epoch,
            bn_initialized=self.bn_initialized,
        )


def init_params(spec: NetworkSpec, seed: int | tuple = 0, dtype=np.float32) -> NetworkParams:
    """Glorot-uniform weights, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    channels = 1
    params: list[dict[str, np.ndarray]] = []
    features = None
    for layer, shape in zip(spec.layers, spec.shape_chain()):
        if isinstance(layer, Conv3dLayer):
            w_shape = (layer.out_channels, channels) + layer.kernel
            params.append(
                {
                    "w": ops.glorot_uniform(w_shape, rng, dtype),
                    "b": np.zeros(layer.out_channels, dtype=dtype),
                }
            )
            channels = layer.out_channels
        elif isinstance(layer, BatchNormLayer):
            params.append(
                {
                    "gamma": np.ones(channels, dtype=dtype),
                    "beta": np.zeros(channels, dtype=dtype),
                    "running_mean": np.zeros(channels, dtype=dtype),
                    "running_var": np.ones(channels, dtype=dtype),
                }
            )
        elif isinstance(layer, DenseLayer):
            params.append(
                {
                    "w": ops.glorot_uniform((features, layer.out_features), rng, dtype),
                    "b": np.zeros(layer.out_features, dtype=dtype),
                }
            )
        else:
            params.append({})
        if isinstance(layer, FlattenLayer):
            features = shape[0]
    return NetworkParams(layers=params)


@dataclass
class ForwardTrace:
    """Per-layer tensors retained for backward/attribution passes."""

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    extras: list
    logits: np.ndarray
    probs: np.ndarray


def _check_batch(spec: NetworkSpec, volumes: np.ndarray) -> np.ndarray:
    if volumes.ndim == 3:
        volumes = volumes[None]
    if volumes.ndim != 4:
        raise ShapeError(f"volume batch must be (batch, z, y, x), got {volumes.ndim}D")
    for name, n, e in zip(ops.AXIS_NAMES, volumes.shape[1:], spec.input_extents):
        if n != e:
            raise ShapeError(f"axis {name}: volume extent {n} != network input extent {e}")
    return volumes[:, None]  # add channel axis


def forward(
    spec: NetworkSpec,
    params: NetworkParams,
    volumes: np.ndarray,
    mode: str = "infer",
    keep_trace: bool = True,
) -> ForwardTrace:
    """Run the pipeline on a volume batch (B,Z,Y,X) or single volume (Z,Y,X).

    mode="train" uses batch statistics in batchnorm layers and updates the
    running moments held in `params` (training owns a private copy);
    mode="infer" is pure and requires frozen statistics.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    h = _check_batch(spec, volumes)
    inputs: list[np.ndarray] = []
    outputs: list[np.ndarray] = []
    extras: list = []
    channels = 1
    for layer, p in zip(spec.layers, params.layers):
        if keep_trace:
            inputs.append(h)
        extra = None
        if isinstance(layer, Conv3dLayer):
            cs = ConvSpec(channels, layer.out_channels, layer.kernel, layer.stride)
            h = ops.conv3d_forward(h, p["w"], p["b"], cs)
            channels = layer.out_channels
        elif isinstance(layer, MaxPool3dLayer):
            h, argmax = ops.maxpool3d_forward(h, layer.pool, layer.stride)
            extra = argmax
        elif isinstance(layer, ReluLayer):
            h = ops.relu_forward(h)
        elif isinstance(layer, BatchNormLayer):
            if mode == "train":
                h, cache = ops.batchnorm_forward_train(h, p["gamma"], p["beta"])
                m = ops.BN_MOMENTUM
                p["running_mean"][:] = m * p["running_mean"] + (1 - m) * cache.batch_mean
                p["running_var"][:] = m * p["running_var"] + (1 - m) * cache.batch_var
                params.bn_initialized = True
                extra = cache
            else:
                if not params.bn_initialized:
                    raise ConfigError(
                        "batchnorm inference requested before any statistics were frozen"
                    )
                h = ops.batchnorm_forward_infer(
                    h, p["gamma"], p["beta"], p["running_mean"], p["running_var"]
                )
        elif isinstance(layer, FlattenLayer):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, DenseLayer):
            h = ops.dense_forward(h, p["w"], p["b"])
        if keep_trace:
            outputs.append(h)
            extras.append(extra)
    logits = h
    return ForwardTrace(
        inputs=inputs, outputs=outputs, extras=extras, logits=logits, probs=ops.softmax(logits)
    )


def backward(
    spec: NetworkSpec,
    params: NetworkParams,
    trace: ForwardTrace,
    g_logits: np.ndarray,
    relu_rule: str = "gradient",
    need_param_grads: bool = True,
    stop_at: int | None = None,
) -> tuple[np.ndarray, list[dict[str, np.ndarray]] | None]:
    """Backpropagate g_logits through the traced pipeline.

    Returns (gradient, param_grads). With stop_at=i the walk stops early and
    the returned gradient is with respect to layer i's output; otherwise it is
    with respect to the network input (channel axis retained).
    """
    if relu_rule not in ("gradient", "guided"):
        raise ConfigError(f"unknown relu rule {relu_rule!r}")
    g = g_logits
    grads: list[dict[str, np.ndarray]] | None = (
        [{} for _ in spec.layers] if need_param_grads else None
    )
    channels_per_layer = []
    channels = 1
    for layer in spec.layers:
        channels_per_layer.append(channels)
        if isinstance(layer, Conv3dLayer):
            channels = layer.out_channels
    for i in range(len(spec.layers) - 1, -1, -1):
        if stop_at is not None and i == stop_at:
            return g, grads
        layer = spec.layers[i]
        p = params.layers[i]
        x_in = trace.inputs[i]
        if isinstance(layer, DenseLayer):
            lg = ops.dense_backward(x_in, p["w"], g)
            g = lg.d_input
            if grads is not None:
                grads[i] = lg.d_params
        elif isinstance(layer, FlattenLayer):
            g = g.reshape(x_in.shape)
        elif isinstance(layer, BatchNormLayer):
            cache = trace.extras[i]
            if cache is not None:
                lg = ops.batchnorm_backward_train(cache, p["gamma"], g)
                g = lg.d_input
                if grads is not None:
                    grads[i] = lg.d_params
            else:
                g = ops.batchnorm_backward_infer(p["gamma"], p["running_var"], g)
        elif isinstance(layer, ReluLayer):
            if relu_rule == "guided":
                g = ops.guided_relu_backward(x_in, g)
            else:
                g = ops.relu_backward(x_in, g)
        elif isinstance(layer, MaxPool3dLayer):
            g = ops.maxpool3d_backward(x_in.shape, trace.extras[i], g)
        elif isinstance(layer, Conv3dLayer):
            cs = ConvSpec(channels_per_layer[i], layer.out_channels, layer.kernel, layer.stride)
            lg = ops.conv3d_backward(x_in, p["w"], cs, g, need_param_grads=need_param_grads)
            g = lg.d_input
            if grads is not None:
                grads[i] = lg.d_params
    return g, grads


# ---------------------------------------------------------------------------
# Checkpoint format: 8-byte magic, uint32 version, uint32 header length, JSON
# header (architecture + parameter manifest), then little-endian float32
# parameter blocks in layer order with keys sorted within each layer.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPDCKPT1"
CHECKPOINT_VERSION = 1

_LAYER_FIELDS = {
    "conv3d": ("out_channels", "kernel", "stride"),
    "maxpool3d": ("pool", "stride"),
    "relu": (),
    "batchnorm": (),
    "flatten": (),
    "dense": ("out_features",),
}

_LAYER_TYPES = {
    "conv3d": Conv3dLayer,
    "maxpool3d": MaxPool3dLayer,
    "relu": ReluLayer,
    "batchnorm": BatchNormLayer,
    "flatten": FlattenLayer,
    "dense": DenseLayer,
}


def _layer_to_dict(layer: Layer) -> dict:
    d = {"kind": layer.kind}
    for f in _LAYER_FIELDS[layer.kind]:
        v = getattr(layer, f)
        d[f] = list(v) if isinstance(v, tuple) else v
    return d


def _layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    if kind not in _LAYER_TYPES:
        raise ConfigError(f"checkpoint declares unknown layer kind {kind!r}")
    kwargs = {}
    for f in _LAYER_FIELDS[kind]:
        v = d[f]
        kwargs[f] = tuple(v) if isinstance(v, list) else v
    return _LAYER_TYPES[kind](**kwargs)


def save_checkpoint(spec: NetworkSpec, params: NetworkParams, path) -> None:
    header = {
        "name": spec.name,
        "input_extents": list(spec.input_extents),
        "layers": [_layer_to_dict(l) for l in spec.layers],
        "epoch": params.epoch,
        "bn_initialized": params.bn_initialized,
        "params": [
            {k: list(v.shape) for k, v in sorted(p.items())} for p in params.layers
        ],
        "dtype": "float32",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in params.layers:
            for _, v in sorted(p.items()):
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[NetworkSpec, NetworkParams]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: bad checkpoint magic {magic!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise ConfigError(f"{path}: truncated checkpoint header")
        version, hlen = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise ConfigError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: corrupt checkpoint header: {exc}") from exc
        rest = fh.read()
    layers = tuple(_layer_from_dict(d) for d in header["layers"])
    spec = NetworkSpec(
        name=header["name"], input_extents=tuple(header["input_extents"]), layers=layers
    )
    spec.validate()
    expected = sum(
        int(np.prod(shape)) for p in header["params"] for shape in p.values()
    )
    if len(rest) != expected * 4:
        raise ConfigError(
            f"{path}: parameter payload is {len(rest)} bytes, header declares {expected * 4}"
        )
    params_layers: list[dict[str, np.ndarray]] = []
    offset = 0
    for p in header["params"]:
        d = {}
        for k in sorted(p):
            n = int(np.prod(p[k]))
            d[k] = (
                np.frombuffer(rest, dtype="<f4", count=n, offset=offset)
                .reshape(p[k])
                .astype(np.float32)
            )
            offset += n * 4
        params_layers.append(d)
    params = NetworkParams(
        layers=params_layers,
        epoch=int(header["epoch"]),
        bn_initialized=bool(header["bn_initialized"]),
    )
    return spec, params


def logit_gradient_seed(n: int, class_idx: int, batch: int = 1, dtype=np.float64) -> np.ndarray:
    """One-hot upstream gradient selecting a single class logit."""
    if not 0 <= class_idx < n:
        raise ValueError(f"class index {class_idx} outside [0, {n})")
    g = np.zeros((batch, n), dtype=dtype)
    g[:, class_idx] = 1.0
    return g
