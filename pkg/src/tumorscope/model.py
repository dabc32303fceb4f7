"""The tumour/non-tumour CNN: construction, forward/backward, checkpoints.

Two variants share a four-stage conv/pool trunk (16@3x3, 32@5x5, 64@7x7,
32@9x9, each ReLU + 2x2 max pool) followed by flatten, a wide ReLU dense
layer, dropout, and a single-logit sigmoid head. The "improved" variant
appends a fifth stage (32@3x3 + ReLU + pool) after the fourth pool.

Weights are Kaiming fan-in scaled normals drawn from a seeded Philox stream
in declaration order, biases zero; two builds from the same config are
bitwise identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .rng import derive

__all__ = [
    "ModelConfig",
    "Model",
    "ActivationCache",
    "ShapeTrace",
    "shape_trace",
    "build_model",
    "forward",
    "model_backward",
    "parameter_counts",
    "total_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedCheckpointError",
    "ShapeMismatchError",
]

VARIANTS = ("original", "improved")

# (filters, kernel) per conv stage; every conv is followed by ReLU + 2x2 pool.
_CONV_STAGES = {
    "original": ((16, 3), (32, 5), (64, 7), (32, 9)),
    "improved": ((16, 3), (32, 5), (64, 7), (32, 9), (32, 3)),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "original"
    input_side: int = 240
    dropout_p: float = 0.5
    hidden_units: int = 8192
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0,1)")
        if self.input_side < 1 or self.hidden_units < 1:
            raise ValueError("input_side and hidden_units must be positive")


@dataclass
class ConvLayer:
    name: str
    weight: np.ndarray  # (C_out, C_in, K, K)
    bias: np.ndarray  # (C_out,)
    kind: str = "conv"


@dataclass
class PoolLayer:
    name: str
    kind: str = "pool"


@dataclass
class FlattenLayer:
    name: str = "flatten"
    kind: str = "flatten"


@dataclass
class DenseLayer:
    name: str
    weight: np.ndarray  # (N_out, N_in)
    bias: np.ndarray  # (N_out,)
    relu: bool = False
    kind: str = "dense"


@dataclass
class DropoutLayer:
    name: str = "dropout"
    p: float = 0.5
    kind: str = "dropout"


@dataclass
class Model:
    config: ModelConfig
    layers: list

    def parameters(self):
        """Yield (name, array) for every trainable tensor, in layer order."""
        for layer in self.layers:
            if layer.kind in ("conv", "dense"):
                yield f"{layer.name}.weight", layer.weight
                yield f"{layer.name}.bias", layer.bias

    def param_dict(self) -> dict:
        return dict(self.parameters())


@dataclass
class ShapeTrace:
    steps: list  # [(layer name, shape tuple or flat int)]
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ActivationCache:
    """Everything the explainers and the training backward pass need."""

    image: np.ndarray
    entries: list = field(default_factory=list)  # one dict per layer
    flat: np.ndarray | None = None
    logit: float = 0.0
    prob: float = 0.0


def shape_trace(config: ModelConfig) -> ShapeTrace:
    """Walk the symbolic layer shapes; report (not raise) the first violation."""
    steps = [("input", (1, config.input_side, config.input_side))]
    c, h, w = 1, config.input_side, config.input_side
    for i, (filters, k) in enumerate(_CONV_STAGES[config.variant], start=1):
        if h < k or w < k:
            return ShapeTrace(
                steps, f"conv{i}: {k}x{k} kernel on a {h}x{w} map (input too small)"
            )
        c, h, w = filters, h - k + 1, w - k + 1
        steps.append((f"conv{i}", (c, h, w)))
        if h < 2 or w < 2:
            return ShapeTrace(
                steps, f"pool{i}: 2x2 window on a {h}x{w} map (input too small)"
            )
        h, w = h // 2, w // 2
        steps.append((f"pool{i}", (c, h, w)))
    flat = c * h * w
    steps.append(("flatten", flat))
    steps.append(("dense1", config.hidden_units))
    steps.append(("dropout", config.hidden_units))
    steps.append(("dense2", 1))
    return ShapeTrace(steps)


def build_model(config: ModelConfig) -> Model:
    trace = shape_trace(config)
    if not trace.ok:
        raise ValueError(f"invalid input size for variant {config.variant!r}: {trace.error}")
    rng = derive(config.seed, "model-init")

    def kaiming(shape, fan_in):
        std = np.float32(np.sqrt(2.0 / fan_in))
        return rng.standard_normal(shape, dtype=np.float32) * std

    layers: list = []
    c_in = 1
    for i, (filters, k) in enumerate(_CONV_STAGES[config.variant], start=1):
        layers.append(
            ConvLayer(
                name=f"conv{i}",
                weight=kaiming((filters, c_in, k, k), c_in * k * k),
                bias=np.zeros(filters, dtype=np.float32),
            )
        )
        layers.append(PoolLayer(name=f"pool{i}"))
        c_in = filters
    flat = dict(trace.steps)["flatten"]
    layers.append(FlattenLayer())
    layers.append(
        DenseLayer(
            name="dense1",
            weight=kaiming((config.hidden_units, flat), flat),
            bias=np.zeros(config.hidden_units, dtype=np.float32),
            relu=True,
        )
    )
    layers.append(DropoutLayer(p=config.dropout_p))
    layers.append(
        DenseLayer(
            name="dense2",
            weight=kaiming((1, config.hidden_units), config.hidden_units),
            bias=np.zeros(1, dtype=np.float32),
            relu=False,
        )
    )
    return Model(config=config, layers=layers)


def forward(
    model: Model,
    image: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, ActivationCache]:
    """Run the network on one (1,S,S) image in [0,1].

    Returns (probability, cache). Training mode applies dropout and needs a
    generator; inference is deterministic and consumes no randomness.
    """
    side = model.config.input_side
    if image.shape != (1, side, side):
        raise ValueError(f"forward: image shape {image.shape} != (1, {side}, {side})")
    if float(image.min()) < 0.0 or float(image.max()) > 1.0:
        raise ValueError("forward: pixel values must lie in [0,1]")
    if training and model.config.dropout_p > 0.0 and rng is None:
        raise ValueError("forward: training mode requires an rng for dropout")

    cache = ActivationCache(image=image)
    a = image
    for layer in model.layers:
        if layer.kind == "conv":
            pre = ops.conv2d(a, layer.weight, layer.bias)
            post = ops.relu(pre)
            cache.entries.append({"kind": "conv", "name": layer.name, "input": a, "pre": pre, "post": post})
            a = post
        elif layer.kind == "pool":
            out, idx = ops.maxpool2d(a)
            cache.entries.append({"kind": "pool", "name": layer.name, "input": a, "out": out, "idx": idx})
            a = out
        elif layer.kind == "flatten":
            cache.entries.append({"kind": "flatten", "name": "flatten", "shape": a.shape})
            a = a.reshape(-1)
            cache.flat = a
        elif layer.kind == "dense":
            pre = ops.dense(a, layer.weight, layer.bias)
            post = ops.relu(pre) if layer.relu else pre
            cache.entries.append({"kind": "dense", "name": layer.name, "input": a, "pre": pre, "post": post, "relu": layer.relu})
            a = post
        elif layer.kind == "dropout":
            if training and layer.p > 0.0:
                mask = ops.dropout_mask(a.shape, layer.p, rng)
            else:
                mask = None
            cache.entries.append({"kind": "dropout", "name": "dropout", "mask": mask})
            a = a if mask is None else a * mask
        else:  # pragma: no cover - exhaustive over layer kinds
            raise AssertionError(f"unknown layer kind {layer.kind}")
    logit = float(a[0])
    cache.logit = logit
    cache.prob = float(ops.sigmoid(np.float64(logit)))
    return cache.prob, cache


def model_backward(
    model: Model,
    cache: ActivationCache,
    grad_logit: float,
    collect_activation_grads: bool = False,
) -> tuple[dict, np.ndarray]:
    """Backpropagate d(loss)/d(logit) through the cached forward pass.

    Returns (param_grads keyed like Model.parameters(), grad wrt the input
    image). With collect_activation_grads, each cache entry additionally
    gains a "grad" field holding the gradient at that layer's output.
    """
    grads: dict = {}
    g = np.array([grad_logit], dtype=np.float32)
    for layer, entry in zip(reversed(model.layers), reversed(cache.entries)):
        if layer.kind == "dense":
            if layer.relu:
                g = ops.relu_backward(entry["pre"], g)
            gx, gw, gb = ops.dense_backward(entry["input"], layer.weight, g)
            grads[f"{layer.name}.weight"] = gw
            grads[f"{layer.name}.bias"] = gb
            g = gx
        elif layer.kind == "dropout":
            if entry["mask"] is not None:
                g = g * entry["mask"]
        elif layer.kind == "flatten":
            g = g.reshape(entry["shape"])
        elif layer.kind == "pool":
            if collect_activation_grads:
                entry["grad"] = g
            g = ops.maxpool2d_backward(entry["idx"], entry["input"].shape, g)
        elif layer.kind == "conv":
            if collect_activation_grads:
                entry["grad"] = g  # gradient at the post-ReLU activation
            g = ops.relu_backward(entry["pre"], g)
            gx, gw, gb = ops.conv2d_backward(entry["input"], layer.weight, g)
            grads[f"{layer.name}.weight"] = gw
            grads[f"{layer.name}.bias"] = gb
            g = gx
    return grads, g


def parameter_counts(model: Model) -> list[tuple[str, int]]:
    """Per-layer trainable parameter counts, conv/dense layers only."""
    return [
        (layer.name, layer.weight.size + layer.bias.size)
        for layer in model.layers
        if layer.kind in ("conv", "dense")
    ]


def total_parameters(model: Model) -> int:
    return sum(n for _, n in parameter_counts(model))


# --------------------------------------------------------------------------
# Checkpoint format (little-endian):
#   magic "TSCP" | u32 version=1 | u8 variant | u32 input_side | f32 dropout_p
#   | u32 hidden_units | u32 tensor_count
#   then per tensor: u16 name_len | name utf-8 | u8 ndim | ndim*u32 dims
#   | raw f32 data
# --------------------------------------------------------------------------

MAGIC = b"TSCP"
VERSION = 1
_VARIANT_CODE = {"original": 0, "improved": 1}
_CODE_VARIANT = {v: k for k, v in _VARIANT_CODE.items()}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(model: Model, path) -> None:
    cfg = model.config
    params = list(model.parameters())
    chunks = [
        MAGIC,
        struct.pack(
            "<IBIfII",
            VERSION,
            _VARIANT_CODE[cfg.variant],
            cfg.input_side,
            cfg.dropout_p,
            cfg.hidden_units,
            len(params),
        ),
    ]
    for name, arr in params:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint file (bitwise-identical parameters).

    The stored config omits the init seed (parameters are explicit), so the
    loaded config carries seed=0.
    """
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("bad magic: not a TSCP checkpoint")
    version, vcode, input_side, dropout_p, hidden_units, count = struct.unpack(
        "<IBIfII", r.take(17)
    )
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if vcode not in _CODE_VARIANT:
        raise ShapeMismatchError(f"unknown variant code {vcode}")
    config = ModelConfig(
        variant=_CODE_VARIANT[vcode],
        input_side=int(input_side),
        dropout_p=float(np.float32(dropout_p)),
        hidden_units=int(hidden_units),
        seed=0,
    )
    tensors: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", r.take(1))
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
        tensors[name] = arr

    model = build_model(config)
    expected = model.param_dict()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ShapeMismatchError(f"tensor set mismatch: missing={missing} extra={extra}")
    for layer in model.layers:
        if layer.kind in ("conv", "dense"):
            w = tensors[f"{layer.name}.weight"]
            b = tensors[f"{layer.name}.bias"]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeMismatchError(
                    f"{layer.name}: stored {w.shape}/{b.shape}, "
                    f"config implies {layer.weight.shape}/{layer.bias.shape}"
                )
            layer.weight = w
            layer.bias = b
    return model
