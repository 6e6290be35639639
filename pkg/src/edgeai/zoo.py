"""Declarative CNN specs, instantiation, and analytic parameter/FLOP counters.

Specs are plain layer lists (conv / relu / batchnorm / pool / dense /
residual blocks). Wide-ResNet configurations are expressible so the
published parameter and FLOP figures can be checked analytically without
ever training one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SpecError(ValueError):
    """Invalid model specification."""


@dataclass
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    bias: bool = True
    kind: str = "conv"


@dataclass
class Relu:
    kind: str = "relu"


@dataclass
class BatchNorm:
    # simplified BN: per-channel scale/shift, normalizing with batch statistics
    kind: str = "batchnorm"


@dataclass
class GlobalAvgPool:
    kind: str = "global_avg_pool"


@dataclass
class Dense:
    out_features: int
    bias: bool = True
    kind: str = "dense"


@dataclass
class Residual:
    body: list
    shortcut: list = field(default_factory=list)
    kind: str = "residual"


@dataclass
class ModelSpec:
    """Ordered layer graph with input shape and class count.

    Taps are implicit: "final_conv" is the input of the single
    GlobalAvgPool layer, "avg_pool" its output, "logits" the final output.
    """

    layers: list
    input_shape: tuple[int, int, int]
    num_classes: int

    def validate(self):
        flat = _flatten(self.layers)
        pools = [l for l in flat if isinstance(l, GlobalAvgPool)]
        if len([l for l in self.layers if isinstance(l, GlobalAvgPool)]) != 1:
            raise SpecError(f"spec must contain exactly one top-level global_avg_pool, got {len(pools)}")
        if not isinstance(self.layers[-1], Dense):
            raise SpecError("spec must end with a dense layer producing logits")
        if self.layers[-1].out_features != self.num_classes:
            raise SpecError(
                f"final dense produces {self.layers[-1].out_features} logits, expected {self.num_classes}"
            )
        infer_shapes(self)  # raises on incompatible consecutive shapes

    # -- JSON schema (documented in README) ---------------------------------
    def to_json(self) -> str:
        return json.dumps(
            {
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "layers": [_layer_to_dict(l) for l in self.layers],
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        doc = json.loads(text)
        return ModelSpec(
            layers=[_layer_from_dict(d) for d in doc["layers"]],
            input_shape=tuple(doc["input_shape"]),
            num_classes=doc["num_classes"],
        )


def _flatten(layers):
    out = []
    for l in layers:
        if isinstance(l, Residual):
            out.extend(_flatten(l.body))
            out.extend(_flatten(l.shortcut))
        else:
            out.append(l)
    return out


def _layer_to_dict(l):
    if isinstance(l, Conv):
        return {"kind": "conv", "out_channels": l.out_channels, "kernel": l.kernel,
                "stride": l.stride, "pad": l.pad, "bias": l.bias}
    if isinstance(l, Relu):
        return {"kind": "relu"}
    if isinstance(l, BatchNorm):
        return {"kind": "batchnorm"}
    if isinstance(l, GlobalAvgPool):
        return {"kind": "global_avg_pool"}
    if isinstance(l, Dense):
        return {"kind": "dense", "out_features": l.out_features, "bias": l.bias}
    if isinstance(l, Residual):
        return {"kind": "residual", "body": [_layer_to_dict(x) for x in l.body],
                "shortcut": [_layer_to_dict(x) for x in l.shortcut]}
    raise SpecError(f"unknown layer {l!r}")


def _layer_from_dict(d):
    kind = d["kind"]
    if kind == "conv":
        return Conv(d["out_channels"], d["kernel"], d["stride"], d["pad"], d["bias"])
    if kind == "relu":
        return Relu()
    if kind == "batchnorm":
        return BatchNorm()
    if kind == "global_avg_pool":
        return GlobalAvgPool()
    if kind == "dense":
        return Dense(d["out_features"], d["bias"])
    if kind == "residual":
        return Residual([_layer_from_dict(x) for x in d["body"]],
                        [_layer_from_dict(x) for x in d["shortcut"]])
    raise SpecError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# shape inference


def _shape_after(layer, shape):
    """Output shape of one layer given (C,H,W) or (F,) input."""
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise SpecError(f"conv applied to non-spatial shape {shape}")
        C, H, W = shape
        Ho = (H + 2 * layer.pad - layer.kernel) // layer.stride + 1
        Wo = (W + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if Ho < 1 or Wo < 1:
            raise SpecError(f"conv output collapses: input {shape}, kernel {layer.kernel}")
        return (layer.out_channels, Ho, Wo)
    if isinstance(layer, (Relu, BatchNorm)):
        return shape
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 3:
            raise SpecError(f"global_avg_pool applied to non-spatial shape {shape}")
        return (shape[0],)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise SpecError(f"dense applied to non-flat shape {shape}")
        return (layer.out_features,)
    if isinstance(layer, Residual):
        body_shape = shape
        for l in layer.body:
            body_shape = _shape_after(l, body_shape)
        short_shape = shape
        for l in layer.shortcut:
            short_shape = _shape_after(l, short_shape)
        if body_shape != short_shape:
            raise SpecError(f"residual branch shapes differ at merge: {body_shape} vs {short_shape}")
        return body_shape
    raise SpecError(f"unknown layer {layer!r}")


def infer_shapes(spec: ModelSpec) -> list[tuple]:
    """Per-top-level-layer output shapes, starting from spec.input_shape."""
    shapes = []
    cur = tuple(spec.input_shape)
    for layer in spec.layers:
        cur = _shape_after(layer, cur)
        shapes.append(cur)
    return shapes


def conv_activation_sizes(spec: ModelSpec) -> list[int]:
    """Element count C*H*W of every conv-bearing stage output, in order.

    Residual blocks count as one stage (their merged output). Used by the
    deployment simulator as the layer-boundary activation volumes.
    """
    sizes = []
    cur = tuple(spec.input_shape)
    for layer in spec.layers:
        cur = _shape_after(layer, cur)
        if isinstance(layer, (Conv, Residual)):
            sizes.append(int(np.prod(cur)))
    return sizes


# ---------------------------------------------------------------------------
# analytic counters


def _count_params_layer(layer, shape):
    if isinstance(layer, Conv):
        C = shape[0]
        n = layer.out_channels * C * layer.kernel * layer.kernel
        if layer.bias:
            n += layer.out_channels
        return n, _shape_after(layer, shape)
    if isinstance(layer, BatchNorm):
        return 2 * shape[0], shape
    if isinstance(layer, Dense):
        n = shape[0] * layer.out_features
        if layer.bias:
            n += layer.out_features
        return n, _shape_after(layer, shape)
    if isinstance(layer, Residual):
        total = 0
        body_shape = shape
        for l in layer.body:
            c, body_shape = _count_params_layer(l, body_shape)
            total += c
        short_shape = shape
        for l in layer.shortcut:
            c, short_shape = _count_params_layer(l, short_shape)
            total += c
        return total, body_shape
    return 0, _shape_after(layer, shape)


def count_params(spec: ModelSpec) -> int:
    """Exact count of trainable scalars (conv/dense weights+biases, BN scale/shift)."""
    total = 0
    cur = tuple(spec.input_shape)
    for layer in spec.layers:
        c, cur = _count_params_layer(layer, cur)
        total += c
    return total


def _count_flops_layer(layer, shape):
    # convention: 1 MAC = 2 FLOPs; biases counted for dense only; relu/pool/BN ignored
    if isinstance(layer, Conv):
        C = shape[0]
        out = _shape_after(layer, shape)
        macs = layer.out_channels * C * layer.kernel * layer.kernel * out[1] * out[2]
        return 2 * macs, out
    if isinstance(layer, Dense):
        return 2 * shape[0] * layer.out_features, _shape_after(layer, shape)
    if isinstance(layer, Residual):
        total = 0
        body_shape = shape
        for l in layer.body:
            f, body_shape = _count_flops_layer(l, body_shape)
            total += f
        short_shape = shape
        for l in layer.shortcut:
            f, short_shape = _count_flops_layer(l, short_shape)
            total += f
        return total, body_shape
    return 0, _shape_after(layer, shape)


def count_flops(spec: ModelSpec) -> int:
    total = 0
    cur = tuple(spec.input_shape)
    for layer in spec.layers:
        f, cur = _count_flops_layer(layer, cur)
        total += f
    return total


# ---------------------------------------------------------------------------
# Wide-ResNet family


@dataclass
class WrnConfig:
    depth: int
    width: int

    def __post_init__(self):
        if (self.depth - 4) % 6 != 0 or self.depth <= 4:
            raise SpecError(f"WRN depth must be 6n+4, got {self.depth}")
        if self.width < 1:
            raise SpecError(f"WRN width multiplier must be >= 1, got {self.width}")


def wrn_spec(cfg: WrnConfig, input_shape=(3, 32, 32), num_classes=10) -> ModelSpec:
    """Pre-activation Wide ResNet: 3 groups of n basic blocks, widths 16k/32k/64k."""
    n = (cfg.depth - 4) // 6
    widths = [16, 16 * cfg.width, 32 * cfg.width, 64 * cfg.width]
    layers: list = [Conv(widths[0], 3, 1, 1, bias=False)]
    in_ch = widths[0]
    for group, w in enumerate(widths[1:]):
        stride = 1 if group == 0 else 2
        for block in range(n):
            s = stride if block == 0 else 1
            body = [
                BatchNorm(), Relu(), Conv(w, 3, s, 1, bias=False),
                BatchNorm(), Relu(), Conv(w, 3, 1, 1, bias=False),
            ]
            if s != 1 or in_ch != w:
                shortcut = [Conv(w, 1, s, 0, bias=False)]
            else:
                shortcut = []
            layers.append(Residual(body, shortcut))
            in_ch = w
    layers += [BatchNorm(), Relu(), GlobalAvgPool(), Dense(num_classes)]
    return ModelSpec(layers, tuple(input_shape), num_classes)


# ---------------------------------------------------------------------------
# instantiated models


@dataclass
class ActivationRecord:
    final_conv: Tensor
    avg_pool: Tensor
    logits: Tensor
    taps: dict = field(default_factory=dict)


class Model:
    """A ModelSpec with materialized parameters."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.seed = seed
        self.params: list[Tensor] = []
        self.param_names: list[str] = []
        rng = np.random.default_rng(seed)
        self._bound = self._bind_layers(spec.layers, tuple(spec.input_shape), rng, "")
        # keep every parameter in one dtype so a stray float64 bias cannot
        # upcast the whole forward pass
        self.astype(dtype)

    def _bind_layers(self, layers, shape, rng, prefix):
        bound = []
        for i, layer in enumerate(layers):
            name = f"{prefix}{i}"
            if isinstance(layer, Conv):
                C = shape[0]
                fan_in = C * layer.kernel * layer.kernel
                w = T.he_normal((layer.out_channels, C, layer.kernel, layer.kernel), fan_in, rng)
                b = Tensor(np.zeros(layer.out_channels), requires_grad=True) if layer.bias else None
                self._register(f"{name}.conv.w", w)
                if b is not None:
                    self._register(f"{name}.conv.b", b)
                bound.append(("conv", layer, w, b))
            elif isinstance(layer, Dense):
                F = shape[0]
                w = T.he_normal((F, layer.out_features), F, rng)
                b = Tensor(np.zeros(layer.out_features), requires_grad=True) if layer.bias else None
                self._register(f"{name}.dense.w", w)
                if b is not None:
                    self._register(f"{name}.dense.b", b)
                bound.append(("dense", layer, w, b))
            elif isinstance(layer, BatchNorm):
                scale = Tensor(np.ones(shape[0]), requires_grad=True)
                shift = Tensor(np.zeros(shape[0]), requires_grad=True)
                self._register(f"{name}.bn.scale", scale)
                self._register(f"{name}.bn.shift", shift)
                bound.append(("batchnorm", layer, scale, shift))
            elif isinstance(layer, Relu):
                bound.append(("relu", layer))
            elif isinstance(layer, GlobalAvgPool):
                bound.append(("global_avg_pool", layer))
            elif isinstance(layer, Residual):
                body = self._bind_layers(layer.body, shape, rng, f"{name}.body.")
                body_shape = shape
                for l in layer.body:
                    body_shape = _shape_after(l, body_shape)
                shortcut = self._bind_layers(layer.shortcut, shape, rng, f"{name}.short.")
                bound.append(("residual", layer, body, shortcut))
            else:
                raise SpecError(f"unknown layer {layer!r}")
            shape = _shape_after(layer, shape)
        return bound

    def _register(self, name, t):
        self.params.append(t)
        self.param_names.append(name)

    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
        return h.hexdigest()

    def freeze(self):
        for p in self.params:
            p.requires_grad = False
        return self

    def astype(self, dtype):
        for p in self.params:
            p.data = p.data.astype(dtype)
        return self

    def _run(self, bound, x):
        for entry in bound:
            kind = entry[0]
            if kind == "conv":
                _, layer, w, b = entry
                x = T.conv2d(x, w, b, stride=layer.stride, pad=layer.pad)
            elif kind == "dense":
                _, layer, w, b = entry
                x = T.dense(x, w, b)
            elif kind == "batchnorm":
                _, _, scale, shift = entry
                x = _batchnorm(x, scale, shift)
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "global_avg_pool":
                x = T.global_avg_pool(x)
            elif kind == "residual":
                _, _, body, shortcut = entry
                y = self._run(body, x)
                s = self._run(shortcut, x) if shortcut else x
                x = y + s
            else:
                raise SpecError(kind)
        return x

    def forward(self, batch: Tensor) -> ActivationRecord:
        """Full forward pass capturing the final_conv / avg_pool / logits taps."""
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        expect = tuple(self.spec.input_shape)
        if batch.shape[1:] != expect:
            raise T.ShapeError(f"batch shape {batch.shape[1:]} != spec input {expect}")
        final_conv = None
        avg_pool = None
        x = batch
        for entry in self._bound:
            kind = entry[0]
            if kind == "global_avg_pool":
                final_conv = x
                x = T.global_avg_pool(x)
                avg_pool = x
            else:
                x = self._run([entry], x)
        return ActivationRecord(final_conv=final_conv, avg_pool=avg_pool, logits=x)


def _batchnorm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5):
    # normalize with the batch's own statistics (running stats frozen to batch)
    axes = (0, 2, 3) if x.data.ndim == 4 else (0,)
    mu = T.tmean(x, axis=axes, keepdims=True)
    var = T.tmean((x - mu) * (x - mu), axis=axes, keepdims=True)
    xhat = (x - mu) / T.sqrt(var + eps)
    if x.data.ndim == 4:
        s = T.reshape(scale, (1, -1, 1, 1))
        b = T.reshape(shift, (1, -1, 1, 1))
    else:
        s, b = scale, shift
    return xhat * s + b


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    return Model(spec, seed, dtype=dtype)


def conv_trunk_spec(widths: list[int], strides: list[int], num_classes: int,
                    input_shape=(3, 32, 32)) -> ModelSpec:
    """Plain conv/relu trunk ending in gap + dense; the desk-scale workhorse."""
    if len(widths) != len(strides):
        raise SpecError("widths and strides must align")
    layers: list = []
    for w, s in zip(widths, strides):
        layers += [Conv(w, 3, s, 1, bias=True), Relu()]
    layers += [GlobalAvgPool(), Dense(num_classes)]
    return ModelSpec(layers, tuple(input_shape), num_classes)


def save_model(model: Model, directory):
    """Persist spec + seed + parameters; load_model restores bit-exactly."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "spec.json").write_text(json.dumps(
        {"spec": model.spec.to_json(), "seed": model.seed}, indent=2))
    np.savez(d / "params.npz",
             **{name: p.data for name, p in zip(model.param_names, model.params)})


def load_model(directory) -> Model:
    from pathlib import Path

    d = Path(directory)
    doc = json.loads((d / "spec.json").read_text())
    model = Model(ModelSpec.from_json(doc["spec"]), seed=doc["seed"])
    blob = np.load(d / "params.npz")
    for name, p in zip(model.param_names, model.params):
        p.data = blob[name].copy()
    return model
