"""Model graphs: ordered layer specs plus a parameter store.

Architectures are plain dataclass descriptions, so FLOPs accounting and
shape validation work without materializing any weights; ``Model.build``
attaches He-initialized parameters for the architectures that actually
train.  Gates are not part of the graph: the forward pass accepts a mapping
from consumer layer name to a per-channel scale and applies it to that
layer's input, which keeps pruning bookkeeping in one place.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops, rng
from .autodiff import ShapeError, Tensor
from .optim import ParamStore


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = False


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int
    bias: bool = False


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class MaxPool:
    name: str
    kernel: int
    stride: int | None = None  # defaults to kernel
    padding: int = 0


@dataclass(frozen=True)
class AvgPool:
    name: str
    kernel: int = 0  # 0 pools the full spatial extent


@dataclass(frozen=True)
class Flatten:
    name: str


@dataclass(frozen=True)
class ResidualBlock:
    """Basic (2-conv) or bottleneck (3-conv) block with optional projection shortcut."""

    name: str
    convs: tuple[Conv2d, ...]
    downsample: Conv2d | None = None

    @property
    def has_downsample(self) -> bool:
        return self.downsample is not None


LayerSpec = Conv2d | Linear | ReLU | MaxPool | AvgPool | Flatten | ResidualBlock

_SPEC_TYPES = {cls.__name__: cls for cls in
               (Conv2d, Linear, ReLU, MaxPool, AvgPool, Flatten, ResidualBlock)}


@dataclass
class Architecture:
    id: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    layers: tuple[LayerSpec, ...]


class MalformedBlockError(ValueError):
    """Residual block does not have the 2- or 3-conv structure."""


# ---------------------------------------------------------------------------
# Spec (de)serialization, used by checkpoints.


def spec_to_dict(spec: LayerSpec) -> dict:
    d = {"type": type(spec).__name__}
    for f in fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, Conv2d):
            v = spec_to_dict(v)
        elif isinstance(v, tuple) and v and isinstance(v[0], Conv2d):
            v = [spec_to_dict(c) for c in v]
        d[f.name] = v
    return d


def spec_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    cls = _SPEC_TYPES[d.pop("type")]
    if cls is ResidualBlock:
        d["convs"] = tuple(spec_from_dict(c) for c in d["convs"])
        if d.get("downsample"):
            d["downsample"] = spec_from_dict(d["downsample"])
    return cls(**d)


def arch_to_dict(arch: Architecture) -> dict:
    return {"id": arch.id, "input_shape": list(arch.input_shape),
            "num_classes": arch.num_classes,
            "layers": [spec_to_dict(s) for s in arch.layers]}


def arch_from_dict(d: dict) -> Architecture:
    return Architecture(id=d["id"], input_shape=tuple(d["input_shape"]),
                        num_classes=d["num_classes"],
                        layers=tuple(spec_from_dict(s) for s in d["layers"]))


# ---------------------------------------------------------------------------
# Shape tracing and validation.


def _conv_out_hw(h: int, w: int, spec: Conv2d) -> tuple[int, int]:
    oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
    ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"{spec.name}: kernel does not fit input {(h, w)}")
    return oh, ow


def trace_shapes(arch: Architecture) -> dict[str, tuple]:
    """Per-layer (input, output) shapes, ignoring the batch dimension.

    Raises ShapeError on any inconsistency, so this is also the architecture
    validator.  Shapes are (C, H, W) tuples or (F,) after flattening.
    """
    shapes: dict[str, tuple] = {}
    seen: set[str] = set()

    def note(name: str, inp, out):
        if name in seen:
            raise ShapeError(f"duplicate layer name {name!r}")
        seen.add(name)
        shapes[name] = (inp, out)

    def run_conv(spec: Conv2d, shape):
        if len(shape) != 3:
            raise ShapeError(f"{spec.name}: conv needs (C, H, W) input, have {shape}")
        c, h, w = shape
        if c != spec.in_channels:
            raise ShapeError(f"{spec.name}: expects {spec.in_channels} input channels, "
                             f"gets {c}")
        oh, ow = _conv_out_hw(h, w, spec)
        out = (spec.out_channels, oh, ow)
        note(spec.name, shape, out)
        return out

    shape: tuple = tuple(arch.input_shape)
    for spec in arch.layers:
        if isinstance(spec, Conv2d):
            shape = run_conv(spec, shape)
        elif isinstance(spec, Linear):
            if len(shape) != 1:
                raise ShapeError(f"{spec.name}: linear needs flattened input, have {shape}")
            if shape[0] != spec.in_features:
                raise ShapeError(f"{spec.name}: expects {spec.in_features} features, "
                                 f"gets {shape[0]}")
            note(spec.name, shape, (spec.out_features,))
            shape = (spec.out_features,)
        elif isinstance(spec, ReLU):
            note(spec.name, shape, shape)
        elif isinstance(spec, MaxPool):
            c, h, w = shape
            s = spec.stride if spec.stride is not None else spec.kernel
            oh = (h + 2 * spec.padding - spec.kernel) // s + 1
            ow = (w + 2 * spec.padding - spec.kernel) // s + 1
            out = (c, oh, ow)
            note(spec.name, shape, out)
            shape = out
        elif isinstance(spec, AvgPool):
            c, h, w = shape
            k = spec.kernel if spec.kernel else h
            out = (c, h // k, w // k)
            note(spec.name, shape, out)
            shape = out
        elif isinstance(spec, Flatten):
            c, h, w = shape
            out = (c * h * w,)
            note(spec.name, shape, out)
            shape = out
        elif isinstance(spec, ResidualBlock):
            if len(spec.convs) not in (2, 3):
                raise MalformedBlockError(f"{spec.name}: residual block needs 2 or 3 "
                                          f"convs, has {len(spec.convs)}")
            inner = shape
            for conv in spec.convs:
                inner = run_conv(conv, inner)
            if spec.downsample is not None:
                short = run_conv(spec.downsample, shape)
            else:
                short = shape
            if inner != short:
                raise ShapeError(f"{spec.name}: residual sum mismatch, main path {inner} "
                                 f"vs shortcut {short}")
            note(spec.name, shape, inner)
            shape = inner
        else:  # pragma: no cover
            raise TypeError(f"unknown layer spec {spec!r}")
    return shapes


def validate_architecture(arch: Architecture) -> None:
    trace_shapes(arch)


def atomic_weighted_layers(arch: Architecture) -> list[Conv2d | Linear]:
    """Conv/linear specs in topological order, descending into blocks."""
    out: list[Conv2d | Linear] = []
    for spec in arch.layers:
        if isinstance(spec, (Conv2d, Linear)):
            out.append(spec)
        elif isinstance(spec, ResidualBlock):
            out.extend(spec.convs)
            if spec.downsample is not None:
                out.append(spec.downsample)
    return out


# ---------------------------------------------------------------------------
# Gate attachment points.


@dataclass(frozen=True)
class GateSite:
    """A legal gate location: the consumer's input channels, produced by `producer`."""

    consumer: str
    producer: str
    channels: int
    block: str | None = None
    position: int | None = None  # 1-based gate index within a residual block


def gate_sites(arch: Architecture) -> list[GateSite]:
    """All legal gate attachment points in topological order.

    Sequential rule: every conv/linear except the first weighted layer can
    gate its input, pruning the previous weighted layer's filters.  Inside a
    residual block only the inputs of the last one (basic) or two
    (bottleneck) convs are gated; block outputs and shortcut paths never
    are, so the residual sum stays shape-valid.
    """
    sites: list[GateSite] = []
    producer: Conv2d | Linear | None = None
    for spec in arch.layers:
        if isinstance(spec, (Conv2d, Linear)):
            if producer is not None:
                channels = (producer.out_channels if isinstance(producer, Conv2d)
                            else producer.out_features)
                sites.append(GateSite(consumer=spec.name, producer=producer.name,
                                      channels=channels))
            producer = spec
        elif isinstance(spec, ResidualBlock):
            convs = spec.convs
            if len(convs) not in (2, 3):
                raise MalformedBlockError(f"{spec.name}: residual block needs 2 or 3 "
                                          f"convs, has {len(convs)}")
            for pos, (prod, cons) in enumerate(zip(convs[:-1], convs[1:]), start=1):
                sites.append(GateSite(consumer=cons.name, producer=prod.name,
                                      channels=prod.out_channels, block=spec.name,
                                      position=pos))
            # the block's output feeds the residual sum: not a legal producer
            producer = None
    return sites


def site_for_consumer(arch: Architecture, consumer: str) -> GateSite:
    for site in gate_sites(arch):
        if site.consumer == consumer:
            return site
    raise ValueError(f"no legal gate site with consumer {consumer!r}; gates may not "
                     f"scale network inputs, block outputs, or shortcut paths")


# ---------------------------------------------------------------------------
# The model: architecture + parameters + forward pass.


class Model:
    def __init__(self, arch: Architecture, params: ParamStore, dtype=np.float32):
        self.arch = arch
        self.params = params
        self.dtype = np.dtype(dtype)

    @classmethod
    def build(cls, arch: Architecture, seed: int = 0, dtype=np.float32) -> "Model":
        """He-normal initialization, streams keyed by (seed, layer name)."""
        validate_architecture(arch)
        dtype = np.dtype(dtype)
        params = ParamStore()
        for spec in atomic_weighted_layers(arch):
            gen = rng.stream("init", seed, spec.name)
            if isinstance(spec, Conv2d):
                fan_in = spec.in_channels * spec.kernel * spec.kernel
                shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            else:
                fan_in = spec.in_features
                shape = (spec.out_features, spec.in_features)
            std = np.sqrt(2.0 / fan_in)
            params.add(spec.name + ".weight",
                       (gen.standard_normal(shape) * std).astype(dtype))
            if spec.bias:
                out_dim = shape[0]
                params.add(spec.name + ".bias", np.zeros(out_dim, dtype=dtype))
        return cls(arch, params, dtype)

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        out = self.clone()
        out.dtype = np.dtype(dtype)
        for name in out.params.tensors:
            out.params.tensors[name] = out.params.tensors[name].astype(dtype)
        return out

    def param_count(self) -> int:
        return self.params.param_count()

    def param_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=requires_grad, name=name)
                for name, arr in self.params.tensors.items()}

    def _wrap_gates(self, gates) -> dict[str, Tensor]:
        if not gates:
            return {}
        legal = {s.consumer for s in gate_sites(self.arch)}
        wrapped = {}
        for name, value in gates.items():
            if name not in legal:
                raise ValueError(f"gate on {name!r} is not a legal attachment point")
            wrapped[name] = value if isinstance(value, Tensor) else \
                Tensor(np.asarray(value, dtype=self.dtype))
        return wrapped

    def forward(self, x, gates=None, params: dict[str, Tensor] | None = None) -> Tensor:
        """Logits for NCHW input; `gates` maps consumer layer name -> scale."""
        if params is None:
            params = self.param_tensors(requires_grad=False)
        gates = self._wrap_gates(gates)
        cur = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))

        def weight_of(spec):
            return params[spec.name + ".weight"]

        def bias_of(spec):
            return params.get(spec.name + ".bias") if spec.bias else None

        def apply_gate(t, name):
            g = gates.get(name)
            return ops.channel_scale(t, g) if g is not None else t

        for spec in self.arch.layers:
            if isinstance(spec, Conv2d):
                cur = apply_gate(cur, spec.name)
                cur = ops.conv2d(cur, weight_of(spec), stride=spec.stride,
                                 padding=spec.padding, bias=bias_of(spec))
            elif isinstance(spec, Linear):
                cur = apply_gate(cur, spec.name)
                cur = ops.linear(cur, weight_of(spec), bias=bias_of(spec))
            elif isinstance(spec, ReLU):
                cur = ops.relu(cur)
            elif isinstance(spec, MaxPool):
                cur = ops.maxpool2d(cur, kernel=spec.kernel, stride=spec.stride)
            elif isinstance(spec, AvgPool):
                k = spec.kernel if spec.kernel else cur.shape[2]
                cur = ops.avgpool2d(cur, kernel=k)
            elif isinstance(spec, Flatten):
                cur = ops.flatten(cur)
            elif isinstance(spec, ResidualBlock):
                shortcut = cur
                inner = cur
                for i, conv in enumerate(spec.convs):
                    if i > 0:
                        inner = ops.relu(inner)
                        inner = apply_gate(inner, conv.name)
                    inner = ops.conv2d(inner, weight_of(conv), stride=conv.stride,
                                       padding=conv.padding, bias=bias_of(conv))
                if spec.downsample is not None:
                    ds = spec.downsample
                    shortcut = ops.conv2d(shortcut, weight_of(ds), stride=ds.stride,
                                          padding=ds.padding, bias=bias_of(ds))
                inner = inner + shortcut
                cur = ops.relu(inner)
        return cur

    def logits(self, x: np.ndarray, gates=None) -> np.ndarray:
        return self.forward(x, gates=gates).data


# ---------------------------------------------------------------------------
# Architecture constructors.


def mnist_cnn(conv_channels=(16, 32), fc_width=128, num_classes=10,
              input_shape=(1, 28, 28), arch_id="mnist_cnn") -> Architecture:
    """Small conv net: conv-pool stages followed by one hidden fc layer."""
    c, h, w = input_shape
    layers: list[LayerSpec] = []
    in_c = c
    for i, out_c in enumerate(conv_channels, start=1):
        layers += [Conv2d(f"conv{i}", in_c, out_c, kernel=3, padding=1),
                   ReLU(f"relu{i}"), MaxPool(f"pool{i}", kernel=2)]
        in_c = out_c
        h //= 2
        w //= 2
    layers.append(Flatten("flatten"))
    feat = in_c * h * w
    layers += [Linear("fc1", feat, fc_width), ReLU("relu_fc1"),
               Linear("fc2", fc_width, num_classes)]
    return Architecture(arch_id, input_shape, num_classes, tuple(layers))


_VGG16_PLAN = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]


def vgg16(num_classes=1000, input_shape=(3, 224, 224),
          fc_widths=(4096, 4096), arch_id="vgg16") -> Architecture:
    layers: list[LayerSpec] = []
    in_c = input_shape[0]
    hw = input_shape[1]
    idx = 0
    for block, (width, reps) in enumerate(_VGG16_PLAN, start=1):
        for rep in range(1, reps + 1):
            idx += 1
            layers += [Conv2d(f"conv{block}_{rep}", in_c, width, kernel=3, padding=1),
                       ReLU(f"relu{block}_{rep}")]
            in_c = width
        layers.append(MaxPool(f"pool{block}", kernel=2))
        hw //= 2
    layers.append(Flatten("flatten"))
    feat = in_c * hw * hw
    for i, width in enumerate(fc_widths, start=1):
        layers += [Linear(f"fc{i}", feat, width), ReLU(f"relu_fc{i}")]
        feat = width
    layers.append(Linear("classifier", feat, num_classes))
    return Architecture(arch_id, input_shape, num_classes, tuple(layers))


def vgg16_cifar(num_classes=10, arch_id="vgg16_cifar") -> Architecture:
    """VGG16 sized for 32x32 inputs, two 512-wide hidden fc layers."""
    return vgg16(num_classes=num_classes, input_shape=(3, 32, 32),
                 fc_widths=(512, 512), arch_id=arch_id)


def _basic_block(name: str, in_c: int, out_c: int, stride: int) -> ResidualBlock:
    convs = (Conv2d(f"{name}.conv1", in_c, out_c, kernel=3, stride=stride, padding=1),
             Conv2d(f"{name}.conv2", out_c, out_c, kernel=3, padding=1))
    downsample = None
    if stride != 1 or in_c != out_c:
        downsample = Conv2d(f"{name}.downsample", in_c, out_c, kernel=1, stride=stride)
    return ResidualBlock(name, convs, downsample)


def _bottleneck_block(name: str, in_c: int, width: int, out_c: int,
                      stride: int) -> ResidualBlock:
    # stride lives on the 3x3 conv, matching the common model-zoo layout
    convs = (Conv2d(f"{name}.conv1", in_c, width, kernel=1),
             Conv2d(f"{name}.conv2", width, width, kernel=3, stride=stride, padding=1),
             Conv2d(f"{name}.conv3", width, out_c, kernel=1))
    downsample = None
    if stride != 1 or in_c != out_c:
        downsample = Conv2d(f"{name}.downsample", in_c, out_c, kernel=1, stride=stride)
    return ResidualBlock(name, convs, downsample)


def small_resnet(widths=(16, 32, 64), blocks_per_stage=2, num_classes=10,
                 input_shape=(3, 32, 32), arch_id="small_resnet") -> Architecture:
    """CIFAR-style residual net from basic blocks, three stages."""
    layers: list[LayerSpec] = [Conv2d("stem", input_shape[0], widths[0], kernel=3,
                                      padding=1), ReLU("stem_relu")]
    in_c = widths[0]
    for stage, width in enumerate(widths, start=1):
        for b in range(1, blocks_per_stage + 1):
            stride = 2 if (stage > 1 and b == 1) else 1
            layers.append(_basic_block(f"s{stage}b{b}", in_c, width, stride))
            in_c = width
    layers += [AvgPool("gap", kernel=0), Flatten("flatten"),
               Linear("fc", in_c, num_classes)]
    return Architecture(arch_id, input_shape, num_classes, tuple(layers))


def toy_bottleneck_resnet(num_classes=10, input_shape=(3, 16, 16),
                          arch_id="toy_bottleneck_resnet") -> Architecture:
    """Four bottleneck blocks; the third downsamples.  RRBP test bed."""
    layers: list[LayerSpec] = [Conv2d("stem", input_shape[0], 16, kernel=3, padding=1),
                               ReLU("stem_relu")]
    layers.append(_bottleneck_block("b1", 16, 8, 16, stride=1))
    layers.append(_bottleneck_block("b2", 16, 8, 16, stride=1))
    layers.append(_bottleneck_block("b3", 16, 8, 32, stride=2))
    layers.append(_bottleneck_block("b4", 32, 8, 32, stride=1))
    layers += [AvgPool("gap", kernel=0), Flatten("flatten"),
               Linear("fc", 32, num_classes)]
    return Architecture(arch_id, input_shape, num_classes, tuple(layers))


def resnet50(num_classes=1000, input_shape=(3, 224, 224),
             arch_id="resnet50") -> Architecture:
    layers: list[LayerSpec] = [
        Conv2d("stem", input_shape[0], 64, kernel=7, stride=2, padding=3),
        ReLU("stem_relu"),
        MaxPool("stem_pool", kernel=3, stride=2, padding=1),
    ]
    in_c = 64
    plan = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
    for stage, (width, reps, first_stride) in enumerate(plan, start=2):
        out_c = width * 4
        for b in range(1, reps + 1):
            stride = first_stride if b == 1 else 1
            layers.append(_bottleneck_block(f"res{stage}_{b}", in_c, width, out_c,
                                            stride=stride))
            in_c = out_c
    layers += [AvgPool("gap", kernel=0), Flatten("flatten"),
               Linear("fc", in_c, num_classes)]
    return Architecture(arch_id, input_shape, num_classes, tuple(layers))


ARCHITECTURES = {
    "mnist_cnn": mnist_cnn,
    "vgg16": vgg16,
    "vgg16_cifar": vgg16_cifar,
    "small_resnet": small_resnet,
    "toy_bottleneck_resnet": toy_bottleneck_resnet,
    "resnet50": resnet50,
}


def build_architecture(arch_id: str, options: dict | None = None) -> Architecture:
    if arch_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch_id!r}; choices: "
                         f"{sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch_id](**(options or {}))
