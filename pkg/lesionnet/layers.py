"""Layer zoo: convolution units, residual and PEPE blocks, attention condensers.

Layer objects are frozen descriptions (channel counts, kernels, strides).
They know their parameter shapes, their shape rule and their multiply-
accumulate count, so architectures can be analyzed without allocating
weights.  The parameters themselves live in a :class:`Network`, and the
``*_forward`` functions read them through a :class:`Scope`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, MutableMapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from . import ops
from .errors import ShapeError
from .ops import RunningStats, pair
from .tensor import Tape, Tensor, dtype_for

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class ParamSpec:
    """Shape and initialization rule of one learnable tensor."""

    shape: Tuple[int, ...]
    init: str = "he"
    fan_in: int = 1

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _positive(**values: int) -> None:
    for label, value in values.items():
        if int(value) < 1:
            raise ValueError(f"{label} must be positive, got {value}")


def _require_channels(shape: Shape, expected: int, label: str) -> None:
    if len(shape) != 3:
        raise ShapeError(f"{label} expects a (channels, height, width) input, got {shape}")
    if shape[0] != expected:
        raise ShapeError(f"{label} expects {expected} input channels, got {shape[0]}")


def _prefixed(units: Mapping[str, "ConvUnit"]) -> Dict[str, ParamSpec]:
    specs: Dict[str, ParamSpec] = {}
    for unit_name, unit in units.items():
        for name, spec in unit.param_specs().items():
            specs[f"{unit_name}.{name}"] = spec
    return specs


def _prefixed_stats(units: Mapping[str, "ConvUnit"]) -> Dict[str, int]:
    return {
        f"{unit_name}.{name}": channels
        for unit_name, unit in units.items()
        for name, channels in unit.stat_channels().items()
    }


# --------------------------------------------------------------------------- layer descriptions


@dataclass(frozen=True)
class ConvUnit:
    """Convolution, optional batch norm, optional ReLU.

    ``groups == in_ch`` gives a depthwise unit, a 1x1 kernel a pointwise one.
    There is no conv bias: batch norm's beta takes its place.
    """

    in_ch: int
    out_ch: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    groups: int = 1
    has_bn: bool = True
    activation: str = "relu"
    padding: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        kernel = pair(self.kernel)
        stride = pair(self.stride)
        padding = pair(self.padding) if self.padding is not None else (kernel[0] // 2, kernel[1] // 2)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)
        _positive(in_ch=self.in_ch, out_ch=self.out_ch, groups=self.groups)
        _positive(kernel_h=kernel[0], kernel_w=kernel[1], stride_h=stride[0], stride_w=stride[1])
        if min(padding) < 0:
            raise ValueError(f"padding must be non-negative, got {padding}")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_ch={self.in_ch} and out_ch={self.out_ch}"
            )
        if self.activation not in ("relu", "none"):
            raise ValueError(f"Unsupported activation '{self.activation}'. Choose from relu, none.")

    def param_specs(self) -> Dict[str, ParamSpec]:
        kh, kw = self.kernel
        fan_in = (self.in_ch // self.groups) * kh * kw
        specs = {"weight": ParamSpec((self.out_ch, self.in_ch // self.groups, kh, kw), "he", fan_in)}
        if self.has_bn:
            specs["bn.gamma"] = ParamSpec((self.out_ch,), "ones")
            specs["bn.beta"] = ParamSpec((self.out_ch,), "zeros")
        return specs

    def stat_channels(self) -> Dict[str, int]:
        return {"bn": self.out_ch} if self.has_bn else {}

    def output_shape(self, shape: Shape) -> Shape:
        _require_channels(shape, self.in_ch, "conv unit")
        _, h, w = shape
        out_h = ops.conv_output_size(h, self.kernel[0], self.stride[0], self.padding[0], "height")
        out_w = ops.conv_output_size(w, self.kernel[1], self.stride[1], self.padding[1], "width")
        return (self.out_ch, out_h, out_w)

    def macs(self, shape: Shape) -> int:
        _, out_h, out_w = self.output_shape(shape)
        kh, kw = self.kernel
        return kh * kw * (self.in_ch // self.groups) * self.out_ch * out_h * out_w


@dataclass(frozen=True)
class ResidualBlock:
    """Bottleneck residual block: 1x1 reduce, 3x3, 1x1 expand, plus shortcut.

    ``stride_at`` selects where the block's stride is applied: on the 3x3
    convolution (``"3x3"``) or on the first 1x1 convolution and the
    projection (``"1x1"``).
    """

    in_ch: int
    mid_ch: int
    out_ch: int
    stride: int = 1
    stride_at: str = "3x3"

    def __post_init__(self) -> None:
        _positive(in_ch=self.in_ch, mid_ch=self.mid_ch, out_ch=self.out_ch, stride=self.stride)
        if self.stride_at not in ("3x3", "1x1"):
            raise ValueError(f"Unsupported stride_at '{self.stride_at}'. Choose from 3x3, 1x1.")

    @property
    def projection_shortcut(self) -> bool:
        return self.in_ch != self.out_ch or self.stride != 1

    def units(self) -> Dict[str, ConvUnit]:
        reduce_stride = self.stride if self.stride_at == "1x1" else 1
        spatial_stride = self.stride if self.stride_at == "3x3" else 1
        units = {
            "conv1": ConvUnit(self.in_ch, self.mid_ch, (1, 1), reduce_stride),
            "conv2": ConvUnit(self.mid_ch, self.mid_ch, (3, 3), spatial_stride),
            "conv3": ConvUnit(self.mid_ch, self.out_ch, (1, 1), activation="none"),
        }
        if self.projection_shortcut:
            units["shortcut"] = ConvUnit(self.in_ch, self.out_ch, (1, 1), self.stride, activation="none")
        return units

    def param_specs(self) -> Dict[str, ParamSpec]:
        return _prefixed(self.units())

    def stat_channels(self) -> Dict[str, int]:
        return _prefixed_stats(self.units())

    def output_shape(self, shape: Shape) -> Shape:
        _require_channels(shape, self.in_ch, "residual block")
        units = self.units()
        branch = shape
        for name in ("conv1", "conv2", "conv3"):
            branch = units[name].output_shape(branch)
        return branch

    def macs(self, shape: Shape) -> int:
        units = self.units()
        total, branch = 0, shape
        for name in ("conv1", "conv2", "conv3"):
            total += units[name].macs(branch)
            branch = units[name].output_shape(branch)
        if "shortcut" in units:
            total += units["shortcut"].macs(shape)
        return total


@dataclass(frozen=True)
class PEPEBlock:
    """Projection-expansion-projection-expansion block around one depthwise conv."""

    in_ch: int
    proj1_ch: int
    exp1_ch: int
    proj2_ch: int
    out_ch: int
    dw_kernel: Tuple[int, int] = (3, 3)
    stride: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "dw_kernel", pair(self.dw_kernel))
        _positive(
            in_ch=self.in_ch,
            proj1_ch=self.proj1_ch,
            exp1_ch=self.exp1_ch,
            proj2_ch=self.proj2_ch,
            out_ch=self.out_ch,
            stride=self.stride,
        )
        if self.proj1_ch >= self.in_ch:
            raise ValueError(f"proj1_ch ({self.proj1_ch}) must reduce in_ch ({self.in_ch})")
        if self.proj2_ch >= self.exp1_ch:
            raise ValueError(f"proj2_ch ({self.proj2_ch}) must reduce exp1_ch ({self.exp1_ch})")

    @property
    def has_shortcut(self) -> bool:
        return self.in_ch == self.out_ch and self.stride == 1

    def units(self) -> Dict[str, ConvUnit]:
        return {
            "p1": ConvUnit(self.in_ch, self.proj1_ch, (1, 1)),
            "e1": ConvUnit(self.proj1_ch, self.exp1_ch, (1, 1)),
            "dw": ConvUnit(self.exp1_ch, self.exp1_ch, self.dw_kernel, self.stride, groups=self.exp1_ch),
            "p2": ConvUnit(self.exp1_ch, self.proj2_ch, (1, 1)),
            "e2": ConvUnit(self.proj2_ch, self.out_ch, (1, 1), activation="none"),
        }

    def param_specs(self) -> Dict[str, ParamSpec]:
        return _prefixed(self.units())

    def stat_channels(self) -> Dict[str, int]:
        return _prefixed_stats(self.units())

    def output_shape(self, shape: Shape) -> Shape:
        _require_channels(shape, self.in_ch, "PEPE block")
        for unit in self.units().values():
            shape = unit.output_shape(shape)
        return shape

    def macs(self, shape: Shape) -> int:
        total = 0
        for unit in self.units().values():
            total += unit.macs(shape)
            shape = unit.output_shape(shape)
        return total


@dataclass(frozen=True)
class VisualAttentionCondenser:
    """Self-attention through a condensed embedding.

    Down-mix to ``down_ch``, max-pool (ceil mode), embed with a full 3x3 conv,
    upsample back, up-mix to ``up_ch`` and gate the input with the sigmoid of
    the result: ``y = x * A * s + x`` with a learnable per-channel ``s``.
    """

    in_ch: int
    down_ch: int
    embed_ch: int
    up_ch: int
    pool_window: Tuple[int, int] = (2, 2)

    def __post_init__(self) -> None:
        object.__setattr__(self, "pool_window", pair(self.pool_window))
        _positive(in_ch=self.in_ch, down_ch=self.down_ch, embed_ch=self.embed_ch, up_ch=self.up_ch)
        _positive(pool_h=self.pool_window[0], pool_w=self.pool_window[1])
        if self.up_ch != self.in_ch:
            raise ValueError(f"up-mixing channels ({self.up_ch}) must equal input channels ({self.in_ch})")

    def units(self) -> Dict[str, ConvUnit]:
        return {
            "down": ConvUnit(self.in_ch, self.down_ch, (1, 1), has_bn=False, activation="none"),
            "embed": ConvUnit(self.down_ch, self.embed_ch, (3, 3)),
            "up": ConvUnit(self.embed_ch, self.up_ch, (1, 1), has_bn=False, activation="none"),
        }

    def param_specs(self) -> Dict[str, ParamSpec]:
        specs = _prefixed(self.units())
        specs["scale"] = ParamSpec((self.in_ch,), "ones")
        return specs

    def stat_channels(self) -> Dict[str, int]:
        return _prefixed_stats(self.units())

    def pooled_size(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.pool_window
        return (
            ops.pool_output_size(h, kh, kh, 0, True, "height"),
            ops.pool_output_size(w, kw, kw, 0, True, "width"),
        )

    def output_shape(self, shape: Shape) -> Shape:
        _require_channels(shape, self.in_ch, "attention condenser")
        return shape

    def macs(self, shape: Shape) -> int:
        self.output_shape(shape)
        _, h, w = shape
        units = self.units()
        ph, pw = self.pooled_size(h, w)
        return (
            units["down"].macs(shape)
            + units["embed"].macs((self.down_ch, ph, pw))
            + units["up"].macs((self.embed_ch, h, w))
        )


@dataclass(frozen=True)
class Pool:
    """Parameter-free pooling stage (``max``, ``avg`` or ``global``)."""

    kind: str
    window: Tuple[int, int] = (2, 2)
    stride: Optional[Tuple[int, int]] = None
    padding: Tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.kind not in ("max", "avg", "global"):
            raise ValueError(f"Unsupported pooling kind '{self.kind}'. Choose from max, avg, global.")
        window = pair(self.window)
        object.__setattr__(self, "window", window)
        object.__setattr__(self, "stride", pair(self.stride) if self.stride is not None else window)
        object.__setattr__(self, "padding", pair(self.padding))

    def param_specs(self) -> Dict[str, ParamSpec]:
        return {}

    def stat_channels(self) -> Dict[str, int]:
        return {}

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise ShapeError(f"pool expects a (channels, height, width) input, got {shape}")
        c, h, w = shape
        if self.kind == "global":
            return (c, 1, 1)
        return (
            c,
            ops.pool_output_size(h, self.window[0], self.stride[0], self.padding[0], False, "height"),
            ops.pool_output_size(w, self.window[1], self.stride[1], self.padding[1], False, "width"),
        )

    def macs(self, shape: Shape) -> int:
        self.output_shape(shape)
        return 0


@dataclass(frozen=True)
class ClassifierHead:
    """Global average pooling followed by a dense layer with bias."""

    in_ch: int
    num_classes: int = 2

    def __post_init__(self) -> None:
        _positive(in_ch=self.in_ch, num_classes=self.num_classes)

    def param_specs(self) -> Dict[str, ParamSpec]:
        return {
            "weight": ParamSpec((self.in_ch, self.num_classes), "he", self.in_ch),
            "bias": ParamSpec((self.num_classes,), "zeros"),
        }

    def stat_channels(self) -> Dict[str, int]:
        return {}

    def output_shape(self, shape: Shape) -> Shape:
        _require_channels(shape, self.in_ch, "classifier head")
        return (self.num_classes,)

    def macs(self, shape: Shape) -> int:
        self.output_shape(shape)
        return self.in_ch * self.num_classes


Layer = Union[ConvUnit, ResidualBlock, PEPEBlock, VisualAttentionCondenser, Pool, ClassifierHead]


def layer_param_count(layer: Layer) -> int:
    """Learnable scalars of ``layer``; batch-norm running statistics excluded."""

    return sum(spec.size for spec in layer.param_specs().values())


# --------------------------------------------------------------------------- forward passes


@dataclass
class Scope:
    """Parameter and statistics lookup for one layer during one forward pass."""

    params: Mapping[str, Tensor]
    stats: MutableMapping[str, RunningStats]
    prefix: str = ""
    tape: Optional[Tape] = None
    training: bool = False

    @property
    def mode(self) -> str:
        return "train" if self.training else "infer"

    def child(self, name: str) -> "Scope":
        return replace(self, prefix=f"{self.prefix}{name}.")

    def param(self, name: str) -> Tensor:
        key = self.prefix + name
        try:
            tensor = self.params[key]
        except KeyError as exc:
            raise KeyError(f"missing parameter '{key}'") from exc
        if self.tape is None or self.tape.index_of(tensor) is not None:
            return tensor
        return self.tape.watch(tensor, name=key)

    def running(self, name: str) -> RunningStats:
        return self.stats[self.prefix + name]


def _check_input(x: Tensor, channels: int, label: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{label} expects {channels} input channels, got input of shape {x.shape}")


def conv_unit_forward(unit: ConvUnit, x: Tensor, scope: Scope) -> Tensor:
    _check_input(x, unit.in_ch, "conv unit")
    tape = scope.tape
    y = ops.conv2d(x, scope.param("weight"), unit.stride, unit.padding, unit.groups, tape=tape)
    if unit.has_bn:
        y = ops.batchnorm(
            y, scope.param("bn.gamma"), scope.param("bn.beta"), scope.running("bn"), scope.mode, tape=tape
        )
    if unit.activation == "relu":
        y = ops.relu(y, tape=tape)
    return y


def residual_forward(block: ResidualBlock, x: Tensor, scope: Scope) -> Tensor:
    """``relu(F(x) + shortcut(x))`` with the bottleneck branch ``F``."""

    _check_input(x, block.in_ch, "residual block")
    units = block.units()
    branch = x
    for name in ("conv1", "conv2", "conv3"):
        branch = conv_unit_forward(units[name], branch, scope.child(name))
    shortcut = x
    if block.projection_shortcut:
        shortcut = conv_unit_forward(units["shortcut"], x, scope.child("shortcut"))
    return ops.relu(ops.add(branch, shortcut, tape=scope.tape), tape=scope.tape)


def pepe_forward(block: PEPEBlock, x: Tensor, scope: Scope) -> Tensor:
    """P1 -> E1 -> DW -> P2 -> E2, plus ``x`` when the shortcut is active."""

    _check_input(x, block.in_ch, "PEPE block")
    y = x
    for name, unit in block.units().items():
        y = conv_unit_forward(unit, y, scope.child(name))
    if block.has_shortcut:
        y = ops.add(y, x, tape=scope.tape)
    return y


def attention_map(vac: VisualAttentionCondenser, x: Tensor, scope: Scope) -> Tensor:
    """The sigmoid attention ``A`` of the condenser, shaped like ``x``."""

    _check_input(x, vac.in_ch, "attention condenser")
    tape = scope.tape
    units = vac.units()
    _, _, h, w = x.shape
    condensed = conv_unit_forward(units["down"], x, scope.child("down"))
    condensed = ops.pool2d(condensed, "max", vac.pool_window, vac.pool_window, ceil_mode=True, tape=tape)
    embedded = conv_unit_forward(units["embed"], condensed, scope.child("embed"))
    expanded = ops.upsample_nearest(embedded, (h, w), tape=tape)
    return ops.sigmoid(conv_unit_forward(units["up"], expanded, scope.child("up")), tape=tape)


def vac_forward(vac: VisualAttentionCondenser, x: Tensor, scope: Scope) -> Tensor:
    """``x * A * s + x``; the output has the input's shape."""

    tape = scope.tape
    attention = attention_map(vac, x, scope)
    gated = ops.scale(ops.mul(x, attention, tape=tape), scope.param("scale"), tape=tape)
    return ops.add(gated, x, tape=tape)


def pool_forward(layer: Pool, x: Tensor, scope: Scope) -> Tensor:
    if layer.kind == "global":
        return ops.pool2d(x, "global_avg", tape=scope.tape)
    return ops.pool2d(x, layer.kind, layer.window, layer.stride, layer.padding, tape=scope.tape)


def head_forward(head: ClassifierHead, x: Tensor, scope: Scope) -> Tensor:
    _check_input(x, head.in_ch, "classifier head")
    pooled = ops.pool2d(x, "global_avg", tape=scope.tape)
    flat = ops.reshape(pooled, (x.shape[0], head.in_ch), tape=scope.tape)
    return ops.dense(flat, scope.param("weight"), scope.param("bias"), tape=scope.tape)


FORWARD: Dict[type, Callable[[Layer, Tensor, Scope], Tensor]] = {
    ConvUnit: conv_unit_forward,
    ResidualBlock: residual_forward,
    PEPEBlock: pepe_forward,
    VisualAttentionCondenser: vac_forward,
    Pool: pool_forward,
    ClassifierHead: head_forward,
}


def layer_forward(layer: Layer, x: Tensor, scope: Scope) -> Tensor:
    return FORWARD[type(layer)](layer, x, scope)


# --------------------------------------------------------------------------- network


def initial_parameters(
    layer: Layer,
    rng: np.random.Generator,
    precision: str = "float32",
) -> Dict[str, Tensor]:
    """He-normal weights (std = sqrt(2 / fan_in)), unit gammas and scales, zero betas and biases."""

    dtype = dtype_for(precision)
    params: Dict[str, Tensor] = {}
    for name, spec in layer.param_specs().items():
        if spec.init == "he":
            values = rng.normal(0.0, np.sqrt(2.0 / spec.fan_in), size=spec.shape)
        elif spec.init == "ones":
            values = np.ones(spec.shape)
        else:
            values = np.zeros(spec.shape)
        params[name] = Tensor(values.astype(dtype))
    return params


@dataclass
class Network:
    """Ordered named layers with their parameters and batch-norm statistics."""

    input_shape: Tuple[int, int, int]
    layers: List[Tuple[str, Layer]]
    params: Dict[str, Tensor] = field(default_factory=dict)
    stats: Dict[str, RunningStats] = field(default_factory=dict)
    precision: str = "float32"

    @classmethod
    def initialize(
        cls,
        input_shape: Sequence[int],
        layers: Sequence[Tuple[str, Layer]],
        seed: int,
        precision: str = "float32",
    ) -> "Network":
        rng = np.random.default_rng(seed)
        dtype = dtype_for(precision)
        params: Dict[str, Tensor] = {}
        stats: Dict[str, RunningStats] = {}
        for layer_name, layer in layers:
            for name, tensor in initial_parameters(layer, rng, precision).items():
                params[f"{layer_name}.{name}"] = tensor
            for name, channels in layer.stat_channels().items():
                stats[f"{layer_name}.{name}"] = RunningStats.fresh(channels, dtype)
        logger.debug("initialized %d parameter tensors with seed %d", len(params), seed)
        return cls(tuple(input_shape), list(layers), params, stats, precision)

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    @property
    def num_classes(self) -> int:
        last = self.layers[-1][1]
        if not isinstance(last, ClassifierHead):
            raise ShapeError("network does not end in a classifier head")
        return last.num_classes

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def load_parameters(self, params: Mapping[str, Tensor]) -> None:
        missing = set(self.params) - set(params)
        unknown = set(params) - set(self.params)
        if missing or unknown:
            raise KeyError(f"parameter names differ: missing {sorted(missing)}, unknown {sorted(unknown)}")
        for name, tensor in params.items():
            if tensor.shape != self.params[name].shape:
                raise ShapeError(f"parameter '{name}' has shape {tensor.shape}, expected {self.params[name].shape}")
        self.params = {name: params[name].detach() for name in self.params}

    def forward(self, x: Tensor, tape: Optional[Tape] = None, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        y = x
        for name, layer in self.layers:
            scope = Scope(self.params, self.stats, f"{name}.", tape, training)
            y = layer_forward(layer, y, scope)
        return y

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Class probabilities in infer mode, computed in fixed-order chunks."""

        dtype = dtype_for(self.precision)
        chunks = []
        for start in range(0, images.shape[0], batch_size):
            logits = self.forward(Tensor(np.asarray(images[start : start + batch_size], dtype=dtype)))
            chunks.append(softmax(logits.data, axis=1))
        return np.concatenate(chunks, axis=0)


__all__ = [
    "ClassifierHead",
    "ConvUnit",
    "Layer",
    "Network",
    "PEPEBlock",
    "ParamSpec",
    "Pool",
    "ResidualBlock",
    "Scope",
    "VisualAttentionCondenser",
    "attention_map",
    "conv_unit_forward",
    "head_forward",
    "initial_parameters",
    "layer_forward",
    "layer_param_count",
    "pepe_forward",
    "pool_forward",
    "residual_forward",
    "vac_forward",
]
