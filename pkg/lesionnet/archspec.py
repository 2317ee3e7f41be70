"""Line-oriented architecture files, shape inference and cost accounting.

An architecture file describes a linear chain of layers::

    input 3 224 224
    conv stem out=16 k=3 s=2
    pepe b1 proj1=4 exp1=32 proj2=8 out=16
    vac a1 down=8 embed=8 up=16 pool=2
    head 2

``analyze`` reports learnable parameters and FLOPs.  FLOPs are counted as
two per multiply-accumulate of convolution and dense layers only; batch
norm, activations, pooling and elementwise attention products count zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from .errors import ArchSpecError, ShapeError
from .layers import (
    ClassifierHead,
    ConvUnit,
    Layer,
    Network,
    PEPEBlock,
    Pool,
    ResidualBlock,
    VisualAttentionCondenser,
    layer_param_count,
)

logger = logging.getLogger(__name__)

FLOP_CONVENTION = "FLOPs = 2 x multiply-accumulates; conv and dense only"

Value = Union[int, str]
Shape = Tuple[int, ...]

_REQUIRED = object()

# key -> (type, default); defaults of None are left unset
LAYER_KEYS: Dict[str, Dict[str, Tuple[type, object]]] = {
    "conv": {
        "out": (int, _REQUIRED),
        "k": (int, 3),
        "s": (int, 1),
        "p": (int, None),
        "g": (int, 1),
        "bn": (int, 1),
        "act": (str, "relu"),
    },
    "dwconv": {"k": (int, 3), "s": (int, 1), "p": (int, None), "bn": (int, 1), "act": (str, "relu")},
    "pwconv": {"out": (int, _REQUIRED), "s": (int, 1), "bn": (int, 1), "act": (str, "relu")},
    "residual": {"mid": (int, _REQUIRED), "out": (int, _REQUIRED), "s": (int, 1), "stride_at": (str, "3x3")},
    "pepe": {
        "proj1": (int, _REQUIRED),
        "exp1": (int, _REQUIRED),
        "proj2": (int, _REQUIRED),
        "out": (int, _REQUIRED),
        "k": (int, 3),
        "s": (int, 1),
    },
    "vac": {"down": (int, _REQUIRED), "embed": (int, _REQUIRED), "up": (int, _REQUIRED), "pool": (int, 2)},
    "pool": {"kind": (str, _REQUIRED), "k": (int, 2), "s": (int, None), "p": (int, 0)},
}
LAYER_KINDS = tuple(LAYER_KEYS) + ("head",)
_MAY_BE_ZERO = {"p", "bn"}


@dataclass(frozen=True)
class LayerSpec:
    """One line of an architecture file."""

    kind: str
    name: str
    params: Dict[str, Value] = field(default_factory=dict)
    line: Optional[int] = field(default=None, compare=False)

    def get(self, key: str) -> Value:
        value = self.params.get(key)
        if value is None:
            return LAYER_KEYS[self.kind][key][1]  # type: ignore[return-value]
        return value


@dataclass(frozen=True)
class ArchSpec:
    """A named network: input shape, ordered layers, class count."""

    name: str
    input_shape: Tuple[int, int, int]
    layers: List[LayerSpec]
    num_classes: int

    def __post_init__(self) -> None:
        if not self.layers:
            raise ArchSpecError("architecture has no layers")
        if self.layers[-1].kind != "head":
            raise ArchSpecError("the last layer must be a head")
        if self.layers[-1].params.get("classes") != self.num_classes:
            raise ArchSpecError("num_classes does not match the head")


# --------------------------------------------------------------------------- parsing


def _parse_int(token: str, label: str, line: int) -> int:
    try:
        return int(token)
    except ValueError as exc:
        raise ArchSpecError(f"{label}: expected an integer, got '{token}'", line) from exc


def _parse_layer(kind: str, tokens: Sequence[str], line: int) -> LayerSpec:
    if kind not in LAYER_KEYS:
        raise ArchSpecError(f"unknown layer kind '{kind}'. Choose from {', '.join(LAYER_KINDS)}.", line)
    if not tokens or "=" in tokens[0]:
        raise ArchSpecError(f"{kind} layer needs a name", line)
    name, assignments = tokens[0], tokens[1:]
    keys = LAYER_KEYS[kind]
    params: Dict[str, Value] = {}
    for token in assignments:
        key, sep, raw = token.partition("=")
        if not sep or not raw:
            raise ArchSpecError(f"layer '{name}': expected key=value, got '{token}'", line)
        if key not in keys:
            raise ArchSpecError(f"layer '{name}': unknown hyperparameter '{key}' for {kind}", line)
        if key in params:
            raise ArchSpecError(f"layer '{name}': hyperparameter '{key}' given twice", line)
        kind_type = keys[key][0]
        if kind_type is int:
            value = _parse_int(raw, f"layer '{name}' {key}", line)
            if value < 0 or (value == 0 and key not in _MAY_BE_ZERO):
                raise ArchSpecError(f"layer '{name}': {key} must be positive, got {value}", line)
            params[key] = value
        else:
            params[key] = raw
    for key, (_, default) in keys.items():
        if key in params:
            continue
        if default is _REQUIRED:
            raise ArchSpecError(f"layer '{name}': missing hyperparameter '{key}'", line)
        if default is not None:
            params[key] = default  # type: ignore[assignment]
    return LayerSpec(kind, name, params, line)


def parse_archspec(text: str, name: str = "arch") -> ArchSpec:
    """Parse and validate an architecture file; errors carry the line number."""

    input_shape: Optional[Tuple[int, int, int]] = None
    layers: List[LayerSpec] = []
    seen: Dict[str, int] = {}
    head_line: Optional[int] = None

    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        tokens = content.split()
        kind, rest = tokens[0], tokens[1:]
        if head_line is not None:
            raise ArchSpecError("nothing may follow the head", number)
        if kind == "input":
            if input_shape is not None or layers:
                raise ArchSpecError("'input' must be the first statement and appear once", number)
            if len(rest) != 3:
                raise ArchSpecError("'input' needs channels, height and width", number)
            dims = tuple(_parse_int(token, "input", number) for token in rest)
            if min(dims) < 1:
                raise ArchSpecError(f"input dimensions must be positive, got {dims}", number)
            input_shape = dims  # type: ignore[assignment]
            continue
        if input_shape is None:
            raise ArchSpecError("the first statement must be 'input C H W'", number)
        if kind == "head":
            if len(rest) != 1:
                raise ArchSpecError("'head' needs exactly one class count", number)
            classes = _parse_int(rest[0], "head", number)
            if classes < 1:
                raise ArchSpecError(f"head class count must be positive, got {classes}", number)
            layers.append(LayerSpec("head", "head", {"classes": classes}, number))
            head_line = number
            continue
        layer = _parse_layer(kind, rest, number)
        if layer.name == "head":
            raise ArchSpecError("layer name 'head' is reserved for the classifier head", number)
        if layer.name in seen:
            raise ArchSpecError(f"duplicate layer name '{layer.name}' (first used on line {seen[layer.name]})", number)
        seen[layer.name] = number
        layers.append(layer)

    if input_shape is None:
        raise ArchSpecError("architecture is empty")
    if head_line is None:
        raise ArchSpecError("the last statement must be 'head CLASSES'")
    spec = ArchSpec(name, input_shape, layers, int(layers[-1].params["classes"]))
    infer_shapes(spec)
    return spec


def load_archspec(path: Union[str, Path]) -> ArchSpec:
    path = Path(path)
    return parse_archspec(path.read_text(encoding="utf-8"), name=path.stem)


def reference_spec(name: str = "resnet50") -> ArchSpec:
    """One of the architecture files shipped in ``lesionnet/archs``."""

    resource = resources.files("lesionnet").joinpath("archs", f"{name}.arch")
    if not resource.is_file():
        raise ArchSpecError(f"no bundled architecture named '{name}'")
    return parse_archspec(resource.read_text(encoding="utf-8"), name=name)


def format_archspec(spec: ArchSpec) -> str:
    """Serialize ``spec`` back into the line format."""

    lines = [f"input {' '.join(str(d) for d in spec.input_shape)}"]
    for layer in spec.layers:
        if layer.kind == "head":
            lines.append(f"head {layer.params['classes']}")
            continue
        ordered = [key for key in LAYER_KEYS[layer.kind] if key in layer.params]
        assignments = " ".join(f"{key}={layer.params[key]}" for key in ordered)
        lines.append(f"{layer.kind} {layer.name} {assignments}".rstrip())
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- shapes


def realize(layer: LayerSpec, in_shape: Shape) -> Layer:
    """The layers-module object for ``layer`` given its input shape."""

    if len(in_shape) != 3:
        raise ShapeError(f"layer '{layer.name}' needs a spatial input, got {in_shape}")
    channels = in_shape[0]
    get = layer.get
    kind = layer.kind
    if kind == "conv":
        k = int(get("k"))
        return ConvUnit(
            channels, int(get("out")), (k, k), int(get("s")), int(get("g")),
            bool(get("bn")), str(get("act")), None if get("p") is None else int(get("p")),
        )
    if kind == "dwconv":
        k = int(get("k"))
        return ConvUnit(
            channels, channels, (k, k), int(get("s")), channels,
            bool(get("bn")), str(get("act")), None if get("p") is None else int(get("p")),
        )
    if kind == "pwconv":
        return ConvUnit(channels, int(get("out")), (1, 1), int(get("s")), 1, bool(get("bn")), str(get("act")))
    if kind == "residual":
        return ResidualBlock(channels, int(get("mid")), int(get("out")), int(get("s")), str(get("stride_at")))
    if kind == "pepe":
        k = int(get("k"))
        return PEPEBlock(
            channels, int(get("proj1")), int(get("exp1")), int(get("proj2")), int(get("out")), (k, k), int(get("s"))
        )
    if kind == "vac":
        window = int(get("pool"))
        return VisualAttentionCondenser(channels, int(get("down")), int(get("embed")), int(get("up")), (window, window))
    if kind == "pool":
        pool_kind = str(get("kind"))
        window = int(get("k"))
        stride = get("s")
        return Pool(pool_kind, window, None if stride is None else int(stride), int(get("p")))
    if kind == "head":
        return ClassifierHead(channels, int(layer.params["classes"]))
    raise ArchSpecError(f"unknown layer kind '{kind}'", layer.line)


def _walk(spec: ArchSpec) -> Iterator[Tuple[LayerSpec, Layer, Shape, Shape]]:
    shape: Shape = tuple(spec.input_shape)
    for layer_spec in spec.layers:
        where = f"layer '{layer_spec.name}'" + (f" (line {layer_spec.line})" if layer_spec.line else "")
        try:
            layer = realize(layer_spec, shape)
            out_shape = layer.output_shape(shape)
        except ArchSpecError:
            raise
        except ValueError as exc:
            raise ShapeError(f"{where}: {exc}") from exc
        yield layer_spec, layer, shape, out_shape
        shape = out_shape


def infer_shapes(spec: ArchSpec) -> List[Tuple[str, Shape]]:
    """Output shape of every layer; fails at the first layer whose shapes do not fit."""

    return [(layer_spec.name, out_shape) for layer_spec, _, _, out_shape in _walk(spec)]


def realized_layers(spec: ArchSpec) -> List[Tuple[str, Layer]]:
    return [(layer_spec.name, layer) for layer_spec, layer, _, _ in _walk(spec)]


def build_network(spec: ArchSpec, seed: int, precision: str = "float32") -> Network:
    """Initialize a network for ``spec``; identical seeds give identical parameters."""

    return Network.initialize(spec.input_shape, realized_layers(spec), seed, precision)


# --------------------------------------------------------------------------- analysis


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int
    output_shape: Shape

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "kind": self.kind,
            "params": self.params,
            "flops": self.flops,
            "output_shape": list(self.output_shape),
        }


@dataclass(frozen=True)
class AnalyzerReport:
    """Per-layer and total parameter and FLOP counts."""

    name: str
    total_params: int
    total_flops: int
    per_layer: List[LayerCost]
    conventions: str = FLOP_CONVENTION

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    @property
    def flops_g(self) -> float:
        return self.total_flops / 1e9

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "per_layer": [cost.to_dict() for cost in self.per_layer],
            "conventions": self.conventions,
        }


def analyze(spec: ArchSpec) -> AnalyzerReport:
    per_layer = [
        LayerCost(layer_spec.name, layer_spec.kind, layer_param_count(layer), 2 * layer.macs(in_shape), out_shape)
        for layer_spec, layer, in_shape, out_shape in _walk(spec)
    ]
    report = AnalyzerReport(
        name=spec.name,
        total_params=sum(cost.params for cost in per_layer),
        total_flops=sum(cost.flops for cost in per_layer),
        per_layer=per_layer,
    )
    logger.info("%s: %.2fM params, %.2fG FLOPs", spec.name, report.params_m, report.flops_g)
    return report


def format_report(report: AnalyzerReport, per_layer: bool = True) -> List[str]:
    lines = [
        f"Architecture: {report.name}",
        f"  Params: {report.params_m:.2f}M, FLOPs: {report.flops_g:.2f}G",
        f"  Conventions: {report.conventions}",
    ]
    if per_layer:
        lines.append("  Layers:")
        for cost in report.per_layer:
            shape = "x".join(str(d) for d in cost.output_shape)
            lines.append(f"    {cost.name:<12} {cost.kind:<9} params {cost.params:>10,}  flops {cost.flops:>14,}  -> {shape}")
    return lines


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    params_m: float
    flops_g: float
    accuracy: Optional[float]
    params_ratio: float
    flops_ratio: float
    best: Dict[str, bool]

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "params_m": self.params_m,
            "flops_g": self.flops_g,
            "accuracy": self.accuracy,
            "params_ratio": self.params_ratio,
            "flops_ratio": self.flops_ratio,
            "best": dict(self.best),
        }


@dataclass(frozen=True)
class ComparisonTable:
    rows: List[ComparisonRow]
    has_accuracy: bool

    def to_dict(self) -> Dict[str, object]:
        return {"has_accuracy": self.has_accuracy, "rows": [row.to_dict() for row in self.rows]}


def compare(reports: Sequence[AnalyzerReport], metrics: Optional[Sequence] = None) -> ComparisonTable:
    """Table of params, FLOPs and accuracy with best-per-column flags.

    Ratios are taken against the first report (reference / row), so a row
    with 29.5x fewer parameters shows a params ratio of 29.5.
    """

    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    if metrics is not None and len(metrics) != len(reports):
        raise ValueError(f"{len(metrics)} metrics reports given for {len(reports)} architectures")

    accuracies: List[Optional[float]] = [None] * len(reports)
    if metrics is not None:
        accuracies = [None if m.accuracy is None else 100.0 * m.accuracy for m in metrics]
    reference = reports[0]
    min_params = min(r.total_params for r in reports)
    min_flops = min(r.total_flops for r in reports)
    known = [a for a in accuracies if a is not None]
    max_accuracy = max(known) if known else None

    rows = []
    for report, accuracy in zip(reports, accuracies):
        rows.append(
            ComparisonRow(
                name=report.name,
                params_m=report.params_m,
                flops_g=report.flops_g,
                accuracy=accuracy,
                params_ratio=reference.total_params / report.total_params if report.total_params else float("inf"),
                flops_ratio=reference.total_flops / report.total_flops if report.total_flops else float("inf"),
                best={
                    "params": report.total_params == min_params,
                    "flops": report.total_flops == min_flops,
                    "accuracy": accuracy is not None and accuracy == max_accuracy,
                },
            )
        )
    return ComparisonTable(rows, metrics is not None)


def _cell(text: str, bold: bool) -> str:
    return f"**{text}**" if bold else text


def format_comparison(table: ComparisonTable) -> List[str]:
    header = ["Architecture", "Params (M)", "FLOPs (G)"]
    if table.has_accuracy:
        header.append("Accuracy (%)")
    header += ["Params ratio", "FLOPs ratio"]
    lines = [" | ".join(header)]
    for row in table.rows:
        cells = [
            row.name,
            _cell(f"{row.params_m:.2f}", row.best["params"]),
            _cell(f"{row.flops_g:.2f}", row.best["flops"]),
        ]
        if table.has_accuracy:
            accuracy = "n/a" if row.accuracy is None else f"{row.accuracy:.1f}"
            cells.append(_cell(accuracy, row.best["accuracy"]))
        cells += [f"{row.params_ratio:.1f}×", f"{row.flops_ratio:.1f}×"]
        lines.append(" | ".join(cells))
    return lines


__all__ = [
    "FLOP_CONVENTION",
    "LAYER_KEYS",
    "AnalyzerReport",
    "ArchSpec",
    "ComparisonRow",
    "ComparisonTable",
    "LayerCost",
    "LayerSpec",
    "analyze",
    "build_network",
    "compare",
    "format_archspec",
    "format_comparison",
    "format_report",
    "infer_shapes",
    "load_archspec",
    "parse_archspec",
    "realize",
    "realized_layers",
    "reference_spec",
]
