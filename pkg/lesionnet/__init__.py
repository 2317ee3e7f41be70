"""Kompakte Faltungsnetze für die Klassifikation dermatoskopischer Bilder."""

from .archspec import (
    AnalyzerReport,
    ArchSpec,
    analyze,
    build_network,
    compare,
    format_comparison,
    format_report,
    load_archspec,
    parse_archspec,
    reference_spec,
)
from .data import ArrayDataset, AugmentConfig, DatasetManifest, ManifestDataset, SplitConfig, ingest, partition
from .errors import (
    ArchSpecError,
    CheckpointError,
    DataError,
    DivergenceError,
    LesionNetError,
    SearchSpaceError,
    ShapeError,
)
from .explain import AuditRules, audit, occlusion_saliency, overlay_export
from .layers import Network
from .metrics import ConfusionMatrix, format_metrics, metrics
from .search import Constraint, ProxyProtocol, SearchSpace, search, tradeoff_report
from .tensor import Tape, Tensor, backward
from .training import Checkpoint, TrainConfig, evaluate, train


__all__ = [
    "AnalyzerReport",
    "ArchSpec",
    "ArchSpecError",
    "ArrayDataset",
    "AugmentConfig",
    "AuditRules",
    "Checkpoint",
    "CheckpointError",
    "ConfusionMatrix",
    "Constraint",
    "DataError",
    "DatasetManifest",
    "DivergenceError",
    "LesionNetError",
    "ManifestDataset",
    "Network",
    "ProxyProtocol",
    "SearchSpace",
    "SearchSpaceError",
    "ShapeError",
    "SplitConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "analyze",
    "audit",
    "backward",
    "build_network",
    "compare",
    "evaluate",
    "format_comparison",
    "format_metrics",
    "format_report",
    "ingest",
    "load_archspec",
    "metrics",
    "occlusion_saliency",
    "overlay_export",
    "parse_archspec",
    "partition",
    "reference_spec",
    "search",
    "tradeoff_report",
    "train",
]
