"""Occlusion saliency, a border-reliance audit and heatmap overlays.

Saliency at a patch position is the drop in the audited class's
probability when that patch is filled with a baseline colour.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import save_png
from .layers import Network
from .tensor import Tensor

logger = logging.getLogger(__name__)

BASELINES = ("mean", "edge")
LUMINANCE = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SaliencyMap:
    """Normalized ``(H, W)`` relevance with the raw occlusion grid it came from."""

    values: np.ndarray
    target_class: int
    raw: np.ndarray
    method: str = "occlusion"

    @property
    def peak(self) -> Tuple[int, int]:
        row, col = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(row), int(col)

    @property
    def is_constant(self) -> bool:
        return float(np.ptp(self.raw)) == 0.0


def occlusion_positions(size: int, patch: int, stride: int) -> np.ndarray:
    count = math.ceil((size - patch) / stride) + 1
    return np.minimum(np.arange(count) * stride, size - patch)


def _fill_colour(image: np.ndarray, top: int, left: int, patch: int, baseline: str, mean_colour: Optional[np.ndarray]) -> np.ndarray:
    if baseline == "mean":
        return mean_colour if mean_colour is not None else image.mean(axis=(1, 2))
    _, h, w = image.shape
    r0, r1 = max(top - 1, 0), min(top + patch + 1, h)
    c0, c1 = max(left - 1, 0), min(left + patch + 1, w)
    ring = np.ones((r1 - r0, c1 - c0), dtype=bool)
    ring[top - r0 : top - r0 + patch, left - c0 : left - c0 + patch] = False
    if not ring.any():
        return image.mean(axis=(1, 2))
    return image[:, r0:r1, c0:c1][:, ring].mean(axis=1)


def _spread(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape: Tuple[int, int], patch: int) -> np.ndarray:
    """Separable linear interpolation between patch centres, clamped at the edges."""

    h, w = shape
    row_centres = rows + (patch - 1) / 2.0
    col_centres = cols + (patch - 1) / 2.0
    across = np.stack([np.interp(np.arange(w), col_centres, line) for line in grid])
    return np.stack([np.interp(np.arange(h), row_centres, column) for column in across.T], axis=1)


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""

    low, high = float(values.min()), float(values.max())
    if high - low <= 0.0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - low) / (high - low)


def occlusion_saliency(
    network: Network,
    image: Union[Tensor, np.ndarray],
    target_class: int,
    patch: int = 32,
    stride: int = 16,
    baseline: str = "mean",
    mean_colour: Optional[Sequence[float]] = None,
    batch_size: int = 32,
) -> SaliencyMap:
    if not isinstance(network, Network) or not network.params:
        raise ValueError("occlusion saliency needs an initialized network")
    pixels = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"expected a (channels, height, width) image, got {pixels.shape}")
    _, h, w = pixels.shape
    if not 1 <= patch <= min(h, w):
        raise ValueError(f"patch must lie in [1, {min(h, w)}], got {patch}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if baseline not in BASELINES:
        raise ValueError(f"Unsupported baseline '{baseline}'. Choose from {', '.join(BASELINES)}.")
    if not 0 <= target_class < network.num_classes:
        raise ValueError(f"target_class {target_class} outside [0, {network.num_classes})")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    colour = None if mean_colour is None else np.asarray(mean_colour, dtype=np.float64)

    rows = occlusion_positions(h, patch, stride)
    cols = occlusion_positions(w, patch, stride)
    positions = [(int(r), int(c)) for r in rows for c in cols]
    reference = network.predict_proba(pixels[None])[0, target_class]
    drops = np.empty(len(positions), dtype=np.float64)
    # at most batch_size occluded copies exist at any time
    for start in range(0, len(positions), batch_size):
        chunk = positions[start : start + batch_size]
        occluded = np.repeat(pixels[None], len(chunk), axis=0)
        for slot, (top, left) in enumerate(chunk):
            fill = _fill_colour(pixels, top, left, patch, baseline, colour)
            occluded[slot, :, top : top + patch, left : left + patch] = fill[:, None, None]
        drops[start : start + len(chunk)] = reference - network.predict_proba(occluded, batch_size)[:, target_class]
    raw = drops.reshape(rows.size, cols.size)
    values = normalize(_spread(raw, rows, cols, (h, w), patch))
    logger.debug("occlusion grid %dx%d, drop range [%.4f, %.4f]", rows.size, cols.size, raw.min(), raw.max())
    return SaliencyMap(values, target_class, raw)


# --------------------------------------------------------------------------- audit


@dataclass(frozen=True)
class AuditRules:
    """Thresholds for flagging saliency maps.

    An image fails when more than ``border_mass_max`` of its saliency mass
    lies within ``border_width`` pixels of the edge, or, with a mask given
    and ``top_region_min_overlap`` set, when its top region overlaps the
    mask by less than that IoU.
    """

    border_mass_max: float = 0.5
    top_region_min_overlap: Optional[float] = None
    border_width: int = 16
    top_fraction: float = 0.05
    patch: int = 32
    stride: int = 16
    baseline: str = "mean"

    def __post_init__(self) -> None:
        if not 0.0 <= self.border_mass_max <= 1.0:
            raise ValueError(f"border_mass_max must lie in [0, 1], got {self.border_mass_max}")
        if self.top_region_min_overlap is not None and not 0.0 <= self.top_region_min_overlap <= 1.0:
            raise ValueError(f"top_region_min_overlap must lie in [0, 1], got {self.top_region_min_overlap}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError(f"top_fraction must lie in (0, 1], got {self.top_fraction}")
        if self.border_width < 0:
            raise ValueError(f"border_width must be non-negative, got {self.border_width}")


def border_mass(values: np.ndarray, width: int) -> float:
    total = float(values.sum())
    if total <= 0.0 or width == 0:
        return 0.0
    inner = values[width:-width, width:-width] if 2 * width < min(values.shape) else values[:0, :0]
    return (total - float(inner.sum())) / total


def top_region(values: np.ndarray, fraction: float = 0.05) -> np.ndarray:
    """The ``ceil(fraction * pixels)`` highest-valued pixels; ties go to earlier pixels."""

    count = max(1, math.ceil(fraction * values.size))
    order = np.argsort(-values.reshape(-1), kind="stable")[:count]
    mask = np.zeros(values.size, dtype=bool)
    mask[order] = True
    return mask.reshape(values.shape)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


@dataclass(frozen=True)
class AuditEntry:
    index: int
    saliency: SaliencyMap
    peak: Tuple[int, int]
    border_mass: float
    top_mass_share: float
    overlap: Optional[float]
    passed: bool
    reasons: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, object]:
        return {
            "index": self.index,
            "target_class": self.saliency.target_class,
            "peak": list(self.peak),
            "border_mass": self.border_mass,
            "top_mass_share": self.top_mass_share,
            "overlap": self.overlap,
            "passed": self.passed,
            "reasons": list(self.reasons),
        }


@dataclass(frozen=True)
class AuditReport:
    entries: List[AuditEntry]
    rules: AuditRules = field(default_factory=AuditRules)

    @property
    def pass_rate(self) -> float:
        return sum(entry.passed for entry in self.entries) / len(self.entries)

    def to_dict(self) -> Dict[str, object]:
        return {
            "pass_rate": self.pass_rate,
            "rules": {
                "border_mass_max": self.rules.border_mass_max,
                "top_region_min_overlap": self.rules.top_region_min_overlap,
                "border_width": self.rules.border_width,
                "top_fraction": self.rules.top_fraction,
            },
            "entries": [entry.to_dict() for entry in self.entries],
        }


def audit_map(index: int, saliency: SaliencyMap, rules: AuditRules, mask: Optional[np.ndarray] = None) -> AuditEntry:
    values = saliency.values
    total = float(values.sum())
    region = top_region(values, rules.top_fraction)
    share = float(values[region].sum()) / total if total > 0 else 0.0
    mass = border_mass(values, rules.border_width)
    overlap = iou(region, mask) if mask is not None else None

    reasons = []
    if mass > rules.border_mass_max:
        reasons.append(f"border mass {mass:.2f} exceeds {rules.border_mass_max:.2f}")
    if overlap is not None and rules.top_region_min_overlap is not None and overlap < rules.top_region_min_overlap:
        reasons.append(f"top-region overlap {overlap:.2f} below {rules.top_region_min_overlap:.2f}")
    return AuditEntry(index, saliency, saliency.peak, mass, share, overlap, not reasons, tuple(reasons))


def audit(
    network: Network,
    images: Union[np.ndarray, Sequence[np.ndarray]],
    rules: AuditRules = AuditRules(),
    target_class: Optional[int] = None,
    masks: Optional[Sequence[np.ndarray]] = None,
) -> AuditReport:
    """Saliency and rule checks for every image.

    Each image is audited for ``target_class`` or, when that is not given,
    for the class the network predicts.
    """

    images = [np.asarray(image) for image in images]
    if not images:
        raise ValueError("audit needs at least one image")
    if masks is not None and len(masks) != len(images):
        raise ValueError(f"{len(masks)} masks given for {len(images)} images")
    entries = []
    for index, image in enumerate(images):
        audited = target_class
        if audited is None:
            audited = int(np.argmax(network.predict_proba(image[None])[0]))
        saliency = occlusion_saliency(network, image, audited, rules.patch, rules.stride, rules.baseline)
        entry = audit_map(index, saliency, rules, None if masks is None else np.asarray(masks[index], dtype=bool))
        if not entry.passed:
            logger.warning("image %d flagged: %s", index, "; ".join(entry.reasons))
        entries.append(entry)
    report = AuditReport(entries, rules)
    logger.info("audit pass rate %.1f%% over %d images", 100.0 * report.pass_rate, len(entries))
    return report


def format_audit(report: AuditReport) -> List[str]:
    lines = [f"Audit: {sum(e.passed for e in report.entries)}/{len(report.entries)} passed ({100.0 * report.pass_rate:.1f}%)"]
    for entry in report.entries:
        overlap = "" if entry.overlap is None else f", overlap {entry.overlap:.2f}"
        status = "pass" if entry.passed else "FAIL"
        lines.append(
            f"  #{entry.index}: {status}, class {entry.saliency.target_class}, peak {entry.peak}, "
            f"border mass {entry.border_mass:.2f}, top-region share {entry.top_mass_share:.2f}{overlap}"
        )
    return lines


# --------------------------------------------------------------------------- overlays


def overlay_array(image: np.ndarray, saliency: SaliencyMap) -> np.ndarray:
    """Grayscale source at half brightness plus half the saliency, as ``(3, H, W)``."""

    image = np.asarray(image, dtype=np.float64)
    values = saliency.values
    if image.ndim != 3 or image.shape[1:] != values.shape:
        raise ValueError(f"saliency map {values.shape} does not match image {image.shape}")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("saliency map must be normalized to [0, 1]")
    luminance = np.tensordot(LUMINANCE, image, axes=(0, 0)) if image.shape[0] == 3 else image.mean(axis=0)
    out = np.clip(0.5 * luminance + 0.5 * values, 0.0, 1.0)
    return np.repeat(out[None], 3, axis=0)


def overlay_export(image: Union[Tensor, np.ndarray], saliency: SaliencyMap, out_path: Union[str, Path]) -> Path:
    pixels = image.data if isinstance(image, Tensor) else image
    return save_png(overlay_array(pixels, saliency), out_path)


__all__ = [
    "AuditEntry",
    "AuditReport",
    "AuditRules",
    "SaliencyMap",
    "audit",
    "audit_map",
    "border_mass",
    "format_audit",
    "iou",
    "normalize",
    "occlusion_positions",
    "occlusion_saliency",
    "overlay_array",
    "overlay_export",
    "top_region",
]
