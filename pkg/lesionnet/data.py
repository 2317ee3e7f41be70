"""Manifest ingestion, partitioning, image preprocessing and batch assembly.

Manifests are CSV files with a ``path,label`` header (an optional ``split``
column is kept).  Labels are ``benign`` (0) and ``malignant`` (1); paths are
resolved relative to the manifest's directory.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError
from .tensor import Tensor, dtype_for

logger = logging.getLogger(__name__)

BENIGN = 0
MALIGNANT = 1
LABELS: Tuple[str, str] = ("benign", "malignant")
SPLITS: Tuple[str, str, str] = ("train", "val", "test")


def label_token(label: int) -> str:
    return LABELS[label]


def parse_label(token: str) -> int:
    try:
        return LABELS.index(token.strip().lower())
    except ValueError as exc:
        raise DataError(f"unknown label '{token}'. Choose from {', '.join(LABELS)}.") from exc


# --------------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    split: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Image records with binary labels and optional split assignments."""

    records: Tuple[Record, ...]
    root: Path = Path(".")
    missing: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for record in self.records:
            if record.path in seen:
                raise DataError(f"duplicate path '{record.path}'")
            seen.add(record.path)
            if record.label not in (BENIGN, MALIGNANT):
                raise DataError(f"label of '{record.path}' must be 0 or 1, got {record.label}")
            if record.split is not None and record.split not in SPLITS:
                raise DataError(f"unknown split '{record.split}' for '{record.path}'")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self) -> Dict[str, int]:
        counts = {token: 0 for token in LABELS}
        for record in self.records:
            counts[LABELS[record.label]] += 1
        return counts

    def split(self, name: str) -> "DatasetManifest":
        if name not in SPLITS:
            raise ValueError(f"Unknown split '{name}'. Choose from {', '.join(SPLITS)}.")
        return replace(self, records=tuple(r for r in self.records if r.split == name))

    def resolve(self, record: Record) -> Path:
        path = Path(record.path)
        return path if path.is_absolute() else self.root / path


def ingest(manifest_path: Union[str, Path]) -> DatasetManifest:
    """Read and validate a manifest CSV; missing image files are logged and listed."""

    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc

    reader = csv.DictReader(text.splitlines())
    columns = reader.fieldnames or []
    if "path" not in columns or "label" not in columns:
        raise DataError(f"{manifest_path}: header must contain 'path' and 'label', got {columns}")

    records: List[Record] = []
    seen: Dict[str, int] = {}
    for row_number, row in enumerate(reader, start=2):
        path = (row.get("path") or "").strip()
        if not path:
            raise DataError(f"{manifest_path} row {row_number}: empty path")
        try:
            label = parse_label(row.get("label") or "")
        except DataError as exc:
            raise DataError(f"{manifest_path} row {row_number}: {exc}") from exc
        if path in seen:
            raise DataError(f"{manifest_path} row {row_number}: duplicate path '{path}' (first on row {seen[path]})")
        seen[path] = row_number
        split = (row.get("split") or "").strip() or None
        if split is not None and split not in SPLITS:
            raise DataError(f"{manifest_path} row {row_number}: unknown split '{split}'")
        records.append(Record(path, label, split))

    root = manifest_path.parent
    missing = tuple(r.path for r in records if not (Path(r.path) if Path(r.path).is_absolute() else root / r.path).is_file())
    if missing:
        logger.warning("%d of %d manifest images are missing, first: %s", len(missing), len(records), missing[0])
    manifest = DatasetManifest(tuple(records), root, missing)
    logger.info("ingested %d records: %s", len(manifest), manifest.class_counts())
    return manifest


@dataclass(frozen=True)
class SplitConfig:
    """Random partitioning with a class-balanced test split.

    ``val_fraction`` applies to the records left after the test split.
    """

    seed: int = 0
    val_fraction: float = 0.1
    test_per_class: int = 221

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.test_per_class < 1:
            raise ValueError(f"test_per_class must be positive, got {self.test_per_class}")


def partition(manifest: DatasetManifest, cfg: SplitConfig) -> DatasetManifest:
    """Assign every record to exactly one of train, val and test."""

    if 2 * cfg.test_per_class > len(manifest):
        raise DataError(f"{2 * cfg.test_per_class} test records requested from a manifest of {len(manifest)}")
    labels = manifest.labels
    rng = np.random.default_rng(cfg.seed)
    assignment = np.empty(len(manifest), dtype=object)

    for label in (BENIGN, MALIGNANT):
        members = np.flatnonzero(labels == label)
        if members.size < cfg.test_per_class:
            raise DataError(
                f"insufficient {LABELS[label]} records: {members.size} available, "
                f"{cfg.test_per_class} needed for the test split"
            )
        chosen = rng.permutation(members)[: cfg.test_per_class]
        assignment[chosen] = "test"

    rest = rng.permutation(np.flatnonzero(assignment != "test"))
    n_val = int(round(cfg.val_fraction * rest.size))
    assignment[rest[:n_val]] = "val"
    assignment[rest[n_val:]] = "train"

    records = tuple(replace(record, split=str(split)) for record, split in zip(manifest.records, assignment))
    result = replace(manifest, records=records)
    for line in format_split_summary(result):
        logger.info(line)
    return result


def split_summary(manifest: DatasetManifest) -> Dict[str, Dict[str, int]]:
    summary = {name: {token: 0 for token in LABELS} for name in SPLITS}
    for record in manifest.records:
        if record.split is not None:
            summary[record.split][LABELS[record.label]] += 1
    return summary


def format_split_summary(manifest: DatasetManifest) -> List[str]:
    return [
        f"{name}: {counts['benign']} benign / {counts['malignant']} malignant"
        for name, counts in split_summary(manifest).items()
    ]


def write_split_csv(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    """Relative image paths are rewritten relative to the CSV's own directory."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for record in manifest.records:
            image = record.path if Path(record.path).is_absolute() else os.path.relpath(manifest.resolve(record), path.parent)
            writer.writerow([Path(image).as_posix(), label_token(record.label), record.split or ""])
    return path


# --------------------------------------------------------------------------- images


def resize_array(image: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize of a ``(C, H, W)`` float array to ``(C, S, S)``."""

    if image.shape[1:] == (target_size, target_size):
        return image.astype(np.float32, copy=True)
    channels = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32)).resize(
                (target_size, target_size), Image.Resampling.BILINEAR
            )
        )
        for plane in image
    ]
    return np.stack(channels).astype(np.float32)


def load_and_resize(path: Union[str, Path], target_size: int = 224) -> Tensor:
    """Decode an 8-bit image to a ``(3, S, S)`` tensor scaled to [0, 1].

    Grayscale is replicated across channels and alpha is dropped.
    """

    if target_size < 1:
        raise ValueError(f"target_size must be positive, got {target_size}")
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    array = np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return Tensor(np.clip(resize_array(array, target_size), 0.0, 1.0))


def save_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a ``(3, H, W)`` array in [0, 1] as an 8-bit PNG."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(pixels).save(path, format="PNG")
    return path


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Random rotation, shift and flips; shifts are a fraction of the image side."""

    max_rotation_deg: float = 30.0
    max_shift_frac: float = 0.10
    hflip: bool = True
    vflip: bool = True
    target_size: int = 224

    def __post_init__(self) -> None:
        if not 0.0 <= self.max_rotation_deg <= 180.0:
            raise ValueError(f"max_rotation_deg must lie in [0, 180], got {self.max_rotation_deg}")
        if not 0.0 <= self.max_shift_frac < 1.0:
            raise ValueError(f"max_shift_frac must lie in [0, 1), got {self.max_shift_frac}")
        if self.target_size < 1:
            raise ValueError(f"target_size must be positive, got {self.target_size}")


@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    shift_y: float = 0.0
    shift_x: float = 0.0
    hflip: bool = False
    vflip: bool = False

    @property
    def is_identity(self) -> bool:
        return self.angle_deg == 0.0 and self.shift_y == 0.0 and self.shift_x == 0.0 and not (self.hflip or self.vflip)


def sample_augment_params(cfg: AugmentConfig, rng: np.random.Generator, size: int) -> AugmentParams:
    max_shift = cfg.max_shift_frac * size
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    shift_y, shift_x = rng.uniform(-max_shift, max_shift, size=2)
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    return AugmentParams(float(angle), float(shift_y), float(shift_x), cfg.hflip and hflip, cfg.vflip and vflip)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def vflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1, :])


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotate about the centre, shift, then flip; vacated pixels replicate the nearest edge."""

    if params.is_identity:
        return image.copy()
    out = image
    if params.angle_deg or params.shift_y or params.shift_x:
        _, h, w = image.shape
        theta = np.deg2rad(params.angle_deg)
        # output -> input coordinates: inverse rotation about the centre
        matrix = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]])
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = centre - matrix @ (centre + np.array([params.shift_y, params.shift_x]))
        out = np.stack(
            [ndimage.affine_transform(plane, matrix, offset=offset, order=1, mode="nearest") for plane in image]
        )
    if params.hflip:
        out = hflip(out)
    if params.vflip:
        out = vflip(out)
    return out.astype(image.dtype, copy=False)


def augment(image: Tensor, cfg: AugmentConfig, seed: int) -> Tensor:
    """Label-invariant random augmentation of a ``(3, S, S)`` image."""

    if image.ndim != 3:
        raise ValueError(f"augment expects a (channels, height, width) image, got {image.shape}")
    params = sample_augment_params(cfg, np.random.default_rng(seed), image.shape[1])
    return Tensor(apply_augment(image.data, params))


# --------------------------------------------------------------------------- datasets and batches


class Dataset(Protocol):
    labels: np.ndarray

    def __len__(self) -> int: ...

    def load(self, index: int, seed: int) -> np.ndarray: ...


@dataclass
class ArrayDataset:
    """In-memory images ``(N, 3, S, S)`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    augment: Optional[AugmentConfig] = None

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} do not line up")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def load(self, index: int, seed: int) -> np.ndarray:
        image = self.images[index]
        if self.augment is None:
            return image.copy()
        params = sample_augment_params(self.augment, np.random.default_rng(seed), image.shape[1])
        return apply_augment(image, params)

    def subset(self, indices: Sequence[int]) -> "ArrayDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.images[indices], self.labels[indices], self.augment)


@dataclass
class ManifestDataset:
    """Images listed in a manifest, decoded and resized on demand."""

    manifest: DatasetManifest
    target_size: int = 224
    augment: Optional[AugmentConfig] = None
    labels: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.labels = self.manifest.labels

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (3, self.target_size, self.target_size)

    def load(self, index: int, seed: int) -> np.ndarray:
        record = self.manifest.records[index]
        image = load_and_resize(self.manifest.resolve(record), self.target_size).data
        if self.augment is None:
            return image
        params = sample_augment_params(self.augment, np.random.default_rng(seed), self.target_size)
        return apply_augment(image, params)


@dataclass(frozen=True)
class Batch:
    images: Tensor
    labels: Tuple[int, ...]
    indices: Tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.labels:
            raise DataError("a batch needs at least one sample")

    def __len__(self) -> int:
        return len(self.labels)


def sample_seed(seed: int, epoch: int, batch: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch, slot]).generate_state(1)[0])


def _chunks(order: np.ndarray, size: int) -> List[np.ndarray]:
    return [order[start : start + size] for start in range(0, order.size, size)]


def batch_plan(labels: np.ndarray, batch_size: int, rebalance: bool, seed: int, epoch: int = 0) -> List[np.ndarray]:
    """Dataset indices of every batch of one epoch.

    With ``rebalance`` the majority class is shuffled without replacement
    (topped up from a second shuffle for the last batch) and the minority is
    oversampled with replacement, giving ceil(B/2) majority and floor(B/2)
    minority samples per batch.
    """

    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    if not rebalance:
        return _chunks(rng.permutation(labels.size), batch_size)
    if batch_size < 2:
        raise ValueError("batch rebalancing needs batch_size >= 2")

    benign = np.flatnonzero(labels == BENIGN)
    malignant = np.flatnonzero(labels == MALIGNANT)
    if benign.size == 0 or malignant.size == 0:
        raise DataError("batch rebalancing needs both classes in the split")
    majority, minority = (benign, malignant) if benign.size >= malignant.size else (malignant, benign)

    per_major = math.ceil(batch_size / 2)
    per_minor = batch_size // 2
    n_batches = math.ceil(majority.size / per_major)
    order = rng.permutation(majority)
    shortfall = n_batches * per_major - order.size
    if shortfall:
        order = np.concatenate([order, rng.permutation(majority)[:shortfall]])

    plan = []
    for major in _chunks(order, per_major):
        minor = rng.choice(minority, size=per_minor, replace=True)
        plan.append(rng.permutation(np.concatenate([major, minor])))
    logger.debug("epoch %d: %d rebalanced batches", epoch, n_batches)
    return plan


def make_batches(
    dataset: Dataset,
    batch_size: int,
    rebalance: bool,
    seed: int,
    epoch: int = 0,
    workers: int = 1,
    precision: str = "float32",
) -> Iterator[Batch]:
    """Stream the batches of one epoch.

    Each sample draws its augmentation from ``SeedSequence(seed, epoch,
    batch, slot)``, so the stream does not depend on ``workers``.
    """

    dtype = dtype_for(precision)
    plan = batch_plan(dataset.labels, batch_size, rebalance, seed, epoch)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for batch_index, indices in enumerate(plan):
            seeds = [sample_seed(seed, epoch, batch_index, slot) for slot in range(indices.size)]
            if pool is None:
                images = [dataset.load(int(i), s) for i, s in zip(indices, seeds)]
            else:
                images = list(pool.map(dataset.load, [int(i) for i in indices], seeds))
            yield Batch(
                Tensor(np.stack(images).astype(dtype, copy=False)),
                tuple(int(dataset.labels[i]) for i in indices),
                tuple(int(i) for i in indices),
            )
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


def iterate_in_order(dataset: Dataset, batch_size: int, precision: str = "float32") -> Iterator[Batch]:
    """Unshuffled, unaugmented batches for evaluation."""

    dtype = dtype_for(precision)
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty split")
    for start in range(0, len(dataset), batch_size):
        indices = range(start, min(start + batch_size, len(dataset)))
        images = np.stack([dataset.load(i, 0) for i in indices]).astype(dtype, copy=False)
        yield Batch(Tensor(images), tuple(int(dataset.labels[i]) for i in indices), tuple(indices))


__all__ = [
    "BENIGN",
    "LABELS",
    "MALIGNANT",
    "SPLITS",
    "ArrayDataset",
    "AugmentConfig",
    "AugmentParams",
    "Batch",
    "DatasetManifest",
    "ManifestDataset",
    "Record",
    "SplitConfig",
    "apply_augment",
    "augment",
    "batch_plan",
    "format_split_summary",
    "hflip",
    "ingest",
    "iterate_in_order",
    "label_token",
    "load_and_resize",
    "make_batches",
    "parse_label",
    "partition",
    "resize_array",
    "sample_augment_params",
    "sample_seed",
    "save_png",
    "split_summary",
    "vflip",
    "write_split_csv",
]
