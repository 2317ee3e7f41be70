"""Synthetic datasets for desk-scale runs and harness tests."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .data import LABELS, ArrayDataset, save_png


@dataclass(frozen=True)
class PlantedPatch:
    """Square region ``[top, top+side) x [left, left+side)``."""

    top: int
    left: int
    side: int

    def mask(self, size: int) -> np.ndarray:
        mask = np.zeros((size, size), dtype=bool)
        mask[self.top : self.top + self.side, self.left : self.left + self.side] = True
        return mask


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % 2).astype(np.int64)


def planted_patch_dataset(
    n: int,
    size: int = 32,
    patch: PlantedPatch | None = None,
    seed: int = 0,
    contrast: float = 0.8,
) -> Tuple[ArrayDataset, PlantedPatch]:
    """Low-contrast noise images; malignant ones carry a bright square at a fixed place.

    The default patch is the central quarter-side square.
    """

    if n < 2:
        raise ValueError(f"need at least two images, got {n}")
    if patch is None:
        side = max(1, size // 4)
        patch = PlantedPatch((size - side) // 2, (size - side) // 2, side)
    if patch.top + patch.side > size or patch.left + patch.side > size:
        raise ValueError(f"patch {patch} does not fit a {size}x{size} image")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, rng)
    images = rng.uniform(0.0, 0.2, size=(n, 3, size, size)).astype(np.float32)
    rows = slice(patch.top, patch.top + patch.side)
    cols = slice(patch.left, patch.left + patch.side)
    images[labels == 1, :, rows, cols] += contrast
    return ArrayDataset(np.clip(images, 0.0, 1.0), labels), patch


def separable_dataset(n: int, size: int = 32, seed: int = 0) -> ArrayDataset:
    """Classes told apart by the brightness of the first colour channel."""

    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, rng)
    images = rng.uniform(0.0, 0.3, size=(n, 3, size, size)).astype(np.float32)
    images[labels == 1, 0] += 0.6
    return ArrayDataset(images, labels)


def write_image_folder(dataset: ArrayDataset, directory: Union[str, Path]) -> Path:
    """Write the images as PNG files plus a ``manifest.csv`` next to them."""

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["path,label"]
    for index in range(len(dataset)):
        name = f"img_{index:05d}.png"
        save_png(dataset.images[index], directory / name)
        lines.append(f"{name},{LABELS[int(dataset.labels[index])]}")
    manifest = directory / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


__all__ = ["PlantedPatch", "planted_patch_dataset", "separable_dataset", "write_image_folder"]
