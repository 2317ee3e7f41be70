"""Adam training loop, evaluation protocol and checkpoint files."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .archspec import build_network, parse_archspec
from .data import Dataset, iterate_in_order, make_batches
from .errors import CheckpointError, DataError, DivergenceError, ShapeError
from .layers import Network
from .metrics import ConfusionMatrix, confusion_from_predictions
from .ops import RunningStats, softmax_cross_entropy
from .tensor import Tape, Tensor, backward, dtype_for

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LNCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings.

    ``beta1`` plays the role of momentum.  ``max_steps`` caps the total
    number of optimizer steps across epochs.
    """

    learning_rate: float = 1e-4
    epochs: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    rebalance: bool = True
    max_steps: Optional[int] = None
    workers: int = 1
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if self.adam_epsilon <= 0:
            raise ValueError(f"adam_epsilon must be positive, got {self.adam_epsilon}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError(f"max_steps must be non-negative, got {self.max_steps}")
        if self.workers < 1:
            raise ValueError(f"workers must be positive, got {self.workers}")
        dtype_for(self.precision)


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """First and second moments per parameter name and the step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    last_updated: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            {name: np.zeros_like(p.data) for name, p in params.items()},
            {name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    cfg: TrainConfig,
) -> Tuple[Dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""

    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    changed = 0
    for name, param in params.items():
        grad = grads[name].data if name in grads else np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient of '{name}' has shape {grad.shape}, parameter has {param.shape}")
        if name not in state.m or state.m[name].shape != param.shape:
            raise ShapeError(f"optimizer state has no moments shaped like '{name}' {param.shape}")
        dtype = param.data.dtype
        m = (b1 * state.m[name] + (1.0 - b1) * grad).astype(dtype)
        v = (b2 * state.v[name] + (1.0 - b2) * grad * grad).astype(dtype)
        update = cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_epsilon)
        updated = (param.data - update).astype(dtype)
        changed += int(np.count_nonzero(updated != param.data))
        new_params[name] = Tensor(updated)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t, changed)


# --------------------------------------------------------------------------- checkpoints


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: Optional[float]

    def to_dict(self) -> Dict[str, object]:
        return {"epoch": self.epoch, "loss": self.loss, "val_accuracy": self.val_accuracy}


@dataclass
class Checkpoint:
    """Architecture text, parameters, statistics, optimizer state and history."""

    spec_text: str
    params: Dict[str, Tensor]
    stats: Dict[str, RunningStats]
    epoch: int = 0
    history: List[EpochRecord] = field(default_factory=list)
    adam: Optional[AdamState] = None
    precision: str = "float32"

    @classmethod
    def capture(
        cls,
        network: Network,
        spec_text: str,
        epoch: int,
        history: List[EpochRecord],
        adam: Optional[AdamState] = None,
    ) -> "Checkpoint":
        return cls(
            spec_text,
            {name: t.detach() for name, t in network.params.items()},
            {name: RunningStats(s.mean.copy(), s.var.copy()) for name, s in network.stats.items()},
            epoch,
            list(history),
            adam,
            network.precision,
        )

    def apply(self, network: Network) -> None:
        network.load_parameters(self.params)
        network.stats = {name: RunningStats(s.mean.copy(), s.var.copy()) for name, s in self.stats.items()}

    def build(self, seed: int = 0) -> Network:
        """A fresh network from the stored architecture with these weights."""

        network = build_network(parse_archspec(self.spec_text), seed, self.precision)
        self.apply(network)
        return network

    def _directory(self) -> List[Tuple[str, str, np.ndarray]]:
        entries = [("param", name, t.data) for name, t in self.params.items()]
        for name, stats in self.stats.items():
            entries.append(("mean", name, stats.mean))
            entries.append(("var", name, stats.var))
        if self.adam is not None:
            entries += [("adam_m", name, m) for name, m in self.adam.m.items()]
            entries += [("adam_v", name, v) for name, v in self.adam.v.items()]
        return entries

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        entries = self._directory()
        header = {
            "spec": self.spec_text,
            "epoch": self.epoch,
            "precision": self.precision,
            "history": [record.to_dict() for record in self.history],
            "adam_t": None if self.adam is None else self.adam.t,
            "tensors": [{"kind": kind, "name": name, "shape": list(array.shape)} for kind, name, array in entries],
        }
        encoded = json.dumps(header, sort_keys=True).encode("utf-8")
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            handle.write(CHECKPOINT_MAGIC)
            handle.write(struct.pack("<II", CHECKPOINT_VERSION, len(encoded)))
            handle.write(encoded)
            for _, _, array in entries:
                handle.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
        logger.info("wrote checkpoint %s (epoch %d, %d tensors)", path, self.epoch, len(entries))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        if len(blob) < 12:
            raise CheckpointError(f"{path} is truncated")
        version, header_length = struct.unpack("<II", blob[4:12])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(blob[12 : 12 + header_length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc

        dtype = dtype_for(header.get("precision", "float32"))
        offset = 12 + header_length
        params: Dict[str, Tensor] = {}
        means: Dict[str, np.ndarray] = {}
        variances: Dict[str, np.ndarray] = {}
        moments: Dict[str, Dict[str, np.ndarray]] = {"adam_m": {}, "adam_v": {}}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(blob):
                raise CheckpointError(f"{path} is truncated at tensor '{entry['name']}'")
            array = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(dtype)
            offset = end
            kind, name = entry["kind"], entry["name"]
            if kind == "param":
                params[name] = Tensor(array)
            elif kind == "mean":
                means[name] = array
            elif kind == "var":
                variances[name] = array
            elif kind in moments:
                moments[kind][name] = array
            else:
                raise CheckpointError(f"{path}: unknown tensor kind '{kind}'")
        if offset != len(blob):
            raise CheckpointError(f"{path} has {len(blob) - offset} trailing bytes")

        adam = None
        if header.get("adam_t") is not None:
            adam = AdamState(moments["adam_m"], moments["adam_v"], int(header["adam_t"]))
        return cls(
            spec_text=header["spec"],
            params=params,
            stats={name: RunningStats(means[name], variances[name]) for name in means},
            epoch=int(header["epoch"]),
            history=[EpochRecord(int(r["epoch"]), float(r["loss"]), r["val_accuracy"]) for r in header["history"]],
            adam=adam,
            precision=header.get("precision", "float32"),
        )


def write_history_csv(history: List[EpochRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_accuracy"])
        for record in history:
            accuracy = "" if record.val_accuracy is None else f"{record.val_accuracy:.6f}"
            writer.writerow([record.epoch, f"{record.loss:.6f}", accuracy])
    return path


# --------------------------------------------------------------------------- evaluation


def predict(network: Network, dataset: Dataset, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Labels and argmax predictions in dataset order; equal logits go to benign."""

    if network.num_classes != 2:
        raise ShapeError(f"evaluation needs a two-class head, network has {network.num_classes}")
    labels: List[int] = []
    predictions: List[np.ndarray] = []
    for batch in iterate_in_order(dataset, batch_size, network.precision):
        logits = network.forward(batch.images).data
        predictions.append(np.argmax(logits, axis=1))
        labels.extend(batch.labels)
    return np.asarray(labels, dtype=np.int64), np.concatenate(predictions).astype(np.int64)


def evaluate(network: Network, dataset: Dataset, batch_size: int = 64) -> ConfusionMatrix:
    if len(dataset) == 0:
        raise DataError("the test split is empty")
    labels, predictions = predict(network, dataset, batch_size)
    return confusion_from_predictions(labels, predictions)


def accuracy(network: Network, dataset: Dataset, batch_size: int = 64) -> float:
    labels, predictions = predict(network, dataset, batch_size)
    return float(np.mean(labels == predictions))


# --------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    best: Checkpoint
    history: List[EpochRecord]
    step_losses: List[float]

    @property
    def steps(self) -> int:
        return len(self.step_losses)


def train_step(network: Network, batch, state: AdamState, cfg: TrainConfig) -> Tuple[float, AdamState]:
    tape = Tape()
    logits = network.forward(batch.images, tape, training=True)
    loss, _ = softmax_cross_entropy(logits, batch.labels, tape)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {state.t + 1}")
    grads = backward(loss, tape).by_name()
    network.params, state = adam_step(network.params, grads, state, cfg)
    return value, state


def train(
    network: Network,
    train_data: Dataset,
    val_data: Optional[Dataset],
    cfg: TrainConfig,
    spec_text: str = "",
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of rebalanced Adam training.

    The checkpoint with the best validation accuracy is kept (earlier epoch
    on ties, last epoch without validation data) and its weights are
    restored into ``network`` at the end.
    """

    state = AdamState.fresh(network.params)
    history: List[EpochRecord] = []
    step_losses: List[float] = []
    best = Checkpoint.capture(network, spec_text, 0, history, state)
    best_accuracy: Optional[float] = None

    for epoch in range(1, cfg.epochs + 1):
        if cfg.max_steps is not None and len(step_losses) >= cfg.max_steps:
            break
        epoch_losses = []
        batches = make_batches(train_data, cfg.batch_size, cfg.rebalance, cfg.seed, epoch, cfg.workers, cfg.precision)
        for batch in batches:
            if cfg.max_steps is not None and len(step_losses) >= cfg.max_steps:
                break
            loss, state = train_step(network, batch, state, cfg)
            epoch_losses.append(loss)
            step_losses.append(loss)

        val_accuracy = accuracy(network, val_data) if val_data is not None and len(val_data) else None
        record = EpochRecord(epoch, float(np.mean(epoch_losses)) if epoch_losses else float("nan"), val_accuracy)
        history.append(record)
        logger.info(
            "epoch %d: loss %.4f, val accuracy %s",
            epoch,
            record.loss,
            "n/a" if val_accuracy is None else f"{val_accuracy:.3f}",
        )
        improved = val_accuracy is not None and (best_accuracy is None or val_accuracy > best_accuracy)
        if improved or val_accuracy is None:
            best_accuracy = val_accuracy if improved else best_accuracy
            best = Checkpoint.capture(network, spec_text, epoch, history, state)

    best.history = list(history)
    best.apply(network)
    return TrainResult(best, history, step_losses)


__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "AdamState",
    "Checkpoint",
    "EpochRecord",
    "TrainConfig",
    "TrainResult",
    "accuracy",
    "adam_step",
    "evaluate",
    "predict",
    "train",
    "train_step",
    "write_history_csv",
]
