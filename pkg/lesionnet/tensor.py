"""Dense tensors and the explicit reverse-mode tape.

A :class:`Tensor` is a value: primitive operations never modify their
operands, they return new tensors.  Gradients are tracked by a
:class:`Tape` that the caller creates for one forward pass and hands to every
operation that should be differentiated.  There is no global recording state,
so independent passes can run side by side (one tape per thread).
"""
from __future__ import annotations

import itertools
import threading
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError

PRECISIONS: Dict[str, type] = {"float32": np.float32, "float64": np.float64}

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_tape_keys = itertools.count()


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError as exc:
        raise ValueError(
            f"Unsupported precision '{precision}'. Choose from {', '.join(PRECISIONS)}."
        ) from exc


@dataclass(frozen=True)
class GradHandle:
    """Position of a tensor on a specific tape."""

    tape_key: int
    index: int


@dataclass(frozen=True, eq=False)
class Tensor:
    """Dense N-dimensional array with an optional link into a tape."""

    data: np.ndarray
    grad_id: Optional[GradHandle] = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            raise ValueError(f"Tensor precision must be float32 or float64, got {data.dtype}")
        if any(dim < 1 for dim in data.shape):
            raise ShapeError(f"Tensor dimensions must be >= 1, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, values, precision: str = "float32") -> "Tensor":
        return cls(np.array(values, dtype=dtype_for(precision)))

    @classmethod
    def zeros(cls, shape: Sequence[int], precision: str = "float32") -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype_for(precision)))

    @classmethod
    def ones(cls, shape: Sequence[int], precision: str = "float32") -> "Tensor":
        return cls(np.ones(tuple(shape), dtype=dtype_for(precision)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def precision(self) -> str:
        return "float64" if self.data.dtype == np.float64 else "float32"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data.astype(dtype_for(precision)))

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tracked = "" if self.grad_id is None else f", tape={self.grad_id.tape_key}:{self.grad_id.index}"
        return f"Tensor(shape={self.shape}, precision={self.precision}{tracked})"


@dataclass(frozen=True)
class Node:
    """One recorded operation.  ``inputs`` holds tape indices or ``None`` for constants."""

    op: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: Tuple[int, ...]
    dtype: np.dtype
    name: Optional[str] = None


class Tape:
    """Append-only record of the operations of one forward pass.

    A tape belongs to the thread that created it.
    """

    def __init__(self) -> None:
        self.key = next(_tape_keys)
        self.nodes: List[Node] = []
        self._named: Dict[str, Tensor] = {}
        self._owner = threading.get_ident()

    def __len__(self) -> int:
        return len(self.nodes)

    def _check_thread(self) -> None:
        if threading.get_ident() != self._owner:
            raise RuntimeError("A tape may only be used by the thread that created it")

    def index_of(self, tensor: Tensor) -> Optional[int]:
        handle = tensor.grad_id
        if handle is None or handle.tape_key != self.key:
            return None
        return handle.index

    def watch(self, tensor: Tensor, name: Optional[str] = None) -> Tensor:
        """Register ``tensor`` as a differentiable leaf and return the tracked copy.

        Watching the same data again under a name returns the existing leaf;
        different data under a taken name raises ``ValueError``.
        """

        if name is not None and name in self._named:
            cached = self._named[name]
            same = cached.data is tensor.data or (
                cached.shape == tensor.shape and np.array_equal(cached.data, tensor.data)
            )
            if not same:
                raise ValueError(f"name '{name}' is already watched on this tape with different data")
            return cached
        self._check_thread()
        index = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, tensor.shape, tensor.data.dtype, name))
        tracked = Tensor(tensor.data, GradHandle(self.key, index))
        if name is not None:
            self._named[name] = tracked
        return tracked

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        data: np.ndarray,
        backward: BackwardFn,
    ) -> Tensor:
        """Append an operation; untracked inputs receive no gradient."""

        indices = tuple(self.index_of(t) for t in inputs)
        if all(i is None for i in indices):
            return Tensor(data)
        self._check_thread()
        index = len(self.nodes)
        result = Tensor(data)
        self.nodes.append(Node(op, indices, backward, result.shape, result.data.dtype))
        return Tensor(result.data, GradHandle(self.key, index))

    def named(self) -> Dict[str, Tensor]:
        return dict(self._named)


def emit(
    tape: Optional[Tape],
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    backward: BackwardFn,
) -> Tensor:
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, backward)


class Gradients(Mapping):
    """Gradient of the loss for every watched leaf of a tape."""

    def __init__(self, values: Dict[GradHandle, Tensor], names: Dict[str, GradHandle]) -> None:
        self._values = values
        self._names = names

    def _key(self, key) -> GradHandle:
        if isinstance(key, Tensor):
            if key.grad_id is None:
                raise KeyError("tensor is not on the tape")
            return key.grad_id
        return key

    def __getitem__(self, key) -> Tensor:
        handle = self._key(key)
        try:
            return self._values[handle]
        except KeyError as exc:
            raise KeyError("tensor is not a watched leaf of this tape") from exc

    def __iter__(self) -> Iterator[GradHandle]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def by_name(self) -> Dict[str, Tensor]:
        return {name: self._values[handle] for name, handle in self._names.items()}


def backward(loss: Tensor, tape: Tape) -> Gradients:
    """Reverse-mode accumulation from a scalar ``loss`` recorded on ``tape``.

    Nodes are visited once each, in reverse append order.  Leaves the loss
    does not depend on receive exactly zero gradients.
    """

    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    start = tape.index_of(loss)
    if start is None:
        raise ValueError("loss is not recorded on this tape")

    nodes = tape.nodes
    grads: List[Optional[np.ndarray]] = [None] * len(nodes)
    grads[start] = np.ones(loss.shape, dtype=loss.data.dtype)

    for index in range(start, -1, -1):
        node = nodes[index]
        upstream = grads[index]
        if upstream is None or node.backward is None:
            continue
        for target, grad in zip(node.inputs, node.backward(upstream)):
            if target is None or grad is None:
                continue
            current = grads[target]
            grads[target] = grad if current is None else current + grad

    values: Dict[GradHandle, Tensor] = {}
    names: Dict[str, GradHandle] = {}
    for index, node in enumerate(nodes):
        if node.op != "leaf":
            continue
        handle = GradHandle(tape.key, index)
        grad = grads[index]
        if grad is None:
            grad = np.zeros(node.shape, dtype=node.dtype)
        values[handle] = Tensor(np.asarray(grad, dtype=node.dtype).reshape(node.shape))
        if node.name is not None:
            names[node.name] = handle
    return Gradients(values, names)


__all__ = [
    "PRECISIONS",
    "GradHandle",
    "Gradients",
    "Node",
    "Tape",
    "Tensor",
    "backward",
    "dtype_for",
    "emit",
]
