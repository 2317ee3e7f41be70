"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tape, Tensor, backward

Builder = Callable[[Optional[Tape], Sequence[Tensor]], Tensor]

MIN_COORDS = 64
REL_ERROR_FLOOR = 1e-8


@dataclass(frozen=True)
class GradCheckReport:
    """Largest relative error between analytic and numeric gradients."""

    op_name: str
    max_rel_error: float
    per_input_errors: List[float] = field(default_factory=list)
    epsilon: float = 1e-5
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERROR_FLOOR)
    return np.abs(analytic - numeric) / denom


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(f"gradient check objective must be scalar, got shape {value.shape}")
    return value.item()


def grad_check(
    builder: Builder,
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    *,
    op_name: str = "objective",
    max_coords: int = MIN_COORDS,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central differences for every input.

    ``builder(tape, inputs)`` must return a scalar tensor and must also work
    with ``tape=None``.  At most ``max_coords`` coordinates per input are
    probed, chosen with a seeded generator.
    """

    if max_coords < MIN_COORDS:
        raise ValueError(f"max_coords must be at least {MIN_COORDS}")
    for position, tensor in enumerate(inputs):
        if tensor.precision != "float64":
            raise ValueError(f"input {position} is {tensor.precision}; gradient checks need float64")

    tape = Tape()
    watched = [tape.watch(tensor) for tensor in inputs]
    objective = builder(tape, watched)
    _scalar(objective)
    gradients = backward(objective, tape)

    rng = np.random.default_rng(seed)
    per_input: List[float] = []
    for position, tensor in enumerate(inputs):
        analytic = gradients[watched[position]].data.reshape(-1)
        if tensor.size <= max_coords:
            coords = np.arange(tensor.size)
        else:
            coords = np.sort(rng.choice(tensor.size, size=max_coords, replace=False))

        base = tensor.data.reshape(-1)
        numeric = np.empty(coords.shape[0])
        for slot, coord in enumerate(coords):
            values = []
            for step in (epsilon, -epsilon):
                probe = base.copy()
                probe[coord] += step
                shifted = list(inputs)
                shifted[position] = Tensor(probe.reshape(tensor.shape))
                values.append(_scalar(builder(None, shifted)))
            numeric[slot] = (values[0] - values[1]) / (2 * epsilon)
        errors = relative_error(analytic[coords], numeric)
        per_input.append(float(errors.max()) if errors.size else 0.0)

    return GradCheckReport(
        op_name=op_name,
        max_rel_error=max(per_input) if per_input else 0.0,
        per_input_errors=per_input,
        epsilon=epsilon,
        tolerance=tolerance,
    )


__all__ = ["GradCheckReport", "grad_check", "relative_error"]
