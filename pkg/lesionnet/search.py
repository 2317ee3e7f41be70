"""Constrained evolutionary exploration of stage-based architectures.

A design is a stem convolution, a sequence of stage genes and a two-class
head.  Candidates are trained briefly under a fixed proxy protocol, scored
by a log-ratio performance function and archived only when their proxy
accuracy beats the baseline network's.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .archspec import AnalyzerReport, ArchSpec, LayerSpec, analyze, build_network, format_archspec, infer_shapes
from .data import Dataset
from .errors import SearchSpaceError, ShapeError
from .training import TrainConfig, accuracy, train

logger = logging.getLogger(__name__)

STAGE_KINDS = ("residual", "pepe", "vac")


@dataclass(frozen=True)
class StageGene:
    kind: str
    channels: int
    stride: int = 1

    def describe(self) -> str:
        return f"{self.kind}:{self.channels}/s{self.stride}"


Genome = Tuple[StageGene, ...]


@dataclass(frozen=True)
class SearchSpace:
    """Which genomes are allowed and how they turn into architectures."""

    input_shape: Tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 2
    min_stages: int = 1
    max_stages: int = 4
    kinds: Tuple[str, ...] = STAGE_KINDS
    channel_choices: Tuple[int, ...] = (8, 16, 32, 64)
    strides: Tuple[int, ...] = (1, 2)
    stem_channels: int = 16
    stem_stride: int = 2
    max_downsamples: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "channel_choices", tuple(sorted(self.channel_choices)))
        object.__setattr__(self, "strides", tuple(self.strides))
        unknown = set(self.kinds) - set(STAGE_KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"stage kinds must be a non-empty subset of {', '.join(STAGE_KINDS)}, got {self.kinds}")
        if not 1 <= self.min_stages <= self.max_stages:
            raise ValueError(f"need 1 <= min_stages <= max_stages, got {self.min_stages} and {self.max_stages}")
        if not self.channel_choices or min(self.channel_choices) < 2:
            raise ValueError("channel choices must be integers >= 2")
        if not self.strides or any(s not in (1, 2) for s in self.strides):
            raise ValueError(f"strides must be drawn from (1, 2), got {self.strides}")

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "SearchSpace":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(values) - known
        if extra:
            raise ValueError(f"unknown search space fields: {', '.join(sorted(extra))}")
        converted = {key: tuple(value) if isinstance(value, list) else value for key, value in values.items()}
        return cls(**converted)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SearchSpace":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("the search space file must contain an object")
        return cls.from_dict(data)

    def contains(self, genome: Genome) -> bool:
        if not self.min_stages <= len(genome) <= self.max_stages:
            return False
        for gene in genome:
            if gene.kind not in self.kinds or gene.channels not in self.channel_choices or gene.stride not in self.strides:
                return False
        return sum(gene.stride == 2 for gene in genome) <= self.max_downsamples


def _stage_layers(index: int, gene: StageGene, in_ch: int) -> List[LayerSpec]:
    name = f"s{index}"
    c = gene.channels
    if gene.kind == "residual":
        return [LayerSpec("residual", f"{name}_res", {"mid": max(1, c // 4), "out": c, "s": gene.stride, "stride_at": "3x3"})]
    if gene.kind == "pepe":
        exp1 = 2 * max(in_ch, c)
        return [
            LayerSpec(
                "pepe",
                f"{name}_pepe",
                {"proj1": max(1, in_ch // 2), "exp1": exp1, "proj2": max(1, exp1 // 4), "out": c, "k": 3, "s": gene.stride},
            )
        ]
    squeeze = max(1, c // 4)
    return [
        LayerSpec("conv", f"{name}_conv", {"out": c, "k": 3, "s": gene.stride, "g": 1, "bn": 1, "act": "relu"}),
        LayerSpec("vac", f"{name}_vac", {"down": squeeze, "embed": squeeze, "up": c, "pool": 2}),
    ]


def genome_to_spec(genome: Genome, space: SearchSpace, name: str = "candidate") -> ArchSpec:
    layers = [
        LayerSpec(
            "conv",
            "stem",
            {"out": space.stem_channels, "k": 3, "s": space.stem_stride, "g": 1, "bn": 1, "act": "relu"},
        )
    ]
    channels = space.stem_channels
    for index, gene in enumerate(genome, start=1):
        layers.extend(_stage_layers(index, gene, channels))
        channels = gene.channels
    layers.append(LayerSpec("head", "head", {"classes": space.num_classes}))
    spec = ArchSpec(name, space.input_shape, layers, space.num_classes)
    infer_shapes(spec)
    return spec


def prototype_genome(space: SearchSpace = SearchSpace()) -> Genome:
    """Two residual stages, the second one downsampling, clamped into ``space``."""

    def nearest(value: int) -> int:
        return min(space.channel_choices, key=lambda choice: (abs(choice - value), choice))

    if "residual" not in space.kinds:
        raise SearchSpaceError("the prototype needs residual stages in the search space")
    flat = 1 if 1 in space.strides else 2
    down = 2 if 2 in space.strides and space.max_downsamples > 0 else flat
    genome = [StageGene("residual", nearest(16), flat), StageGene("residual", nearest(32), down)]
    while len(genome) < space.min_stages:
        genome.append(StageGene("residual", nearest(32), flat))
    genome = genome[: space.max_stages]
    if not space.contains(tuple(genome)):
        raise SearchSpaceError("the residual prototype does not fit the search space")
    return tuple(genome)


def seed_prototype(space: SearchSpace = SearchSpace()) -> ArchSpec:
    return genome_to_spec(prototype_genome(space), space, "prototype")


# --------------------------------------------------------------------------- scoring


@dataclass(frozen=True)
class ScoreCoefficients:
    kappa: float = 2.0
    beta: float = 0.5
    gamma: float = 0.5


def performance_score(
    accuracy: float,
    params: int,
    flops: int,
    coeffs: ScoreCoefficients = ScoreCoefficients(),
) -> float:
    """``20 log10((100 a)^kappa / ((params/1e6)^beta (flops/1e9)^gamma))``."""

    if not 0.0 < accuracy <= 1.0:
        raise ValueError(f"accuracy must lie in (0, 1], got {accuracy}")
    if params <= 0 or flops <= 0:
        raise ValueError(f"params and flops must be positive, got {params} and {flops}")
    return 20.0 * (
        coeffs.kappa * math.log10(100.0 * accuracy)
        - coeffs.beta * math.log10(params / 1e6)
        - coeffs.gamma * math.log10(flops / 1e9)
    )


# --------------------------------------------------------------------------- mutation


def _one_edit(genome: Genome, space: SearchSpace, rng: np.random.Generator) -> Tuple[Genome, str]:
    edits = ["kind", "channels", "stride", "insert", "delete"]
    edit = edits[int(rng.integers(len(edits)))]
    stages = list(genome)
    position = int(rng.integers(len(stages)))
    gene = stages[position]
    if edit == "kind":
        kind = space.kinds[int(rng.integers(len(space.kinds)))]
        stages[position] = replace(gene, kind=kind)
        return tuple(stages), f"stage {position + 1} kind {gene.kind}->{kind}"
    if edit == "channels":
        channels = space.channel_choices[int(rng.integers(len(space.channel_choices)))]
        stages[position] = replace(gene, channels=channels)
        return tuple(stages), f"stage {position + 1} channels {gene.channels}->{channels}"
    if edit == "stride":
        stride = space.strides[int(rng.integers(len(space.strides)))]
        stages[position] = replace(gene, stride=stride)
        return tuple(stages), f"stage {position + 1} stride {gene.stride}->{stride}"
    if edit == "insert":
        new = StageGene(
            space.kinds[int(rng.integers(len(space.kinds)))],
            space.channel_choices[int(rng.integers(len(space.channel_choices)))],
            space.strides[int(rng.integers(len(space.strides)))],
        )
        at = int(rng.integers(len(stages) + 1))
        stages.insert(at, new)
        return tuple(stages), f"insert {new.describe()} at stage {at + 1}"
    del stages[position]
    return tuple(stages), f"delete stage {position + 1} ({gene.describe()})"


def mutate_genome(
    genome: Genome,
    space: SearchSpace,
    rng: np.random.Generator,
    max_retries: int = 100,
) -> Tuple[Genome, str]:
    """One random edit that yields a different, valid genome."""

    for _ in range(max_retries):
        child, description = _one_edit(genome, space, rng)
        if child == genome or not space.contains(child):
            continue
        try:
            genome_to_spec(child, space)
        except ShapeError:
            continue
        return child, description
    raise SearchSpaceError(f"no valid single edit found in {max_retries} attempts")


# --------------------------------------------------------------------------- candidates


@dataclass(frozen=True, eq=False)
class ProxyProtocol:
    """Short fixed-step training used for the baseline and every candidate."""

    train_data: Dataset
    val_data: Dataset
    train_steps: int = 60
    batch_size: int = 16
    learning_rate: float = 0.005
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.train_steps < 0:
            raise ValueError(f"train_steps must be non-negative, got {self.train_steps}")
        if len(self.val_data) == 0:
            raise ValueError("the proxy protocol needs validation images")


@dataclass(frozen=True)
class Constraint:
    baseline_val_accuracy: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.baseline_val_accuracy <= 1.0:
            raise ValueError(f"baseline accuracy must lie in [0, 1], got {self.baseline_val_accuracy}")

    def satisfied(self, val_accuracy: float) -> bool:
        return val_accuracy > self.baseline_val_accuracy


def proxy_accuracy(spec: ArchSpec, proxy: ProxyProtocol, seed: int) -> float:
    network = build_network(spec, seed, proxy.precision)
    steps_per_epoch = max(1, math.ceil(len(proxy.train_data) / proxy.batch_size))
    cfg = TrainConfig(
        learning_rate=proxy.learning_rate,
        epochs=max(1, math.ceil(proxy.train_steps / steps_per_epoch)) if proxy.train_steps else 0,
        batch_size=proxy.batch_size,
        seed=seed,
        max_steps=proxy.train_steps,
        precision=proxy.precision,
    )
    train(network, proxy.train_data, None, cfg)
    return accuracy(network, proxy.val_data)


def measure_baseline(spec: ArchSpec, proxy: ProxyProtocol, seed: int) -> Constraint:
    value = proxy_accuracy(spec, proxy, seed)
    logger.info("baseline %s reaches proxy accuracy %.3f", spec.name, value)
    return Constraint(value)


@dataclass(frozen=True)
class Candidate:
    id: str
    genome: Genome
    spec: ArchSpec
    report: AnalyzerReport
    val_accuracy: float
    score: Optional[float]
    parent_id: Optional[str] = None
    mutation: str = "prototype"
    generation: int = 0

    def to_dict(self) -> Dict[str, object]:
        return {
            "id": self.id,
            "score": self.score,
            "accuracy": self.val_accuracy,
            "params": self.report.total_params,
            "flops": self.report.total_flops,
            "parent_id": self.parent_id,
            "mutation": self.mutation,
            "generation": self.generation,
            "stages": [gene.describe() for gene in self.genome],
        }


def evaluate_candidate(
    candidate_id: str,
    genome: Genome,
    space: SearchSpace,
    proxy: ProxyProtocol,
    seed: int,
    coeffs: ScoreCoefficients = ScoreCoefficients(),
    parent_id: Optional[str] = None,
    mutation: str = "prototype",
    generation: int = 0,
) -> Candidate:
    spec = genome_to_spec(genome, space, candidate_id)
    report = analyze(spec)
    val_accuracy = proxy_accuracy(spec, proxy, seed)
    score = None
    if val_accuracy > 0:
        score = performance_score(val_accuracy, report.total_params, report.total_flops, coeffs)
    logger.info(
        "%s: accuracy %.3f, %.3fM params, score %s",
        candidate_id,
        val_accuracy,
        report.params_m,
        "n/a" if score is None else f"{score:.2f}",
    )
    return Candidate(candidate_id, genome, spec, report, val_accuracy, score, parent_id, mutation, generation)


def mutate(candidate: Candidate, space: SearchSpace, seed: int) -> ArchSpec:
    genome, _ = mutate_genome(candidate.genome, space, np.random.default_rng(seed))
    return genome_to_spec(genome, space, f"{candidate.id}_child")


# --------------------------------------------------------------------------- search loop


@dataclass
class SearchResult:
    archive: List[Candidate]
    evaluated: List[Candidate]
    constraint: Constraint
    best_per_generation: List[Optional[float]] = field(default_factory=list)


def _rank_key(candidate: Candidate) -> Tuple[bool, float, str]:
    # unscored candidates (zero proxy accuracy) rank last
    if candidate.score is None:
        return (True, 0.0, candidate.id)
    return (False, -candidate.score, candidate.id)


def search(
    space: SearchSpace,
    constraint: Constraint,
    budget: int,
    proxy: ProxyProtocol,
    seed: int,
    population: int = 4,
    coeffs: ScoreCoefficients = ScoreCoefficients(),
) -> SearchResult:
    """Evaluate the prototype, then mutate the best survivors until ``budget`` runs out.

    Only candidates beating the baseline enter the archive, ranked by score
    (candidate id breaks ties).
    """

    if budget < 0:
        raise ValueError(f"budget must be non-negative, got {budget}")
    if population < 1:
        raise ValueError(f"population must be positive, got {population}")
    rng = np.random.default_rng(seed)
    evaluated: List[Candidate] = []
    seen: set = set()
    result = SearchResult([], evaluated, constraint)
    if budget == 0:
        logger.warning("search budget is zero; the archive stays empty")
        return result

    def record_generation(generation: int) -> None:
        archive = sorted((c for c in evaluated if constraint.satisfied(c.val_accuracy)), key=_rank_key)
        result.archive = archive
        result.best_per_generation.append(archive[0].score if archive else None)
        logger.info(
            "generation %d: %d evaluated, %d archived, best %s",
            generation,
            len(evaluated),
            len(archive),
            "n/a" if not archive else f"{archive[0].score:.2f}",
        )

    genome = prototype_genome(space)
    evaluated.append(evaluate_candidate("c0000", genome, space, proxy, seed, coeffs))
    seen.add(genome)
    record_generation(0)

    generation = 0
    while len(evaluated) < budget:
        generation += 1
        survivors = sorted(evaluated, key=lambda c: (not constraint.satisfied(c.val_accuracy),) + _rank_key(c))[:population]
        for _ in range(min(population, budget - len(evaluated))):
            parent = survivors[int(rng.integers(len(survivors)))]
            child, description = mutate_genome(parent.genome, space, rng)
            for _ in range(10):
                if child not in seen:
                    break
                child, description = mutate_genome(parent.genome, space, rng)
            seen.add(child)
            evaluated.append(
                evaluate_candidate(
                    f"c{len(evaluated):04d}", child, space, proxy, seed, coeffs, parent.id, description, generation
                )
            )
        record_generation(generation)

    if not result.archive:
        logger.warning("no candidate beat the baseline accuracy %.3f", constraint.baseline_val_accuracy)
    return result


def save_archive(archive: Sequence[Candidate], directory: Union[str, Path]) -> Path:
    """``<id>.arch`` per candidate plus ``index.csv`` in rank order."""

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for candidate in archive:
        (directory / f"{candidate.id}.arch").write_text(format_archspec(candidate.spec), encoding="utf-8")
    index = directory / "index.csv"
    with index.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["id", "score", "accuracy", "params", "flops", "parent_id", "mutation"])
        for c in archive:
            score = "" if c.score is None else f"{c.score:.4f}"
            writer.writerow(
                [c.id, score, f"{c.val_accuracy:.4f}", c.report.total_params, c.report.total_flops, c.parent_id or "", c.mutation]
            )
    return index


# --------------------------------------------------------------------------- trade-offs


def dominates(a: Candidate, b: Candidate) -> bool:
    """``a`` is no worse on accuracy, params and FLOPs and better on one."""

    no_worse = (
        a.val_accuracy >= b.val_accuracy
        and a.report.total_params <= b.report.total_params
        and a.report.total_flops <= b.report.total_flops
    )
    better = (
        a.val_accuracy > b.val_accuracy
        or a.report.total_params < b.report.total_params
        or a.report.total_flops < b.report.total_flops
    )
    return no_worse and better


def pareto_front(candidates: Sequence[Candidate]) -> List[Candidate]:
    return [c for c in candidates if not any(dominates(other, c) for other in candidates if other is not c)]


@dataclass(frozen=True)
class TradeoffReport:
    candidates: List[Candidate]
    winners: Dict[str, List[str]]
    pareto: List[str]

    def to_dict(self) -> Dict[str, object]:
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "winners": self.winners,
            "pareto": self.pareto,
        }


def tradeoff_report(archive: Sequence[Candidate]) -> TradeoffReport:
    if not archive:
        raise ValueError("tradeoff report needs a non-empty archive")
    candidates = list(archive)
    unscored = [c.id for c in candidates if c.score is None]
    if unscored:
        raise ValueError(f"candidates without a score cannot be compared: {', '.join(unscored)}")
    axes = {
        "accuracy": (lambda c: c.val_accuracy, max),
        "params": (lambda c: c.report.total_params, min),
        "flops": (lambda c: c.report.total_flops, min),
        "score": (lambda c: c.score, max),
    }
    winners = {}
    for axis, (value, pick) in axes.items():
        best = pick(value(c) for c in candidates)
        winners[axis] = [c.id for c in candidates if value(c) == best]
    return TradeoffReport(candidates, winners, [c.id for c in pareto_front(candidates)])


def format_tradeoff(report: TradeoffReport) -> List[str]:
    lines = ["Candidate | Accuracy (%) | Params (M) | FLOPs (G) | Score | Pareto | Best on"]
    for c in report.candidates:
        best_on = ", ".join(axis for axis, ids in report.winners.items() if c.id in ids) or "-"
        lines.append(
            f"{c.id} | {100.0 * c.val_accuracy:.1f} | {c.report.params_m:.3f} | {c.report.flops_g:.4f} | "
            f"{c.score:.2f} | {'yes' if c.id in report.pareto else 'no'} | {best_on}"
        )
    return lines


__all__ = [
    "STAGE_KINDS",
    "Candidate",
    "Constraint",
    "ProxyProtocol",
    "ScoreCoefficients",
    "SearchResult",
    "SearchSpace",
    "StageGene",
    "TradeoffReport",
    "dominates",
    "evaluate_candidate",
    "format_tradeoff",
    "genome_to_spec",
    "measure_baseline",
    "mutate",
    "mutate_genome",
    "pareto_front",
    "performance_score",
    "prototype_genome",
    "proxy_accuracy",
    "save_archive",
    "search",
    "seed_prototype",
    "tradeoff_report",
]
