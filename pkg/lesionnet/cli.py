"""Command line interface for lesionnet."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .archspec import (
    ArchSpec,
    analyze,
    build_network,
    compare,
    format_archspec,
    format_comparison,
    format_report,
    infer_shapes,
    load_archspec,
    reference_spec,
)
from .data import (
    ArrayDataset,
    AugmentConfig,
    ManifestDataset,
    SplitConfig,
    format_split_summary,
    ingest,
    parse_label,
    partition,
    split_summary,
    write_split_csv,
)
from .errors import CheckpointError, DivergenceError, LesionNetError
from .explain import AuditRules, audit, format_audit, overlay_export
from .metrics import confusion_from_predictions, format_metrics, metrics
from .search import (
    Constraint,
    ProxyProtocol,
    SearchSpace,
    format_tradeoff,
    measure_baseline,
    save_archive,
    search,
    seed_prototype,
    tradeoff_report,
)
from .synthetic import planted_patch_dataset
from .training import Checkpoint, TrainConfig, evaluate, train, write_history_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

OUTPUT_ENV = "LESIONNET_OUTPUT_DIR"
DEFAULT_OUTPUT = "runs"
DEFAULT_ARCH = "tiny"
COMMANDS = ("analyze", "prepare", "train", "eval", "explain", "search")


@dataclass(frozen=True)
class RunConfig:
    """Effective settings of one command after defaults, config file and flags."""

    command: str
    seed: int
    output_dir: Path
    settings: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["output_dir"] = str(self.output_dir)
        return data

    def write(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "run_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------------------- parser


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Wurzel-Seed für alle Zufallsströme")
    common.add_argument(
        "--output",
        type=Path,
        help=f"Ausgabeverzeichnis (Standard: ${OUTPUT_ENV} oder ./{DEFAULT_OUTPUT})",
    )
    common.add_argument("--json", action="store_true", help="Maschinenlesbare Ausgabe auf stdout")
    return common


def _data_options(parser: argparse.ArgumentParser) -> None:
    data = parser.add_argument_group("Daten")
    data.add_argument("--split-csv", type=Path, help="Split-CSV aus 'lesionnet prepare'")
    data.add_argument(
        "--synthetic",
        type=int,
        metavar="N",
        help="N synthetische Bilder mit eingesetztem Muster statt eines Manifests verwenden",
    )
    data.add_argument("--workers", type=int, default=1, help="Threads für das Laden der Bilder")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionnet",
        description=(
            "Analyse, Training, Auswertung und Erklärbarkeitsprüfung kompakter "
            "Faltungsnetze für die Klassifikation dermatoskopischer Bilder."
        ),
    )
    parser.add_argument("--config", type=Path, help="JSON-Datei mit Einstellungen je Unterbefehl")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Protokollierungsstufe (Ausgabe auf stderr)",
    )
    common = _common_options()
    commands = parser.add_subparsers(dest="command", required=True)

    analyze_cmd = commands.add_parser("analyze", parents=[common], help="Parameter und FLOPs von Architekturen")
    analyze_cmd.add_argument("archs", nargs="+", help="Architekturdateien oder Namen mitgelieferter Architekturen")
    analyze_cmd.add_argument("--input-size", type=int, help="Eingabegröße (quadratisch) überschreiben")
    analyze_cmd.add_argument("--compare", action="store_true", help="Vergleichstabelle ausgeben")
    analyze_cmd.add_argument("--per-layer", action="store_true", help="Kosten je Schicht ausgeben")

    prepare_cmd = commands.add_parser("prepare", parents=[common], help="Manifest einlesen und aufteilen")
    prepare_cmd.add_argument("--manifest", type=Path, required=True, help="CSV mit den Spalten path,label")
    prepare_cmd.add_argument("--test-per-class", type=int, default=221, help="Testbilder je Klasse")
    prepare_cmd.add_argument("--val-fraction", type=float, default=0.1, help="Validierungsanteil der übrigen Bilder")

    train_cmd = commands.add_parser("train", parents=[common], help="Netz mit Adam trainieren")
    train_cmd.add_argument("--arch", default=DEFAULT_ARCH, help="Architekturdatei oder mitgelieferter Name")
    train_cmd.add_argument("--epochs", type=int, default=80)
    train_cmd.add_argument("--lr", type=float, default=1e-4, help="Lernrate")
    train_cmd.add_argument("--batch-size", type=int, default=32)
    train_cmd.add_argument("--max-steps", type=int, help="Obergrenze für Optimierungsschritte")
    train_cmd.add_argument("--no-rebalance", action="store_true", help="Batches nicht ausbalancieren")
    train_cmd.add_argument("--no-augment", action="store_true", help="Keine Bildaugmentierung")
    train_cmd.add_argument("--precision", choices=["float32", "float64"], default="float32")
    _data_options(train_cmd)

    eval_cmd = commands.add_parser("eval", parents=[common], help="Konfusionsmatrix und Kennzahlen")
    eval_cmd.add_argument("--checkpoint", type=Path, help="Checkpoint aus 'lesionnet train'")
    eval_cmd.add_argument("--split", default="test", choices=["train", "val", "test"])
    eval_cmd.add_argument("--predictions", type=Path, help="CSV mit label,prediction (benign|malignant)")
    _data_options(eval_cmd)

    explain_cmd = commands.add_parser("explain", parents=[common], help="Okklusions-Saliency und Audit")
    explain_cmd.add_argument("--checkpoint", type=Path, required=True)
    explain_cmd.add_argument("--split", default="test", choices=["train", "val", "test"])
    explain_cmd.add_argument("--limit", type=int, default=8, help="Höchstzahl geprüfter Bilder")
    explain_cmd.add_argument("--patch", type=int, help="Kantenlänge des Okklusionsfeldes")
    explain_cmd.add_argument("--stride", type=int, help="Schrittweite des Okklusionsfeldes")
    explain_cmd.add_argument("--baseline", choices=["mean", "edge"], default="mean")
    explain_cmd.add_argument("--border-mass-max", type=float, default=0.5)
    explain_cmd.add_argument("--border-width", type=int, help="Breite des Randrahmens in Pixeln")
    explain_cmd.add_argument("--min-overlap", type=float, help="Mindest-IoU mit der Referenzmaske")
    _data_options(explain_cmd)

    search_cmd = commands.add_parser("search", parents=[common], help="Architektursuche unter Nebenbedingung")
    search_cmd.add_argument("--space", type=Path, help="JSON-Beschreibung des Suchraums")
    search_cmd.add_argument("--budget", type=int, default=30, help="Anzahl bewerteter Kandidaten")
    search_cmd.add_argument("--population", type=int, default=4)
    search_cmd.add_argument("--train-steps", type=int, default=60, help="Schritte des Proxy-Trainings")
    search_cmd.add_argument("--proxy-batch-size", type=int, default=16)
    search_cmd.add_argument("--proxy-lr", type=float, default=0.005)
    search_cmd.add_argument("--baseline-arch", help="Referenzarchitektur für die Nebenbedingung")
    search_cmd.add_argument("--baseline-accuracy", type=float, help="Referenzgenauigkeit direkt vorgeben")
    search_cmd.add_argument("--synthetic", type=int, default=256, metavar="N", help="Größe des synthetischen Datensatzes")

    parser.set_defaults(_subparsers=commands.choices)
    return parser


def _load_config(path: Path) -> Dict[str, Any]:
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError("Die Konfigurationsdatei muss ein JSON-Objekt enthalten")
    return data


def _apply_config(parser: argparse.ArgumentParser, config: Dict[str, Any]) -> None:
    """Turn config file values into parser defaults so explicit flags still win."""

    subparsers = parser.get_default("_subparsers")
    if "log_level" in config:
        parser.set_defaults(log_level=config["log_level"])
    shared = {key: value for key, value in config.items() if key not in COMMANDS and key != "log_level"}
    unused = set(shared)
    for name, sub in subparsers.items():
        section = config.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"Abschnitt '{name}' der Konfigurationsdatei muss ein Objekt sein")
        values = {**shared, **section}
        known = {action.dest for action in sub._actions}
        unused -= known
        unknown = set(section) - known
        if unknown:
            raise ValueError(f"Unbekannte Einstellungen für '{name}': {', '.join(sorted(unknown))}")
        if "output" in values and values["output"] is not None:
            values["output"] = Path(values["output"])
        sub.set_defaults(**{key: value for key, value in values.items() if key in known})
    if unused:
        raise ValueError(f"Unbekannte Einstellungen: {', '.join(sorted(unused))}")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is not None:
        _apply_config(parser, _load_config(known.config))
    return parser.parse_args(argv)


def run_config(args: argparse.Namespace) -> RunConfig:
    output = args.output or Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))
    settings = {
        key: str(value) if isinstance(value, Path) else value
        for key, value in vars(args).items()
        if key not in ("command", "seed", "output", "_subparsers", "func")
    }
    return RunConfig(args.command, args.seed, Path(output), settings)


# --------------------------------------------------------------------------- helpers


def _emit(lines: List[str]) -> None:
    for line in lines:
        print(line)


def _emit_json(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def resolve_arch(name_or_path: str) -> ArchSpec:
    path = Path(name_or_path)
    if path.is_file():
        return load_archspec(path)
    return reference_spec(name_or_path)


def _with_input_size(spec: ArchSpec, size: int) -> ArchSpec:
    resized = ArchSpec(spec.name, (spec.input_shape[0], size, size), spec.layers, spec.num_classes)
    infer_shapes(resized)
    return resized


def _synthetic_splits(n: int, size: int, seed: int) -> Dict[str, ArrayDataset]:
    held_out = max(2, n // 4)
    return {
        "train": planted_patch_dataset(n, size, seed=seed)[0],
        "val": planted_patch_dataset(held_out, size, seed=seed + 1)[0],
        "test": planted_patch_dataset(held_out, size, seed=seed + 2)[0],
    }


def _dataset(args: argparse.Namespace, split: str, size: int, augment: bool = False):
    if args.synthetic:
        return _synthetic_splits(args.synthetic, size, args.seed)[split]
    if args.split_csv is None:
        raise ValueError("Entweder --split-csv oder --synthetic angeben")
    manifest = ingest(args.split_csv).split(split)
    cfg = AugmentConfig(target_size=size) if augment else None
    return ManifestDataset(manifest, size, cfg)


# --------------------------------------------------------------------------- commands


def cmd_analyze(args: argparse.Namespace) -> int:
    specs = [resolve_arch(name) for name in args.archs]
    if args.input_size:
        specs = [_with_input_size(spec, args.input_size) for spec in specs]
    reports = [analyze(spec) for spec in specs]
    table = compare(reports) if args.compare else None
    if args.json:
        payload: Dict[str, Any] = {"reports": [report.to_dict() for report in reports]}
        if table is not None:
            payload["comparison"] = table.to_dict()
        _emit_json(payload)
        return EXIT_OK
    for report in reports:
        _emit(format_report(report, per_layer=args.per_layer))
    if table is not None:
        print()
        _emit(format_comparison(table))
    return EXIT_OK


def cmd_prepare(args: argparse.Namespace, run: RunConfig) -> int:
    manifest = partition(
        ingest(args.manifest),
        SplitConfig(seed=args.seed, val_fraction=args.val_fraction, test_per_class=args.test_per_class),
    )
    run.write()
    split_path = write_split_csv(manifest, run.output_dir / "split.csv")
    if args.json:
        _emit_json({"split_csv": str(split_path), "summary": split_summary(manifest)})
    else:
        _emit(format_split_summary(manifest))
        print(f"Split written to {split_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    spec = resolve_arch(args.arch)
    size = spec.input_shape[1]
    train_data = _dataset(args, "train", size, augment=not args.no_augment)
    val_data = _dataset(args, "val", size)
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        rebalance=not args.no_rebalance,
        max_steps=args.max_steps,
        workers=args.workers,
        precision=args.precision,
    )
    run.write()
    network = build_network(spec, args.seed, args.precision)
    result = train(network, train_data, val_data, cfg, spec_text=format_archspec(spec))
    checkpoint = result.best.save(run.output_dir / "checkpoint.lnck")
    history = write_history_csv(result.history, run.output_dir / "history.csv")
    summary = {
        "checkpoint": str(checkpoint),
        "history": str(history),
        "best_epoch": result.best.epoch,
        "steps": result.steps,
        "epochs": [record.to_dict() for record in result.history],
    }
    if args.json:
        _emit_json(summary)
    else:
        print(f"Trained {result.steps} steps over {len(result.history)} epochs; best epoch {result.best.epoch}")
        print(f"Checkpoint: {checkpoint}")
        print(f"History: {history}")
    return EXIT_OK


def _read_predictions(path: Path) -> Tuple[List[int], List[int]]:
    labels, predictions = [], []
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if not reader.fieldnames or not {"label", "prediction"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: Kopfzeile muss label,prediction enthalten")
        for row in reader:
            labels.append(parse_label(row["label"]))
            predictions.append(parse_label(row["prediction"]))
    return labels, predictions


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    if args.predictions is not None:
        cm = confusion_from_predictions(*_read_predictions(args.predictions))
    else:
        if args.checkpoint is None:
            raise ValueError("Entweder --predictions oder --checkpoint angeben")
        checkpoint = Checkpoint.load(args.checkpoint)
        network = checkpoint.build(args.seed)
        cm = evaluate(network, _dataset(args, args.split, network.input_shape[1]))
    report = metrics(cm)
    run.write()
    (run.output_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    if args.json:
        _emit_json(report.to_dict())
    else:
        _emit(format_metrics(report))
    return EXIT_OK


def cmd_explain(args: argparse.Namespace, run: RunConfig) -> int:
    network = Checkpoint.load(args.checkpoint).build(args.seed)
    size = network.input_shape[1]
    masks = None
    if args.synthetic:
        dataset, patch_region = planted_patch_dataset(args.synthetic, size, seed=args.seed + 2)
        chosen = np.flatnonzero(dataset.labels == 1)[: args.limit]
        images = dataset.images[chosen]
        masks = [patch_region.mask(size)] * len(images)
    else:
        dataset = _dataset(args, args.split, size)
        images = np.stack([dataset.load(i, 0) for i in range(min(args.limit, len(dataset)))])

    patch = args.patch or max(1, size // 7)
    rules = AuditRules(
        border_mass_max=args.border_mass_max,
        top_region_min_overlap=args.min_overlap,
        border_width=args.border_width if args.border_width is not None else max(1, round(16 * size / 224)),
        patch=patch,
        stride=args.stride or max(1, patch // 2),
        baseline=args.baseline,
    )
    report = audit(network, images, rules, masks=masks)
    run.write()
    overlays = run.output_dir / "overlays"
    for entry, image in zip(report.entries, images):
        overlay_export(image, entry.saliency, overlays / f"img_{entry.index:04d}.png")
    (run.output_dir / "audit.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    if args.json:
        _emit_json(report.to_dict())
    else:
        _emit(format_audit(report))
        print(f"Overlays: {overlays}")
    return EXIT_OK


def cmd_search(args: argparse.Namespace, run: RunConfig) -> int:
    space = SearchSpace.load(args.space) if args.space else SearchSpace()
    size = space.input_shape[1]
    splits = _synthetic_splits(args.synthetic, size, args.seed)
    proxy = ProxyProtocol(
        splits["train"],
        splits["val"],
        train_steps=args.train_steps,
        batch_size=args.proxy_batch_size,
        learning_rate=args.proxy_lr,
    )
    if args.baseline_accuracy is not None:
        constraint = Constraint(args.baseline_accuracy)
    else:
        baseline = resolve_arch(args.baseline_arch) if args.baseline_arch else seed_prototype(space)
        constraint = measure_baseline(baseline, proxy, args.seed)

    result = search(space, constraint, args.budget, proxy, args.seed, population=args.population)
    run.write()
    index = save_archive(result.archive, run.output_dir / "archive")
    payload: Dict[str, Any] = {
        "baseline_accuracy": constraint.baseline_val_accuracy,
        "evaluated": len(result.evaluated),
        "archive_index": str(index),
        "best_per_generation": result.best_per_generation,
        "archive": [candidate.to_dict() for candidate in result.archive],
    }
    tradeoff = tradeoff_report(result.archive) if result.archive else None
    if tradeoff is not None:
        payload["tradeoff"] = tradeoff.to_dict()
    (run.output_dir / "search.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if args.json:
        _emit_json(payload)
        return EXIT_OK
    print(
        f"Evaluated {len(result.evaluated)} candidates; {len(result.archive)} beat the baseline "
        f"accuracy {100.0 * constraint.baseline_val_accuracy:.1f}%"
    )
    if tradeoff is not None:
        _emit(format_tradeoff(tradeoff))
    print(f"Archive: {index.parent}")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "analyze":
        return cmd_analyze(args)
    run = run_config(args)
    handlers = {
        "prepare": cmd_prepare,
        "train": cmd_train,
        "eval": cmd_eval,
        "explain": cmd_explain,
        "search": cmd_search,
    }
    return handlers[args.command](args, run)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except (ValueError, OSError) as exc:
        print(f"lesionnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (DivergenceError, CheckpointError, OSError) as exc:
        print(f"lesionnet: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (LesionNetError, ValueError, KeyError) as exc:
        print(f"lesionnet: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
