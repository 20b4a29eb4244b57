"""Command-line entry point: train, eval, export, profile and synth-data."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

import colorlog
import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config, parse_config, render_config, validate_paths
from .const import DOMAIN, EXIT_INTERNAL_ERROR, EXIT_OK, EXIT_USER_ERROR, LOGGER
from .dataset import DatasetSplits, KeywordDataset, load_speech_commands, split_off
from .exceptions import (
    AudioFormatError,
    CheckpointError,
    ConfigurationError,
    DatasetError,
    MetricError,
    SlimKwsError,
)
from .metrics import (
    build_report,
    count_multiplies,
    count_params,
    false_accepts_at_miss_rate,
    layer_costs,
    profile_time_per_step,
    render_profile,
)
from .models import SlimModel, build_model, extract_subnetwork
from .synth import synth_dataset, write_synth_tree
from .trainer import build_optimizer, evaluate, train

USER_ERRORS = (ConfigurationError, DatasetError, CheckpointError, AudioFormatError, MetricError)


def setup_logging(*, verbose: bool) -> None:
    """Send log records to stderr through a colored formatter."""
    handler = colorlog.StreamHandler()
    handler.setFormatter(
        colorlog.ColoredFormatter(
            "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s",
            log_colors={
                "DEBUG": "cyan",
                "INFO": "green",
                "WARNING": "yellow",
                "ERROR": "red",
                "CRITICAL": "bold_red",
            },
        )
    )
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING)
    LOGGER.setLevel(logging.DEBUG if verbose else logging.INFO)


def _out(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _parse_width(value: str) -> float | None:
    if value == "all":
        return None
    try:
        return float(value)
    except ValueError as exception:
        msg = f"invalid width {value!r}, expected a number or 'all'"
        raise argparse.ArgumentTypeError(msg) from exception


def _parse_counts(value: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(item) for item in value.split(",") if item.strip())
    except ValueError as exception:
        msg = f"invalid width counts {value!r}"
        raise argparse.ArgumentTypeError(msg) from exception
    if not counts or min(counts) < 1:
        msg = f"width counts must be positive integers, got {value!r}"
        raise argparse.ArgumentTypeError(msg)
    return counts


def load_data(config: Config) -> DatasetSplits:
    """Materialize the configured dataset as train/validation/test splits."""
    spec, data = config.model, config.data
    if data.source == "synthetic":
        if data.synth_classes != spec.num_classes:
            msg = f"[data] synth_classes = {data.synth_classes} but the model has {spec.num_classes} classes"
            raise ConfigurationError(msg)
        full = synth_dataset(
            data.synth_seed,
            data.synth_classes,
            data.synth_per_class,
            features=config.features,
            frames=spec.frames,
        )
        train_set, validation = split_off(full, data.validation_fraction, data.synth_seed)
        return DatasetSplits(train_set, validation, validation.subset(np.arange(0)))

    splits = load_speech_commands(
        data.root,
        data.classes or None,
        features=config.features,
        frames=spec.frames,
        cache=data.cache,
    )
    if len(splits.train.class_names) != spec.num_classes:
        msg = f"Dataset has {len(splits.train.class_names)} classes but the model has {spec.num_classes}"
        raise ConfigurationError(msg)
    if len(splits.validation) == 0 and data.validation_fraction > 0:
        splits.train, splits.validation = split_off(splits.train, data.validation_fraction, config.train.seed)
    return splits


def _eval_split(splits: DatasetSplits) -> KeywordDataset:
    return splits.test if len(splits.test) else splits.validation if len(splits.validation) else splits.train


def _restore(config_text: str, source: str) -> tuple[Config, SlimModel]:
    config = parse_config(config_text, source)
    return config, build_model(config.model)


def _run_name(args: argparse.Namespace) -> str:
    stem = Path(args.config).stem
    return stem if args.scratch_width is None else f"{stem}-scratch-{args.scratch_width:g}"


def _baseline_false_accepts(path: Path, config: Config, dataset: KeywordDataset) -> int:
    """Count false accepts of the separately trained model at `path`, scored at its full width."""
    checkpoint = load_checkpoint(path)
    _, baseline = _restore(checkpoint.config_text, f"{path}:meta.config")
    baseline.load_state_dict(checkpoint.model_state)
    ours, theirs = config.model, baseline.spec
    if (theirs.frames, theirs.mel_bins, theirs.num_classes) != (ours.frames, ours.mel_bins, ours.num_classes):
        msg = (
            f"Baseline {path} takes {theirs.frames}x{theirs.mel_bins} input with {theirs.num_classes} classes, "
            f"expected {ours.frames}x{ours.mel_bins} with {ours.num_classes}"
        )
        raise ConfigurationError(msg)
    result = evaluate(baseline, dataset, baseline.context.widths[0], positive_label=config.data.positive_label)
    fa = false_accepts_at_miss_rate(
        result.scores, result.labels, config.train.target_miss, config.data.positive_label
    )
    LOGGER.info("Baseline %s: %d false accepts of %d negatives", path, fa.count, fa.negatives)
    return fa.count


def cmd_train(args: argparse.Namespace) -> int:
    """Train a slimmable model and write checkpoints, the log and a report."""
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    if args.scratch_width is not None:
        config = replace(config, model=config.model.for_width(args.scratch_width))
        LOGGER.info("Training a fixed-width model at %g from scratch", args.scratch_width)
    validate_paths(config)
    resume = load_checkpoint(args.resume) if args.resume else None
    splits = load_data(config)

    model = build_model(config.model)
    optimizer = build_optimizer(model, config.train.optimizer)
    start_step, best = 0, 0.0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state:
            optimizer.load_state_dict(resume.optimizer_state)
        start_step, best = resume.step, resume.best_accuracy
        LOGGER.info("Resuming from %s at step %d", args.resume, start_step)

    out_dir = args.out or Path("runs") / _run_name(args)
    result = train(
        model,
        splits.train,
        config.train,
        val_set=splits.validation if len(splits.validation) else None,
        out_dir=out_dir,
        optimizer=optimizer,
        start_step=start_step,
        best_accuracy=best,
        config_text=render_config(config),
    )
    report = build_report(
        model,
        result.evaluations,
        seed=config.train.seed,
        target_miss=config.train.target_miss,
        positive_label=config.data.positive_label,
    )
    json_path, _ = report.write(out_dir / "report.json")
    _out(report.to_table())
    LOGGER.info("Report written to %s", json_path)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a checkpoint at one width or all widths."""
    checkpoint = load_checkpoint(args.ckpt)
    stored, model = _restore(checkpoint.config_text, f"{args.ckpt}:meta.config")
    model.load_state_dict(checkpoint.model_state)
    config = stored
    if args.config:
        given = load_config(args.config)
        config = replace(given, model=stored.model)
    validate_paths(config)

    widths = list(model.context.widths) if args.width is None else [args.width]
    for width in widths:
        model.context.widths.index(width)
    dataset = _eval_split(load_data(config))

    evaluations = {
        w: evaluate(model, dataset, w, positive_label=config.data.positive_label) for w in widths
    }
    binary = config.model.num_classes == 2  # noqa: PLR2004
    baseline_fa = None
    if args.baseline:
        if not binary:
            msg = "--baseline compares false accepts and needs a two-class model"
            raise ConfigurationError(msg)
        baseline_fa = _baseline_false_accepts(args.baseline, config, dataset)

    report = build_report(
        model,
        evaluations,
        seed=config.train.seed,
        target_miss=config.train.target_miss if binary else None,
        positive_label=config.data.positive_label,
        all_norm_sets=args.all_norm_sets,
        baseline_false_accepts=baseline_fa,
    )
    report.rows = [row for row in report.rows if row.width in evaluations]
    for row in report.rows:
        result = evaluations[row.width]
        line = f"width {row.width:g}: accuracy {result.accuracy:.4f} loss {result.loss:.4f}"
        if binary:
            negatives = int(np.sum(result.labels != config.data.positive_label))
            line += f" FA@{config.train.target_miss:g} miss {row.false_accepts}/{negatives}"
        if row.relative_fa is not None:
            line += f" relative FA {row.relative_fa:.3f}"
        _out(line)

    if args.report:
        report.write(args.report)
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    """Write the sub-network at one width as a standalone checkpoint."""
    checkpoint = load_checkpoint(args.ckpt)
    config, model = _restore(checkpoint.config_text, f"{args.ckpt}:meta.config")
    model.load_state_dict(checkpoint.model_state)
    if args.width is None:
        msg = "export needs a single width"
        raise ConfigurationError(msg)
    sub = extract_subnetwork(model, args.width)
    save_checkpoint(args.out, sub, config_text=render_config(replace(config, model=sub.spec)))

    _out(f"exported width {args.width:g} to {args.out}")
    _out(f"params {count_params(sub, 1.0):,} multiplies {count_multiplies(sub, 1.0):,}")
    if args.all_norm_sets:
        _out(
            f"params read at width {args.width:g} with every norm set: "
            f"{count_params(model, args.width, all_norm_sets=True):,}"
        )
    for cost in layer_costs(sub, 1.0):
        _out(f"  {cost.name:<12} params {cost.params:>9,} multiplies {cost.multiplies:>12,} out {cost.output_shape}")
    return EXIT_OK


def cmd_profile(args: argparse.Namespace) -> int:
    """Time training steps against the number of widths."""
    config = load_config(args.config)
    counts = args.widths or config.profile.width_counts
    rows = profile_time_per_step(
        config.model,
        counts,
        batch_size=config.profile.batch_size,
        warmup_steps=config.profile.warmup_steps,
        timed_steps=config.profile.timed_steps,
        seed=config.train.seed,
        optimizer=config.train.optimizer,
    )
    table = render_profile(rows)
    _out(table)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_synth_data(args: argparse.Namespace) -> int:
    """Write a synthetic Speech-Commands-style WAV tree."""
    try:
        written = write_synth_tree(
            args.out,
            args.seed,
            args.classes,
            args.per_class,
            validation_fraction=args.validation_fraction,
            testing_fraction=args.testing_fraction,
        )
    except OSError as exception:
        msg = f"Cannot write to {args.out}: {exception.strerror}"
        raise ConfigurationError(msg) from exception
    _out(f"wrote {len(written)} clips to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser with every subcommand."""
    parser = argparse.ArgumentParser(prog=DOMAIN, description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", help="train a slimmable super-network")
    train_parser.add_argument("--config", type=Path, required=True)
    train_parser.add_argument("--resume", type=Path, help="checkpoint to continue from")
    train_parser.add_argument("--seed", type=int, help="override [train] seed")
    train_parser.add_argument("--out", type=Path, help="output directory (default runs/<config name>)")
    train_parser.add_argument(
        "--scratch-width",
        type=float,
        help="train only this configured width as a standalone model (a from-scratch baseline)",
    )
    train_parser.set_defaults(func=cmd_train)

    eval_parser = commands.add_parser("eval", help="evaluate a checkpoint per width")
    eval_parser.add_argument("--ckpt", type=Path, required=True)
    eval_parser.add_argument("--config", type=Path, help="data settings (default: the checkpoint's)")
    eval_parser.add_argument("--width", type=_parse_width, default=None, help="a configured width or 'all'")
    eval_parser.add_argument("--report", type=Path, help="write a JSON report and a .txt table here")
    eval_parser.add_argument("--all-norm-sets", action="store_true", help="count every width's norm set")
    eval_parser.add_argument(
        "--baseline", type=Path, help="checkpoint whose full-width false accepts relative FA is measured against"
    )
    eval_parser.set_defaults(func=cmd_eval)

    export_parser = commands.add_parser("export", help="extract one width as a standalone checkpoint")
    export_parser.add_argument("--ckpt", type=Path, required=True)
    export_parser.add_argument("--width", type=_parse_width, required=True)
    export_parser.add_argument("--out", type=Path, required=True)
    export_parser.add_argument("--all-norm-sets", action="store_true", help="also report the super-network total")
    export_parser.set_defaults(func=cmd_export)

    profile_parser = commands.add_parser("profile", help="time training steps against width count")
    profile_parser.add_argument("--config", type=Path, required=True)
    profile_parser.add_argument("--widths", type=_parse_counts, help="width counts, e.g. 1,2,3,4,5,10,20,40")
    profile_parser.add_argument("--report", type=Path)
    profile_parser.set_defaults(func=cmd_profile)

    synth_parser = commands.add_parser("synth-data", help="write synthetic keyword WAVs")
    synth_parser.add_argument("--out", type=Path, required=True)
    synth_parser.add_argument("--classes", type=int, default=4)
    synth_parser.add_argument("--per-class", type=int, default=250)
    synth_parser.add_argument("--seed", type=int, default=0)
    synth_parser.add_argument("--validation-fraction", type=float, default=0.1)
    synth_parser.add_argument("--testing-fraction", type=float, default=0.1)
    synth_parser.set_defaults(func=cmd_synth_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return EXIT_OK if exit_request.code in (0, None) else EXIT_USER_ERROR
    setup_logging(verbose=args.verbose)
    try:
        return args.func(args)
    except USER_ERRORS as exception:
        LOGGER.error("%s", exception)  # noqa: TRY400
        return EXIT_USER_ERROR
    except SlimKwsError:
        LOGGER.exception("Run failed")
        return EXIT_INTERNAL_ERROR
    except Exception:
        LOGGER.exception("Unexpected error")
        return EXIT_INTERNAL_ERROR

