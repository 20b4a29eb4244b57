"""Parameter and multiply accounting, false-accept metrics, run reports and the step-time profiler."""

from __future__ import annotations

import hashlib
import json
import time
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from datetime import UTC, datetime
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .const import LOGGER
from .exceptions import MetricError, ShapeError
from .layers import LayerCost, WidthList
from .models import ModelSpec, SlimModel, build_model
from .tensor import MultiplyCounter, Tensor, no_grad
from .trainer import EvalResult, OptimizerConfig, build_optimizer, train_step

__all__ = [
    "FalseAccepts",
    "LayerCost",
    "ProfileRow",
    "ReportRow",
    "RunReport",
    "build_report",
    "count_multiplies",
    "count_params",
    "false_accepts_at_miss_rate",
    "layer_costs",
    "measure_multiplies",
    "profile_time_per_step",
    "relative_false_accepts",
]

# Below this a per-step median is dominated by timer and interpreter noise
MIN_MEASURABLE_MS = 10.0


def count_params(model: SlimModel, width: float, *, all_norm_sets: bool = False) -> int:
    """
    Count weights, biases and norm parameters a forward at `width` reads.

    By default only that width's norm set is counted (the extracted sub-network
    view); `all_norm_sets` adds every width's set. Running statistics are excluded.
    """
    ctx = model.context_at(width)
    shapes = model.active_parameter_shapes(ctx, all_norm_sets=all_norm_sets)
    return sum(int(np.prod(shape)) for shape in shapes.values())


def layer_costs(model: SlimModel, width: float) -> list[LayerCost]:
    """Return the per-layer params/multiplies/output-shape breakdown at `width`."""
    return model.layer_costs(model.context_at(width))


def count_multiplies(
    model: SlimModel, width: float, input_shape: tuple[int, int] | None = None
) -> int:
    """Return the analytic multiply count of one example's forward pass at `width`."""
    spec = model.spec
    if input_shape is not None and tuple(input_shape) != (spec.frames, spec.mel_bins):
        msg = f"Input {input_shape} does not match the model's ({spec.frames}, {spec.mel_bins})"
        raise ShapeError(msg)
    return sum(cost.multiplies for cost in layer_costs(model, width))


def measure_multiplies(model: SlimModel, width: float) -> int:
    """Count multiplies by running one zero example through `model` at `width`."""
    ctx = model.context
    previous_index, previous_training = ctx.width_index, ctx.training
    ctx.width_index = ctx.widths.index(width)
    ctx.training = False
    batch = Tensor(np.zeros((1, model.spec.frames, model.spec.mel_bins)))
    try:
        with no_grad(), MultiplyCounter() as counter:
            model(batch)
    finally:
        ctx.width_index, ctx.training = previous_index, previous_training
    return counter.total


@dataclass(frozen=True)
class FalseAccepts:
    """False accepts at the operating point meeting a miss-rate target."""

    count: int
    threshold: float
    miss_rate: float
    negatives: int


def false_accepts_at_miss_rate(
    scores: np.ndarray,
    labels: np.ndarray,
    target_miss: float,
    positive_label: int = 1,
) -> FalseAccepts:
    """
    Return negatives accepted at the highest threshold whose miss rate is at most `target_miss`.

    Examples scoring at or above the threshold are accepted; candidate
    thresholds are the positive scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    positives = np.sort(scores[labels == positive_label])
    negatives = scores[labels != positive_label]
    if positives.size == 0 or negatives.size == 0:
        msg = f"False accepts need both classes, got {positives.size} positives and {negatives.size} negatives"
        raise MetricError(msg)
    if not 0.0 <= target_miss <= 1.0:
        msg = f"Target miss rate must lie in [0, 1], got {target_miss}"
        raise MetricError(msg)

    candidates = np.unique(positives)[::-1]
    # positives strictly below a candidate are misses
    misses = np.searchsorted(positives, candidates, side="left") / positives.size
    threshold = float(candidates[np.argmax(misses <= target_miss)])
    miss_rate = float(np.mean(positives < threshold))
    return FalseAccepts(int(np.sum(negatives >= threshold)), threshold, miss_rate, int(negatives.size))


def relative_false_accepts(false_accepts: int, baseline: int) -> float:
    """Return `false_accepts / baseline` (1.0 when both are zero)."""
    if baseline == 0:
        if false_accepts == 0:
            return 1.0
        msg = "Relative false accepts are undefined against a baseline with none"
        raise MetricError(msg)
    return false_accepts / baseline


@dataclass
class ReportRow:
    """One width's metrics."""

    width: float
    params: int
    multiplies: int
    loss: float | None = None
    accuracy: float | None = None
    false_accepts: int | None = None
    relative_fa: float | None = None
    time_per_step_ms: float | None = None


@dataclass
class RunReport:
    """Per-width rows plus provenance."""

    rows: list[ReportRow]
    spec_hash: str
    seed: int
    date: str = field(default_factory=lambda: datetime.now(UTC).isoformat(timespec="seconds"))

    def to_dict(self) -> dict[str, object]:
        """Return a JSON-ready mapping."""
        return asdict(self)

    def to_json(self) -> str:
        """Return the report as an indented JSON document."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Return an aligned text table, one row per width."""
        headers = ["Width", "Parameters", "Multiplies", "Loss", "Accuracy", "FA", "Relative FA", "ms/step"]
        body = [
            [
                f"{row.width:g}",
                f"{row.params:,}",
                f"{row.multiplies:,}",
                _fmt(row.loss, "{:.4f}"),
                _fmt(row.accuracy, "{:.4f}"),
                _fmt(row.false_accepts, "{}"),
                _fmt(row.relative_fa, "{:.3f}"),
                _fmt(row.time_per_step_ms, "{:.1f}"),
            ]
            for row in self.rows
        ]
        return _render_table(headers, body) + f"\nspec {self.spec_hash[:12]}  seed {self.seed}  {self.date}\n"

    def write(self, path: Path) -> tuple[Path, Path]:
        """Write `<path>` as JSON and `<path>.txt` as the table."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        table_path = path.with_suffix(".txt")
        table_path.write_text(self.to_table(), encoding="utf-8")
        return path, table_path


def _fmt(value: float | None, pattern: str) -> str:
    return "-" if value is None else pattern.format(value)


def _render_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(cell) for cell in column) for column in zip(headers, *rows, strict=True)]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(headers, widths, strict=True))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(cell.rjust(w) for cell, w in zip(row, widths, strict=True)) for row in rows)
    return "\n".join(lines)


def spec_hash(spec: ModelSpec) -> str:
    """Return the SHA-256 of the canonical [model] section for `spec`."""
    from .config import render_model_section  # noqa: PLC0415

    return hashlib.sha256(render_model_section(spec).encode("utf-8")).hexdigest()


def build_report(  # noqa: PLR0913
    model: SlimModel,
    evaluations: Mapping[float, EvalResult] | None = None,
    *,
    seed: int = 0,
    target_miss: float | None = None,
    positive_label: int = 1,
    time_per_step_ms: Mapping[float, float] | None = None,
    all_norm_sets: bool = False,
    baseline_false_accepts: int | None = None,
) -> RunReport:
    """
    Assemble one row per configured width.

    For binary tasks with `target_miss` set, false accepts are reported.
    Relative false accepts divide by `baseline_false_accepts` (a separately
    trained model scored on the same data) or, without one, by the full-width row.
    """
    evaluations = evaluations or {}
    rows: list[ReportRow] = []
    for width in model.context.widths:
        row = ReportRow(
            width=width,
            params=count_params(model, width, all_norm_sets=all_norm_sets),
            multiplies=count_multiplies(model, width),
        )
        result = evaluations.get(width)
        if result is not None:
            row.loss = result.loss
            row.accuracy = result.accuracy
            if target_miss is not None and model.spec.num_classes == 2:  # noqa: PLR2004
                row.false_accepts = false_accepts_at_miss_rate(
                    result.scores, result.labels, target_miss, positive_label
                ).count
        if time_per_step_ms:
            row.time_per_step_ms = time_per_step_ms.get(width)
        rows.append(row)
    baseline = rows[0].false_accepts if baseline_false_accepts is None else baseline_false_accepts
    if baseline is not None:
        for row in rows:
            if row.false_accepts is not None:
                try:
                    row.relative_fa = relative_false_accepts(row.false_accepts, baseline)
                except MetricError:
                    LOGGER.warning("Baseline has no false accepts; relative FA left empty for width %g", row.width)
    return RunReport(rows, spec_hash(model.spec), seed)


@dataclass(frozen=True)
class ProfileRow:
    """Median training-step time for one width count."""

    width_count: int
    seconds_per_step: float
    ratio: float


def profile_time_per_step(  # noqa: PLR0913
    spec: ModelSpec,
    width_counts: Sequence[int],
    *,
    batch_size: int = 32,
    warmup_steps: int = 5,
    timed_steps: int = 20,
    seed: int = 0,
    optimizer: OptimizerConfig | None = None,
    blas_threads: int | None = 1,
) -> list[ProfileRow]:
    """
    Time slimmable training steps for evenly spaced width lists of each count.

    Every step uses the same random batch. Ratios are relative to the
    one-width row (or the first row when 1 is not profiled). BLAS runs on
    `blas_threads` threads while timing; `None` leaves the library default.
    """
    if not width_counts:
        msg = "No width counts to profile"
        raise MetricError(msg)
    optimizer = optimizer or OptimizerConfig()
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((batch_size, spec.frames, spec.mel_bins))
    labels = rng.integers(0, spec.num_classes, size=batch_size)

    medians: dict[int, float] = {}
    with threadpool_limits(limits=blas_threads, user_api="blas"):
        for count in width_counts:
            medians[count] = _median_step_time(spec, count, features, labels, optimizer, warmup_steps, timed_steps)

    reference = medians.get(1, medians[width_counts[0]])
    return [ProfileRow(count, medians[count], medians[count] / reference) for count in width_counts]


def _median_step_time(  # noqa: PLR0913
    spec: ModelSpec,
    count: int,
    features: np.ndarray,
    labels: np.ndarray,
    optimizer: OptimizerConfig,
    warmup_steps: int,
    timed_steps: int,
) -> float:
    widths = WidthList.evenly_spaced(count)
    model = build_model(replace(spec, widths=widths))
    opt = build_optimizer(model, optimizer)
    batch = Tensor(features)
    for step in range(warmup_steps):
        train_step(model, batch, labels, opt, widths, step=step)
    samples = []
    for step in range(timed_steps):
        start = time.perf_counter()
        train_step(model, batch, labels, opt, widths, step=warmup_steps + step)
        samples.append(time.perf_counter() - start)
    median = float(np.median(samples))
    LOGGER.info("%d widths: %.4f s/step", count, median)
    if median * 1000.0 < MIN_MEASURABLE_MS:
        LOGGER.warning(
            "%d widths measured %.2f ms/step, below %.0f ms; increase the batch size",
            count,
            median * 1000.0,
            MIN_MEASURABLE_MS,
        )
    return median


def render_profile(rows: Sequence[ProfileRow]) -> str:
    """Return the profile as an aligned text table."""
    return _render_table(
        ["Total widths", "Seconds per step", "Ratio"],
        [[str(r.width_count), f"{r.seconds_per_step:.4f}", f"{r.ratio:.2f}"] for r in rows],
    )
