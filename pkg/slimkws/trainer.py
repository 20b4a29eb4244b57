"""Width-interleaved gradient accumulation, optimizers, the epoch loop and evaluation."""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np

from . import ops
from .checkpoint import save_checkpoint, tensor_to_text, text_to_tensor
from .const import LOGGER
from .exceptions import ConfigurationError, DatasetError, NonFiniteLossError
from .layers import SlimNetwork, WidthList, set_active_width
from .tensor import Parameter, Tensor, no_grad

if TYPE_CHECKING:
    from .dataset import KeywordDataset

type OptimizerName = Literal["adam", "sgd-momentum"]
type Schedule = Literal["none", "cosine"]


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer choice and hyperparameters."""

    name: OptimizerName = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: Schedule = "none"

    def __post_init__(self) -> None:
        """Validate names and ranges."""
        if self.name not in ("adam", "sgd-momentum"):
            msg = f"Unknown optimizer {self.name!r}, expected 'adam' or 'sgd-momentum'"
            raise ConfigurationError(msg)
        if self.schedule not in ("none", "cosine"):
            msg = f"Unknown schedule {self.schedule!r}, expected 'none' or 'cosine'"
            raise ConfigurationError(msg)
        if self.lr <= 0 or self.weight_decay < 0:
            msg = f"Learning rate must be positive and weight decay non-negative, got {self.lr}/{self.weight_decay}"
            raise ConfigurationError(msg)


@dataclass(frozen=True)
class TrainConfig:
    """Training loop settings."""

    widths: WidthList | None = None
    epochs: int = 30
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    target_miss: float = 0.05
    positive_label: int = 1
    prefetch: int = 2

    def __post_init__(self) -> None:
        """Validate counts."""
        if self.batch_size < 1 or self.epochs < 1:
            msg = f"batch_size and epochs must be >= 1, got {self.batch_size}/{self.epochs}"
            raise ConfigurationError(msg)
        if self.eval_every < 0 or self.log_every < 1 or self.prefetch < 1:
            msg = "eval_every must be >= 0, log_every and prefetch >= 1"
            raise ConfigurationError(msg)


@dataclass(frozen=True)
class StepMetrics:
    """Result of one training step."""

    losses: dict[float, float]
    grad_norm: float
    time_ms: float


@dataclass(frozen=True)
class EvalResult:
    """Evaluation of one width over a dataset."""

    width: float
    loss: float
    accuracy: float
    probabilities: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        """Return the arg-max class per example."""
        return self.probabilities.argmax(axis=1)


@dataclass
class TrainResult:
    """Summary of a `train` run."""

    steps: int
    best_accuracy: float
    epoch_losses: dict[float, list[float]]
    evaluations: dict[float, EvalResult]
    log_path: Path | None = None
    best_path: Path | None = None
    final_path: Path | None = None


class Optimizer:
    """
    Base for optimizers keeping full-size state per parameter name.

    Only the leading region a parameter was read at during the step
    (`Parameter.touched`) is updated, so slices and norm sets that were
    inactive for the whole step keep their values and their moment buffers.
    """

    state_names: tuple[str, ...] = ()

    def __init__(self, named_parameters: Sequence[tuple[str, Parameter]], config: OptimizerConfig) -> None:
        """Allocate state buffers shaped like every parameter."""
        self.config = config
        self.params = dict(named_parameters)
        self.step_count = 0
        self.buffers: dict[str, dict[str, np.ndarray]] = {
            state: {name: np.zeros_like(p.data) for name, p in self.params.items()}
            for state in self.state_names
        }

    def step(self, lr: float | None = None) -> None:
        """Apply one update from the accumulated gradients."""
        lr = self.config.lr if lr is None else lr
        self.step_count += 1
        for name, param in self.params.items():
            if param.grad is None or param.touched is None:
                continue
            region = tuple(slice(0, extent) for extent in param.touched)
            if self.config.weight_decay:
                param.data[region] -= lr * self.config.weight_decay * param.data[region]
            self._update(name, param, region, lr)

    def _update(self, name: str, param: Parameter, region: tuple[slice, ...], lr: float) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return every buffer plus the step counter."""
        state = {
            f"{buffer}.{name}": values.copy()
            for buffer, named in self.buffers.items()
            for name, values in named.items()
        }
        state["step_count"] = text_to_tensor(str(self.step_count))
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Restore buffers written by `state_dict`."""
        for buffer, named in self.buffers.items():
            for name, values in named.items():
                key = f"{buffer}.{name}"
                if key not in state:
                    msg = f"Optimizer state is missing {key}"
                    raise ConfigurationError(msg)
                values[...] = state[key]
        self.step_count = int(tensor_to_text(state["step_count"])) if "step_count" in state else 0


class Adam(Optimizer):
    """Adam with bias correction."""

    state_names = ("m", "v")

    def _update(self, name: str, param: Parameter, region: tuple[slice, ...], lr: float) -> None:
        beta1, beta2 = self.config.betas
        grad = param.grad[region]
        m = self.buffers["m"][name]
        v = self.buffers["v"][name]
        m[region] = beta1 * m[region] + (1.0 - beta1) * grad
        v[region] = beta2 * v[region] + (1.0 - beta2) * grad * grad
        m_hat = m[region] / (1.0 - beta1**self.step_count)
        v_hat = v[region] / (1.0 - beta2**self.step_count)
        param.data[region] -= lr * m_hat / (np.sqrt(v_hat) + self.config.eps)


class SgdMomentum(Optimizer):
    """SGD with heavy-ball momentum."""

    state_names = ("velocity",)

    def _update(self, name: str, param: Parameter, region: tuple[slice, ...], lr: float) -> None:
        velocity = self.buffers["velocity"][name]
        velocity[region] = self.config.momentum * velocity[region] + param.grad[region]
        param.data[region] -= lr * velocity[region]


def build_optimizer(model: SlimNetwork, config: OptimizerConfig) -> Optimizer:
    """Create the optimizer named in `config` over every parameter of `model`."""
    cls = Adam if config.name == "adam" else SgdMomentum
    return cls(list(model.named_parameters()), config)


def learning_rate(config: OptimizerConfig, step: int, total_steps: int) -> float:
    """Return the learning rate for the 0-based `step`."""
    if config.schedule == "cosine" and total_steps > 0:
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return config.lr


def accumulate_gradients(
    model: SlimNetwork,
    batch: Tensor,
    labels: np.ndarray,
    widths: WidthList | Sequence[float],
    *,
    step: int = 0,
) -> dict[float, float]:
    """
    Zero the gradients, then run forward and backward on the same batch at every width.

    Gradients of all widths sum into the parameters; nothing is applied.
    Returns the loss of each width.
    """
    if len(widths) == 0:
        msg = "Cannot train with an empty width list"
        raise ConfigurationError(msg)
    model.zero_grad()
    previous = model.context.width
    losses: dict[float, float] = {}
    try:
        for width in widths:
            set_active_width(model, width)
            loss = ops.cross_entropy(model(batch), labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(width, step, value)
            loss.backward()
            losses[width] = value
    finally:
        set_active_width(model, previous)
    return losses


def gradient_norm(model: SlimNetwork) -> float:
    """Return the global L2 norm of accumulated gradients."""
    total = sum(float(np.sum(np.square(p.grad))) for p in model.parameters() if p.grad is not None)
    return math.sqrt(total)


def train_step(  # noqa: PLR0913
    model: SlimNetwork,
    batch: Tensor | np.ndarray,
    labels: np.ndarray,
    optimizer: Optimizer,
    widths: WidthList | Sequence[float],
    *,
    step: int = 0,
    lr: float | None = None,
) -> StepMetrics:
    """Accumulate gradients across `widths` and apply exactly one optimizer update."""
    start = time.perf_counter()
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    losses = accumulate_gradients(model, batch, labels, widths, step=step)
    grad_norm = gradient_norm(model)
    optimizer.step(lr)
    return StepMetrics(losses, grad_norm, (time.perf_counter() - start) * 1000.0)


class BatchPrefetcher:
    """
    Produce shuffled batches on a background thread into a bounded queue.

    Order is fixed by `seed`: epoch `e` visits examples in
    `default_rng((seed, e)).permutation(n)` order.
    """

    _DONE = object()

    def __init__(  # noqa: PLR0913
        self,
        dataset: KeywordDataset,
        batch_size: int,
        epochs: int,
        seed: int,
        *,
        start_step: int = 0,
        depth: int = 2,
    ) -> None:
        """Prepare the producer; batches begin at global `start_step`."""
        if len(dataset) == 0:
            msg = "Cannot train on an empty dataset"
            raise DatasetError(msg)
        self.dataset = dataset
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.start_step = start_step
        self.steps_per_epoch = math.ceil(len(dataset) / batch_size)
        self._queue: queue.Queue[object] = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="slimkws-prefetch", daemon=True)
        self._error: BaseException | None = None

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Return the example order of `epoch`."""
        return np.random.default_rng((self.seed, epoch)).permutation(len(self.dataset))

    def _produce(self) -> None:
        try:
            first_epoch, skip = divmod(self.start_step, self.steps_per_epoch)
            for epoch in range(first_epoch, self.epochs):
                order = self.epoch_order(epoch)
                for index in range(skip if epoch == first_epoch else 0, self.steps_per_epoch):
                    chunk = order[index * self.batch_size : (index + 1) * self.batch_size]
                    item = (epoch, epoch * self.steps_per_epoch + index, *self.dataset.batch(chunk))
                    if not self._put(item):
                        return
        except BaseException as exception:  # noqa: BLE001
            self._error = exception
        self._put(self._DONE)

    def _put(self, item: object) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
            except queue.Full:
                continue
            return True
        return False

    def __iter__(self) -> Iterator[tuple[int, int, np.ndarray, np.ndarray]]:
        """Yield `(epoch, step, features, labels)` in order."""
        self._thread.start()
        try:
            while (item := self._queue.get()) is not self._DONE:
                yield item  # type: ignore[misc]
            if self._error is not None:
                raise self._error
        finally:
            self.close()

    def close(self) -> None:
        """Stop the producer."""
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        if self._thread.is_alive():
            self._thread.join(timeout=1.0)


def evaluate(
    model: SlimNetwork,
    dataset: KeywordDataset,
    width: float,
    *,
    batch_size: int = 256,
    positive_label: int = 1,
) -> EvalResult:
    """Score `dataset` at `width` in eval mode without touching weights, statistics or gradients."""
    previous_width = model.context.width
    previous_training = model.context.training
    set_active_width(model, width)
    model.eval()
    total_loss = 0.0
    probabilities: list[np.ndarray] = []
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                features, labels = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
                logits = model(Tensor(features))
                total_loss += ops.cross_entropy(logits, labels).item() * len(labels)
                probabilities.append(ops.softmax(logits).data)
    finally:
        set_active_width(model, previous_width)
        model.context.training = previous_training

    probs = np.concatenate(probabilities) if probabilities else np.zeros((0, model.spec.num_classes))
    labels = dataset.labels
    accuracy = float(np.mean(probs.argmax(axis=1) == labels)) if len(labels) else 0.0
    scores = probs[:, positive_label] if probs.shape[1] > positive_label else np.zeros(len(labels))
    return EvalResult(
        width=width,
        loss=total_loss / max(len(labels), 1),
        accuracy=accuracy,
        probabilities=probs,
        scores=scores,
        labels=labels,
    )


class _JsonLog:
    """Append-only JSON-lines writer."""

    def __init__(self, path: Path | None) -> None:
        self.path = path
        self._handle = path.open("a", encoding="utf-8") if path else None

    def write(self, **record: object) -> None:
        if self._handle:
            self._handle.write(json.dumps(record, sort_keys=True) + "\n")
            self._handle.flush()

    def close(self) -> None:
        if self._handle:
            self._handle.close()


def train(  # noqa: C901, PLR0912, PLR0913, PLR0915
    model: SlimNetwork,
    dataset: KeywordDataset,
    config: TrainConfig,
    *,
    val_set: KeywordDataset | None = None,
    out_dir: Path | None = None,
    optimizer: Optimizer | None = None,
    start_step: int = 0,
    best_accuracy: float = 0.0,
    config_text: str = "",
) -> TrainResult:
    """
    Run the slimmable training loop.

    Every batch is consumed once per width with gradients summed, followed by
    one update. All widths are evaluated every `eval_every` steps (or at the end
    of each epoch when 0). With `out_dir` set, `train_log.jsonl`, `best.slnk`
    (best full-width accuracy) and `final.slnk` are written there.
    """
    widths = config.widths or model.context.widths
    if len(dataset) == 0:
        msg = "Cannot train on an empty dataset"
        raise DatasetError(msg)
    spec = getattr(model, "spec", None)
    if spec is not None and dataset.features.shape[1:] != (spec.frames, spec.mel_bins):
        msg = (
            f"Dataset features {dataset.features.shape[1:]} do not match the model input "
            f"({spec.frames}, {spec.mel_bins})"
        )
        raise DatasetError(msg)
    if val_set is None:
        LOGGER.warning("No validation split; evaluating on the training set")
        val_set = dataset

    optimizer = optimizer or build_optimizer(model, config.optimizer)
    prefetcher = BatchPrefetcher(
        dataset, config.batch_size, config.epochs, config.seed, start_step=start_step, depth=config.prefetch
    )
    total_steps = prefetcher.steps_per_epoch * config.epochs
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    log = _JsonLog(out_dir / "train_log.jsonl" if out_dir else None)
    best_path = out_dir / "best.slnk" if out_dir else None
    final_path = out_dir / "final.slnk" if out_dir else None

    result = TrainResult(
        steps=start_step,
        best_accuracy=best_accuracy,
        epoch_losses={w: [] for w in widths},
        evaluations={},
        log_path=log.path,
        best_path=best_path,
        final_path=final_path,
    )
    epoch_sums = dict.fromkeys(widths, 0.0)
    epoch_batches = 0
    epoch = start_step // prefetcher.steps_per_epoch

    def run_evaluation(step: int, epoch: int) -> None:
        evaluations = {
            w: evaluate(model, val_set, w, positive_label=config.positive_label) for w in widths
        }
        result.evaluations = evaluations
        log.write(
            event="eval",
            step=step,
            epoch=epoch,
            accuracy={f"{w:g}": e.accuracy for w, e in evaluations.items()},
            loss={f"{w:g}": e.loss for w, e in evaluations.items()},
        )
        full = evaluations[widths[0]].accuracy
        LOGGER.info(
            "Eval step %d: %s",
            step,
            ", ".join(f"{w:g}={e.accuracy:.3f}" for w, e in evaluations.items()),
        )
        improved = full > result.best_accuracy
        if improved:
            result.best_accuracy = full
        # the first evaluation of a run always leaves a best checkpoint
        if best_path is not None and (improved or not best_path.exists()):
            save_checkpoint(
                best_path, model, optimizer=optimizer, step=step, epoch=epoch,
                best_accuracy=result.best_accuracy, config_text=config_text,
            )

    def close_epoch(epoch: int) -> None:
        nonlocal epoch_batches
        if not epoch_batches:
            return
        for w in widths:
            result.epoch_losses[w].append(epoch_sums[w] / epoch_batches)
            epoch_sums[w] = 0.0
        LOGGER.info(
            "Epoch %d: mean loss %s",
            epoch + 1,
            ", ".join(f"{w:g}={result.epoch_losses[w][-1]:.4f}" for w in widths),
        )
        epoch_batches = 0

    model.train()
    try:
        for batch_epoch, step, features, labels in prefetcher:
            if batch_epoch != epoch:
                close_epoch(epoch)
                if config.eval_every == 0:
                    run_evaluation(step, epoch)
                epoch = batch_epoch
            lr = learning_rate(config.optimizer, step, total_steps)
            metrics = train_step(model, features, labels, optimizer, widths, step=step, lr=lr)
            result.steps = step + 1
            epoch_batches += 1
            for w, loss in metrics.losses.items():
                epoch_sums[w] += loss
            if step % config.log_every == 0:
                for w, loss in metrics.losses.items():
                    log.write(event="step", step=step, epoch=epoch, width=w, loss=loss, time_ms=metrics.time_ms)
                LOGGER.debug(
                    "Step %d lr %.2e grad-norm %.3f losses %s",
                    step, lr, metrics.grad_norm, metrics.losses,
                )
            if config.eval_every and result.steps % config.eval_every == 0:
                run_evaluation(result.steps, epoch)

        close_epoch(epoch)
        if config.eval_every == 0 or result.steps % config.eval_every:
            run_evaluation(result.steps, epoch)
    except NonFiniteLossError:
        if final_path is not None:
            failed = final_path.with_name(final_path.name + ".failed")
            save_checkpoint(
                failed, model, optimizer=optimizer, step=result.steps, epoch=epoch,
                best_accuracy=result.best_accuracy, config_text=config_text,
            )
            LOGGER.error("Non-finite loss; partial checkpoint kept at %s", failed)
        raise
    finally:
        prefetcher.close()
        log.close()

    if final_path is not None:
        save_checkpoint(
            final_path, model, optimizer=optimizer, step=result.steps, epoch=epoch + 1,
            best_accuracy=result.best_accuracy, config_text=config_text,
        )
    return result
