"""SLNK container: named float32 tensors in one little-endian file."""

from __future__ import annotations

import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .const import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, LOGGER
from .exceptions import CheckpointError

if TYPE_CHECKING:
    from .layers import SlimModule

_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<4sII")
_PAYLOAD = np.dtype("<f4")

MODEL_PREFIX = "model."
OPTIM_PREFIX = "optim."
STATE_PREFIX = "state."
CONFIG_ENTRY = "meta.config"


class HasStateDict(Protocol):
    """Anything exposing named arrays for storage."""

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return named arrays."""
        ...


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize `tensors` in insertion order."""
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype=_PAYLOAD)
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_tensors(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    """Parse an SLNK blob back into named float32 arrays."""
    view = memoryview(blob)
    offset = 0

    def take(count: int) -> memoryview:
        nonlocal offset
        if offset + count > len(view):
            msg = f"{source}: truncated at byte {offset}, needed {count} more"
            raise CheckpointError(msg)
        chunk = view[offset : offset + count]
        offset += count
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size))
    if magic != CHECKPOINT_MAGIC:
        msg = f"{source}: not an SLNK file (magic {bytes(magic)!r})"
        raise CheckpointError(msg)
    if version != CHECKPOINT_VERSION:
        msg = f"{source}: unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        raise CheckpointError(msg)

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = _U32.unpack(take(_U32.size))
        try:
            name = bytes(take(name_length)).decode("utf-8")
        except UnicodeDecodeError as exception:
            msg = f"{source}: entry name at byte {offset - name_length} is not UTF-8"
            raise CheckpointError(msg) from exception
        (rank,) = _U32.unpack(take(_U32.size))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(size * _PAYLOAD.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=_PAYLOAD).astype(np.float32).reshape(shape)
    if offset != len(view):
        msg = f"{source}: {len(view) - offset} trailing bytes after {count} entries"
        raise CheckpointError(msg)
    return tensors


def save_tensors(path: Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write `tensors` atomically (temporary file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    tmp_path.write_bytes(encode_tensors(tensors))
    os.replace(tmp_path, path)


def load_tensors(path: Path) -> dict[str, np.ndarray]:
    """Read every tensor stored at `path`."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exception:
        msg = f"Cannot read checkpoint {path}: {exception.strerror}"
        raise CheckpointError(msg) from exception
    return decode_tensors(blob, str(path))


def text_to_tensor(text: str) -> np.ndarray:
    """Store UTF-8 text as one float per byte."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(values: np.ndarray) -> str:
    """Invert `text_to_tensor`."""
    return values.astype(np.uint8).tobytes().decode("utf-8")


@dataclass
class Checkpoint:
    """Decoded training checkpoint."""

    model_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_accuracy: float = 0.0
    config_text: str = ""


def save_checkpoint(  # noqa: PLR0913
    path: Path,
    model: SlimModule,
    *,
    optimizer: HasStateDict | None = None,
    step: int = 0,
    epoch: int = 0,
    best_accuracy: float = 0.0,
    config_text: str = "",
) -> None:
    """Write model weights, every norm set, optional optimizer state and the config text."""
    tensors = {MODEL_PREFIX + name: value for name, value in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(
            {OPTIM_PREFIX + name: value for name, value in optimizer.state_dict().items()}
        )
    # counters as decimal text; float32 is exact only to 2**24
    tensors[STATE_PREFIX + "step"] = text_to_tensor(str(step))
    tensors[STATE_PREFIX + "epoch"] = text_to_tensor(str(epoch))
    tensors[STATE_PREFIX + "best_accuracy"] = np.asarray(best_accuracy, dtype=np.float32)
    tensors[CONFIG_ENTRY] = text_to_tensor(config_text)
    save_tensors(path, tensors)
    LOGGER.info("Wrote checkpoint %s (%d tensors, step %d)", path, len(tensors), step)


def _counter(state: Mapping[str, np.ndarray], name: str, path: Path) -> int:
    if name not in state:
        return 0
    text = tensor_to_text(state[name])
    if not text.isdigit():
        msg = f"{path}: {STATE_PREFIX}{name} is not a decimal count: {text!r}"
        raise CheckpointError(msg)
    return int(text)


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`."""
    tensors = load_tensors(path)
    if CONFIG_ENTRY not in tensors:
        msg = f"{path}: missing {CONFIG_ENTRY} entry"
        raise CheckpointError(msg)

    def strip(prefix: str) -> dict[str, np.ndarray]:
        return {
            name.removeprefix(prefix): value
            for name, value in tensors.items()
            if name.startswith(prefix)
        }

    state = strip(STATE_PREFIX)
    return Checkpoint(
        model_state=strip(MODEL_PREFIX),
        optimizer_state=strip(OPTIM_PREFIX),
        step=_counter(state, "step", path),
        epoch=_counter(state, "epoch", path),
        best_accuracy=float(state.get("best_accuracy", 0.0)),
        config_text=tensor_to_text(tensors[CONFIG_ENTRY]),
    )
