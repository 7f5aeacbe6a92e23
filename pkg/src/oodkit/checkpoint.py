"""Model (de)serialization.

A checkpoint is a directory holding two files:

* ``manifest`` - UTF-8 ``key = value`` lines: format version, model
  config, optional training seed, payload fingerprint, and one entry
  per tensor (name, dtype, shape, byte offset).
* ``checkpoint`` - the concatenated tensor payloads as contiguous
  little-endian float32, in manifest order.

Loading rebuilds the model from the recorded config and overwrites its
parameters from the payload, so an edited shape in the manifest fails
architecture validation (CheckpointShapeError) while a short payload
fails the byte bookkeeping (CheckpointTruncatedError).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    FormatError,
)
from .model import ModelConfig, MultiExitModel

__all__ = ["FORMAT_VERSION", "save_model", "load_model", "model_fingerprint", "read_manifest"]

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"
PAYLOAD_NAME = "checkpoint"


def _payload_bytes(model: MultiExitModel) -> bytes:
    return b"".join(
        np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.parameters().values()
    )


def model_fingerprint(model: MultiExitModel) -> str:
    """sha256 of the float32 payload the model would serialize to."""
    return hashlib.sha256(_payload_bytes(model)).hexdigest()


def _config_lines(cfg: ModelConfig) -> list[str]:
    return [
        f"config.input_size = {cfg.input_size}",
        f"config.channels = {','.join(str(c) for c in cfg.channels)}",
        f"config.exit_blocks = {','.join(str(e) for e in cfg.exit_blocks)}",
        f"config.exit_channels = {cfg.exit_channels}",
        f"config.hidden = {cfg.hidden}",
        f"config.classes = {cfg.n_classes}",
        f"config.loss_weights = {','.join(repr(float(w)) for w in cfg.loss_weights)}",
        f"config.seed = {cfg.seed}",
    ]


def save_model(model: MultiExitModel, directory: str | Path, training_seed: int | None = None) -> Path:
    """Write manifest + payload under ``directory``; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = _payload_bytes(model)

    lines = [f"format_version = {FORMAT_VERSION}"]
    lines += _config_lines(model.config)
    if training_seed is not None:
        lines.append(f"training_seed = {int(training_seed)}")
    lines.append(f"fingerprint = {hashlib.sha256(payload).hexdigest()}")
    offset = 0
    for i, (name, p) in enumerate(model.parameters().items()):
        lines.append(f"tensor.{i}.name = {name}")
        lines.append(f"tensor.{i}.dtype = float32")
        lines.append(f"tensor.{i}.shape = {','.join(str(s) for s in p.data.shape)}")
        lines.append(f"tensor.{i}.offset = {offset}")
        offset += p.data.size * 4
    lines.append(f"tensor_count = {len(model.parameters())}")

    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (directory / PAYLOAD_NAME).write_bytes(payload)
    return directory


def read_manifest(directory: str | Path) -> dict[str, str]:
    """Parse a checkpoint manifest into a flat key -> value dict."""
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"no checkpoint manifest at {path}")
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _require(entries: dict[str, str], key: str, directory: Path) -> str:
    if key not in entries:
        raise FormatError(f"checkpoint manifest in {directory} missing key {key!r}")
    return entries[key]


def config_from_manifest(entries: dict[str, str], directory: Path) -> ModelConfig:
    def get(key: str) -> str:
        return _require(entries, key, directory)

    return ModelConfig(
        input_size=int(get("config.input_size")),
        channels=tuple(int(v) for v in get("config.channels").split(",")),
        exit_blocks=tuple(int(v) for v in get("config.exit_blocks").split(",")),
        exit_channels=int(get("config.exit_channels")),
        hidden=int(get("config.hidden")),
        n_classes=int(get("config.classes")),
        loss_weights=tuple(float(v) for v in get("config.loss_weights").split(",")),
        seed=int(get("config.seed")),
    )


def load_model(directory: str | Path) -> MultiExitModel:
    """Rebuild a model from a checkpoint directory."""
    directory = Path(directory)
    entries = read_manifest(directory)

    version = int(_require(entries, "format_version", directory))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    model = MultiExitModel(config_from_manifest(entries, directory))

    payload_path = directory / PAYLOAD_NAME
    if not payload_path.exists():
        raise CheckpointTruncatedError(f"no checkpoint payload at {payload_path}")
    payload = payload_path.read_bytes()

    count = int(_require(entries, "tensor_count", directory))
    params = model.parameters()
    total = 0
    for i in range(count):
        name = _require(entries, f"tensor.{i}.name", directory)
        dtype = _require(entries, f"tensor.{i}.dtype", directory)
        shape = tuple(int(v) for v in _require(entries, f"tensor.{i}.shape", directory).split(","))
        offset = int(_require(entries, f"tensor.{i}.offset", directory))
        if dtype != "float32":
            raise FormatError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if name not in params:
            raise CheckpointShapeError(f"tensor {name!r} not part of the configured architecture")
        expected = params[name].data.shape
        if shape != expected:
            raise CheckpointShapeError(
                f"tensor {name!r}: manifest shape {shape} does not match model shape {expected}"
            )
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(payload):
            raise CheckpointTruncatedError(
                f"tensor {name!r} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        params[name].data = arr.astype(np.float64).reshape(shape)
        total = max(total, offset + nbytes)
    if len(payload) != total:
        raise FormatError(
            f"payload has {len(payload)} bytes but manifest accounts for {total}"
        )
    return model
