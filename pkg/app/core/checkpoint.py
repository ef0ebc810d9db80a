"""Checkpoint directories: ``manifest.json`` plus a ``tensors.bin`` blob.

Blob records: u32 name length, UTF-8 name, u32 rank, u64 dims, f32 data in
row-major order. All integers little-endian. The manifest carries no
timestamps so repeated saves of the same state are byte identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from app.core.encoder_model import EncoderModel, ModelConfig
from app.errors import CheckpointError


FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
PARAM_PREFIX = "param/"
EXP_AVG_PREFIX = "adam.exp_avg/"
EXP_AVG_SQ_PREFIX = "adam.exp_avg_sq/"


@dataclass
class LoadedCheckpoint:
    model: EncoderModel
    step: int
    optimizer_moments: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    train_state: dict[str, Any] = field(default_factory=dict)
    vocab_hash: str | None = None
    path: Path | None = None

    def restore_optimizer(self, optimizer: torch.optim.Optimizer) -> None:
        """Install saved Adam moments into an optimizer built over self.model."""
        if not self.optimizer_moments:
            return
        for name, param in self.model.named_parameters():
            moments = self.optimizer_moments.get(name)
            if moments is None:
                raise CheckpointError(f"optimizer state missing for {name}")
            optimizer.state[param] = {
                "step": torch.tensor(float(self.step), dtype=torch.float32),
                "exp_avg": moments["exp_avg"].clone(),
                "exp_avg_sq": moments["exp_avg_sq"].clone(),
            }


def step_dir_name(step: int) -> str:
    return f"step{step}"


def _pack_tensor(name: str, tensor: torch.Tensor) -> bytes:
    array = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
    encoded = name.encode("utf-8")
    parts = [
        struct.pack("<I", len(encoded)),
        encoded,
        struct.pack("<I", array.ndim),
        struct.pack(f"<{array.ndim}Q", *array.shape),
        array.astype("<f4", copy=False).tobytes(order="C"),
    ]
    return b"".join(parts)


def _collect_tensors(
    model: EncoderModel,
    optimizer: torch.optim.Optimizer | None,
) -> list[tuple[str, torch.Tensor]]:
    tensors = [(PARAM_PREFIX + name, p) for name, p in model.named_parameters()]
    if optimizer is None:
        return tensors
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        tensors.append((EXP_AVG_PREFIX + name, state["exp_avg"]))
        tensors.append((EXP_AVG_SQ_PREFIX + name, state["exp_avg_sq"]))
    return tensors


def save_checkpoint(
    model: EncoderModel,
    optimizer: torch.optim.Optimizer | None,
    step: int,
    path: str | Path,
    train_state: dict[str, Any] | None = None,
    vocab_hash: str | None = None,
) -> Path:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    try:
        tmp.mkdir(parents=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create checkpoint directory {tmp}: {exc}") from exc

    blob = bytearray()
    entries = []
    for name, tensor in _collect_tensors(model, optimizer):
        entries.append({"name": name, "offset": len(blob), "shape": list(tensor.shape)})
        blob += _pack_tensor(name, tensor)
    (tmp / BLOB_NAME).write_bytes(bytes(blob))

    config = asdict(model.config)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "seed": config["seed"],
        "model_config": config,
        "vocab_hash": vocab_hash,
        "tensors": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "train_state": train_state or {},
    }
    with open(tmp / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    logging.info(f"CHECKPOINT_SAVED: step={step} path={path} tensors={len(entries)}")
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    return manifest


def _unpack_blob(blob: bytes, path: Path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated tensor blob at offset {offset}")
        chunk = blob[offset : offset + size]
        offset += size
        return chunk

    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    return tensors


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> LoadedCheckpoint:
    """Load a checkpoint directory; `config` (if given) must match every tensor shape."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / BLOB_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint blob not found: {path / BLOB_NAME}") from exc
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"{path}: tensor blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']} (truncated?)"
        )
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: tensor blob checksum mismatch")
    tensors = _unpack_blob(blob, path)

    saved_config = ModelConfig(**manifest["model_config"])
    model = EncoderModel(config if config is not None else saved_config)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, param in params.items():
            key = PARAM_PREFIX + name
            if key not in tensors:
                raise CheckpointError(f"{path}: tensor {name} missing from checkpoint")
            stored = tensors[key]
            if tuple(stored.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: checkpoint {list(stored.shape)} "
                    f"vs config {list(param.shape)}"
                )
            param.copy_(torch.from_numpy(stored))

    moments: dict[str, dict[str, torch.Tensor]] = {}
    for name in params:
        if EXP_AVG_PREFIX + name in tensors:
            moments[name] = {
                "exp_avg": torch.from_numpy(tensors[EXP_AVG_PREFIX + name].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[EXP_AVG_SQ_PREFIX + name].copy()),
            }

    return LoadedCheckpoint(
        model=model,
        step=int(manifest["step"]),
        optimizer_moments=moments,
        train_state=manifest.get("train_state", {}),
        vocab_hash=manifest.get("vocab_hash"),
        path=path,
    )


def list_checkpoints(root: str | Path) -> list[tuple[int, Path]]:
    """(step, path) for every ``step<N>`` checkpoint under root, ascending by step."""
    root = Path(root)
    found = []
    for child in root.iterdir() if root.is_dir() else ():
        if child.is_dir() and child.name.startswith("step") and (child / MANIFEST_NAME).exists():
            try:
                found.append((int(child.name[len("step"):]), child))
            except ValueError:
                continue
    return sorted(found)
