"""Binary model checkpoints.

Layout: magic ``VTPC`` | u32 LE version | u64 LE header length | JSON
header | raw little-endian float64 payload. The header carries the model
config, a stage tag, the tensor directory (name, shape, byte offset),
per-site keep-index lists for hard models, and optionally optimizer
moments (stored in the same payload) and an RNG state. Save then load
reproduces forward outputs bit-exactly. Writes go to a temporary file
followed by an atomic rename, so no partial checkpoint is ever visible.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, VitModel
from .optim import AdamW

MAGIC = b"VTPC"
VERSION = 1

STAGE_TAGS = ("baseline", "sparsity", "pruned", "finetune")


@dataclass
class LoadedCheckpoint:
    """A reconstructed model plus the non-tensor metadata stored with it."""

    model: VitModel
    stage: str
    optimizer_state: dict | None
    rng_state: dict | None


def _tensor_entries(model: VitModel, optimizer: AdamW | None):
    """(name, float64 array) pairs in directory order."""
    entries = [(name, tensor.data) for name, tensor, _ in model.named_parameters()]
    if optimizer is not None:
        state = optimizer.state_dict()
        for name in state["first_moment"]:
            entries.append((f"optimizer.first_moment.{name}",
                            state["first_moment"][name]))
        for name in state["second_moment"]:
            entries.append((f"optimizer.second_moment.{name}",
                            state["second_moment"][name]))
    return entries


def save_checkpoint(model: VitModel, path: str | os.PathLike, stage: str,
                    optimizer: AdamW | None = None,
                    rng_state: dict | None = None) -> None:
    """Write the model (and optional trainer state) atomically to ``path``."""
    if stage not in STAGE_TAGS:
        raise CheckpointError(f"unknown stage tag {stage!r}; expected one of "
                              f"{STAGE_TAGS}")
    entries = _tensor_entries(model, optimizer)
    directory = []
    offset = 0
    for name, data in entries:
        directory.append({"name": name, "shape": list(data.shape),
                          "offset": offset})
        offset += data.size * 8
    header = {
        "config": asdict(model.config),
        "stage": stage,
        "mode": model.mode,
        "keep_indices": ({key: idx.tolist()
                          for key, idx in model.keep_indices().items()}
                         if model.mode == "hard" else None),
        "tensors": directory,
        "optimizer": ({"step": optimizer.state.step}
                      if optimizer is not None else None),
        "rng_state": rng_state,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    path = os.fspath(path)
    parent = os.path.dirname(path) or "."
    fd, tmp_path = tempfile.mkstemp(dir=parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for _, data in entries:
                fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path: str | os.PathLike) -> LoadedCheckpoint:
    """Parse, validate, and rebuild the model stored at ``path``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes in {path!r}: expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise CheckpointError("truncated checkpoint: header extends past end of file")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = raw[16 + header_len:]

    for field in ("config", "stage", "mode", "tensors"):
        if field not in header:
            raise CheckpointError(f"checkpoint header missing field {field!r}")
    if header["stage"] not in STAGE_TAGS:
        raise CheckpointError(f"unknown stage tag {header['stage']!r}")
    config = ModelConfig(**header["config"])
    if header["mode"] == "soft":
        model = VitModel(config)
    elif header["mode"] == "hard":
        keep_raw = header.get("keep_indices")
        if not keep_raw:
            raise CheckpointError("hard checkpoint is missing keep_indices")
        keep: dict[str, dict[str, np.ndarray]] = {}
        for site_key, indices in keep_raw.items():
            block_key, _, position = site_key.rpartition(".")
            keep.setdefault(block_key, {})[position] = np.asarray(indices,
                                                                  dtype=np.intp)
        model = VitModel(config, keep=keep)
    else:
        raise CheckpointError(f"unknown model mode {header['mode']!r}")

    directory = {entry["name"]: entry for entry in header["tensors"]}
    for name, tensor, _ in model.named_parameters():
        entry = directory.pop(name, None)
        if entry is None:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tuple(entry["shape"]) != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(entry['shape'])}, model "
                f"expects {tensor.data.shape}")
        tensor.data[...] = _read_payload(payload, entry, tensor.data.shape, name)

    optimizer_state = None
    if header.get("optimizer") is not None:
        moments: dict[str, dict[str, np.ndarray]] = {"first_moment": {},
                                                     "second_moment": {}}
        for full_name, entry in directory.items():
            for kind in moments:
                prefix = f"optimizer.{kind}."
                if full_name.startswith(prefix):
                    moments[kind][full_name[len(prefix):]] = _read_payload(
                        payload, entry, tuple(entry["shape"]), full_name)
        optimizer_state = {"step": int(header["optimizer"]["step"]), **moments}

    return LoadedCheckpoint(model=model, stage=header["stage"],
                            optimizer_state=optimizer_state,
                            rng_state=header.get("rng_state"))


def _read_payload(payload: bytes, entry: dict, shape: tuple, name: str) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    start = entry["offset"]
    end = start + count * 8
    if end > len(payload):
        raise CheckpointError(f"truncated checkpoint payload at tensor {name!r}")
    return np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
