"""
Checkpoints
===========
Single-file "HVAE1" checkpoints holding model parameters, Adam moments, the
iteration counter and the resolved run configuration.

Layout:
    b"HVAE1"                      5-byte magic
    uint64 little-endian          manifest length in bytes
    manifest                      UTF-8 JSON {"meta": {...}, "tensors": [{name, shape, offset}]}
    payload                       raw little-endian float32 tensors, concatenated

Offsets are in bytes from the start of the payload. Files are written to a
temporary sibling and renamed into place.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from .config import RunConfig, Variant
from .errors import CheckpointFormatError, CheckpointMismatchError, DataError

logger = logging.getLogger(__name__)

MAGIC = b"HVAE1"
FORMAT_VERSION = 1
MODEL_PREFIX = "model/"
ADAM_PREFIX = "adam/"


@dataclass
class Checkpoint:
    """Decoded checkpoint: metadata plus named float32 arrays"""

    meta: Dict
    tensors: Dict[str, np.ndarray]

    @property
    def variant(self) -> Variant:
        return Variant(self.meta["variant"])

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_mapping(self.meta["config"])

    def model_tensors(self) -> Dict[str, np.ndarray]:
        n = len(MODEL_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(MODEL_PREFIX)}

    @property
    def has_optimizer_state(self) -> bool:
        return any(k.startswith(ADAM_PREFIX) for k in self.tensors)


def _optimizer_tensors(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
    out: Dict[str, torch.Tensor] = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        out[f"{ADAM_PREFIX}{name}/exp_avg"] = state["exp_avg"]
        out[f"{ADAM_PREFIX}{name}/exp_avg_sq"] = state["exp_avg_sq"]
    return out


def save_checkpoint(
    path: Union[str, Path],
    model: torch.nn.Module,
    cfg: RunConfig,
    iteration: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Path:
    """Write model (and optimizer) state to ``path``"""
    path = Path(path)
    named: Dict[str, torch.Tensor] = {f"{MODEL_PREFIX}{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        named.update(_optimizer_tensors(model, optimizer))

    entries: List[Dict] = []
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(named):
        array = named[name].detach().cpu().numpy().astype("<f4")
        data = array.tobytes(order="C")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)

    manifest = {
        "meta": {
            "format_version": FORMAT_VERSION,
            "variant": cfg.variant.value,
            "iteration": int(iteration),
            "config": cfg.to_flat_dict(),
            "config_text": cfg.to_text(),
        },
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except OSError as e:
        raise DataError(f"cannot write checkpoint {path}: {e}") from e

    logger.info(f"💾 Checkpoint saved: {path} (iteration {iteration}, {len(entries)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Parse an HVAE1 file; any structural problem is a CheckpointFormatError"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()

    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise CheckpointFormatError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):start])
    if start + header_len > len(raw):
        raise CheckpointFormatError(f"{path}: manifest length {header_len} exceeds file size")
    try:
        manifest = json.loads(raw[start:start + header_len].decode("utf-8"))
        meta = manifest["meta"]
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable manifest: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {meta.get('format_version')}")

    payload = memoryview(raw)[start + header_len:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = int(entry["offset"])
        end = begin + 4 * count
        if begin < 0 or end > len(payload):
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} runs past the payload")
        tensors[entry["name"]] = np.frombuffer(payload[begin:end], dtype="<f4").reshape(shape).copy()
    return Checkpoint(meta=meta, tensors=tensors)


def _shape_diff(expected: Dict[str, torch.Size], found: Dict[str, np.ndarray]) -> List[str]:
    diff = []
    for name in sorted(set(expected) | set(found)):
        if name not in found:
            diff.append(f"{name}: missing from checkpoint (model {tuple(expected[name])})")
        elif name not in expected:
            diff.append(f"{name}: not in model (checkpoint {tuple(found[name].shape)})")
        elif tuple(expected[name]) != tuple(found[name].shape):
            diff.append(f"{name}: model {tuple(expected[name])} vs checkpoint {tuple(found[name].shape)}")
    return diff


def restore(
    ckpt: Checkpoint,
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer] = None,
    variant: Optional[Variant] = None,
) -> int:
    """Load ``ckpt`` into ``model`` (and ``optimizer``); returns the stored iteration.

    Refuses a variant mismatch naming both variants, and any shape mismatch with
    the full list of differing tensors.
    """
    if variant is not None and Variant(variant) is not ckpt.variant:
        raise CheckpointMismatchError(
            f"checkpoint variant {ckpt.variant.value} does not match requested variant {Variant(variant).value}"
        )
    state = model.state_dict()
    stored = ckpt.model_tensors()
    diff = _shape_diff({k: v.shape for k, v in state.items()}, stored)
    if diff:
        raise CheckpointMismatchError("checkpoint does not fit the model: " + "; ".join(diff))

    with torch.no_grad():
        for name, tensor in state.items():
            tensor.copy_(torch.from_numpy(stored[name]))

    if optimizer is not None and ckpt.has_optimizer_state:
        restored = {}
        for index, (name, param) in enumerate(model.named_parameters()):
            key = f"{ADAM_PREFIX}{name}"
            if f"{key}/exp_avg" not in ckpt.tensors:
                continue
            restored[index] = {
                "step": torch.tensor(float(ckpt.iteration)),
                "exp_avg": torch.from_numpy(ckpt.tensors[f"{key}/exp_avg"]).to(param.dtype),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"{key}/exp_avg_sq"]).to(param.dtype),
            }
        current = optimizer.state_dict()
        optimizer.load_state_dict({"state": restored, "param_groups": current["param_groups"]})

    logger.info(f"Restored checkpoint at iteration {ckpt.iteration} ({ckpt.variant.value})")
    return ckpt.iteration
