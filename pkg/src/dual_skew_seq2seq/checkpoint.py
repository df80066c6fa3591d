"""Single-file checkpoints.

Layout:
    8 bytes   magic b"DSDCKPT\\n"
    8 bytes   header length, unsigned little-endian
    header    UTF-8 JSON: format tag, model config, step, schedule phase,
              controller state, data-order (RNG) state, block table
    blocks    little-endian float64 arrays, in block-table order:
              model parameters in declared order, then optimizer buffers
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import DataError, ParseError
from .seq2seq import Seq2SeqConfig, Seq2SeqParams, param_shapes

log = logging.getLogger(__name__)

MAGIC = b"DSDCKPT\n"
FORMAT_TAG = "dual-skew-seq2seq/checkpoint-v1"
_LENGTH = struct.Struct("<Q")


@dataclass
class Checkpoint:
    params: Seq2SeqParams
    step: int = 0
    phase: int = 0
    controller: Optional[Dict[str, Any]] = None
    rng: Dict[str, Any] = field(default_factory=dict)
    # {"kind": ..., "state": {...scalars...}, "buffers": {name: array}}
    optimizer: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def _blocks(ckpt: Checkpoint) -> List[tuple]:
    blocks = [(name, array) for name, array in ckpt.params.arrays.items()]
    if ckpt.optimizer is not None:
        blocks.extend((f"optimizer/{name}", array) for name, array in ckpt.optimizer.get("buffers", {}).items())
    return blocks


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write atomically (temporary file, then rename)."""
    blocks = _blocks(ckpt)
    optimizer_meta = None
    if ckpt.optimizer is not None:
        optimizer_meta = {k: v for k, v in ckpt.optimizer.items() if k != "buffers"}
    header = {
        "format": FORMAT_TAG,
        "config": ckpt.params.config.to_dict(),
        "step": ckpt.step,
        "phase": ckpt.phase,
        "controller": ckpt.controller,
        "rng": ckpt.rng,
        "optimizer": optimizer_meta,
        "extra": ckpt.extra,
        "blocks": [{"name": name, "shape": list(np.shape(array))} for name, array in blocks],
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(_LENGTH.pack(len(encoded)))
        fp.write(encoded)
        for _, array in blocks:
            fp.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
        fp.flush()
        os.fsync(fp.fileno())
    os.replace(tmp_path, path)
    log.debug(f"** Wrote checkpoint {path} at step {ckpt.step}")


def read_header(path: str) -> Dict[str, Any]:
    with open(path, "rb") as fp:
        return _read_header(fp, path)


def _read_header(fp, path: str) -> Dict[str, Any]:
    if fp.read(len(MAGIC)) != MAGIC:
        raise ParseError("not a checkpoint file", path=path)
    raw_length = fp.read(_LENGTH.size)
    if len(raw_length) != _LENGTH.size:
        raise ParseError("truncated checkpoint header", path=path)
    (length,) = _LENGTH.unpack(raw_length)
    try:
        header = json.loads(fp.read(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("unreadable checkpoint header", path=path) from None
    if header.get("format") != FORMAT_TAG:
        raise ParseError(f"unsupported checkpoint format {header.get('format')!r}", path=path)
    return header


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fp:
        header = _read_header(fp, path)
        arrays: Dict[str, np.ndarray] = {}
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            raw = fp.read(8 * count)
            if len(raw) != 8 * count:
                raise ParseError(f"truncated block {block['name']}", path=path)
            arrays[block["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    config = Seq2SeqConfig(**header["config"])
    names = list(param_shapes(config))
    missing = [name for name in names if name not in arrays]
    if missing:
        raise ParseError(f"checkpoint lacks parameters {missing[:3]}", path=path)
    params = Seq2SeqParams(config, {name: arrays[name] for name in names})

    optimizer = header.get("optimizer")
    if optimizer is not None:
        prefix = "optimizer/"
        optimizer = dict(optimizer)
        optimizer["buffers"] = {
            name[len(prefix):]: array for name, array in arrays.items() if name.startswith(prefix)
        }
    return Checkpoint(
        params=params,
        step=int(header["step"]),
        phase=int(header["phase"]),
        controller=header.get("controller"),
        rng=header.get("rng") or {},
        optimizer=optimizer,
        extra=header.get("extra") or {},
    )
