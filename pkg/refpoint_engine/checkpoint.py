"""
Single-file model checkpoints.

Layout:
    8 bytes   magic  b"RFPTCKP1"
    4 bytes   header length, little-endian uint32
    n bytes   UTF-8 JSON header
    rest      little-endian float32 parameter blobs

Blob order is `param_order` from the header (the fixed order of
fusion.param_shapes) for the best-validation parameters, followed, when the
header has `resume: true`, by the last-epoch parameters, Adam m and Adam v in
the same order. `checksum` is the CRC32 of every blob byte.
"""
import json
import logging
import os
import struct
import zlib
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from .config import NetworkConfig
from .errors import FormatError, IoError
from .fusion import FusionModel, TrainHistory, TrainingState, param_shapes

logger = logging.getLogger(__name__)

MAGIC = b"RFPTCKP1"
BLOB_DTYPE = np.dtype("<f4")


class CheckpointHeader(BaseModel):
    version: int = 1
    config: NetworkConfig
    seed: int
    best_epoch: int
    metrics: Dict[str, float] = {}
    history: TrainHistory = TrainHistory()
    param_order: List[str]
    param_shapes: Dict[str, List[int]]
    input_mean: List[List[float]]
    input_std: List[List[float]]
    resume: bool = False
    optimizer: Dict[str, float] = {}
    checksum: int


def _blob(arrays: Dict[str, np.ndarray], order: List[str]) -> bytes:
    return b"".join(np.ascontiguousarray(arrays[name], dtype=BLOB_DTYPE).tobytes() for name in order)


def save_checkpoint(path: str, model: FusionModel, seed: int, history: Optional[TrainHistory] = None,
                    metrics: Optional[Dict[str, float]] = None, state: Optional[TrainingState] = None) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise IoError(f"checkpoint directory does not exist: {parent}")
    order = list(param_shapes(model.config))
    blobs = _blob(model.params, order)
    optimizer = {}
    if state is not None:
        blobs += _blob(state.params, order) + _blob(state.m, order) + _blob(state.v, order)
        optimizer = {"step": state.step, "lr": state.lr, "epochs_done": state.epochs_done,
                     "bad_epochs": state.bad_epochs}
    history = history or TrainHistory()
    header = CheckpointHeader(
        config=model.config,
        seed=seed,
        best_epoch=history.best_epoch,
        metrics=metrics or {},
        history=history,
        param_order=order,
        param_shapes={k: list(v) for k, v in param_shapes(model.config).items()},
        input_mean=np.asarray(model.input_mean, dtype=float).tolist(),
        input_std=np.asarray(model.input_std, dtype=float).tolist(),
        resume=state is not None,
        optimizer=optimizer,
        checksum=zlib.crc32(blobs),
    )
    head = json.dumps(header.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(blobs)
    logger.info(f"💾 Saved checkpoint {path} ({model.n_parameters()} parameters, resume={state is not None})")
    return path


def _split(buffer: np.ndarray, header: CheckpointHeader, offset: int) -> Tuple[Dict[str, np.ndarray], int]:
    arrays = {}
    for name in header.param_order:
        shape = tuple(header.param_shapes[name])
        size = int(np.prod(shape))
        arrays[name] = buffer[offset:offset + size].astype(np.float64).reshape(shape)
        offset += size
    return arrays, offset


def load_checkpoint(path: str, dtype: str = "float64") -> Tuple[FusionModel, CheckpointHeader, Optional[TrainingState]]:
    """Returns the best model, the header and (if stored) the resume state."""
    if not os.path.exists(path):
        raise IoError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a refpoint checkpoint (bad magic)")
    (head_len,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = CheckpointHeader(**json.loads(raw[start:start + head_len].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"{path}: checkpoint header is malformed: {e}")

    blobs = raw[start + head_len:]
    checksum = zlib.crc32(blobs)
    if checksum != header.checksum:
        raise FormatError(f"{path}: checksum mismatch (header {header.checksum}, data {checksum})")
    expected_shapes = {k: list(v) for k, v in param_shapes(header.config).items()}
    if header.param_order != list(expected_shapes) or header.param_shapes != expected_shapes:
        raise FormatError(f"{path}: parameter layout does not match its network config")
    per_set = sum(int(np.prod(s)) for s in expected_shapes.values())
    n_sets = 4 if header.resume else 1
    if len(blobs) != per_set * n_sets * BLOB_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {per_set * n_sets} float32 values, found {len(blobs) // 4}")

    buffer = np.frombuffer(blobs, dtype=BLOB_DTYPE)
    best, offset = _split(buffer, header, 0)
    model = FusionModel(header.config, best, dtype,
                        np.asarray(header.input_mean), np.asarray(header.input_std))
    state = None
    if header.resume:
        last, offset = _split(buffer, header, offset)
        m, offset = _split(buffer, header, offset)
        v, offset = _split(buffer, header, offset)
        opt = header.optimizer
        state = TrainingState(params=last, m=m, v=v, step=int(opt["step"]), lr=float(opt["lr"]),
                              epochs_done=int(opt["epochs_done"]), bad_epochs=int(opt["bad_epochs"]),
                              history=header.history)
    logger.info(f"✅ Loaded checkpoint {path} (best epoch {header.best_epoch + 1})")
    return model, header, state
