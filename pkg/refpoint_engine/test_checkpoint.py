import json
import struct

import numpy as np
import pytest

from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .config import NetworkConfig, TrainConfig
from .errors import FormatError, IoError
from .fusion import train_arrays, weight_init

SMALL = NetworkConfig(t=4, feature_maps=3, branch_layers=1, joint_layers=1)


def _toy(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(n, 3))
    return rng.normal(size=(n, 4, 6, 3)), y / np.linalg.norm(y, axis=1, keepdims=True)


def _rewrite_header(path, edit):
    raw = open(path, "rb").read()
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    edit(header)
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(raw[:8] + struct.pack("<I", len(head)) + head + raw[12 + n:])


def test_checkpoint_round_trip(tmp_path):
    model = weight_init(SMALL, 5)
    model.input_mean = np.arange(9, dtype=float).reshape(3, 3) * 0.1
    path = save_checkpoint(str(tmp_path / "m.ckpt"), model, seed=5, metrics={"val_mad_deg": 12.5})
    loaded, header, state = load_checkpoint(path)
    assert state is None
    assert header.config == SMALL and header.seed == 5 and header.metrics == {"val_mad_deg": 12.5}
    assert header.param_order == list(model.params)
    for k, v in model.params.items():
        assert np.array_equal(loaded.params[k], v.astype(np.float32).astype(np.float64))
    assert np.array_equal(loaded.input_mean, model.input_mean)
    x = np.random.default_rng(0).normal(size=(3, 4, 6, 3))
    assert np.allclose(loaded.predict(x), model.predict(x), atol=1e-5)
    with open(path, "rb") as f:
        assert f.read(8) == MAGIC


def test_corrupted_blob_fails_the_checksum(tmp_path):
    path = save_checkpoint(str(tmp_path / "m.ckpt"), weight_init(SMALL, 1), seed=1)
    raw = bytearray(open(path, "rb").read())
    raw[-1] ^= 0xFF
    with open(path, "wb") as f:
        f.write(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(path)


def test_malformed_files_are_rejected(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(str(bad))
    bad.write_bytes(MAGIC + struct.pack("<I", 5) + b"{oops")
    with pytest.raises(FormatError, match="header"):
        load_checkpoint(str(bad))

    path = save_checkpoint(str(tmp_path / "m.ckpt"), weight_init(SMALL, 1), seed=1)
    _rewrite_header(path, lambda h: h["config"].update(feature_maps=4))
    with pytest.raises(FormatError, match="layout"):
        load_checkpoint(path)

    short = save_checkpoint(str(tmp_path / "s.ckpt"), weight_init(SMALL, 1), seed=1)
    _rewrite_header(short, lambda h: h.update(resume=True))
    with pytest.raises(FormatError, match="float32 values"):
        load_checkpoint(short)


def test_checkpoint_io_errors(tmp_path):
    with pytest.raises(IoError):
        load_checkpoint(str(tmp_path / "none.ckpt"))
    with pytest.raises(IoError):
        save_checkpoint(str(tmp_path / "missing" / "m.ckpt"), weight_init(SMALL, 1), seed=1)


def test_resume_from_checkpoint_matches_uninterrupted_run(tmp_path):
    X, Y = _toy(0, 12)
    Xv, Yv = _toy(1, 4)
    cfg = TrainConfig(epochs=4, batch_size=4, lr=0.01, dtype="float32", seed=3)
    best_full, h_full, s_full = train_arrays(X, Y, Xv, Yv, SMALL, cfg)

    half = cfg.model_copy(update={"epochs": 2})
    best, history, state = train_arrays(X, Y, Xv, Yv, SMALL, half)
    path = save_checkpoint(str(tmp_path / "half.ckpt"), best, seed=3, history=history, state=state)

    loaded, header, restored = load_checkpoint(path, dtype="float32")
    assert header.resume and restored.epochs_done == 2 and restored.step == state.step
    best_res, h_res, s_res = train_arrays(X, Y, Xv, Yv, SMALL, cfg, resume=(loaded, restored))
    assert h_res == h_full
    for k in s_full.params:
        assert np.array_equal(s_res.params[k], s_full.params[k])
        assert np.array_equal(best_res.params[k], best_full.params[k])
