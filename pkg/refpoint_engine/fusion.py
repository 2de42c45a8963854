"""
Model-level fusion CNN with hand-derived gradients.

Graph (per sample, x is t x f x d with coordinates as channels):
    per modality: 2 features -> [1x1 conv + ReLU] x branch_layers
    concatenate branch maps along the feature axis -> t x f x C
    [valid 2x2 conv + ReLU] x joint_layers
    flatten -> dense -> 3 (un-normalised direction)

A modality left out of NetworkConfig.modalities has no parameters and feeds
zero maps into the concatenation, so the joint layers keep their shape.
"""
import copy
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .config import MODALITIES, NetworkConfig, TrainConfig
from .errors import (
    DataLeakageError,
    EmptySplitError,
    NumericalError,
    ShapeMismatchError,
    ZeroPredictionError,
)

logger = logging.getLogger(__name__)

COS_CLAMP = 1.0 - 1e-7
MIN_PRED_NORM = 1e-12
POSITION_FEATURES = (0, 2, 4)
PREDICT_CHUNK = 256


class FusionModel:
    """Parameters plus the input standardisation learned from the training set."""

    def __init__(self, config: NetworkConfig, params: Dict[str, np.ndarray], dtype: str = "float64",
                 input_mean: Optional[np.ndarray] = None, input_std: Optional[np.ndarray] = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        self.input_mean = np.zeros((len(POSITION_FEATURES), config.d)) if input_mean is None else np.asarray(input_mean)
        self.input_std = np.ones((len(POSITION_FEATURES), config.d)) if input_std is None else np.asarray(input_std)
        self._check_shapes()

    def _check_shapes(self):
        expected = param_shapes(self.config)
        if list(expected) != list(self.params):
            raise ShapeMismatchError(f"parameter names {list(self.params)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatchError(f"{name} has shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise NumericalError(f"{name} holds non-finite values")

    def copy(self) -> "FusionModel":
        return FusionModel(self.config, {k: v.copy() for k, v in self.params.items()}, str(self.dtype),
                           self.input_mean.copy(), self.input_std.copy())

    def astype(self, dtype: str) -> "FusionModel":
        return FusionModel(self.config, self.params, dtype, self.input_mean, self.input_std)

    def prepare(self, X: np.ndarray) -> np.ndarray:
        """Standardise positions and zero the inputs of removed modalities."""
        X = np.array(X, dtype=np.float64)
        _check_batch(self.config, X)
        X[:, :, POSITION_FEATURES, :] = (X[:, :, POSITION_FEATURES, :] - self.input_mean) / self.input_std
        fpb = self.config.f_per_branch
        for j, m in enumerate(MODALITIES):
            if m not in self.config.modalities:
                X[:, :, j * fpb:(j + 1) * fpb, :] = 0.0
        return X.astype(self.dtype)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Raw (N, t, f, d) windows -> (N, 3) predicted directions."""
        Xp = self.prepare(X)
        out = [forward(self, Xp[i:i + PREDICT_CHUNK]) for i in range(0, len(Xp), PREDICT_CHUNK)]
        return np.concatenate(out).astype(np.float64) if out else np.zeros((0, self.config.output_dim))

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def param_shapes(cfg: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes in the fixed checkpoint order."""
    shapes = {}
    c = cfg.feature_maps
    for m in cfg.modalities:
        cin = cfg.d
        for layer in range(cfg.branch_layers):
            shapes[f"branch.{m}.{layer}.weight"] = (cin, c)
            shapes[f"branch.{m}.{layer}.bias"] = (c,)
            cin = c
    kh, kw = cfg.joint_kernel
    for layer in range(cfg.joint_layers):
        shapes[f"joint.{layer}.weight"] = (kh, kw, c, c)
        shapes[f"joint.{layer}.bias"] = (c,)
    h, w = cfg.joint_output_hw()
    if h < 1 or w < 1:
        raise ShapeMismatchError(f"joint layers shrink the {cfg.t}x{cfg.f} grid to nothing")
    shapes["dense.weight"] = (h * w * c, cfg.output_dim)
    shapes["dense.bias"] = (cfg.output_dim,)
    return shapes


def weight_init(net_cfg: NetworkConfig, seed: int, dtype: str = "float64") -> FusionModel:
    """He-normal conv weights, small uniform dense weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(net_cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif name.startswith("dense"):
            limit = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-limit, limit, shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    return FusionModel(net_cfg, params, dtype)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _check_batch(cfg: NetworkConfig, x: np.ndarray):
    if x.ndim != 4 or x.shape[1:] != (cfg.t, cfg.f, cfg.d):
        raise ShapeMismatchError(f"batch must be (b, {cfg.t}, {cfg.f}, {cfg.d}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("batch contains non-finite inputs")


def _conv_valid(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape[:2]
    ho, wo = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    out = np.broadcast_to(bias, (x.shape[0], ho, wo, kernel.shape[3])).copy()
    for di in range(kh):
        for dj in range(kw):
            out += x[:, di:di + ho, dj:dj + wo, :] @ kernel[di, dj]
    return out


def _conv_valid_backward(x: np.ndarray, kernel: np.ndarray, dz: np.ndarray):
    kh, kw = kernel.shape[:2]
    ho, wo = dz.shape[1], dz.shape[2]
    dk = np.zeros_like(kernel)
    dx = np.zeros_like(x)
    for di in range(kh):
        for dj in range(kw):
            window = x[:, di:di + ho, dj:dj + wo, :]
            dk[di, dj] = np.tensordot(window, dz, axes=([0, 1, 2], [0, 1, 2]))
            dx[:, di:di + ho, dj:dj + wo, :] += dz @ kernel[di, dj].T
    return dk, dz.sum(axis=(0, 1, 2)), dx


def forward_with_cache(model: FusionModel, x: np.ndarray):
    """Forward pass on a prepared batch, keeping every activation for backward."""
    cfg = model.config
    p = model.params
    b = x.shape[0]
    fpb = cfg.f_per_branch
    c = cfg.feature_maps
    cache = {"branch": {}, "joint_in": [], "joint_out": []}

    maps = []
    for j, m in enumerate(MODALITIES):
        if m not in cfg.modalities:
            maps.append(np.zeros((b, cfg.t, fpb, c), dtype=x.dtype))
            continue
        h = x[:, :, j * fpb:(j + 1) * fpb, :]
        acts = [h]
        for layer in range(cfg.branch_layers):
            h = np.maximum(h @ p[f"branch.{m}.{layer}.weight"] + p[f"branch.{m}.{layer}.bias"], 0.0)
            acts.append(h)
        cache["branch"][m] = acts
        maps.append(h)

    h = np.concatenate(maps, axis=2)
    for layer in range(cfg.joint_layers):
        cache["joint_in"].append(h)
        h = np.maximum(_conv_valid(h, p[f"joint.{layer}.weight"], p[f"joint.{layer}.bias"]), 0.0)
        cache["joint_out"].append(h)

    flat = h.reshape(b, -1)
    cache["flat"] = flat
    out = flat @ p["dense.weight"] + p["dense.bias"]
    return out, cache


def forward(model: FusionModel, batch: np.ndarray) -> np.ndarray:
    """Prepared (b, t, f, d) batch -> (b, 3) un-normalised predictions."""
    _check_batch(model.config, batch)
    out, _ = forward_with_cache(model, batch.astype(model.dtype, copy=False))
    return out


def _cosines(pred: np.ndarray, truth: np.ndarray):
    pn = np.linalg.norm(pred, axis=1)
    if np.any(pn < MIN_PRED_NORM):
        raise ZeroPredictionError(f"{int(np.sum(pn < MIN_PRED_NORM))} predictions collapsed to zero")
    tn = np.linalg.norm(truth, axis=1)
    return np.sum(pred * truth, axis=1) / (pn * tn), pn, tn


def mad_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean angle (radians) between predicted and true directions."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    cos, _, _ = _cosines(pred, truth)
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def masked_mad_loss(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, int]:
    """
    mad_loss that tolerates collapsed rows: each one counts as a right angle.

    Returns:
        (loss, number of collapsed rows)
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    dead = np.linalg.norm(pred, axis=1) < MIN_PRED_NORM
    angles = np.full(len(pred), math.pi / 2)
    if not dead.all():
        cos, _, _ = _cosines(pred[~dead], truth[~dead])
        angles[~dead] = np.arccos(np.clip(cos, -1.0, 1.0))
    return float(np.mean(angles)), int(dead.sum())


def _mad_loss_grad(pred: np.ndarray, truth: np.ndarray, skip_collapsed: bool):
    pn = np.linalg.norm(pred, axis=1)
    dead = pn < MIN_PRED_NORM
    if dead.any() and not skip_collapsed:
        raise ZeroPredictionError(f"{int(dead.sum())} predictions collapsed to zero")
    loss, _ = masked_mad_loss(pred, truth)
    safe = np.where(dead, 1.0, pn)
    tn = np.linalg.norm(truth, axis=1)
    cos = np.where(dead, 0.0, np.sum(pred * truth, axis=1) / (safe * tn))
    inside = (np.abs(cos) <= COS_CLAMP) & ~dead
    c = np.clip(cos, -COS_CLAMP, COS_CLAMP)
    dtheta = np.where(inside, -1.0 / np.sqrt(1.0 - c * c), 0.0)
    dcos = truth / (safe * tn)[:, None] - cos[:, None] * pred / (safe ** 2)[:, None]
    return loss, (dtheta / len(pred))[:, None] * dcos, int(dead.sum())


def mad_loss_grad(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, np.ndarray]:
    """Loss and dL/dpred; rows whose cosine lies beyond the clamp get zero gradient."""
    loss, grad, _ = _mad_loss_grad(pred, truth, skip_collapsed=False)
    return loss, grad


def _backward(model: FusionModel, batch: np.ndarray, truth: np.ndarray, skip_collapsed: bool):
    cfg = model.config
    p = model.params
    _check_batch(cfg, batch)
    out, cache = forward_with_cache(model, batch.astype(model.dtype, copy=False))
    loss, g, n_dead = _mad_loss_grad(out.astype(np.float64), np.asarray(truth, dtype=np.float64), skip_collapsed)
    g = g.astype(model.dtype)
    grads = {}

    grads["dense.weight"] = cache["flat"].T @ g
    grads["dense.bias"] = g.sum(axis=0)
    dh = (g @ p["dense.weight"].T).reshape(cache["joint_out"][-1].shape)

    for layer in reversed(range(cfg.joint_layers)):
        dz = dh * (cache["joint_out"][layer] > 0)
        dk, db, dh = _conv_valid_backward(cache["joint_in"][layer], p[f"joint.{layer}.weight"], dz)
        grads[f"joint.{layer}.weight"] = dk
        grads[f"joint.{layer}.bias"] = db

    fpb = cfg.f_per_branch
    for j, m in enumerate(MODALITIES):
        if m not in cfg.modalities:
            continue
        acts = cache["branch"][m]
        dm = dh[:, :, j * fpb:(j + 1) * fpb, :]
        for layer in reversed(range(cfg.branch_layers)):
            dz = dm * (acts[layer + 1] > 0)
            inp = acts[layer]
            w = p[f"branch.{m}.{layer}.weight"]
            grads[f"branch.{m}.{layer}.weight"] = inp.reshape(-1, inp.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            grads[f"branch.{m}.{layer}.bias"] = dz.sum(axis=(0, 1, 2))
            if layer > 0:
                dm = dz @ w.T
    return loss, {name: grads[name] for name in p}, n_dead


def backward(model: FusionModel, batch: np.ndarray, truth: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and exact gradients of mad_loss for every parameter."""
    loss, grads, _ = _backward(model, batch, truth, skip_collapsed=False)
    return loss, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainHistory(BaseModel):
    train_loss: List[float] = []
    val_loss: List[float] = []
    lr: List[float] = []
    best_epoch: int = -1

    def record(self, train_loss: float, val_loss: float, lr: float) -> bool:
        improved = self.best_epoch < 0 or val_loss < self.val_loss[self.best_epoch]
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        if improved:
            self.best_epoch = len(self.val_loss) - 1
        return improved

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": np.arange(1, len(self.train_loss) + 1),
            "train_loss_rad": self.train_loss,
            "val_loss_rad": self.val_loss,
            "train_mad_deg": np.degrees(self.train_loss),
            "val_mad_deg": np.degrees(self.val_loss),
            "lr": self.lr,
            "best": [i == self.best_epoch for i in range(len(self.train_loss))],
        })


class TrainingState:
    """Everything needed to continue an interrupted run bit-for-bit."""

    def __init__(self, params: Dict[str, np.ndarray], m: Dict[str, np.ndarray], v: Dict[str, np.ndarray],
                 step: int, lr: float, epochs_done: int, bad_epochs: int, history: TrainHistory):
        self.params = params
        self.m = m
        self.v = v
        self.step = step
        self.lr = lr
        self.epochs_done = epochs_done
        self.bad_epochs = bad_epochs
        self.history = history


class Adam:
    def __init__(self, cfg: TrainConfig, params: Dict[str, np.ndarray], state: Optional[TrainingState] = None):
        self.cfg = cfg
        if state is None:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
            self.step = 0
            self.lr = cfg.lr
        else:
            self.m = {k: v.astype(params[k].dtype) for k, v in state.m.items()}
            self.v = {k: v.astype(params[k].dtype) for k, v in state.v.items()}
            self.step = state.step
            self.lr = state.lr

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.step += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        corr1 = 1.0 - b1 ** self.step
        corr2 = 1.0 - b2 ** self.step
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / corr1
            v_hat = self.v[k] / corr2
            params[k] -= (self.lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)).astype(params[k].dtype)


def standardization_stats(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(X)[:, :, POSITION_FEATURES, :]
    mean = pos.mean(axis=(0, 1))
    std = pos.std(axis=(0, 1))
    return mean, np.where(std < 1e-6, 1.0, std)


def _rngs(seed: int):
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return init_ss, np.random.default_rng(shuffle_ss)


def train_arrays(X: np.ndarray, Y: np.ndarray, X_val: np.ndarray, Y_val: np.ndarray,
                 net_cfg: NetworkConfig, train_cfg: TrainConfig,
                 batch_users: Optional[Sequence[str]] = None, forbidden_users: Sequence[str] = (),
                 resume: Optional[Tuple[FusionModel, TrainingState]] = None,
                 log_every: int = 1) -> Tuple[FusionModel, TrainHistory, TrainingState]:
    """
    Mini-batch Adam on the MAD loss.

    Args:
        X, Y: training windows (N, t, f, d) and unit truths (N, 3)
        X_val, Y_val: validation set used for the lr schedule and model selection
        batch_users: user id per training sample, checked against forbidden_users
        resume: (best model, state) from a checkpoint to continue from

    Returns:
        (model at the best validation epoch, history, final training state)
    """
    if len(X) == 0:
        raise EmptySplitError("training split is empty")
    if len(X_val) == 0:
        raise EmptySplitError("validation split is empty")
    forbidden = set(forbidden_users)
    users = np.asarray(batch_users) if batch_users is not None else None
    if users is not None and forbidden & set(users.tolist()):
        raise DataLeakageError(f"test users {sorted(forbidden & set(users.tolist()))} are in the training set")

    init_ss, shuffle_rng = _rngs(train_cfg.seed)
    if resume is None:
        best = weight_init(net_cfg, int(init_ss.generate_state(1)[0]), train_cfg.dtype)
        if train_cfg.standardize_positions:
            best.input_mean, best.input_std = standardization_stats(X)
        current = best.copy()
        optimizer = Adam(train_cfg, current.params)
        history = TrainHistory()
        start_epoch, bad_epochs = 0, 0
    else:
        best, state = resume
        best = best.astype(train_cfg.dtype)
        current = best.copy()
        current.params = {k: v.astype(current.dtype) for k, v in state.params.items()}
        optimizer = Adam(train_cfg, current.params, state)
        history = state.history.model_copy(deep=True)
        start_epoch, bad_epochs = state.epochs_done, state.bad_epochs
        # replay the shuffles of the finished epochs
        for _ in range(start_epoch):
            shuffle_rng.permutation(len(X))

    Xp = current.prepare(X)
    Xv = current.prepare(X_val)
    Y = np.asarray(Y, dtype=np.float64)
    Y_val = np.asarray(Y_val, dtype=np.float64)
    n = len(Xp)

    for epoch in range(start_epoch, train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        total, collapsed = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            if users is not None and forbidden and forbidden & set(users[idx].tolist()):
                raise DataLeakageError(f"test-fold user reached training batch in epoch {epoch + 1}")
            loss, grads, n_dead = _backward(current, Xp[idx], Y[idx], skip_collapsed=True)
            collapsed += n_dead
            if not math.isfinite(loss):
                raise NumericalError(f"loss became {loss} in epoch {epoch + 1}")
            optimizer.update(current.params, grads)
            total += loss * len(idx)
        train_loss = total / n
        val_pred = np.concatenate([forward(current, Xv[i:i + PREDICT_CHUNK]) for i in range(0, len(Xv), PREDICT_CHUNK)])
        val_loss, val_collapsed = masked_mad_loss(val_pred.astype(np.float64), Y_val)
        if collapsed or val_collapsed:
            logger.warning(f"⚠️ Epoch {epoch + 1}: {collapsed} training and {val_collapsed} validation "
                           f"predictions collapsed to zero, counted as 90°")
        if not math.isfinite(val_loss):
            raise NumericalError(f"validation loss became {val_loss} in epoch {epoch + 1}")

        lr_used = optimizer.lr
        if history.record(train_loss, val_loss, lr_used):
            best = current.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.lr_patience:
                optimizer.lr = max(optimizer.lr * train_cfg.lr_factor, train_cfg.min_lr)
                bad_epochs = 0
                logger.info(f"🔄 Validation plateau, learning rate -> {optimizer.lr:.2e}")
        if log_every and (epoch + 1) % log_every == 0:
            logger.info(f"📊 Epoch {epoch + 1}/{train_cfg.epochs}: train {math.degrees(train_loss):.2f}° "
                        f"val {math.degrees(val_loss):.2f}° lr {lr_used:.2e}")

    state = TrainingState(params={k: v.copy() for k, v in current.params.items()},
                          m=optimizer.m, v=optimizer.v, step=optimizer.step, lr=optimizer.lr,
                          epochs_done=max(train_cfg.epochs, start_epoch), bad_epochs=bad_epochs, history=history)
    logger.info(f"✅ Training done: best epoch {history.best_epoch + 1}, "
                f"val MAD {math.degrees(history.val_loss[history.best_epoch]):.2f}°")
    return best, history, state


def train(train_set, val_set, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          forbidden_users: Sequence[str] = (),
          resume: Optional[Tuple[FusionModel, TrainingState]] = None) -> Tuple[FusionModel, TrainHistory, TrainingState]:
    """Train on user-disjoint train/validation Datasets."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySplitError("train and validation splits must both hold samples")
    overlap = set(train_set.user_ids) & set(val_set.user_ids)
    if overlap:
        raise EmptySplitError(f"users {sorted(overlap)} appear in both train and validation")
    return train_arrays(train_set.X, train_set.Y, val_set.X, val_set.Y, net_cfg, train_cfg,
                        batch_users=train_set.meta["user_id"].to_numpy(), forbidden_users=forbidden_users,
                        resume=resume)
