"""Linear adapter model, source pre-training and the alternating adaptation loop.

The backbone is replaced by fixed input vectors ``x``; the trainable feature
map is ``g(x) = W x + b`` and the classifier is a frozen matrix ``F`` with
unit-norm rows, so ``logits = F g(x)``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .aps import run_aps
from .losses import BatchView, ContrastConfig, LossReport, ce_smoothed_grad, total_loss
from .matrix_io import FeatureBundle, FormatError, fnv1a64
from .pseudo_label import generate_pseudo_labels

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ADPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIII")


class NumericError(ArithmeticError):
    """A loss or parameter became non-finite during training."""


@dataclass
class AdapterModel:
    W: np.ndarray  # (D, D_in)
    b: np.ndarray  # (D,)
    F: np.ndarray  # (C, D), rows unit norm, never modified

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        F = np.array(self.F, dtype=np.float64)
        F.setflags(write=False)
        self.F = F
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],) or F.shape[1] != self.W.shape[0]:
            raise ValueError(f"inconsistent shapes W{self.W.shape} b{self.b.shape} F{F.shape}")
        for name, arr in (("W", self.W), ("b", self.b), ("F", F)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite entries in {name}")

    @classmethod
    def with_normalized_classifier(cls, W, b, V) -> "AdapterModel":
        V = np.asarray(V, dtype=np.float64)
        return cls(W, b, V / np.linalg.norm(V, axis=1, keepdims=True))

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @property
    def n_classes(self) -> int:
        return self.F.shape[0]

    def features(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.W.T + self.b

    def logits(self, x) -> np.ndarray:
        return self.features(x) @ self.F.T

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    @property
    def params(self) -> np.ndarray:
        """Trainable parameters flattened as ``[W.ravel(), b]``."""
        return np.concatenate([self.W.ravel(), self.b])

    def with_params(self, theta) -> "AdapterModel":
        theta = np.asarray(theta, dtype=np.float64)
        nw = self.W.size
        return AdapterModel(theta[:nw].reshape(self.W.shape), theta[nw:], self.F)

    def backprop(self, x, grad_logits) -> np.ndarray:
        """Chain a logit gradient to ``[dW.ravel(), db]``."""
        g_feat = np.asarray(grad_logits) @ self.F
        dW = g_feat.T @ np.asarray(x, dtype=np.float64)
        return np.concatenate([dW.ravel(), g_feat.sum(axis=0)])

    def copy(self) -> "AdapterModel":
        return AdapterModel(self.W.copy(), self.b.copy(), self.F)

    def to_bundle(self, raw: FeatureBundle) -> FeatureBundle:
        """Bundle of adapted features and logits for the inputs in ``raw``."""
        feats = self.features(raw.features)
        return raw.replace(features=feats, logits=feats @ self.F.T)


def encode_checkpoint(model: AdapterModel) -> bytes:
    body = b"".join(
        [
            _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.input_dim, model.feature_dim, model.n_classes),
            model.W.astype("<f8").tobytes(),
            model.b.astype("<f8").tobytes(),
            np.asarray(model.F).astype("<f8").tobytes(),
        ]
    )
    return body + struct.pack("<Q", fnv1a64(body))


def decode_checkpoint(data: bytes) -> AdapterModel:
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("truncated payload: header incomplete")
    magic, version, d_in, d, c = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError("bad magic")
    if version != CKPT_VERSION:
        raise FormatError(f"version mismatch: file has {version}, expected {CKPT_VERSION}")
    size = _CKPT_HEADER.size + 8 * (d * d_in + d + c * d) + 8
    if len(data) != size:
        raise FormatError(f"length mismatch: expected {size} bytes, got {len(data)}")
    if fnv1a64(data[:-8]) != struct.unpack("<Q", data[-8:])[0]:
        raise FormatError("checksum mismatch")
    vals = np.frombuffer(data, dtype="<f8", offset=_CKPT_HEADER.size, count=d * d_in + d + c * d)
    W = vals[: d * d_in].reshape(d, d_in)
    b = vals[d * d_in : d * d_in + d]
    F = vals[d * d_in + d :].reshape(c, d)
    return AdapterModel(W, b, F)


def save_checkpoint(model: AdapterModel, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path) -> AdapterModel:
    return decode_checkpoint(Path(path).read_bytes())


@dataclass(frozen=True)
class TrainConfig:
    """Adaptation hyper-parameters (defaults follow the reference image setup)."""

    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-2
    warmup_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    k: int = 4
    gamma: float = 0.6
    iters: int = 2
    tau: float = 0.1
    beta: float = 0.3
    alpha: float = 0.1
    aug_sigma: float = 0.1
    use_cacl: bool = True
    cl_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.batch_size < 1 or self.k < 1 or self.iters < 1:
            raise ValueError("batch_size, k and iters must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.aug_sigma < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("aug_sigma, momentum and weight_decay must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.contrast  # validates tau/beta/alpha

    @property
    def contrast(self) -> ContrastConfig:
        return ContrastConfig(self.tau, self.beta, self.alpha, self.use_cacl, self.cl_reduction)


@dataclass(frozen=True)
class SourceConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    alpha: float = 0.1
    val_fraction: float = 0.1
    feature_dim: int | None = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    pl_accuracy: float | None
    selected_pl_accuracy: float | None
    target_accuracy: float | None
    l_cl: float
    l_ce: float
    l_im: float
    l_all: float
    n_selected: int


LOG_COLUMNS = (
    "epoch",
    "pl_accuracy",
    "selected_pl_accuracy",
    "target_accuracy",
    "l_cl",
    "l_ce",
    "l_im",
    "l_all",
    "n_selected",
)


def make_views(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Interleave each row with a copy carrying ``N(0, sigma^2 I)`` noise -> (2B, D_in)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    views = np.repeat(x, 2, axis=0)
    views[1::2] += sigma * rng.standard_normal(x.shape)
    return views


def lr_at(epoch: int, it: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate for 0-based ``epoch`` and ``it``.

    Linear warmup from 0 over the first ``cfg.warmup_epochs`` epochs, then
    cosine decay from ``cfg.lr`` over the remaining steps; the two pieces meet
    at ``cfg.lr`` on the boundary.
    """
    step = epoch * steps_per_epoch + it
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * step / warm
    decay = (cfg.epochs - cfg.warmup_epochs) * steps_per_epoch
    if decay <= 0:
        return cfg.lr
    progress = (step - warm) / decay
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9, weight_decay: float = 1e-3):
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    Returns ``(new_params, new_velocity)``; inputs are not modified.
    """
    g = np.asarray(grads, dtype=np.float64) + weight_decay * np.asarray(params, dtype=np.float64)
    v = momentum * np.asarray(velocity, dtype=np.float64) + g
    return params - lr * v, v


def adapter_loss(model: AdapterModel, views, labels, in_h, indices, cfg: ContrastConfig) -> LossReport:
    """Total loss on a 2B view batch with the gradient chained to adapter params."""
    batch = BatchView(indices, model.logits(views), labels, in_h)
    rep = total_loss(batch, cfg)
    return replace(rep, grad_adapter=model.backprop(views, rep.grad_logits))


def _fits_f32(a) -> bool:
    return bool(np.all(np.abs(a) < np.finfo(np.float32).max))


def _accuracy(pred, truth) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


StepHook = Callable[[AdapterModel, np.ndarray, np.ndarray, np.ndarray, np.ndarray, LossReport], None]


def run_adaptation(
    model: AdapterModel,
    target_raw: FeatureBundle,
    cfg: TrainConfig,
    step_hook: StepHook | None = None,
):
    """Alternate per-epoch pseudo-labelling/selection with mini-batch updates.

    ``target_raw`` carries adapter *inputs* in its ``features`` field; ground
    truth labels, when present, are only used for logging. ``step_hook`` is
    called before every update with ``(model, views, labels, in_h, indices,
    report)``. Returns ``(adapted_model, logs)``.
    """
    if target_raw.feature_dim != model.input_dim:
        raise ValueError(f"dimension mismatch: bundle D={target_raw.feature_dim}, adapter expects {model.input_dim}")
    if target_raw.n_classes != model.n_classes:
        raise ValueError(f"dimension mismatch: bundle C={target_raw.n_classes}, model has {model.n_classes}")
    model = model.copy()
    if cfg.epochs == 0:
        return model, []

    contrast = cfg.contrast
    rng = np.random.default_rng(cfg.seed)
    x_all = target_raw.features.astype(np.float64)
    n = target_raw.n_samples
    steps = math.ceil(n / cfg.batch_size)
    truth = target_raw.labels
    theta = model.params
    velocity = np.zeros_like(theta)
    logs = []

    for epoch in range(cfg.epochs):
        feats = model.features(x_all)
        # bundles store 32-bit floats, so overflow there counts as well
        if not (_fits_f32(feats) and _fits_f32(feats @ model.F.T)):
            raise NumericError(f"non-finite target logits at the start of epoch {epoch}")
        state = generate_pseudo_labels(model.to_bundle(target_raw))
        y_tilde = state.y_tilde
        aps = run_aps(feats, y_tilde, model.n_classes, k=cfg.k, iters=cfg.iters, gamma=cfg.gamma)
        in_h = np.zeros(n, dtype=bool)
        in_h[aps.selected] = True

        order = rng.permutation(n)
        sums = np.zeros(4)
        for it in range(steps):
            idx = order[it * cfg.batch_size : (it + 1) * cfg.batch_size]
            views = make_views(x_all[idx], cfg.aug_sigma, rng)
            labels = np.repeat(y_tilde[idx], 2)
            mask = np.repeat(in_h[idx], 2)
            ids = np.repeat(idx, 2)
            rep = adapter_loss(model, views, labels, mask, ids, contrast)
            if not np.isfinite(rep.l_all) or not np.all(np.isfinite(rep.grad_adapter)):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {it}: {rep.l_all}")
            if step_hook is not None:
                step_hook(model, views, labels, mask, ids, rep)
            lr = lr_at(epoch, it, cfg, steps)
            theta, velocity = sgd_step(theta, rep.grad_adapter, velocity, lr, cfg.momentum, cfg.weight_decay)
            model = model.with_params(theta)
            sums += (rep.l_cl, rep.l_ce, rep.l_im, rep.l_all)

        means = sums / steps
        if truth is not None:
            pl_acc = _accuracy(y_tilde, truth)
            sel_acc = _accuracy(y_tilde[in_h], truth[in_h])
            tgt_acc = _accuracy(model.predict(x_all), truth)
        else:
            pl_acc = sel_acc = tgt_acc = None
        entry = EpochLog(epoch + 1, pl_acc, sel_acc, tgt_acc, *map(float, means), int(in_h.sum()))
        log.info("epoch %d: %s", epoch + 1, entry)
        logs.append(entry)
    return model, logs


def _source_split(n: int, val_fraction: float, rng):
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]


def train_source(source: FeatureBundle, cfg: SourceConfig, return_val_accuracy: bool = False):
    """Fit ``W``, ``b`` and the classifier on labelled source data.

    The classifier is parameterised as ``F = V / ||V||`` row-wise, so it has
    unit-norm rows throughout and freezing it afterwards changes nothing.
    Uses a seeded train/validation split; with ``return_val_accuracy`` the
    validation accuracy is returned alongside the model.
    """
    if not source.has_labels:
        raise ValueError("train_source requires a labelled bundle")
    rng = np.random.default_rng(cfg.seed)
    x = source.features.astype(np.float64)
    y = source.labels.astype(np.int64)
    d_in, c = source.feature_dim, source.n_classes
    d = cfg.feature_dim or d_in
    train_idx, val_idx = _source_split(source.n_samples, cfg.val_fraction, rng)

    W = np.eye(d, d_in) if d == d_in else rng.standard_normal((d, d_in)) / math.sqrt(d_in)
    b = np.zeros(d)
    V = rng.standard_normal((c, d))
    theta = np.concatenate([W.ravel(), b, V.ravel()])
    velocity = np.zeros_like(theta)
    nw, nb = W.size, b.size

    def unpack(t):
        return t[:nw].reshape(d, d_in), t[nw : nw + nb], t[nw + nb :].reshape(c, d)

    for _ in range(cfg.epochs):
        order = rng.permutation(train_idx)
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            Wt, bt, Vt = unpack(theta)
            vn = np.linalg.norm(Vt, axis=1, keepdims=True)
            Ft = Vt / vn
            feats = x[idx] @ Wt.T + bt
            _, g_logits = ce_smoothed_grad(feats @ Ft.T, y[idx], cfg.alpha)
            g_feat = g_logits @ Ft
            g_F = g_logits.T @ feats
            g_V = (g_F - Ft * (Ft * g_F).sum(axis=1, keepdims=True)) / vn
            grad = np.concatenate([(g_feat.T @ x[idx]).ravel(), g_feat.sum(axis=0), g_V.ravel()])
            theta, velocity = sgd_step(theta, grad, velocity, cfg.lr, cfg.momentum, cfg.weight_decay)
        if not np.all(np.isfinite(theta)):
            raise NumericError("non-finite parameters during source training")

    model = AdapterModel.with_normalized_classifier(*unpack(theta))
    if not return_val_accuracy:
        return model
    eval_idx = val_idx if val_idx.size else train_idx
    return model, _accuracy(model.predict(x[eval_idx]), y[eval_idx])
