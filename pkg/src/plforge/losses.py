"""Adaptation losses with hand-derived gradients w.r.t. the logits.

Every ``*_grad`` function returns ``(value, d value / d logits)``; the chain
rule to adapter parameters lives in :mod:`plforge.trainer`. All arithmetic is
float64. :func:`grad_check` compares any implemented gradient against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pseudo_label import log_softmax, softmax


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.1
    beta: float = 0.3
    alpha: float = 0.1
    use_cacl: bool = True
    cl_reduction: str = "mean"

    def __post_init__(self):
        if self.cl_reduction not in ("sum", "mean"):
            raise ValueError("cl_reduction must be 'sum' or 'mean'")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")


@dataclass(frozen=True)
class BatchView:
    """2B rows: sample ``b`` sits at row ``2b``, its augmented view at ``2b + 1``."""

    indices: np.ndarray
    logits: np.ndarray
    labels: np.ndarray
    in_H: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        in_h = np.asarray(self.in_H, dtype=bool)
        n = logits.shape[0]
        if n < 2 or n % 2:
            raise ValueError("BatchView needs an even number (>= 2) of rows")
        if labels.shape != (n,) or in_h.shape != (n,) or np.asarray(self.indices).shape != (n,):
            raise ValueError("BatchView: indices, labels and in_H must have one entry per row")
        if np.any(labels[0::2] != labels[1::2]) or np.any(in_h[0::2] != in_h[1::2]):
            raise ValueError("BatchView: a view must share label and in_H with its original")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "in_H", in_h)
        object.__setattr__(self, "indices", np.asarray(self.indices))

    @classmethod
    def from_pairs(cls, indices, logits, labels, in_H) -> "BatchView":
        """Interleave per-sample ``indices``/``labels``/``in_H`` over ``2B`` logit rows."""
        rep = lambda a: np.repeat(np.asarray(a), 2)
        return cls(rep(indices), logits, rep(labels), rep(in_H))


@dataclass(frozen=True)
class LossReport:
    l_cl: float
    l_ce: float
    l_im: float
    l_all: float
    beta: float
    grad_logits: np.ndarray
    grad_adapter: np.ndarray | None = None


def smooth_targets(label: int, n_classes: int, alpha: float) -> np.ndarray:
    t = np.full(n_classes, alpha / n_classes)
    t[label] += 1.0 - alpha
    return t


def ce_smoothed_grad(logits, labels, alpha: float):
    """Label-smoothed cross-entropy averaged over rows, and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m, c = logits.shape
    targets = np.full((m, c), alpha / c)
    targets[np.arange(m), labels] += 1.0 - alpha
    value = -(targets * log_softmax(logits)).sum() / m
    return value, (softmax(logits) - targets) / m


def ce_smoothed(logits, labels, alpha: float) -> float:
    return ce_smoothed_grad(logits, labels, alpha)[0]


def ce_pseudo_grad(batch: BatchView):
    """Plain cross-entropy on confident rows only; zero when none are confident."""
    grad = np.zeros_like(batch.logits)
    mask = batch.in_H
    if not mask.any():
        return 0.0, grad
    value, g = ce_smoothed_grad(batch.logits[mask], batch.labels[mask], 0.0)
    grad[mask] = g
    return value, grad


def ce_pseudo(batch: BatchView) -> float:
    return ce_pseudo_grad(batch)[0]


def positive_pairs(batch: BatchView) -> list[np.ndarray]:
    """Per anchor, the other confident rows sharing its pseudo-label."""
    same = (batch.labels[:, None] == batch.labels[None, :]) & batch.in_H[:, None] & batch.in_H[None, :]
    np.fill_diagonal(same, False)
    return [np.flatnonzero(row) for row in same]


def contrastive_loss_grad(batch: BatchView, tau: float, reduction: str = "sum"):
    """Class-aware supervised contrastive loss on L2-normalised logits.

    Anchors without positives add nothing but still act as negatives in every
    other anchor's denominator. ``reduction="sum"`` adds the per-anchor terms;
    ``"mean"`` divides by the number of anchors that have positives.
    """
    logits = batch.logits
    norms = np.linalg.norm(logits, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("contrastive_loss: zero-norm logit row")
    z = logits / norms
    n = z.shape[0]
    s = z @ z.T / tau
    np.fill_diagonal(s, -np.inf)

    pos = (batch.labels[:, None] == batch.labels[None, :]) & batch.in_H[:, None] & batch.in_H[None, :]
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        return 0.0, np.zeros_like(logits)

    row_max = s.max(axis=1, keepdims=True)
    log_den = row_max[:, 0] + np.log(np.exp(s - row_max).sum(axis=1))
    s_pos = np.where(pos, s, 0.0).sum(axis=1)
    value = float(np.sum(log_den[anchors] - s_pos[anchors] / n_pos[anchors]))
    scale = 1.0 / anchors.sum() if reduction == "mean" else 1.0

    # dL/ds_ia = softmax_a(s_i) - 1[a in J(i)] / |J(i)| for anchors, 0 otherwise
    w = np.exp(s - log_den[:, None])
    w[anchors] -= pos[anchors] / n_pos[anchors, None]
    w[~anchors] = 0.0
    w[np.arange(n), np.arange(n)] = 0.0
    g_z = (w + w.T) @ z * (scale / tau)
    g_logits = (g_z - z * (z * g_z).sum(axis=1, keepdims=True)) / norms
    return value * scale, g_logits


def contrastive_loss(batch: BatchView, tau: float, reduction: str = "sum") -> float:
    return contrastive_loss_grad(batch, tau, reduction)[0]


def _xlogx(x):
    return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def im_loss_grad(logits):
    """Mean per-row entropy minus the entropy of the mean prediction."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.shape[0]
    p = softmax(logits)
    logp = log_softmax(logits)
    ent = -(p * logp).sum(axis=1)
    p_bar = p.mean(axis=0)
    value = ent.mean() + _xlogx(p_bar).sum()

    g_ent = -p * (logp + ent[:, None]) / m
    log_pbar = np.log(np.maximum(p_bar, np.finfo(np.float64).tiny))
    g_div = p * (log_pbar[None, :] - (p * log_pbar).sum(axis=1, keepdims=True)) / m
    return float(value), g_ent + g_div


def im_loss(logits) -> float:
    return im_loss_grad(logits)[0]


def total_loss(batch: BatchView, cfg: ContrastConfig) -> LossReport:
    """Contrastive + beta * confident CE + IM over all 2B rows.

    The contrastive term uses ``cfg.cl_reduction``; with ``cfg.use_cacl``
    False it is dropped (reported 0).
    """
    if cfg.use_cacl:
        l_cl, g_cl = contrastive_loss_grad(batch, cfg.tau, cfg.cl_reduction)
    else:
        l_cl, g_cl = 0.0, 0.0
    l_ce, g_ce = ce_pseudo_grad(batch)
    l_im, g_im = im_loss_grad(batch.logits)
    l_all = l_cl + cfg.beta * l_ce + l_im
    grad = g_cl + cfg.beta * g_ce + g_im
    return LossReport(float(l_cl), float(l_ce), float(l_im), float(l_all), cfg.beta, grad)


def finite_difference(fn, params, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``params`` (any shape)."""
    p = np.array(params, dtype=np.float64)
    flat = p.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(p)
        flat[i] = orig - step
        f_minus = fn(p)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2 * step)
    return grad.reshape(p.shape)


def grad_check(loss_fn, params, step: float = 1e-4, grad_fn=None) -> float:
    """Max over coordinates of ``|g - g_fd| / max(1, |g_fd|)``.

    ``loss_fn(params)`` may return either a scalar (then ``grad_fn`` supplies
    the implemented gradient) or a ``(value, grad)`` pair.
    """
    p = np.array(params, dtype=np.float64)
    if grad_fn is None:
        out = loss_fn(p)
        if not isinstance(out, tuple):
            raise TypeError("grad_check: loss_fn must return (value, grad) when grad_fn is None")
        value, g_impl = out
        scalar = lambda x: loss_fn(x)[0]
    else:
        value, g_impl = loss_fn(p), grad_fn(p)
        scalar = loss_fn
    if not np.isfinite(value):
        raise ValueError("grad_check: loss not finite at params")
    g_fd = finite_difference(scalar, p, step)
    g_impl = np.asarray(g_impl, dtype=np.float64).reshape(p.shape)
    return float(np.max(np.abs(g_impl - g_fd) / np.maximum(1.0, np.abs(g_fd))))
