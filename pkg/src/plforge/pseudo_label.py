"""Two-stage nearest-centroid pseudo-labelling.

Stage one builds prediction-weighted class centroids and assigns every sample
to the closest one by cosine similarity; stage two recomputes hard-assignment
centroids from those labels and assigns again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix_io import FeatureBundle

EPS = 1e-8


def softmax(logits) -> np.ndarray:
    """Row-wise softmax in float64, stabilised by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: non-finite input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine_sim: zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def normalize_rows(x) -> np.ndarray:
    """L2-normalise rows (float64); zero rows raise."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm row at index {int(np.flatnonzero(norms[:, 0] == 0)[0])}")
    return x / norms


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` and ``b``."""
    return np.clip(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


@dataclass(frozen=True)
class PseudoLabelState:
    """Centroids and labels from both stages.

    ``empty`` flags classes with no stage-one members; their ``mu1`` row is a
    copy of the ``mu0`` row.
    """

    mu0: np.ndarray
    mu1: np.ndarray
    y0: np.ndarray
    y_tilde: np.ndarray
    empty: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.mu0.shape[0]


def compute_mu0(bundle: FeatureBundle) -> np.ndarray:
    """Softmax-weighted class centroids, shape (C, D)."""
    probs = softmax(bundle.logits)
    feats = bundle.features.astype(np.float64)
    return (probs.T @ feats) / (probs.sum(axis=0)[:, None] + EPS)


def assign_nearest(features, centroids, usable=None) -> np.ndarray:
    """Index of the most cosine-similar usable centroid per row.

    Centroid rows that are flagged unusable or have zero norm never win; ties
    go to the lowest class index (``argmax`` returns the first maximum).
    """
    feats = normalize_rows(features)
    cents = np.asarray(centroids, dtype=np.float64)
    norms = np.linalg.norm(cents, axis=1)
    ok = norms > 0
    if usable is not None:
        ok &= np.asarray(usable, dtype=bool)
    if not ok.any():
        raise ValueError("assign_nearest: no usable centroid")
    sims = np.full((feats.shape[0], cents.shape[0]), -np.inf)
    sims[:, ok] = np.clip(feats @ (cents[ok] / norms[ok, None]).T, -1.0, 1.0)
    return sims.argmax(axis=1)


def refine_labels(bundle: FeatureBundle, y0, mu0=None):
    """Hard-assignment centroids from ``y0`` and the labels they induce.

    Returns ``(mu1, y_tilde, empty)``. Classes without members keep their
    ``mu0`` row (computed from ``bundle`` when not given), are flagged, and
    take no part in the second assignment.
    """
    y0 = np.asarray(y0)
    feats = bundle.features.astype(np.float64)
    c = bundle.n_classes
    counts = np.bincount(y0, minlength=c)
    empty = counts == 0
    sums = np.zeros((c, feats.shape[1]))
    np.add.at(sums, y0, feats)
    mu1 = sums / np.maximum(counts, 1)[:, None]
    if empty.any():
        if mu0 is None:
            mu0 = compute_mu0(bundle)
        mu1[empty] = mu0[empty]
    y_tilde = assign_nearest(feats, mu1, usable=~empty)
    return mu1, y_tilde, empty


def generate_pseudo_labels(bundle: FeatureBundle) -> PseudoLabelState:
    mu0 = compute_mu0(bundle)
    y0 = assign_nearest(bundle.features, mu0)
    mu1, y_tilde, empty = refine_labels(bundle, y0, mu0)
    return PseudoLabelState(mu0=mu0, mu1=mu1, y0=y0, y_tilde=y_tilde, empty=empty)
