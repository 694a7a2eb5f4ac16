"""Neighbour-vote confidence estimation and per-class confident-set selection.

Also hosts the three single-sample baseline scores (softmax probability,
negative normalised entropy, centroid cosine) used in ablations. Every score
follows the higher-is-more-confident convention so :func:`select_confident`
serves all of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .matrix_io import FeatureBundle
from .pseudo_label import PseudoLabelState, log_softmax, normalize_rows, softmax

BASELINE_KINDS = ("prob", "ent", "cossim")

_KNN_BLOCK = 1024


@dataclass(frozen=True)
class KnnGraph:
    neighbors: np.ndarray  # (N, K) int64
    sims: np.ndarray  # (N, K) float64, non-increasing per row

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


@dataclass(frozen=True)
class ApsResult:
    y_hat: np.ndarray
    p_hat: np.ndarray
    q: np.ndarray
    selected: np.ndarray
    iterations_run: int


def _exact_dot(a, b) -> np.ndarray:
    """``a @ b.T`` accumulated coordinate by coordinate in a fixed order.

    BLAS kernels may round identical columns differently, which would break
    exact ties between duplicate samples; here equal inputs give equal sims.
    """
    out = np.zeros((a.shape[0], b.shape[0]))
    for d in range(a.shape[1]):
        out += a[:, d, None] * b[None, :, d]
    return out


def build_knn(features, k: int) -> KnnGraph:
    """Exact cosine KNN, self excluded, ties broken toward the lower index."""
    x = normalize_rows(features)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"build_knn: need 1 <= k < N, got k={k}, N={n}")
    neighbors = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k))
    for start in range(0, n, _KNN_BLOCK):
        stop = min(start + _KNN_BLOCK, n)
        s = np.clip(_exact_dot(x[start:stop], x), -1.0, 1.0)
        rows = np.arange(stop - start)
        s[rows, rows + start] = -np.inf
        # stable sort on -s keeps equal similarities in index order
        order = np.argsort(-s, axis=1, kind="stable")[:, :k]
        neighbors[start:stop] = order
        sims[start:stop] = np.take_along_axis(s, order, axis=1)
    return KnnGraph(neighbors, sims)


def vote_posterior(graph: KnnGraph, y_current, n_classes: int) -> np.ndarray:
    """Similarity-weighted neighbour vote, averaged over the K neighbours."""
    y_current = np.asarray(y_current)
    n, k = graph.neighbors.shape
    p = np.zeros((n, n_classes))
    rows = np.repeat(np.arange(n), k)
    np.add.at(p, (rows, y_current[graph.neighbors].ravel()), graph.sims.ravel())
    return p / k


def vote_argmax(p_hat) -> np.ndarray:
    return np.asarray(p_hat).argmax(axis=1)


def iterate_votes(graph: KnnGraph, y_tilde, n_classes: int, iters: int = 2):
    """Alternate vote/relabel ``iters`` posterior evaluations deep.

    ``iters`` counts posterior evaluations, so there are ``iters - 1``
    relabelling steps and the last operation is always a posterior. Returns
    ``(y_hat, p_hat)`` where ``y_hat`` are the labels that produced ``p_hat``.
    """
    if iters < 1:
        raise ValueError("iterate_votes: iters must be >= 1")
    y_hat = np.asarray(y_tilde).copy()
    p_hat = vote_posterior(graph, y_hat, n_classes)
    for _ in range(iters - 1):
        y_hat = vote_argmax(p_hat)
        p_hat = vote_posterior(graph, y_hat, n_classes)
    return y_hat, p_hat


def confidence_scores(graph: KnnGraph, y_hat, y_tilde) -> np.ndarray:
    """Mean similarity of neighbours whose current label matches the sample's pseudo-label."""
    y_hat = np.asarray(y_hat)
    y_tilde = np.asarray(y_tilde)
    match = y_hat[graph.neighbors] == y_tilde[:, None]
    return (match * graph.sims).sum(axis=1) / graph.k


def class_quota(n_c: int, gamma: float) -> int:
    """``ceil(gamma * n_c)`` with a one-sample floor for non-empty classes."""
    if n_c == 0:
        return 0
    # guard against 0.7 * 10 == 7.000000000000001
    return max(1, min(n_c, math.ceil(round(gamma * n_c, 9))))


def select_confident(q, y_tilde, gamma: float, ids=None) -> np.ndarray:
    """Top ``ceil(gamma * n_c)`` samples by score within each pseudo-class.

    Ties in ``q`` go to the lower id. Returns the selected ids sorted ascending
    (positions ``0..N-1`` when ``ids`` is None).
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    q = np.asarray(q, dtype=np.float64)
    y_tilde = np.asarray(y_tilde)
    ids = np.arange(q.shape[0]) if ids is None else np.asarray(ids)
    chosen = []
    for c in np.unique(y_tilde):
        members = np.flatnonzero(y_tilde == c)
        # primary key -q, secondary key id
        order = np.lexsort((ids[members], -q[members]))
        chosen.append(ids[members[order[: class_quota(members.size, gamma)]]])
    if not chosen:
        return ids[:0]
    return np.sort(np.concatenate(chosen))


def run_aps(features, y_tilde, n_classes: int, k: int = 4, iters: int = 2, gamma: float = 0.6, ids=None) -> ApsResult:
    """KNN graph, iterated votes, confidence scores and the selected set in one call."""
    graph = build_knn(features, k)
    y_hat, p_hat = iterate_votes(graph, y_tilde, n_classes, iters)
    q = confidence_scores(graph, y_hat, y_tilde)
    selected = select_confident(q, y_tilde, gamma, ids)
    return ApsResult(y_hat=y_hat, p_hat=p_hat, q=q, selected=selected, iterations_run=iters)


def baseline_scores(bundle: FeatureBundle, state: PseudoLabelState, kind: str, y_tilde=None) -> np.ndarray:
    """Single-sample confidence scores, higher meaning more confident.

    ``prob`` is the softmax probability of the pseudo-label, ``ent`` the
    negative prediction entropy divided by C, and ``cossim`` the cosine
    between the feature and its pseudo-class second-stage centroid.
    ``y_tilde`` overrides ``state.y_tilde`` (e.g. for noise-injected labels).
    """
    y = state.y_tilde if y_tilde is None else np.asarray(y_tilde)
    rows = np.arange(bundle.n_samples)
    if kind == "prob":
        return softmax(bundle.logits)[rows, y]
    if kind == "ent":
        p = softmax(bundle.logits)
        plogp = p * log_softmax(bundle.logits)
        return plogp.sum(axis=1) / bundle.n_classes
    if kind == "cossim":
        feats = normalize_rows(bundle.features)
        cents = np.asarray(state.mu1, dtype=np.float64)[y]
        cents = cents / np.linalg.norm(cents, axis=1, keepdims=True)
        return np.clip((feats * cents).sum(axis=1), -1.0, 1.0)
    raise ValueError(f"unknown score kind {kind!r}; expected one of {BASELINE_KINDS}")
