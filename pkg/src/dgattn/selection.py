"""Per-group top-k key/value selection by centroid-key dot product.

Keys enter the score raw (no normalization); only the query side of grouping
is normalized. Each selection row is ordered by score descending with ties in
ascending index order, and attention is invariant to that ordering anyway.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .grouping import Centroids
from .tensors import as_f64

# Rows longer than this switch from a full sort to partial selection.
FULL_SORT_MAX = 4096


@dataclass(frozen=True)
class SelectionIndex:
    """G x k selected key indices plus their centroid-key scores."""

    id: np.ndarray      # (G, k) int64, distinct within each row
    scores: np.ndarray  # (G, k) float64, non-increasing within each row

    @property
    def groups(self) -> int:
        return self.id.shape[0]

    @property
    def k(self) -> int:
        return self.id.shape[1]


def _topk_row_sorted(scores: np.ndarray, k: int) -> np.ndarray:
    # Full sort: score descending, index ascending on ties.
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k]


def _topk_row_partial(scores: np.ndarray, k: int) -> np.ndarray:
    # Partial selection with the same tie contract as the full sort.
    n = scores.shape[0]
    thr = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > thr)
    need = k - above.shape[0]
    at = np.flatnonzero(scores == thr)[:need]
    chosen = np.concatenate([above, at])
    order = np.lexsort((chosen, -scores[chosen]))
    return chosen[order]


def select_topk(centroids: Centroids, keys: np.ndarray, k: int) -> SelectionIndex:
    """For each group, the k keys with the largest dot product against its centroid.

    Raises ValueError unless 1 <= k <= L. Row order is score descending; equal
    scores appear in ascending index order.
    """
    keys = as_f64(keys)
    if keys.ndim != 2 or keys.shape[1] != centroids.dim:
        raise ValueError(
            f"keys {keys.shape} incompatible with centroids "
            f"({centroids.groups}x{centroids.dim})"
        )
    n_keys = keys.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n_keys:
        raise ValueError(f"k={k} exceeds key count {n_keys}")
    all_scores = centroids.e @ keys.T  # (G, L)
    pick = _topk_row_sorted if n_keys <= FULL_SORT_MAX else _topk_row_partial
    idx = np.empty((centroids.groups, k), dtype=np.int64)
    for j in range(centroids.groups):
        idx[j] = pick(all_scores[j], k)
    scores = np.take_along_axis(all_scores, idx, axis=1)
    return SelectionIndex(idx, scores)


def gather_rows(src: np.ndarray, idx_row) -> np.ndarray:
    """Rows of ``src`` at the given indices, in index-list order."""
    src = as_f64(src)
    idx = np.asarray(idx_row, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= src.shape[0]):
        raise IndexError(f"index out of range for {src.shape[0]} rows")
    return src[idx]


def selection_to_json(sel: SelectionIndex) -> str:
    return json.dumps({
        "G": sel.groups,
        "k": sel.k,
        "id": sel.id.tolist(),
        "scores": sel.scores.tolist(),
    })


def selection_from_json(text: str) -> SelectionIndex:
    obj = json.loads(text)
    idx = np.asarray(obj["id"], dtype=np.int64)
    scores = as_f64(obj["scores"])
    if idx.shape != scores.shape or idx.shape != (int(obj["G"]), int(obj["k"])):
        raise ValueError("selection arrays do not match declared G/k")
    return SelectionIndex(idx, scores)
