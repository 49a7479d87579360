"""Content-adaptive query grouping: nearest-centroid assignment on the unit
sphere plus exponential-moving-average centroid tracking.

Queries are L2-normalized before comparison and centroids are kept unit-norm,
so assignment is by cosine similarity. Ties break to the lowest group index
and empty groups keep their previous centroid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensors import as_f64, l2_normalize_rows, make_rng

# Default EMA rate when no schedule is supplied.
DEFAULT_TAU = 0.999


def tau_from_lr(lr: float) -> float:
    """The published EMA schedule tied to the learning rate (0.1 * lr).

    Exposed as an option only: for typical lr this is nearly full replacement
    each step, so the fixed DEFAULT_TAU is the default everywhere here.
    """
    tau = 0.1 * lr
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"derived tau {tau} outside [0, 1]")
    return tau


@dataclass
class Centroids:
    """Unit-norm cluster centers, one row per group, with EMA rate tau."""

    e: np.ndarray  # (G, C) float64, rows unit-norm
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.e = as_f64(self.e)
        if self.e.ndim != 2 or self.e.shape[0] < 1:
            raise ValueError(f"centroids must be a GxC matrix, got {self.e.shape}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")

    @property
    def groups(self) -> int:
        return self.e.shape[0]

    @property
    def dim(self) -> int:
        return self.e.shape[1]


@dataclass(frozen=True)
class GroupAssignment:
    """Per-token group labels with the permutations that make groups contiguous.

    ``sort_perm[p]`` is the original index of the token at sorted slot ``p``;
    ``inv_perm`` is its inverse. The sort is stable, so tokens of one group
    keep their original relative order.
    """

    group_of: np.ndarray  # (L,) int64 in [0, G)
    sizes: np.ndarray     # (G,) int64, sums to L
    sort_perm: np.ndarray
    inv_perm: np.ndarray

    @property
    def tokens(self) -> int:
        return self.group_of.shape[0]

    @property
    def groups(self) -> int:
        return self.sizes.shape[0]


def assignment_from_labels(labels: np.ndarray, groups: int) -> GroupAssignment:
    """Build a GroupAssignment (sizes + stable permutations) from raw labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() >= groups):
        raise ValueError(f"labels outside [0, {groups})")
    sizes = np.bincount(labels, minlength=groups).astype(np.int64)
    sort_perm = np.argsort(labels, kind="stable").astype(np.int64)
    inv_perm = np.empty_like(sort_perm)
    inv_perm[sort_perm] = np.arange(labels.size, dtype=np.int64)
    return GroupAssignment(labels, sizes, sort_perm, inv_perm)


def init_centroids(groups: int, dim: int, rng: np.random.Generator,
                   tau: float = DEFAULT_TAU) -> Centroids:
    """Isotropic Gaussian rows, L2-normalized; deterministic given the generator."""
    if groups < 1 or dim < 1:
        raise ValueError("groups and dim must be >= 1")
    e = rng.standard_normal((groups, dim))
    return Centroids(l2_normalize_rows(e), tau=tau)


def assign_groups(queries: np.ndarray, centroids: Centroids) -> GroupAssignment:
    """Assign each query to the centroid with the largest cosine similarity.

    Queries are normalized first, so per-token assignment is scale invariant.
    Exact similarity ties (including the all-zero query) go to the lowest
    group index.
    """
    queries = as_f64(queries)
    if queries.ndim != 2 or queries.shape[1] != centroids.dim:
        raise ValueError(
            f"queries {queries.shape} incompatible with centroids "
            f"({centroids.groups}x{centroids.dim})"
        )
    sims = l2_normalize_rows(queries) @ centroids.e.T  # (L, G)
    labels = np.argmax(sims, axis=1)  # argmax takes the first (lowest) maximum
    return assignment_from_labels(labels, centroids.groups)


def update_centroids(centroids: Centroids, queries: np.ndarray,
                     assign: GroupAssignment) -> Centroids:
    """One EMA step: blend each centroid toward the normalized mean of its members.

    Groups without members keep their row bit-identical. Returns a new value;
    the input is not mutated.
    """
    queries = as_f64(queries)
    if assign.tokens != queries.shape[0] or assign.groups != centroids.groups:
        raise ValueError("assignment does not match queries/centroids")
    tau = centroids.tau
    e = centroids.e.copy()
    qn = l2_normalize_rows(queries)
    for j in range(centroids.groups):
        members = qn[assign.group_of == j]
        if members.shape[0] == 0:
            continue
        current = members.mean(axis=0)
        blended = tau * centroids.e[j] + (1.0 - tau) * current
        n = np.linalg.norm(blended)
        e[j] = blended / n if n > 1e-12 else blended
    return Centroids(e, tau=tau)


def kmeans_bootstrap(queries: np.ndarray, groups: int, iters: int,
                     rng: np.random.Generator,
                     tau: float = DEFAULT_TAU) -> Centroids:
    """Warm-start centroids with Lloyd iterations on the unit sphere.

    Starts from init_centroids and runs ``iters`` rounds of assignment plus a
    tau=0 update (full replacement by the normalized member mean). The
    returned Centroids carry ``tau`` for subsequent EMA tracking.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    queries = as_f64(queries)
    cents = init_centroids(groups, queries.shape[1], rng, tau=tau)
    for _ in range(iters):
        assign = assign_groups(queries, cents)
        step = update_centroids(Centroids(cents.e, tau=0.0), queries, assign)
        cents = Centroids(step.e, tau=tau)
    return cents


def centroids_to_json(centroids: Centroids) -> str:
    """Checkpoint form: {"G":..., "C":..., "tau":..., "e":[[...]]}."""
    return json.dumps({
        "G": centroids.groups,
        "C": centroids.dim,
        "tau": centroids.tau,
        "e": centroids.e.tolist(),
    })


def centroids_from_json(text: str) -> Centroids:
    obj = json.loads(text)
    e = as_f64(obj["e"])
    if e.shape != (int(obj["G"]), int(obj["C"])):
        raise ValueError("centroid matrix does not match declared G/C")
    return Centroids(e, tau=float(obj["tau"]))
