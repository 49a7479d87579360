"""Group-structure visualization: run routing on a token grid and render the
assignment as a grayscale map.

The synthetic input is a grid whose left and right halves carry different
feature directions, so bootstrapped centroids should split it cleanly - an
eyeball check (and a testable one: majority label per half) that grouping
follows content, not position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grouping import Centroids, assign_groups, kmeans_bootstrap
from .selection import SelectionIndex, select_topk, selection_to_json
from .tensors import as_f64, make_rng


@dataclass
class VizResult:
    grid: tuple[int, int]
    group_map: np.ndarray        # (height, width) int group ids
    centroids: Centroids
    selection: SelectionIndex

    def selection_json(self) -> str:
        return selection_to_json(self.selection)


def two_blob_tokens(grid: int, channels: int, rng,
                    noise: float = 0.15) -> np.ndarray:
    """Grid of feature vectors: left half near one direction, right half near
    an orthogonal one, plus noise. Shape (grid, grid, channels)."""
    if channels < 2:
        raise ValueError("need at least 2 channels for two separated blobs")
    u = np.zeros(channels)
    u[0] = 1.0
    v = np.zeros(channels)
    v[1] = 1.0
    x = noise * rng.standard_normal((grid, grid, channels))
    half = grid // 2
    x[:, :half] += u
    x[:, half:] += v
    return x


def group_levels(group_map: np.ndarray, groups: int) -> np.ndarray:
    """Map group ids to evenly spaced gray levels (uint8)."""
    if groups == 1:
        return np.zeros_like(group_map, dtype=np.uint8)
    step = 255.0 / (groups - 1)
    return np.round(group_map * step).astype(np.uint8)


def write_pgm(levels: np.ndarray) -> bytes:
    """Binary PGM (P5), maxval 255; dimensions written width then height."""
    if levels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D gray image, got shape {levels.shape}")
    h, w = levels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + levels.astype(np.uint8).tobytes()


def viz_run(grid: int = 16, channels: int = 8, groups: int = 2,
            top_k: int = 8, seed: int = 0, bootstrap_iters: int = 10,
            tokens: np.ndarray | None = None) -> VizResult:
    """Bootstrap centroids on a token grid, assign groups, select keys.

    ``tokens`` overrides the synthetic input; it must be height x width x
    channels. Keys are the tokens themselves here: the map shows pure routing
    structure with no projections in the way.
    """
    rng = make_rng(seed)
    if tokens is None:
        tokens = two_blob_tokens(grid, channels, rng)
    tokens = as_f64(tokens)
    if tokens.ndim != 3:
        raise ValueError(
            f"token grid must be height x width x channels, got {tokens.shape}")
    h, w, _ = tokens.shape
    flat = tokens.reshape(h * w, tokens.shape[2])
    if top_k > flat.shape[0]:
        raise ValueError(f"top_k {top_k} exceeds token count {flat.shape[0]}")
    cents = kmeans_bootstrap(flat, groups, bootstrap_iters, rng)
    assign = assign_groups(flat, cents)
    sel = select_topk(cents, flat, top_k)
    return VizResult((h, w), assign.group_of.reshape(h, w), cents, sel)
