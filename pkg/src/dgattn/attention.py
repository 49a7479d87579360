"""Dynamic group attention: routed forward pass, hand-derived backward pass,
brute-force oracles, and the operation-count model.

Per head, a forward pass runs: assign queries to centroid groups, pick each
group's top-k keys, sort tokens so groups are contiguous, score and mix
through the tiled engine, then scatter rows back to their original positions.
Routing (assignment and selection) is treated as a constant in the backward
pass; gradients flow only through the matrix products and the softmax.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grouping import (DEFAULT_TAU, Centroids, GroupAssignment, assign_groups,
                       init_centroids, update_centroids)
from .grouped_mm import (DEFAULT_TILE, EngineStats, GroupedLayout, TilePlan,
                         build_tile_plan, form1, form2, form3, form4,
                         layout_from_assignment, scatter_back, sort_by_group)
from .selection import SelectionIndex, gather_rows, select_topk
from .tensors import as_f64, l2_normalize_rows, matmul, softmax_rows, thread_count


@dataclass(frozen=True)
class DgAttentionConfig:
    """Shape and behavior knobs for one attention operator.

    ``literal_appendix_scaling`` switches the probability scaling from the
    conventional softmax(scores / sqrt(C)) to softmax(scores) / sqrt(C); the
    latter does not produce row-stochastic weights and exists only for
    comparison, off by default.
    """

    heads: int
    head_dim: int
    groups: int
    top_k: int
    tau: float = DEFAULT_TAU
    tile: int = DEFAULT_TILE
    plan_mode: str = "split"
    train_mode: bool = False
    literal_appendix_scaling: bool = False

    def __post_init__(self):
        for name in ("heads", "head_dim", "groups", "top_k", "tile"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim


def make_centroids(cfg: DgAttentionConfig, rng) -> list[Centroids]:
    """One centroid set per head; heads share nothing."""
    return [init_centroids(cfg.groups, cfg.head_dim, rng, cfg.tau)
            for _ in range(cfg.heads)]


@dataclass
class HeadCache:
    """Everything one head's backward pass needs, held without recomputation."""

    assign: GroupAssignment
    layout: GroupedLayout
    plan: TilePlan
    sel: SelectionIndex
    q_sorted: np.ndarray
    p_raw: np.ndarray   # pre-softmax scores, sorted row order
    p_hat: np.ndarray   # the weights actually multiplied into the values
    keys: np.ndarray
    values: np.ndarray


@dataclass
class ForwardCache:
    cfg: DgAttentionConfig
    tokens: int
    heads: list[HeadCache]
    stats: EngineStats
    new_centroids: list[Centroids] | None = None


@dataclass(frozen=True)
class GradBundle:
    """Gradients with respect to the three attention inputs."""

    dxq: np.ndarray
    dxk: np.ndarray
    dxv: np.ndarray


def _head_slices(x: np.ndarray, cfg: DgAttentionConfig) -> list[np.ndarray]:
    d = cfg.head_dim
    return [x[:, h * d:(h + 1) * d] for h in range(cfg.heads)]


def _check_inputs(xq, xk, xv, cfg, centroids):
    if xq.ndim != 2 or xq.shape[1] != cfg.channels:
        raise ValueError(
            f"queries must be tokens x {cfg.channels}, got {xq.shape}")
    if xk.shape != xq.shape or xv.shape != xq.shape:
        raise ValueError("queries, keys, and values must share one shape")
    if cfg.top_k > xq.shape[0]:
        raise ValueError(
            f"top_k {cfg.top_k} exceeds token count {xq.shape[0]}")
    if len(centroids) != cfg.heads:
        raise ValueError(
            f"need {cfg.heads} centroid sets, got {len(centroids)}")
    for cent in centroids:
        if cent.groups != cfg.groups or cent.dim != cfg.head_dim:
            raise ValueError(
                f"centroid shape ({cent.groups} x {cent.dim}) does not match "
                f"config ({cfg.groups} x {cfg.head_dim})")


def dg_attention_forward(xq: np.ndarray, xk: np.ndarray, xv: np.ndarray,
                         cfg: DgAttentionConfig,
                         centroids: list[Centroids]):
    """Multi-head grouped attention. Returns (output, cache).

    Heads own private centroids, assignments, and selections, and are
    concatenated on the channel axis. With ``train_mode`` the cache carries
    EMA-updated centroids in ``new_centroids``; inputs are never mutated.
    """
    xq = as_f64(xq)
    xk = as_f64(xk)
    xv = as_f64(xv)
    _check_inputs(xq, xk, xv, cfg, centroids)
    tokens = xq.shape[0]
    scale = math.sqrt(cfg.head_dim)
    q_h, k_h, v_h = (_head_slices(x, cfg) for x in (xq, xk, xv))
    out = np.zeros_like(xq)
    head_caches: list[HeadCache | None] = [None] * cfg.heads
    head_stats = [EngineStats() for _ in range(cfg.heads)]
    updated: list[Centroids | None] = [None] * cfg.heads

    def run_head(h: int):
        assign = assign_groups(q_h[h], centroids[h])
        layout = layout_from_assignment(assign)
        plan = build_tile_plan(layout, cfg.tile, cfg.plan_mode)
        sel = select_topk(centroids[h], k_h[h], cfg.top_k)
        q_sorted = sort_by_group(q_h[h], layout)
        p_raw = form1(q_sorted, k_h[h], sel, layout, plan, head_stats[h])
        if cfg.literal_appendix_scaling:
            p_hat = softmax_rows(p_raw, 1.0) / scale
        else:
            p_hat = softmax_rows(p_raw, scale)
        y_sorted = form2(p_hat, v_h[h], sel, layout, plan, head_stats[h])
        out[:, h * cfg.head_dim:(h + 1) * cfg.head_dim] = \
            scatter_back(y_sorted, layout)
        head_caches[h] = HeadCache(assign, layout, plan, sel, q_sorted,
                                   p_raw, p_hat, k_h[h], v_h[h])
        if cfg.train_mode:
            updated[h] = update_centroids(centroids[h], q_h[h], assign)

    _run_per_head(run_head, cfg.heads)
    stats = EngineStats()
    for hs in head_stats:
        stats.tiles += hs.tiles
        stats.row_slots += hs.row_slots
        stats.masked_rows += hs.masked_rows
        stats.gathered += hs.gathered
    cache = ForwardCache(cfg, tokens, head_caches, stats,
                         list(updated) if cfg.train_mode else None)
    return out, cache


def dg_attention_backward(cache: ForwardCache, dy: np.ndarray) -> GradBundle:
    """Gradients for all three inputs given the forward cache.

    Assignment and selection are constants here; the chain runs through the
    two tiled products and the softmax. Keys and values chosen by several
    groups accumulate every group's contribution in ascending group order.
    """
    dy = as_f64(dy)
    cfg = cache.cfg
    if dy.shape != (cache.tokens, cfg.channels):
        raise ValueError(
            f"upstream gradient shape {dy.shape} does not match cached "
            f"forward ({cache.tokens} x {cfg.channels})")
    scale = math.sqrt(cfg.head_dim)
    dxq = np.zeros_like(dy)
    dxk = np.zeros_like(dy)
    dxv = np.zeros_like(dy)
    dy_h = _head_slices(dy, cfg)

    def run_head(h: int):
        hc = cache.heads[h]
        dy_sorted = sort_by_group(dy_h[h], hc.layout)
        # Gradient w.r.t. the mixing weights: dY rows against selected values.
        g = form1(dy_sorted, hc.values, hc.sel, hc.layout, hc.plan)
        if cfg.literal_appendix_scaling:
            s = hc.p_hat * scale
            gs = g / scale
            dp = s * (gs - np.sum(gs * s, axis=1, keepdims=True))
        else:
            s = hc.p_hat
            dp = s * (g - np.sum(g * s, axis=1, keepdims=True)) / scale
        dq_sorted = form2(dp, hc.keys, hc.sel, hc.layout, hc.plan)
        lo = h * cfg.head_dim
        hi = lo + cfg.head_dim
        dxq[:, lo:hi] = scatter_back(dq_sorted, hc.layout)
        dxk[:, lo:hi] = form3(hc.q_sorted, dp, hc.sel, hc.layout, hc.plan)
        dxv[:, lo:hi] = form4(hc.p_hat, dy_sorted, hc.sel, hc.layout, hc.plan)

    _run_per_head(run_head, cfg.heads)
    return GradBundle(dxq, dxk, dxv)


def _run_per_head(fn, heads: int):
    workers = min(heads, thread_count())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fn, range(heads)))
    else:
        for h in range(heads):
            fn(h)


def dense_attention_oracle(xq: np.ndarray, xk: np.ndarray,
                           xv: np.ndarray) -> np.ndarray:
    """Single-head full attention by direct dense ops: every query attends to
    every key. Reference for the degenerate one-group, k = L case."""
    xq = as_f64(xq)
    xk = as_f64(xk)
    xv = as_f64(xv)
    scale = math.sqrt(xq.shape[1])
    p = softmax_rows(matmul(xq, xk.T), scale)
    return matmul(p, xv)


def grouped_attention_oracle(xq: np.ndarray, xk: np.ndarray, xv: np.ndarray,
                             assign: GroupAssignment,
                             sel: SelectionIndex) -> np.ndarray:
    """Single-head reference: explicit per-group loop, no sorting, no tiling.

    For each group, gather its selected keys/values, run dense attention on
    the small problem, and write rows back at their original positions.
    """
    xq = as_f64(xq)
    xk = as_f64(xk)
    xv = as_f64(xv)
    scale = math.sqrt(xq.shape[1])
    out = np.zeros_like(xq)
    for j in range(assign.groups):
        members = np.nonzero(assign.group_of == j)[0]
        if members.size == 0:
            continue
        keys_j = gather_rows(xk, sel.id[j])
        vals_j = gather_rows(xv, sel.id[j])
        p = softmax_rows(matmul(xq[members], keys_j.T), scale)
        out[members] = matmul(p, vals_j)
    return out


@dataclass(frozen=True)
class ComplexityReport:
    """Operation counts for dense attention versus grouped attention.

    ``term_attention`` covers scoring plus mixing against k keys per token,
    ``term_routing`` the query-to-centroid similarities, and ``term_sort`` the
    per-group top-k partial sort (natural log of the token count).
    """

    tokens: int
    channels: int
    groups: int
    top_k: int
    omega_global: float
    omega_dg: float
    term_attention: float
    term_routing: float
    term_sort: float

    @property
    def ratio(self) -> float:
        return self.omega_dg / self.omega_global

    def as_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "channels": self.channels,
            "groups": self.groups,
            "top_k": self.top_k,
            "omega_global": self.omega_global,
            "omega_dg": self.omega_dg,
            "ratio": self.ratio,
            "term_attention": self.term_attention,
            "term_routing": self.term_routing,
            "term_sort": self.term_sort,
        }


def complexity(tokens: int, channels: int, groups: int,
               top_k: int) -> ComplexityReport:
    """Count model: grouped attention spends 2kLC on attention itself, 2LGC
    on routing, and kG ln L on selection, against 2 L^2 C for full attention."""
    for name, v in (("tokens", tokens), ("channels", channels),
                    ("groups", groups), ("top_k", top_k)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    omega_global = 2.0 * tokens * tokens * channels
    term_attention = 2.0 * top_k * tokens * channels
    term_routing = 2.0 * tokens * groups * channels
    term_sort = top_k * groups * math.log(tokens)
    omega_dg = term_attention + term_routing + term_sort
    return ComplexityReport(tokens, channels, groups, top_k, omega_global,
                            omega_dg, term_attention, term_routing, term_sort)


def routing_margin(xq: np.ndarray, xk: np.ndarray,
                   centroids: Centroids, top_k: int) -> float:
    """Smallest score gap protecting the routing decisions.

    Returns the minimum over (a) each token's gap between its best and
    second-best centroid similarity and (b) each group's gap between its
    lowest selected and highest unselected key score. Infinite when no
    competing alternative exists (one group and k = L). Finite-difference
    tests require this to dominate the probe step so perturbations cannot
    flip the routing.
    """
    xq = as_f64(xq)
    xk = as_f64(xk)
    margin = math.inf
    if centroids.groups > 1:
        sims = matmul(l2_normalize_rows(xq), centroids.e.T)
        part = np.sort(sims, axis=1)
        margin = min(margin, float(np.min(part[:, -1] - part[:, -2])))
    if top_k < xk.shape[0]:
        scores = matmul(centroids.e, xk.T)
        ordered = np.sort(scores, axis=1)[:, ::-1]
        margin = min(margin,
                     float(np.min(ordered[:, top_k - 1] - ordered[:, top_k])))
    return margin
