"""Tile-scheduled group-wise matrix multiplication.

Groups hold different numbers of rows, so none of the four products here fit a
single dense matmul. The engine reproduces the data movement of a blocked GPU
kernel in portable form: rows are sorted so each group is contiguous, work is
cut into T x T tiles, key/value rows are gathered per tile through the
selection index instead of materializing per-group operands, and gradient
tiles are scatter-added back into the shared key/value rows.

Two scheduling modes are provided and cross-checked against each other:

* ``split``   - tiles never cross a group boundary; no masking is needed and
  each tile is one unchunked product. This is the default path.
* ``aligned`` - tiles start at fixed multiples of T regardless of boundaries,
  so a tile may touch several groups; rows outside the active group are
  zeroized in the loaded slab (set to zero, never multiplied), and reductions
  run chunk by chunk in ascending order.

The four forms:

* form1: per-group ``Q_j @ K_sel_j^T``  (scores; also dY @ V_sel^T in backward)
* form2: per-group ``P_j @ V_sel_j``    (outputs; also dP @ K_sel in backward)
* form3: per-group ``Q_j^T @ dP_j`` scatter-added into key-row gradients
* form4: per-group ``P_j^T @ dY_j`` scatter-added into value-row gradients

Forms 3/4 accumulate group contributions in ascending group order, so results
are deterministic even when several groups select the same key/value row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grouping import GroupAssignment
from .selection import SelectionIndex
from .tensors import as_f64

DEFAULT_TILE = 16


def _mm_nn(a, b):
    """a @ b via einsum: fixed reduction order, row results independent of
    which other rows share the slab (needed for bitwise permutation tests)."""
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def _mm_nt(a, b):
    """a @ b.T via einsum, same determinism contract as _mm_nn."""
    return np.einsum("ik,jk->ij", a, b, optimize=False)


def _mm_tn(a, b):
    """a.T @ b via einsum, same determinism contract as _mm_nn."""
    return np.einsum("ki,kj->ij", a, b, optimize=False)


@dataclass(frozen=True)
class GroupedLayout:
    """Assignment plus the prefix-sum offsets delimiting each group's row span."""

    assign: GroupAssignment
    offsets: np.ndarray  # (G + 1,) int64, offsets[0] = 0, offsets[G] = L

    @property
    def tokens(self) -> int:
        return self.assign.tokens

    @property
    def groups(self) -> int:
        return self.assign.groups

    def span(self, j: int) -> tuple[int, int]:
        return int(self.offsets[j]), int(self.offsets[j + 1])


def layout_from_assignment(assign: GroupAssignment) -> GroupedLayout:
    offsets = np.zeros(assign.groups + 1, dtype=np.int64)
    np.cumsum(assign.sizes, out=offsets[1:])
    return GroupedLayout(assign, offsets)


@dataclass(frozen=True)
class RowTile:
    """A T-row slab of the sorted row space attributed to one group.

    ``mask`` is None when the slab lies entirely inside the group's span
    (split mode); otherwise it flags which slab rows belong to the group.
    """

    group: int
    start: int
    end: int
    mask: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TilePlan:
    """Row tiling of a GroupedLayout for a given tile size T.

    ``row_tiles`` drive forms 1/2 (output rows); ``group_tiles[j]`` lists the
    same slabs per group in ascending position order and drives the reduction
    chunking of forms 3/4.
    """

    tile: int
    mode: str  # "split" or "aligned"
    row_tiles: tuple[RowTile, ...]
    group_tiles: tuple[tuple[RowTile, ...], ...]

    def output_tile_count(self, n_cols: int) -> int:
        """Work items for forms 1/2: one per (row slab, T-column block)."""
        blocks = -(-n_cols // self.tile)
        return len(self.row_tiles) * blocks

    def scatter_tile_count(self, a_cols: int, b_cols: int) -> int:
        """Work items for forms 3/4: one per (group row chunk, output tile)."""
        blocks = (-(-a_cols // self.tile)) * (-(-b_cols // self.tile))
        return sum(len(chunks) for chunks in self.group_tiles) * blocks


def build_tile_plan(layout: GroupedLayout, tile: int = DEFAULT_TILE,
                    mode: str = "split") -> TilePlan:
    if tile < 1:
        raise ValueError(f"tile size must be >= 1, got {tile}")
    if mode not in ("split", "aligned"):
        raise ValueError(f"unknown plan mode {mode!r}")
    n = layout.tokens
    tiles: list[RowTile] = []
    if mode == "split":
        for j in range(layout.groups):
            lo, hi = layout.span(j)
            for s in range(lo, hi, tile):
                tiles.append(RowTile(j, s, min(s + tile, hi)))
    else:
        for base in range(0, n, tile):
            end = min(base + tile, n)
            for j in range(layout.groups):
                lo, hi = layout.span(j)
                if lo >= end or hi <= base:
                    continue
                mask = np.zeros(end - base, dtype=bool)
                mask[max(lo, base) - base:min(hi, end) - base] = True
                tiles.append(RowTile(j, base, end, mask))
    per_group: list[list[RowTile]] = [[] for _ in range(layout.groups)]
    for t in tiles:
        per_group[t.group].append(t)
    return TilePlan(tile, mode, tuple(tiles),
                    tuple(tuple(g) for g in per_group))


@dataclass
class EngineStats:
    """Counters accumulated by the engine (one instance may span many calls).

    ``tiles`` counts innermost tile multiplications, ``row_slots`` the row
    positions those tiles spanned, ``masked_rows`` how many of them were
    zeroized, and ``gathered`` the key/value elements loaded through the
    selection index.
    """

    tiles: int = 0
    row_slots: int = 0
    masked_rows: int = 0
    gathered: int = 0

    @property
    def masked_row_fraction(self) -> float:
        return self.masked_rows / self.row_slots if self.row_slots else 0.0

    @property
    def gathered_bytes(self) -> int:
        return 8 * self.gathered

    def as_dict(self) -> dict:
        return {
            "tiles": self.tiles,
            "row_slots": self.row_slots,
            "masked_rows": self.masked_rows,
            "masked_row_fraction": self.masked_row_fraction,
            "gathered_values": self.gathered,
            "gathered_bytes": self.gathered_bytes,
        }


def sort_by_group(x: np.ndarray, layout: GroupedLayout) -> np.ndarray:
    """Permute rows so each group occupies its contiguous span (stable)."""
    x = as_f64(x)
    if x.shape[0] != layout.tokens:
        raise ValueError(f"{x.shape[0]} rows, layout expects {layout.tokens}")
    return x[layout.assign.sort_perm]


def scatter_back(y_sorted: np.ndarray, layout: GroupedLayout) -> np.ndarray:
    """Exact inverse of sort_by_group."""
    y_sorted = as_f64(y_sorted)
    if y_sorted.shape[0] != layout.tokens:
        raise ValueError(f"{y_sorted.shape[0]} rows, layout expects {layout.tokens}")
    return y_sorted[layout.assign.inv_perm]


def _load_slab(x: np.ndarray, rt: RowTile, poison: bool) -> np.ndarray:
    """Load a slab of rows, zeroizing (never multiplying) rows outside the group."""
    slab = x[rt.start:rt.end]
    if rt.mask is None:
        return slab
    slab = slab.copy()
    if poison:
        slab[~rt.mask] = np.nan
    slab[~rt.mask] = 0.0
    return slab


def _check_form_inputs(rows_mat, layout, sel, aux, aux_name):
    if rows_mat.shape[0] != layout.tokens:
        raise ValueError(
            f"sorted operand has {rows_mat.shape[0]} rows, layout expects "
            f"{layout.tokens}")
    if sel.groups != layout.groups:
        raise ValueError(
            f"selection has {sel.groups} groups, layout has {layout.groups}")
    if sel.id.size and (sel.id.min() < 0 or sel.id.max() >= aux.shape[0]):
        raise ValueError(f"selection indexes outside {aux_name} rows")


def form1(q_sorted: np.ndarray, keys: np.ndarray, sel: SelectionIndex,
          layout: GroupedLayout, plan: TilePlan,
          stats: EngineStats | None = None,
          poison_masked: bool = False) -> np.ndarray:
    """Per-group scores: out[r, t] = <q_sorted[r], keys[sel.id[j, t]]> for r in group j.

    Key rows are gathered per tile; nothing group-shaped is materialized
    globally. Output is in sorted row order.
    """
    q_sorted = as_f64(q_sorted)
    keys = as_f64(keys)
    _check_form_inputs(q_sorted, layout, sel, keys, "keys")
    if keys.shape[1] != q_sorted.shape[1]:
        raise ValueError("queries and keys disagree on channel count")
    t = plan.tile
    dim = q_sorted.shape[1]
    out = np.zeros((layout.tokens, sel.k))
    for rt in plan.row_tiles:
        slab = _load_slab(q_sorted, rt, poison_masked)
        ids = sel.id[rt.group]
        for cs in range(0, sel.k, t):
            ce = min(cs + t, sel.k)
            if plan.mode == "split":
                gathered = keys[ids[cs:ce]]
                block = _mm_nt(slab, gathered)
                n_gathered = gathered.size
            else:
                block = np.zeros((rt.rows, ce - cs))
                n_gathered = 0
                for rs in range(0, dim, t):
                    re = min(rs + t, dim)
                    gathered = keys[ids[cs:ce], rs:re]
                    block += _mm_nt(slab[:, rs:re], gathered)
                    n_gathered += gathered.size
            if rt.mask is None:
                out[rt.start:rt.end, cs:ce] = block
            else:
                out[rt.start:rt.end, cs:ce][rt.mask] = block[rt.mask]
            if stats is not None:
                stats.tiles += 1
                stats.row_slots += rt.rows
                if rt.mask is not None:
                    stats.masked_rows += int((~rt.mask).sum())
                stats.gathered += n_gathered
    return out


def form2(p_sorted: np.ndarray, values: np.ndarray, sel: SelectionIndex,
          layout: GroupedLayout, plan: TilePlan,
          stats: EngineStats | None = None,
          poison_masked: bool = False) -> np.ndarray:
    """Per-group combine: out[r] = sum_t p_sorted[r, t] * values[sel.id[j, t]].

    Value rows (not columns) are gathered per tile. Output is in sorted order.
    """
    p_sorted = as_f64(p_sorted)
    values = as_f64(values)
    _check_form_inputs(p_sorted, layout, sel, values, "values")
    if p_sorted.shape[1] != sel.k:
        raise ValueError("weight matrix column count must equal selection k")
    t = plan.tile
    dim = values.shape[1]
    out = np.zeros((layout.tokens, dim))
    for rt in plan.row_tiles:
        slab = _load_slab(p_sorted, rt, poison_masked)
        ids = sel.id[rt.group]
        for cs in range(0, dim, t):
            ce = min(cs + t, dim)
            if plan.mode == "split":
                gathered = values[ids, cs:ce]
                block = _mm_nn(slab, gathered)
                n_gathered = gathered.size
            else:
                block = np.zeros((rt.rows, ce - cs))
                n_gathered = 0
                for rs in range(0, sel.k, t):
                    re = min(rs + t, sel.k)
                    gathered = values[ids[rs:re], cs:ce]
                    block += _mm_nn(slab[:, rs:re], gathered)
                    n_gathered += gathered.size
            if rt.mask is None:
                out[rt.start:rt.end, cs:ce] = block
            else:
                out[rt.start:rt.end, cs:ce][rt.mask] = block[rt.mask]
            if stats is not None:
                stats.tiles += 1
                stats.row_slots += rt.rows
                if rt.mask is not None:
                    stats.masked_rows += int((~rt.mask).sum())
                stats.gathered += n_gathered
    return out


def _scatter_form(lhs_sorted, rhs_sorted, sel, layout, plan, stats, poison,
                  transpose_tile):
    """Shared body of forms 3/4: per-group lhs^T @ rhs, scatter-added by sel.id.

    ``transpose_tile`` selects whether output rows are indexed by the lhs
    columns (form4: lhs = weights with k columns) or scattered transposed
    (form3: lhs = queries with C columns, output rows indexed by k).
    """
    t = plan.tile
    # form3: lhs = Q (L x C), rhs = dP (L x k), tile = C x k, rows keyed by k.
    # form4: lhs = P (L x k), rhs = dY (L x C), tile = k x C, rows keyed by k.
    out_cols = lhs_sorted.shape[1] if transpose_tile else rhs_sorted.shape[1]
    out = np.zeros((layout.tokens, out_cols))
    for j in range(layout.groups):
        chunks = plan.group_tiles[j]
        if not chunks:
            continue
        ids = sel.id[j]
        a_cols = lhs_sorted.shape[1]
        b_cols = rhs_sorted.shape[1]
        for asx in range(0, a_cols, t):
            aex = min(asx + t, a_cols)
            for bsx in range(0, b_cols, t):
                bex = min(bsx + t, b_cols)
                acc = np.zeros((aex - asx, bex - bsx))
                for rt in chunks:
                    la = _load_slab(lhs_sorted, rt, poison)
                    lb = _load_slab(rhs_sorted, rt, poison)
                    acc += _mm_tn(la[:, asx:aex], lb[:, bsx:bex])
                    if stats is not None:
                        stats.tiles += 1
                        stats.row_slots += rt.rows
                        if rt.mask is not None:
                            stats.masked_rows += 2 * int((~rt.mask).sum())
                if transpose_tile:
                    # form3: acc is (C block x k block); write transposed rows.
                    out[ids[bsx:bex], asx:aex] += acc.T
                else:
                    # form4: acc is (k block x C block).
                    out[ids[asx:aex], bsx:bex] += acc
                if stats is not None:
                    stats.gathered += acc.size
    return out


def form3(q_sorted: np.ndarray, grad_p_sorted: np.ndarray, sel: SelectionIndex,
          layout: GroupedLayout, plan: TilePlan,
          stats: EngineStats | None = None,
          poison_masked: bool = False) -> np.ndarray:
    """Key gradients: per-group Q_j^T @ dP_j scatter-added into shared key rows.

    Keys selected by several groups accumulate every contribution; groups are
    processed in ascending id order so the accumulation order is fixed.
    Returns an L x C matrix in original key-row indexing.
    """
    q_sorted = as_f64(q_sorted)
    grad_p_sorted = as_f64(grad_p_sorted)
    _check_form_inputs(q_sorted, layout, sel, np.empty((layout.tokens, 0)), "keys")
    if grad_p_sorted.shape != (layout.tokens, sel.k):
        raise ValueError("grad_p must be (tokens x k) in sorted order")
    return _scatter_form(q_sorted, grad_p_sorted, sel, layout, plan, stats,
                         poison_masked, transpose_tile=True)


def form4(p_sorted: np.ndarray, grad_y_sorted: np.ndarray, sel: SelectionIndex,
          layout: GroupedLayout, plan: TilePlan,
          stats: EngineStats | None = None,
          poison_masked: bool = False) -> np.ndarray:
    """Value gradients: per-group P_j^T @ dY_j scatter-added into value rows."""
    p_sorted = as_f64(p_sorted)
    grad_y_sorted = as_f64(grad_y_sorted)
    _check_form_inputs(p_sorted, layout, sel, np.empty((layout.tokens, 0)), "values")
    if p_sorted.shape != (layout.tokens, sel.k):
        raise ValueError("weights must be (tokens x k) in sorted order")
    return _scatter_form(p_sorted, grad_y_sorted, sel, layout, plan, stats,
                         poison_masked, transpose_tile=False)


# Naive per-group references. These are the oracles the tiled engine is tested
# against; they share nothing with the tile scheduler.

def form1_reference(q_sorted, keys, sel, layout):
    q_sorted = as_f64(q_sorted)
    keys = as_f64(keys)
    out = np.zeros((layout.tokens, sel.k))
    for j in range(layout.groups):
        lo, hi = layout.span(j)
        if lo == hi:
            continue
        out[lo:hi] = q_sorted[lo:hi] @ keys[sel.id[j]].T
    return out


def form2_reference(p_sorted, values, sel, layout):
    p_sorted = as_f64(p_sorted)
    values = as_f64(values)
    out = np.zeros((layout.tokens, values.shape[1]))
    for j in range(layout.groups):
        lo, hi = layout.span(j)
        if lo == hi:
            continue
        out[lo:hi] = p_sorted[lo:hi] @ values[sel.id[j]]
    return out


def form3_reference(q_sorted, grad_p_sorted, sel, layout):
    q_sorted = as_f64(q_sorted)
    grad_p_sorted = as_f64(grad_p_sorted)
    out = np.zeros_like(q_sorted)
    for j in range(layout.groups):
        lo, hi = layout.span(j)
        if lo == hi:
            continue
        contrib = q_sorted[lo:hi].T @ grad_p_sorted[lo:hi]  # (C, k)
        out[sel.id[j]] += contrib.T
    return out


def form4_reference(p_sorted, grad_y_sorted, sel, layout):
    p_sorted = as_f64(p_sorted)
    grad_y_sorted = as_f64(grad_y_sorted)
    out = np.zeros((layout.tokens, grad_y_sorted.shape[1]))
    for j in range(layout.groups):
        lo, hi = layout.span(j)
        if lo == hi:
            continue
        out[sel.id[j]] += p_sorted[lo:hi].T @ grad_y_sorted[lo:hi]
    return out
