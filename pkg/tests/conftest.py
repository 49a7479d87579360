"""Shared builders for randomized test instances."""

import numpy as np
import pytest

from dgattn.attention import DgAttentionConfig, make_centroids
from dgattn.grouped_mm import layout_from_assignment
from dgattn.grouping import assign_groups, init_centroids
from dgattn.selection import select_topk
from dgattn.tensors import make_rng


@pytest.fixture
def rng():
    return make_rng(0)


def attention_instance(rng, tokens, head_dim, groups, top_k, heads=1, **kw):
    """Random inputs plus a config and centroids for the attention operator."""
    cfg = DgAttentionConfig(heads=heads, head_dim=head_dim, groups=groups,
                            top_k=top_k, **kw)
    cents = make_centroids(cfg, rng)
    shape = (tokens, heads * head_dim)
    xq = rng.standard_normal(shape)
    xk = rng.standard_normal(shape)
    xv = rng.standard_normal(shape)
    return xq, xk, xv, cfg, cents


def routed_instance(rng, tokens, groups, top_k, dim):
    """Random queries/keys routed through real assignment and selection."""
    cents = init_centroids(groups, dim, rng)
    queries = rng.standard_normal((tokens, dim))
    keys = rng.standard_normal((tokens, dim))
    assign = assign_groups(queries, cents)
    layout = layout_from_assignment(assign)
    sel = select_topk(cents, keys, top_k)
    return queries, keys, assign, layout, sel
