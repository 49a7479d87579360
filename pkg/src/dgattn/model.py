"""Hierarchical vision backbone built from grouped-attention blocks.

A model is a convolutional stem, four stages (3x3 stride-2 merge followed by
transformer blocks), and a classifier head. The first three stages route
attention through query groups; the last stage attends densely. Blocks read

    x1  = x + cpe(x)                    position branch (depthwise conv)
    x2  = x1 + attn(norm(x1))           grouped or dense attention
    out = x2 + ffn(norm(x2))            inverted-residual feed-forward

with the two norms moving onto the branch outputs when ``post_layer_norm``
is set. Everything is plain float64 arrays; parameters live in dataclasses
and serialize to a directory of JSON tensors plus a manifest.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .attention import (DgAttentionConfig, ForwardCache, dg_attention_backward,
                        dg_attention_forward)
from .grouping import Centroids, centroids_from_json, centroids_to_json, init_centroids
from .tensors import (as_f64, conv3x3, depthwise_conv3x3,
                      depthwise_conv3x3_input_grad, depthwise_conv3x3_weight_grad,
                      gelu, gelu_grad, layer_norm, layer_norm_input_grad,
                      layer_norm_param_grads, make_rng, matmul, softmax_rows,
                      tensor_from_json, tensor_to_json)

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class StageConfig:
    """One stage: merge to ``channels`` then ``depth`` blocks.

    ``groups``/``top_k`` of None selects dense attention for the stage.
    """

    channels: int
    depth: int
    heads: int
    groups: int | None
    top_k: int | None
    expand: int = 4

    def __post_init__(self):
        if self.channels < 1 or self.depth < 0 or self.heads < 1 or self.expand < 1:
            raise ValueError(f"invalid stage config {self}")
        if self.channels % self.heads:
            raise ValueError(
                f"channels {self.channels} not divisible by heads {self.heads}")
        if (self.groups is None) != (self.top_k is None):
            raise ValueError("groups and top_k must be set together")

    @property
    def dense(self) -> bool:
        return self.groups is None

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass(frozen=True)
class DgtVariantConfig:
    name: str
    stem_channels: int
    stages: tuple[StageConfig, ...]
    fc_dim: int = 1280
    classes: int = 1000
    post_layer_norm: bool = False
    cosine_attention: bool = False

    def __post_init__(self):
        if self.stem_channels < 1 or self.fc_dim < 1 or self.classes < 1:
            raise ValueError("all widths must be >= 1")
        if not self.stages:
            raise ValueError("at least one stage required")


_VARIANT_TABLE = {
    "tiny": (32, (64, 128, 256, 512), (2, 4, 8, 16), False),
    "small": (48, (96, 192, 384, 768), (3, 6, 12, 24), True),
    "base": (64, (128, 256, 512, 1024), (4, 8, 16, 32), True),
}
_ALIASES = {"t": "tiny", "s": "small", "b": "base",
            "dgt-t": "tiny", "dgt-s": "small", "dgt-b": "base"}
DEPTHS = (1, 2, 17, 2)
ROUTED_GROUPS = 48
ROUTED_TOP_K = 98


def variant_config(name: str) -> DgtVariantConfig:
    """Named variants: tiny/small/base (aliases t/s/b, dgt-t/s/b).

    The small and base variants carry the stabilized flags; their attention
    variant is exposed in the config but not numerically verified here.
    """
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in _VARIANT_TABLE:
        raise ValueError(f"unknown variant {name!r}; expected tiny, small, or base")
    stem, chans, heads, stabilized = _VARIANT_TABLE[key]
    stages = []
    for i in range(4):
        routed = i < 3
        stages.append(StageConfig(
            channels=chans[i], depth=DEPTHS[i], heads=heads[i],
            groups=ROUTED_GROUPS if routed else None,
            top_k=ROUTED_TOP_K if routed else None))
    return DgtVariantConfig(key, stem, tuple(stages),
                            post_layer_norm=stabilized,
                            cosine_attention=stabilized)


def config_to_dict(cfg: DgtVariantConfig) -> dict:
    return {
        "name": cfg.name,
        "stem_channels": cfg.stem_channels,
        "stages": [{"channels": s.channels, "depth": s.depth, "heads": s.heads,
                    "groups": s.groups, "top_k": s.top_k, "expand": s.expand}
                   for s in cfg.stages],
        "fc_dim": cfg.fc_dim,
        "classes": cfg.classes,
        "post_layer_norm": cfg.post_layer_norm,
        "cosine_attention": cfg.cosine_attention,
    }


def config_from_dict(raw: dict) -> DgtVariantConfig:
    """Either {"variant": name, ...flag overrides} or the full explicit form."""
    if "variant" in raw:
        cfg = variant_config(raw["variant"])
        overrides = {k: raw[k] for k in
                     ("classes", "fc_dim", "post_layer_norm", "cosine_attention")
                     if k in raw}
        return replace(cfg, **overrides) if overrides else cfg
    stages = tuple(StageConfig(
        channels=s["channels"], depth=s["depth"], heads=s["heads"],
        groups=s.get("groups"), top_k=s.get("top_k"),
        expand=s.get("expand", 4)) for s in raw["stages"])
    return DgtVariantConfig(
        name=raw.get("name", "custom"),
        stem_channels=raw["stem_channels"],
        stages=stages,
        fc_dim=raw.get("fc_dim", 1280),
        classes=raw.get("classes", 1000),
        post_layer_norm=raw.get("post_layer_norm", False),
        cosine_attention=raw.get("cosine_attention", False))


def config_from_file(path: str) -> DgtVariantConfig:
    """Load a variant config from a .toml or .json file."""
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    else:
        with open(path) as fh:
            raw = json.load(fh)
    return config_from_dict(raw)


@dataclass
class BlockParams:
    """All trainable weights of one block, shapes fixed by the channel count.

    Convolutions carry no bias; the attention projections do. The feed-forward
    expands to ``expand * channels``, applies a depthwise 3x3 over the token
    grid with an inner residual, and projects back.
    """

    cpe_w: np.ndarray       # (3, 3, C)
    ln1_gamma: np.ndarray   # (C,)
    ln1_beta: np.ndarray
    qkv_w: np.ndarray       # (C, 3C)
    qkv_b: np.ndarray       # (3C,)
    out_w: np.ndarray       # (C, C)
    out_b: np.ndarray       # (C,)
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    expand_w: np.ndarray    # (C, R*C)
    dw_w: np.ndarray        # (3, 3, R*C)
    project_w: np.ndarray   # (R*C, C)


def init_block_params(channels: int, expand: int, rng) -> BlockParams:
    c, e = channels, expand * channels
    n = lambda *shape: INIT_STD * rng.standard_normal(shape)
    return BlockParams(
        cpe_w=n(3, 3, c),
        ln1_gamma=np.ones(c), ln1_beta=np.zeros(c),
        qkv_w=n(c, 3 * c), qkv_b=np.zeros(3 * c),
        out_w=n(c, c), out_b=np.zeros(c),
        ln2_gamma=np.ones(c), ln2_beta=np.zeros(c),
        expand_w=n(c, e), dw_w=n(3, 3, e), project_w=n(e, c))


@dataclass
class StageParams:
    merge_w: np.ndarray                     # (3, 3, C_in, C_out)
    blocks: list[BlockParams]
    centroids: list[list[Centroids]]        # [block][head]; empty for dense


@dataclass
class DgtModel:
    cfg: DgtVariantConfig
    stem_w1: np.ndarray
    stem_w2: np.ndarray
    stem_w3: np.ndarray
    stages: list[StageParams]
    fc_w: np.ndarray
    fc_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray


def build_model(variant, rng=None, seed: int = 0) -> DgtModel:
    """Instantiate parameters for a named variant or explicit config.

    Deterministic given the rng seed: identical seeds produce bit-identical
    parameter sets.
    """
    cfg = variant_config(variant) if isinstance(variant, str) else variant
    if rng is None:
        rng = make_rng(seed)
    n = lambda *shape: INIT_STD * rng.standard_normal(shape)
    sc = cfg.stem_channels
    stem_w1, stem_w2, stem_w3 = n(3, 3, 3, sc), n(3, 3, sc, sc), n(3, 3, sc, sc)
    stages = []
    prev = sc
    for stage in cfg.stages:
        merge = n(3, 3, prev, stage.channels)
        blocks = [init_block_params(stage.channels, stage.expand, rng)
                  for _ in range(stage.depth)]
        cents: list[list[Centroids]] = []
        if not stage.dense:
            cents = [[init_centroids(stage.groups, stage.head_dim, rng)
                      for _ in range(stage.heads)]
                     for _ in range(stage.depth)]
        stages.append(StageParams(merge, blocks, cents))
        prev = stage.channels
    fc_w, fc_b = n(prev, cfg.fc_dim), np.zeros(cfg.fc_dim)
    cls_w, cls_b = n(cfg.fc_dim, cfg.classes), np.zeros(cfg.classes)
    return DgtModel(cfg, stem_w1, stem_w2, stem_w3, stages,
                    fc_w, fc_b, cls_w, cls_b)


def cpe(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Positional branch: x + depthwise 3x3 over the spatial grid."""
    return as_f64(x) + depthwise_conv3x3(x, w, 1)


@dataclass
class IrffnCache:
    x: np.ndarray
    u: np.ndarray
    e: np.ndarray
    d: np.ndarray
    g: np.ndarray
    grid: tuple[int, int]


def irffn(x: np.ndarray, params: BlockParams,
          grid: tuple[int, int]) -> np.ndarray:
    """Expand, activate, depthwise-convolve over the token grid with an inner
    residual, activate, project back. ``x`` is tokens x channels; ``grid`` is
    the (height, width) the tokens came from."""
    y, _ = irffn_with_cache(x, params, grid)
    return y


def irffn_with_cache(x, params, grid):
    x = as_f64(x)
    h, w = grid
    if x.shape[0] != h * w:
        raise ValueError(f"{x.shape[0]} tokens do not fill a {h}x{w} grid")
    u = matmul(x, params.expand_w)
    e = gelu(u)
    wide = e.shape[1]
    c = depthwise_conv3x3(e.reshape(h, w, wide), params.dw_w, 1)
    d = e + c.reshape(h * w, wide)
    g = gelu(d)
    return matmul(g, params.project_w), IrffnCache(x, u, e, d, g, grid)


def irffn_backward(cache: IrffnCache, dy: np.ndarray, params: BlockParams):
    """Returns (dx, dexpand_w, ddw_w, dproject_w)."""
    h, w = cache.grid
    wide = cache.e.shape[1]
    dg = matmul(dy, params.project_w.T)
    dproject_w = matmul(cache.g.T, dy)
    dd = dg * gelu_grad(cache.d)
    dd_grid = dd.reshape(h, w, wide)
    de = dd + depthwise_conv3x3_input_grad(dd_grid, params.dw_w).reshape(h * w, wide)
    ddw_w = depthwise_conv3x3_weight_grad(cache.e.reshape(h, w, wide), dd_grid)
    du = de * gelu_grad(cache.u)
    dx = matmul(du, params.expand_w.T)
    dexpand_w = matmul(cache.x.T, du)
    return dx, dexpand_w, ddw_w, dproject_w


def stage_attention_config(stage: StageConfig, train_mode: bool = False,
                           tile: int = 16) -> DgAttentionConfig:
    if stage.dense:
        raise ValueError("dense stages have no grouped-attention config")
    return DgAttentionConfig(heads=stage.heads, head_dim=stage.head_dim,
                             groups=stage.groups, top_k=stage.top_k,
                             tile=tile, train_mode=train_mode)


@dataclass
class BlockCache:
    """Intermediate activations of one routed block, kept for the backward pass."""

    x: np.ndarray           # block input, spatial
    x1: np.ndarray          # after positional branch, spatial
    t: np.ndarray           # x1 flattened to tokens
    ln1_out: np.ndarray
    qkv: np.ndarray
    attn_cache: ForwardCache
    attn_out: np.ndarray    # attention result before the output projection
    a: np.ndarray           # projected attention branch
    x2: np.ndarray
    ln2_out: np.ndarray
    ffn_cache: IrffnCache
    grid: tuple[int, int]


def dgt_block_forward(x: np.ndarray, params: BlockParams,
                      attn_cfg: DgAttentionConfig,
                      centroids: list[Centroids],
                      post_layer_norm: bool = False) -> np.ndarray:
    y, _ = dgt_block_with_cache(x, params, attn_cfg, centroids, post_layer_norm)
    return y


def dgt_block_with_cache(x, params, attn_cfg, centroids,
                         post_layer_norm: bool = False):
    """Routed block forward returning (output, cache).

    With ``post_layer_norm`` the norms move onto the branch outputs
    (x + norm(branch(x))); that path keeps no cache and supports no backward.
    """
    x = as_f64(x)
    if x.ndim != 3:
        raise ValueError(f"block input must be height x width x channels, got {x.shape}")
    h, w, c = x.shape
    if c != attn_cfg.channels:
        raise ValueError(f"block has {c} channels, attention expects {attn_cfg.channels}")
    x1 = cpe(x, params.cpe_w)
    t = x1.reshape(h * w, c)
    if post_layer_norm:
        a = _attn_branch(t, params, attn_cfg, centroids)[0]
        x2 = t + layer_norm(a, params.ln1_gamma, params.ln1_beta, LN_EPS)
        f = irffn(x2, params, (h, w))
        out = x2 + layer_norm(f, params.ln2_gamma, params.ln2_beta, LN_EPS)
        return out.reshape(h, w, c), None
    ln1_out = layer_norm(t, params.ln1_gamma, params.ln1_beta, LN_EPS)
    a, qkv, attn_cache, attn_out = _attn_branch(ln1_out, params, attn_cfg,
                                                centroids)
    x2 = t + a
    ln2_out = layer_norm(x2, params.ln2_gamma, params.ln2_beta, LN_EPS)
    f, ffn_cache = irffn_with_cache(ln2_out, params, (h, w))
    out = x2 + f
    cache = BlockCache(x, x1, t, ln1_out, qkv, attn_cache, attn_out, a, x2,
                       ln2_out, ffn_cache, (h, w))
    return out.reshape(h, w, c), cache


def _attn_branch(tokens, params, attn_cfg, centroids):
    c = tokens.shape[1]
    qkv = matmul(tokens, params.qkv_w) + params.qkv_b
    xq, xk, xv = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    attn_out, attn_cache = dg_attention_forward(xq, xk, xv, attn_cfg, centroids)
    a = matmul(attn_out, params.out_w) + params.out_b
    return a, qkv, attn_cache, attn_out


@dataclass
class BlockGrads:
    cpe_w: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    expand_w: np.ndarray
    dw_w: np.ndarray
    project_w: np.ndarray


def dgt_block_backward(cache: BlockCache, dy: np.ndarray,
                       params: BlockParams):
    """Gradients through the routed block. Returns (dx, BlockGrads).

    Routing inside the attention is a constant; everything else is exact.
    """
    h, w = cache.grid
    c = cache.t.shape[1]
    dy = as_f64(dy).reshape(h * w, c)

    dx2 = dy.copy()
    dln2 = irffn_backward(cache.ffn_cache, dy, params)
    dln2_in, dexpand_w, ddw_w, dproject_w = dln2
    ln2_gamma_g, ln2_beta_g = layer_norm_param_grads(cache.x2, dln2_in, LN_EPS)
    dx2 += layer_norm_input_grad(cache.x2, params.ln2_gamma, dln2_in, LN_EPS)

    da = dx2
    dattn_out = matmul(da, params.out_w.T)
    out_w_g = matmul(cache.attn_out.T, da)
    out_b_g = da.sum(axis=0)
    gb = dg_attention_backward(cache.attn_cache, dattn_out)
    dqkv = np.concatenate([gb.dxq, gb.dxk, gb.dxv], axis=1)
    qkv_w_g = matmul(cache.ln1_out.T, dqkv)
    qkv_b_g = dqkv.sum(axis=0)
    dln1_in = matmul(dqkv, params.qkv_w.T)
    ln1_gamma_g, ln1_beta_g = layer_norm_param_grads(cache.t, dln1_in, LN_EPS)
    dt = dx2 + layer_norm_input_grad(cache.t, params.ln1_gamma, dln1_in, LN_EPS)

    dx1 = dt.reshape(h, w, c)
    dx = dx1 + depthwise_conv3x3_input_grad(dx1, params.cpe_w)
    cpe_w_g = depthwise_conv3x3_weight_grad(cache.x, dx1)
    grads = BlockGrads(cpe_w_g, ln1_gamma_g, ln1_beta_g, qkv_w_g, qkv_b_g,
                       out_w_g, out_b_g, ln2_gamma_g, ln2_beta_g,
                       dexpand_w, ddw_w, dproject_w)
    return dx, grads


def _dense_mha(xq, xk, xv, heads):
    """Dense multi-head attention, one softmax(Q Kt / sqrt(d)) V per head."""
    c = xq.shape[1]
    d = c // heads
    out = np.zeros_like(xq)
    for hh in range(heads):
        sl = slice(hh * d, (hh + 1) * d)
        p = softmax_rows(matmul(xq[:, sl], xk[:, sl].T), math.sqrt(d))
        out[:, sl] = matmul(p, xv[:, sl])
    return out


def gsa_block_forward(x: np.ndarray, params: BlockParams, heads: int,
                      post_layer_norm: bool = False) -> np.ndarray:
    """Dense-attention block: identical wiring with full attention in place of
    the routed operator."""
    x = as_f64(x)
    if x.ndim != 3:
        raise ValueError(f"block input must be height x width x channels, got {x.shape}")
    h, w, c = x.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    x1 = cpe(x, params.cpe_w)
    t = x1.reshape(h * w, c)

    def attn(tokens):
        qkv = matmul(tokens, params.qkv_w) + params.qkv_b
        o = _dense_mha(qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:], heads)
        return matmul(o, params.out_w) + params.out_b

    if post_layer_norm:
        x2 = t + layer_norm(attn(t), params.ln1_gamma, params.ln1_beta, LN_EPS)
        f = irffn(x2, params, (h, w))
        out = x2 + layer_norm(f, params.ln2_gamma, params.ln2_beta, LN_EPS)
    else:
        x2 = t + attn(layer_norm(t, params.ln1_gamma, params.ln1_beta, LN_EPS))
        f = irffn(layer_norm(x2, params.ln2_gamma, params.ln2_beta, LN_EPS),
                  params, (h, w))
        out = x2 + f
    return out.reshape(h, w, c)


def stage_grids(cfg: DgtVariantConfig, size: int) -> list[tuple[int, int]]:
    """Spatial grid after each stage for a square input of the given size."""
    s = -(-size // 2)  # stem stride 2
    grids = []
    for _ in cfg.stages:
        s = -(-s // 2)  # merge stride 2
        grids.append((s, s))
    return grids


def model_forward(model: DgtModel, image: np.ndarray) -> np.ndarray:
    """Full forward pass: image (height x width x 3) to class logits."""
    cfg = model.cfg
    if cfg.cosine_attention:
        raise NotImplementedError(
            "cosine attention is exposed in configs but has no implementation")
    x = as_f64(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected height x width x 3 input, got {x.shape}")
    x = conv3x3(x, model.stem_w1, 2)
    x = gelu(x)
    x = conv3x3(x, model.stem_w2, 1)
    x = gelu(x)
    x = conv3x3(x, model.stem_w3, 1)
    for stage, sp in zip(cfg.stages, model.stages):
        x = conv3x3(x, sp.merge_w, 2)
        h, w, c = x.shape
        for b in range(stage.depth):
            if stage.dense:
                x = gsa_block_forward(x, sp.blocks[b], stage.heads,
                                      cfg.post_layer_norm)
            else:
                attn_cfg = stage_attention_config(stage)
                x = dgt_block_forward(x, sp.blocks[b], attn_cfg,
                                      sp.centroids[b], cfg.post_layer_norm)
    tokens = x.reshape(-1, x.shape[2])
    hidden = gelu(matmul(tokens, model.fc_w) + model.fc_b)
    pooled = hidden.mean(axis=0)
    return matmul(pooled[None, :], model.cls_w)[0] + model.cls_b


def _block_param_count(channels: int, expand: int) -> int:
    c, e = channels, expand * channels
    conv = 9 * c                   # positional depthwise
    norms = 4 * c                  # two gamma/beta pairs
    attn = (c * 3 * c + 3 * c) + (c * c + c)
    ffn = c * e + 9 * e + e * c    # expand, depthwise, project; no biases
    return conv + norms + attn + ffn


def count_params(variant) -> int:
    """Trainable parameter count (centroids are running state, not counted)."""
    cfg = variant_config(variant) if isinstance(variant, str) else variant
    sc = cfg.stem_channels
    total = 9 * 3 * sc + 2 * 9 * sc * sc
    prev = sc
    for stage in cfg.stages:
        total += 9 * prev * stage.channels
        total += stage.depth * _block_param_count(stage.channels, stage.expand)
        prev = stage.channels
    total += prev * cfg.fc_dim + cfg.fc_dim
    total += cfg.fc_dim * cfg.classes + cfg.classes
    return total


def flop_breakdown(variant, size: int = 224) -> dict:
    """Multiply-accumulate counts per component for one forward pass.

    Keys: ``stem``, ``head``, and per stage ``stage{i}.merge``,
    ``stage{i}.attention`` (the score/mix/routing core, straight from the
    complexity model), and ``stage{i}.other`` (projections, positional
    branch, feed-forward). Elementwise work (norms, activations, residuals)
    is excluded, per the usual convention.
    """
    from .attention import complexity
    cfg = variant_config(variant) if isinstance(variant, str) else variant
    sc = cfg.stem_channels
    s = -(-size // 2)
    out = {"stem": s * s * 9 * 3 * sc + 2 * s * s * 9 * sc * sc}
    prev = sc
    for i, stage in enumerate(cfg.stages):
        s = -(-s // 2)
        tokens = s * s
        c, e = stage.channels, stage.expand * stage.channels
        out[f"stage{i}.merge"] = tokens * 9 * prev * c
        if stage.dense:
            attn_core = 2 * tokens * tokens * c
        else:
            attn_core = int(complexity(tokens, c, stage.groups,
                                       stage.top_k).omega_dg)
        out[f"stage{i}.attention"] = stage.depth * attn_core
        other = (tokens * 9 * c                         # positional branch
                 + tokens * c * 3 * c + tokens * c * c  # projections
                 + tokens * c * e + tokens * 9 * e + tokens * e * c)
        out[f"stage{i}.other"] = stage.depth * other
        prev = stage.channels
    out["head"] = ((-(-size // 32)) ** 2 * prev * cfg.fc_dim
                   + cfg.fc_dim * cfg.classes)
    return out


def count_flops(variant, size: int = 224) -> int:
    """Total multiply-accumulate count; see :func:`flop_breakdown`."""
    return sum(flop_breakdown(variant, size).values())


def param_items(model: DgtModel):
    """(name, array) pairs for every trainable parameter, in a fixed order."""
    yield "stem.w1", model.stem_w1
    yield "stem.w2", model.stem_w2
    yield "stem.w3", model.stem_w3
    for i, sp in enumerate(model.stages):
        yield f"stage{i}.merge", sp.merge_w
        for b, bp in enumerate(sp.blocks):
            prefix = f"stage{i}.block{b}"
            for name in ("cpe_w", "ln1_gamma", "ln1_beta", "qkv_w", "qkv_b",
                         "out_w", "out_b", "ln2_gamma", "ln2_beta",
                         "expand_w", "dw_w", "project_w"):
                yield f"{prefix}.{name}", getattr(bp, name)
    yield "fc.w", model.fc_w
    yield "fc.b", model.fc_b
    yield "cls.w", model.cls_w
    yield "cls.b", model.cls_b


def save_model(model: DgtModel, directory: str) -> None:
    """Write parameters as one JSON tensor per file plus a manifest.

    Centroids are saved alongside the trainable tensors; the manifest records
    the config and every tensor shape.
    """
    os.makedirs(directory, exist_ok=True)
    shapes = {}
    for name, arr in param_items(model):
        shapes[name] = list(arr.shape)
        with open(os.path.join(directory, name + ".json"), "w") as fh:
            fh.write(tensor_to_json(arr))
    centroid_files = {}
    for i, sp in enumerate(model.stages):
        for b, per_head in enumerate(sp.centroids):
            for h, cent in enumerate(per_head):
                cname = f"stage{i}.block{b}.centroids{h}"
                centroid_files[cname] = [cent.groups, cent.dim]
                with open(os.path.join(directory, cname + ".json"), "w") as fh:
                    fh.write(centroids_to_json(cent))
    manifest = {"config": config_to_dict(model.cfg), "tensors": shapes,
                "centroids": centroid_files}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_model(directory: str) -> DgtModel:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = config_from_dict(manifest["config"])
    model = build_model(cfg, make_rng(0))

    def read(name):
        with open(os.path.join(directory, name + ".json")) as fh:
            arr = tensor_from_json(fh.read())
        want = tuple(manifest["tensors"][name])
        if arr.shape != want:
            raise ValueError(f"{name}: stored shape {arr.shape} != manifest {want}")
        return arr

    model.stem_w1 = read("stem.w1")
    model.stem_w2 = read("stem.w2")
    model.stem_w3 = read("stem.w3")
    for i, sp in enumerate(model.stages):
        sp.merge_w = read(f"stage{i}.merge")
        for b, bp in enumerate(sp.blocks):
            prefix = f"stage{i}.block{b}"
            for name in ("cpe_w", "ln1_gamma", "ln1_beta", "qkv_w", "qkv_b",
                         "out_w", "out_b", "ln2_gamma", "ln2_beta",
                         "expand_w", "dw_w", "project_w"):
                setattr(bp, name, read(f"{prefix}.{name}"))
        for b in range(len(sp.centroids)):
            for h in range(len(sp.centroids[b])):
                cname = f"stage{i}.block{b}.centroids{h}"
                with open(os.path.join(directory, cname + ".json")) as fh:
                    sp.centroids[b][h] = centroids_from_json(fh.read())
    model.fc_w = read("fc.w")
    model.fc_b = read("fc.b")
    model.cls_w = read("cls.w")
    model.cls_b = read("cls.b")
    return model
