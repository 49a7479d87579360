"""End-to-end training smoke: a two-block network on synthetic two-class data.

The point is not accuracy but exercising every moving part together: routed
attention with live centroid EMA updates, the hand-written block backward,
and plain gradient descent. Images are class prototypes plus noise, so the
task is linearly separable and the loss must fall if the gradients are right.

Centroids update sequentially after each image's forward pass. A zero
learning rate disables all updates, including the centroid EMA, so the trace
is exactly constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import DgAttentionConfig, make_centroids
from .grouping import Centroids
from .model import (BlockParams, dgt_block_backward, dgt_block_with_cache,
                    init_block_params)
from .tensors import make_rng, matmul, softmax_rows

CLASSES = 2


@dataclass(frozen=True)
class ToyTrainConfig:
    steps: int = 50
    seed: int = 0
    lr: float = 0.1
    grid: int = 16
    channels: int = 16
    heads: int = 2
    groups: int = 4
    top_k: int = 32
    batch: int = 8
    noise: float = 0.1

    def __post_init__(self):
        if self.steps < 0 or self.grid < 1 or self.batch < 2:
            raise ValueError(f"invalid training config {self}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.top_k > self.grid * self.grid:
            raise ValueError("top_k exceeds the token count of the grid")


# Weights updated by gradient descent; positional and norm weights stay frozen.
TRAINED_BLOCK_FIELDS = ("qkv_w", "qkv_b", "out_w", "out_b",
                        "expand_w", "dw_w", "project_w")


@dataclass
class ToyNet:
    embed_w: np.ndarray     # (3, C)
    embed_b: np.ndarray     # (C,)
    blocks: list[BlockParams]
    centroids: list[list[Centroids]]   # [block][head]
    cls_w: np.ndarray       # (C, CLASSES)
    cls_b: np.ndarray


@dataclass
class ToyTrainResult:
    losses: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _attn_cfg(cfg: ToyTrainConfig, train: bool) -> DgAttentionConfig:
    return DgAttentionConfig(heads=cfg.heads,
                             head_dim=cfg.channels // cfg.heads,
                             groups=cfg.groups, top_k=cfg.top_k,
                             train_mode=train)


def build_toy_net(cfg: ToyTrainConfig, rng) -> ToyNet:
    if cfg.channels % cfg.heads:
        raise ValueError(
            f"channels {cfg.channels} not divisible by heads {cfg.heads}")
    n = lambda *shape: 0.02 * rng.standard_normal(shape)
    acfg = _attn_cfg(cfg, False)
    blocks = [init_block_params(cfg.channels, 2, rng) for _ in range(2)]
    centroids = [make_centroids(acfg, rng) for _ in range(2)]
    return ToyNet(n(3, cfg.channels), np.zeros(cfg.channels), blocks,
                  centroids, n(cfg.channels, CLASSES), np.zeros(CLASSES))


def make_batch(cfg: ToyTrainConfig, prototypes: np.ndarray, rng):
    """Alternating-class batch: prototype plus Gaussian noise per image."""
    labels = np.arange(cfg.batch) % CLASSES
    images = np.stack([
        prototypes[lab] + cfg.noise * rng.standard_normal(
            (cfg.grid, cfg.grid, 3))
        for lab in labels])
    return images, labels


def class_prototypes(cfg: ToyTrainConfig, rng) -> np.ndarray:
    """Two fixed well-separated patterns on the RGB grid."""
    g = cfg.grid
    base = rng.standard_normal((CLASSES, g, g, 3))
    # Push the class means apart on channel 0 so pooling separates them.
    base[0, :, :, 0] += 2.0
    base[1, :, :, 0] -= 2.0
    return base


def _forward_image(net: ToyNet, cfg: ToyTrainConfig, image, label,
                   train: bool):
    g = cfg.grid
    tokens_in = image.reshape(g * g, 3)
    t = matmul(tokens_in, net.embed_w) + net.embed_b
    x = t.reshape(g, g, cfg.channels)
    acfg = _attn_cfg(cfg, train)
    caches = []
    for b in range(2):
        x, cache = dgt_block_with_cache(x, net.blocks[b], acfg,
                                        net.centroids[b])
        caches.append(cache)
        if train and cache.attn_cache.new_centroids is not None:
            net.centroids[b] = cache.attn_cache.new_centroids
    feats = x.reshape(g * g, cfg.channels)
    pooled = feats.mean(axis=0)
    logits = matmul(pooled[None, :], net.cls_w)[0] + net.cls_b
    probs = softmax_rows(logits[None, :])[0]
    loss = -math.log(max(probs[label], 1e-300))
    return loss, probs, pooled, tokens_in, caches


def _zero_grads(net: ToyNet) -> dict:
    grads = {"embed_w": np.zeros_like(net.embed_w),
             "embed_b": np.zeros_like(net.embed_b),
             "cls_w": np.zeros_like(net.cls_w),
             "cls_b": np.zeros_like(net.cls_b)}
    for b in range(2):
        for name in TRAINED_BLOCK_FIELDS:
            grads[f"b{b}.{name}"] = np.zeros_like(getattr(net.blocks[b], name))
    return grads


def toy_train(cfg: ToyTrainConfig = ToyTrainConfig()) -> ToyTrainResult:
    """Run the loop; returns the mean-loss trace.

    ``losses[s]`` is the batch loss after ``s`` update steps (length
    ``steps + 1``). Deterministic: identical configs produce bit-identical
    traces. Raises if the loss stops being finite.
    """
    rng = make_rng(cfg.seed)
    net = build_toy_net(cfg, rng)
    prototypes = class_prototypes(cfg, rng)
    # One fixed batch, full-batch descent: with lr=0 nothing changes at all,
    # so the loss trace is exactly constant.
    images, labels = make_batch(cfg, prototypes, rng)
    train = cfg.lr > 0
    result = ToyTrainResult()
    scale = 1.0 / cfg.batch
    for _ in range(cfg.steps):
        grads = _zero_grads(net)
        step_loss = 0.0
        for image, label in zip(images, labels):
            loss, probs, pooled, tokens_in, caches = _forward_image(
                net, cfg, image, label, train)
            step_loss += loss * scale
            if not train:
                continue
            dlogits = probs.copy()
            dlogits[label] -= 1.0
            dlogits *= scale
            grads["cls_w"] += np.outer(pooled, dlogits)
            grads["cls_b"] += dlogits
            dpooled = matmul(net.cls_w, dlogits[:, None])[:, 0]
            g = cfg.grid
            dfeats = np.tile(dpooled / (g * g), (g * g, 1))
            dx = dfeats.reshape(g, g, cfg.channels)
            for b in (1, 0):
                dx, bg = dgt_block_backward(caches[b], dx, net.blocks[b])
                for name in TRAINED_BLOCK_FIELDS:
                    grads[f"b{b}.{name}"] += getattr(bg, name)
            dt = dx.reshape(g * g, cfg.channels)
            grads["embed_w"] += matmul(tokens_in.T, dt)
            grads["embed_b"] += dt.sum(axis=0)
        if not math.isfinite(step_loss):
            raise ValueError(f"training diverged: loss {step_loss}")
        result.losses.append(step_loss)
        if train:
            net.embed_w -= cfg.lr * grads["embed_w"]
            net.embed_b -= cfg.lr * grads["embed_b"]
            net.cls_w -= cfg.lr * grads["cls_w"]
            net.cls_b -= cfg.lr * grads["cls_b"]
            for b in range(2):
                for name in TRAINED_BLOCK_FIELDS:
                    arr = getattr(net.blocks[b], name)
                    arr -= cfg.lr * grads[f"b{b}.{name}"]
    # One last evaluation so the trace also reflects the final update.
    final = 0.0
    for image, label in zip(images, labels):
        loss, *_ = _forward_image(net, cfg, image, label, False)
        final += loss * scale
    if not math.isfinite(final):
        raise ValueError(f"training diverged: loss {final}")
    result.losses.append(final)
    return result


def losses_to_csv(losses: list[float]) -> str:
    lines = ["step,loss"]
    lines += [f"{i},{v!r}" for i, v in enumerate(losses)]
    return "\n".join(lines) + "\n"
