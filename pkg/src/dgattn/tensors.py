"""Dense float64 tensor substrate and the numeric primitives shared by every module.

Tensors are plain C-contiguous ``numpy.float64`` arrays. Everything here is a
pure function with a fixed accumulation order, so results are reproducible
bit-for-bit across runs and thread counts; the scalar reference loops the
fast paths are verified against live in the test suite.
"""

from __future__ import annotations

import json
import os

import numpy as np
from scipy.special import erf

SQRT1_2 = float(np.sqrt(0.5))
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Norms below this are treated as zero when normalizing (degenerate guard).
NORM_FLOOR = 1e-12


def tensor(data, shape=None) -> np.ndarray:
    """Build a float64 tensor from nested lists/arrays, validating finiteness.

    If ``shape`` is given the data is reshaped to it; the element count must
    match exactly.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"shape extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ValueError(
                f"data length {arr.size} does not match shape {shape}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor literals must be finite (no NaN/Inf)")
    return np.ascontiguousarray(arr)


def as_f64(x) -> np.ndarray:
    """View/convert to a C-contiguous float64 array without finiteness checks."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def tensor_to_json(arr: np.ndarray) -> str:
    """Serialize to the ``{"shape": [...], "data": [...]}`` interchange form."""
    a = as_f64(arr)
    return json.dumps({"shape": list(a.shape), "data": a.ravel().tolist()})


def tensor_from_json(text: str) -> np.ndarray:
    obj = json.loads(text)
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise ValueError('expected a JSON object with "shape" and "data"')
    return tensor(obj["data"], shape=obj["shape"])


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64): one seed, one sequence, any platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def thread_count() -> int:
    """Worker cap for internal parallelism, from DGATTN_THREADS (default 1)."""
    raw = os.environ.get("DGATTN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense 2-D product with shape checking and a fixed reduction order.

    Runs through einsum's single-threaded kernel rather than BLAS: each output
    element is reduced independently in a fixed order, so results are
    bit-identical across runs and thread counts, and a row's result does not
    depend on which other rows share the operand.
    """
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def softmax_rows(p: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``p / scale`` with max-subtraction for stability.

    Each output row sums to 1; adding a per-row constant to the input leaves
    the result unchanged.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    z = as_f64(p) / scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-6) -> np.ndarray:
    """Per-row normalization (biased variance) followed by the affine gamma/beta."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = as_f64(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_norm_input_grad(x: np.ndarray, gamma: np.ndarray, dy: np.ndarray,
                          eps: float = 1e-6) -> np.ndarray:
    """Gradient of layer_norm w.r.t. its input (gamma treated as constant)."""
    x = as_f64(x)
    dy = as_f64(dy)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x - mu) / std
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return (dxhat - m1 - xhat * m2) / std


def layer_norm_param_grads(x: np.ndarray, dy: np.ndarray,
                           eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of layer_norm w.r.t. gamma and beta."""
    x = as_f64(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return (dy * xhat).sum(axis=0), dy.sum(axis=0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm; vectors with norm <= 1e-12 pass through."""
    v = as_f64(v)
    n = float(np.linalg.norm(v))
    if n <= NORM_FLOOR:
        return v.copy()
    return v / n


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise l2_normalize with the same degenerate guard per row."""
    x = as_f64(x)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(n > NORM_FLOOR, n, 1.0)
    return x / safe


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    x = as_f64(x)
    return 0.5 * x * (1.0 + erf(x * SQRT1_2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x = as_f64(x)
    cdf = 0.5 * (1.0 + erf(x * SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return cdf + x * pdf


def _check_conv_inputs(x: np.ndarray, stride: int) -> None:
    if x.ndim != 3:
        raise ValueError(f"expected an HxWxC input, got shape {x.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")


def depthwise_conv3x3(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 depthwise cross-correlation, zero padding 1, no bias.

    ``x`` is HxWxC, ``w`` is 3x3xC. Output spatial size is
    ceil(H/stride) x ceil(W/stride). Taps accumulate in fixed (di, dj) order.
    """
    x = as_f64(x)
    w = as_f64(w)
    _check_conv_inputs(x, stride)
    if w.shape != (3, 3, x.shape[2]):
        raise ValueError(f"weight shape {w.shape} does not match input {x.shape}")
    h, wd, c = x.shape
    ho = -(-h // stride)
    wo = -(-wd // stride)
    xp = np.zeros((h + 2, wd + 2, c))
    xp[1:-1, 1:-1] = x
    out = np.zeros((ho, wo, c))
    for di in range(3):
        for dj in range(3):
            out += xp[di:di + 1 + stride * (ho - 1):stride,
                      dj:dj + 1 + stride * (wo - 1):stride] * w[di, dj]
    return out


def depthwise_conv3x3_input_grad(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of stride-1 depthwise_conv3x3 w.r.t. its input."""
    dy = as_f64(dy)
    w = as_f64(w)
    h, wd, c = dy.shape
    dyp = np.zeros((h + 2, wd + 2, c))
    dyp[1:-1, 1:-1] = dy
    dx = np.zeros((h, wd, c))
    # dx[u, v] collects dy[u - di + 1, v - dj + 1] * w[di, dj] over valid taps.
    for di in range(3):
        for dj in range(3):
            dx += dyp[2 - di:2 - di + h, 2 - dj:2 - dj + wd] * w[di, dj]
    return dx


def depthwise_conv3x3_weight_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of stride-1 depthwise_conv3x3 w.r.t. its 3x3xC weights."""
    x = as_f64(x)
    dy = as_f64(dy)
    h, wd, c = x.shape
    xp = np.zeros((h + 2, wd + 2, c))
    xp[1:-1, 1:-1] = x
    dw = np.zeros((3, 3, c))
    for di in range(3):
        for dj in range(3):
            dw[di, dj] = (xp[di:di + h, dj:dj + wd] * dy).sum(axis=(0, 1))
    return dw


def conv3x3(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Dense 3x3 cross-correlation (full channel mixing), zero padding 1.

    ``w`` is 3x3xCinxCout. Implemented as 9 shifted channel contractions in
    fixed tap order, so the accumulation order is deterministic.
    """
    x = as_f64(x)
    w = as_f64(w)
    _check_conv_inputs(x, stride)
    if w.ndim != 4 or w.shape[:3] != (3, 3, x.shape[2]):
        raise ValueError(f"weight shape {w.shape} does not match input {x.shape}")
    h, wd, _ = x.shape
    co = w.shape[3]
    ho = -(-h // stride)
    wo = -(-wd // stride)
    xp = np.zeros((h + 2, wd + 2, x.shape[2]))
    xp[1:-1, 1:-1] = x
    out = np.zeros((ho, wo, co))
    for di in range(3):
        for dj in range(3):
            patch = xp[di:di + 1 + stride * (ho - 1):stride,
                       dj:dj + 1 + stride * (wo - 1):stride]
            out += np.einsum("hwc,cd->hwd", patch, w[di, dj], optimize=False)
    return out
