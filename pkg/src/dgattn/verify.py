"""Verification harnesses: oracle suites, finite-difference gradient checks,
and engine benchmarking.

These drive every numeric claim the package makes. The check suites compare
the routed pipeline and the tiled engine against brute-force references; the
gradient checker probes the hand-written backward pass entry by entry; bench
times the engine and reports its work counters. A sabotage hook corrupts one
engine form on purpose so the harness itself can be shown to catch faults.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attention import (DgAttentionConfig, dense_attention_oracle,
                        dg_attention_backward, dg_attention_forward,
                        grouped_attention_oracle, make_centroids, routing_margin)
from .grouping import assign_groups, init_centroids
from .grouped_mm import (EngineStats, build_tile_plan, form1, form1_reference,
                         form2, form2_reference, form3, form3_reference, form4,
                         form4_reference, layout_from_assignment, sort_by_group)
from .selection import select_topk
from .tensors import make_rng

DENSE_TOL = 1e-10
ORACLE_TOL = 1e-12
GRAD_TOL = 1e-5
FD_STEP = 1e-6
SWEEP_TILES = (1, 2, 3, 5, 16, 64)
FORM_NAMES = ("form1", "form2", "form3", "form4")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name}  max_error={self.max_error:.3e}{extra}"


def _engine(sabotage: str | None):
    forms = {"form1": form1, "form2": form2, "form3": form3, "form4": form4}
    if sabotage is None:
        return forms
    if sabotage not in forms:
        raise ValueError(
            f"unknown sabotage target {sabotage!r}; expected one of {FORM_NAMES}")

    real = forms[sabotage]

    def corrupted(*args, **kwargs):
        out = real(*args, **kwargs)
        if out.size:
            out = out.copy()
            out.flat[0] += 1e-3
        return out

    forms[sabotage] = corrupted
    return forms


def _random_attention_instance(rng, max_tokens=64, max_heads=2, max_groups=6,
                               max_head_dim=6):
    tokens = int(rng.integers(4, max_tokens + 1))
    heads = int(rng.integers(1, max_heads + 1))
    head_dim = int(rng.integers(2, max_head_dim + 1))
    groups = int(rng.integers(1, max_groups + 1))
    top_k = int(rng.integers(1, tokens + 1))
    cfg = DgAttentionConfig(heads=heads, head_dim=head_dim, groups=groups,
                            top_k=top_k)
    cents = make_centroids(cfg, rng)
    xq, xk, xv = (rng.standard_normal((tokens, cfg.channels)) for _ in range(3))
    return cfg, cents, xq, xk, xv


def suite_dense_degenerate(seed: int = 0, count: int = 25) -> SuiteResult:
    """One group selecting every key must reproduce full dense attention."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        tokens = int(rng.integers(4, 65))
        heads = int(rng.integers(1, 3))
        head_dim = int(rng.integers(2, 7))
        cfg = DgAttentionConfig(heads=heads, head_dim=head_dim, groups=1,
                                top_k=tokens)
        cents = make_centroids(cfg, rng)
        xq, xk, xv = (rng.standard_normal((tokens, cfg.channels))
                      for _ in range(3))
        y, _ = dg_attention_forward(xq, xk, xv, cfg, cents)
        for h in range(heads):
            sl = slice(h * head_dim, (h + 1) * head_dim)
            ref = dense_attention_oracle(xq[:, sl], xk[:, sl], xv[:, sl])
            worst = max(worst, float(np.abs(y[:, sl] - ref).max()))
    return SuiteResult("dense_degenerate", worst <= DENSE_TOL, worst)


def suite_grouped_oracle(seed: int = 0, count: int = 40) -> SuiteResult:
    """Routed pipeline against the explicit per-group loop, per head."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(count):
        cfg, cents, xq, xk, xv = _random_attention_instance(rng)
        y, _ = dg_attention_forward(xq, xk, xv, cfg, cents)
        d = cfg.head_dim
        for h in range(cfg.heads):
            sl = slice(h * d, (h + 1) * d)
            assign = assign_groups(xq[:, sl], cents[h])
            sel = select_topk(cents[h], xk[:, sl], cfg.top_k)
            ref = grouped_attention_oracle(xq[:, sl], xk[:, sl], xv[:, sl],
                                           assign, sel)
            worst = max(worst, float(np.abs(y[:, sl] - ref).max()))
    return SuiteResult("grouped_oracle", worst <= ORACLE_TOL, worst)


def _engine_instance(rng, tokens, groups, top_k, dim):
    cents = init_centroids(groups, dim, rng)
    queries = rng.standard_normal((tokens, dim))
    keys = rng.standard_normal((tokens, dim))
    values = rng.standard_normal((tokens, dim))
    assign = assign_groups(queries, cents)
    layout = layout_from_assignment(assign)
    sel = select_topk(cents, keys, top_k)
    q_sorted = sort_by_group(queries, layout)
    weights = rng.standard_normal((tokens, top_k))
    grad_y = rng.standard_normal((tokens, dim))
    return q_sorted, keys, values, weights, grad_y, sel, layout


def _sweep_cases(rng, count):
    cases = []
    # Forced structure first: empty groups, then heavy selection overlap.
    cases.append(_engine_instance(rng, tokens=5, groups=9, top_k=3, dim=3))
    cases.append(_engine_instance(rng, tokens=9, groups=4, top_k=7, dim=4))
    for _ in range(count - len(cases)):
        tokens = int(rng.integers(2, 49))
        groups = int(rng.integers(1, 9))
        top_k = int(rng.integers(1, tokens + 1))
        dim = int(rng.integers(1, 9))
        cases.append(_engine_instance(rng, tokens, groups, top_k, dim))
    return cases


def suite_tile_sweep(seed: int = 0, count: int = 10,
                     sabotage: str | None = None) -> SuiteResult:
    """Every form, every tile size, both scheduling modes, poison on and off,
    against the untiled per-group references."""
    rng = make_rng(seed)
    forms = _engine(sabotage)
    worst = 0.0
    culprit = ""
    for q_sorted, keys, values, weights, grad_y, sel, layout in \
            _sweep_cases(rng, count):
        refs = {
            "form1": form1_reference(q_sorted, keys, sel, layout),
            "form2": form2_reference(weights, values, sel, layout),
            "form3": form3_reference(q_sorted, weights, sel, layout),
            "form4": form4_reference(weights, grad_y, sel, layout),
        }
        args = {
            "form1": (q_sorted, keys),
            "form2": (weights, values),
            "form3": (q_sorted, weights),
            "form4": (weights, grad_y),
        }
        for tile in SWEEP_TILES:
            for mode in ("split", "aligned"):
                plan = build_tile_plan(layout, tile, mode)
                for poison in (False, True):
                    for name in FORM_NAMES:
                        out = forms[name](*args[name], sel, layout, plan,
                                          poison_masked=poison)
                        if not np.isfinite(out).all():
                            return SuiteResult(
                                "tile_sweep", False, float("inf"),
                                f"{name} produced non-finite values "
                                f"(tile={tile}, mode={mode})")
                        err = float(np.abs(out - refs[name]).max())
                        if err > worst:
                            worst = err
                            culprit = name
    passed = worst <= ORACLE_TOL
    detail = "" if passed else f"worst offender: {culprit}"
    return SuiteResult("tile_sweep", passed, worst, detail)


def suite_scatter_add(seed: int = 0, count: int = 8,
                      sabotage: str | None = None) -> SuiteResult:
    """Collision handling: groups that select the same key/value rows must
    accumulate every contribution exactly once each."""
    rng = make_rng(seed)
    forms = _engine(sabotage)
    worst = 0.0
    culprit = ""
    for _ in range(count):
        tokens = int(rng.integers(4, 33))
        groups = int(rng.integers(2, 7))
        # Force overlap: more selected rows than tokens guarantees sharing.
        top_k = int(rng.integers((tokens + 1) // 2, tokens + 1))
        dim = int(rng.integers(2, 7))
        q_sorted, keys, values, weights, grad_y, sel, layout = \
            _engine_instance(rng, tokens, groups, top_k, dim)
        plan = build_tile_plan(layout, 4, "split")
        for name, args, ref in (
                ("form3", (q_sorted, weights),
                 form3_reference(q_sorted, weights, sel, layout)),
                ("form4", (weights, grad_y),
                 form4_reference(weights, grad_y, sel, layout))):
            out = forms[name](*args, sel, layout, plan)
            err = float(np.abs(out - ref).max())
            if err > worst:
                worst = err
                culprit = name
        # Hand oracle: accumulate per-group contributions independently.
        hand = np.zeros_like(values)
        for j in range(layout.groups):
            lo, hi = layout.span(j)
            hand[sel.id[j]] += weights[lo:hi].T @ grad_y[lo:hi]
        err = float(np.abs(forms["form4"](weights, grad_y, sel, layout, plan)
                           - hand).max())
        if err > worst:
            worst = err
            culprit = "form4"
    passed = worst <= ORACLE_TOL
    detail = "" if passed else f"worst offender: {culprit}"
    return SuiteResult("scatter_add", passed, worst, detail)


def run_check(seed: int = 0, sabotage: str | None = None) -> list[SuiteResult]:
    """The four oracle suites; all must pass on an honest build."""
    return [
        suite_dense_degenerate(seed),
        suite_grouped_oracle(seed),
        suite_tile_sweep(seed, sabotage=sabotage),
        suite_scatter_add(seed, sabotage=sabotage),
    ]


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison on a screened instance."""

    tokens: int
    head_dim: int
    groups: int
    top_k: int
    heads: int
    seed_used: int
    attempts: int
    margin: float
    max_rel_q: float
    max_rel_k: float
    max_rel_v: float

    @property
    def max_rel(self) -> float:
        return max(self.max_rel_q, self.max_rel_k, self.max_rel_v)

    @property
    def passed(self) -> bool:
        return self.max_rel <= GRAD_TOL

    def as_dict(self) -> dict:
        return {
            "tokens": self.tokens, "head_dim": self.head_dim,
            "groups": self.groups, "top_k": self.top_k, "heads": self.heads,
            "seed_used": self.seed_used, "attempts": self.attempts,
            "margin": self.margin, "max_rel_q": self.max_rel_q,
            "max_rel_k": self.max_rel_k, "max_rel_v": self.max_rel_v,
            "passed": self.passed,
        }


def grad_check(tokens: int, head_dim: int, groups: int, top_k: int,
               heads: int = 1, seed: int = 0, step: float = FD_STEP,
               max_tries: int = 25) -> GradCheckReport:
    """Central finite differences against the hand-written backward pass.

    The routed objective is piecewise smooth: a probe that flips a grouping
    or selection decision measures the wrong branch. Instances whose routing
    margin does not dominate the probe step are rejected and regenerated from
    the next seed (bounded retries).
    """
    if top_k > tokens:
        raise ValueError(f"top_k {top_k} exceeds token count {tokens}")
    attempt = 0
    while True:
        seed_used = seed + attempt
        rng = make_rng(seed_used)
        cfg = DgAttentionConfig(heads=heads, head_dim=head_dim, groups=groups,
                                top_k=top_k)
        cents = make_centroids(cfg, rng)
        xq, xk, xv = (rng.standard_normal((tokens, cfg.channels))
                      for _ in range(3))
        margin = min(
            routing_margin(xq[:, h * head_dim:(h + 1) * head_dim],
                           xk[:, h * head_dim:(h + 1) * head_dim],
                           cents[h], top_k)
            for h in range(heads))
        if margin > 10 * step:
            break
        attempt += 1
        if attempt >= max_tries:
            raise ValueError(
                f"no instance with routing margin > {10 * step:g} found in "
                f"{max_tries} attempts from seed {seed}")

    weights = rng.standard_normal((tokens, cfg.channels))
    _, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
    bundle = dg_attention_backward(cache, weights)

    def objective(q, k, v):
        y, _ = dg_attention_forward(q, k, v, cfg, cents)
        return float((weights * y).sum())

    def fd_worst(arr, grad, place):
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            plus = arr.copy()
            plus[idx] += step
            minus = arr.copy()
            minus[idx] -= step
            fp = objective(*place(plus))
            fm = objective(*place(minus))
            fd = (fp - fm) / (2 * step)
            an = float(grad[idx])
            worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
        return worst

    rq = fd_worst(xq, bundle.dxq, lambda a: (a, xk, xv))
    rk = fd_worst(xk, bundle.dxk, lambda a: (xq, a, xv))
    rv = fd_worst(xv, bundle.dxv, lambda a: (xq, xk, a))
    return GradCheckReport(tokens, head_dim, groups, top_k, heads, seed_used,
                           attempt + 1, margin, rq, rk, rv)


def bench(tokens: int, channels: int, groups: int, top_k: int,
          tiles=(16,), mode: str = "split", seed: int = 0) -> list[dict]:
    """Time each form at each tile size and report the engine counters.

    Counter fields are deterministic; ``seconds`` is wall time and is not.
    ``analytic_tiles`` is the work-item count predicted from the layout alone
    and must equal the executed ``tiles`` counter.
    """
    rng = make_rng(seed)
    q_sorted, keys, values, weights, grad_y, sel, layout = \
        _engine_instance(rng, tokens, groups, top_k, channels)
    calls = {
        "form1": (form1, (q_sorted, keys)),
        "form2": (form2, (weights, values)),
        "form3": (form3, (q_sorted, weights)),
        "form4": (form4, (weights, grad_y)),
    }
    rows = []
    for tile in tiles:
        plan = build_tile_plan(layout, tile, mode)
        analytic = {
            "form1": plan.output_tile_count(sel.k),
            "form2": plan.output_tile_count(channels),
            "form3": plan.scatter_tile_count(channels, sel.k),
            "form4": plan.scatter_tile_count(sel.k, channels),
        }
        for name, (fn, args) in calls.items():
            stats = EngineStats()
            t0 = time.perf_counter()
            fn(*args, sel, layout, plan, stats)
            seconds = time.perf_counter() - t0
            row = {"tile": tile, "mode": mode, "form": name,
                   "seconds": seconds, "analytic_tiles": analytic[name]}
            row.update(stats.as_dict())
            rows.append(row)
    return rows


def bench_rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
