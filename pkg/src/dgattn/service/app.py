"""HTTP wrapper around the library: every CLI capability as an endpoint.

The service is stateless; each request carries everything it needs (seeds,
shapes, optional centroid state) and determinism comes from the library.
Domain errors (bad shapes, impossible configurations) surface as 400s;
features that are declared but intentionally unimplemented surface as 501s.
"""

from __future__ import annotations

import base64

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..attention import DgAttentionConfig, complexity, dg_attention_forward, make_centroids
from ..model import count_flops, count_params, stage_grids, variant_config
from ..tensors import make_rng
from ..training import ToyTrainConfig, losses_to_csv, toy_train
from ..verify import bench, bench_rows_to_csv, grad_check, run_check
from ..viz import group_levels, viz_run, write_pgm
from .schemas import (AttentionForwardRequest, AttentionForwardResponse,
                      BenchRequest, BenchResponse, BenchRow, CentroidsPayload,
                      CheckRequest, CheckResponse, ComplexityRequest,
                      ComplexityResponse, GradCheckRequest, GradCheckResponse,
                      HealthResponse, SelectionPayload, StageComplexityRow,
                      SuiteReport, TensorPayload, ToyTrainRequest,
                      ToyTrainResponse, VariantComplexityRequest,
                      VariantComplexityResponse, VizRequest, VizResponse)


def create_app() -> FastAPI:
    app = FastAPI(title="dgattn", version=__version__)

    @app.exception_handler(ValueError)
    async def value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(NotImplementedError)
    async def not_implemented(request: Request, exc: NotImplementedError):
        return JSONResponse(status_code=501, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    async def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/complexity", response_model=ComplexityResponse)
    async def complexity_tuple(req: ComplexityRequest):
        rep = complexity(req.tokens, req.channels, req.groups, req.top_k)
        return ComplexityResponse(**rep.as_dict())

    @app.post("/complexity/variant", response_model=VariantComplexityResponse)
    async def complexity_variant(req: VariantComplexityRequest):
        cfg = variant_config(req.variant)
        rows = []
        for i, (stage, (h, w)) in enumerate(
                zip(cfg.stages, stage_grids(cfg, req.size))):
            tokens = h * w
            dense_cost = 2.0 * tokens * tokens * stage.channels
            if stage.dense:
                rows.append(StageComplexityRow(
                    stage=i + 1, tokens=tokens, channels=stage.channels,
                    dense=True, groups=None, top_k=None,
                    omega_global=dense_cost, omega_dg=dense_cost, ratio=1.0))
            else:
                rep = complexity(tokens, stage.channels, stage.groups,
                                 stage.top_k)
                rows.append(StageComplexityRow(
                    stage=i + 1, tokens=tokens, channels=stage.channels,
                    dense=False, groups=stage.groups, top_k=stage.top_k,
                    omega_global=rep.omega_global, omega_dg=rep.omega_dg,
                    ratio=rep.ratio))
        return VariantComplexityResponse(
            variant=cfg.name, size=req.size, stages=rows,
            params=count_params(cfg), flops=count_flops(cfg, req.size))

    @app.post("/check", response_model=CheckResponse)
    async def check(req: CheckRequest):
        results = run_check(req.seed, req.sabotage)
        return CheckResponse(
            passed=all(r.passed for r in results),
            suites=[SuiteReport(name=r.name, passed=r.passed,
                                max_error=r.max_error, detail=r.detail)
                    for r in results])

    @app.post("/gradcheck", response_model=GradCheckResponse)
    async def gradcheck(req: GradCheckRequest):
        rep = grad_check(req.tokens, req.head_dim, req.groups, req.top_k,
                         heads=req.heads, seed=req.seed)
        return GradCheckResponse(**rep.as_dict())

    @app.post("/viz", response_model=VizResponse)
    async def viz(req: VizRequest):
        tokens = req.tokens.to_array() if req.tokens is not None else None
        result = viz_run(req.grid, req.channels, req.groups, req.top_k,
                         req.seed, req.bootstrap_iters, tokens)
        pgm = write_pgm(group_levels(result.group_map, req.groups))
        sel = result.selection
        return VizResponse(
            height=result.grid[0], width=result.grid[1], groups=req.groups,
            group_map=[[int(v) for v in row] for row in result.group_map],
            pgm_base64=base64.b64encode(pgm).decode("ascii"),
            selection=SelectionPayload(
                groups=sel.groups, top_k=sel.k,
                id=[[int(v) for v in row] for row in sel.id],
                scores=[[float(v) for v in row] for row in sel.scores]))

    @app.post("/toy-train", response_model=ToyTrainResponse)
    async def toy(req: ToyTrainRequest):
        result = toy_train(ToyTrainConfig(steps=req.steps, seed=req.seed,
                                          lr=req.lr))
        return ToyTrainResponse(losses=result.losses,
                                initial_loss=result.initial_loss,
                                final_loss=result.final_loss,
                                csv=losses_to_csv(result.losses))

    @app.post("/bench", response_model=BenchResponse)
    async def run_bench(req: BenchRequest):
        rows = bench(req.tokens, req.channels, req.groups, req.top_k,
                     tiles=tuple(req.tiles), mode=req.mode, seed=req.seed)
        return BenchResponse(rows=[BenchRow(**row) for row in rows],
                             csv=bench_rows_to_csv(rows))

    @app.post("/attention/forward", response_model=AttentionForwardResponse)
    async def attention_forward(req: AttentionForwardRequest):
        xq = req.xq.to_array()
        xk = req.xk.to_array() if req.xk is not None else xq
        xv = req.xv.to_array() if req.xv is not None else xq
        if xq.ndim != 2 or xq.shape[1] % req.heads:
            raise ValueError(
                f"input shape {xq.shape} not divisible into {req.heads} heads")
        cfg = DgAttentionConfig(
            heads=req.heads, head_dim=xq.shape[1] // req.heads,
            groups=req.groups, top_k=req.top_k, tau=req.tau, tile=req.tile,
            plan_mode=req.plan_mode, train_mode=req.train_mode,
            literal_appendix_scaling=req.literal_appendix_scaling)
        if req.centroids is not None:
            cents = [c.to_centroids() for c in req.centroids]
        else:
            cents = make_centroids(cfg, make_rng(req.seed))
        y, cache = dg_attention_forward(xq, xk, xv, cfg, cents)
        out_cents = cache.new_centroids if cache.new_centroids else cents
        return AttentionForwardResponse(
            y=TensorPayload.from_array(y),
            centroids=[CentroidsPayload.from_centroids(c) for c in out_cents])

    return app
