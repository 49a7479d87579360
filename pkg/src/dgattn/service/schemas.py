"""Request and response models for the HTTP service.

Tensors travel as {"shape": [...], "data": [...]} with row-major flat data,
matching the on-disk JSON tensor format. Binary artifacts (the PGM group map)
are base64 strings so every response stays JSON.
"""

from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..grouping import Centroids
from ..tensors import tensor


class TensorPayload(BaseModel):
    shape: list[int]
    data: list[float]

    def to_array(self) -> np.ndarray:
        return tensor(self.data, self.shape)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TensorPayload":
        return cls(shape=list(arr.shape), data=[float(v) for v in arr.ravel()])


class CentroidsPayload(BaseModel):
    tau: float = Field(ge=0.0, le=1.0)
    e: list[list[float]]

    def to_centroids(self) -> Centroids:
        return Centroids(np.array(self.e, dtype=np.float64), self.tau)

    @classmethod
    def from_centroids(cls, cents: Centroids) -> "CentroidsPayload":
        return cls(tau=cents.tau, e=[[float(v) for v in row]
                                     for row in cents.e])


class HealthResponse(BaseModel):
    status: str
    version: str


class ComplexityRequest(BaseModel):
    tokens: int = Field(ge=1)
    channels: int = Field(ge=1)
    groups: int = Field(ge=1)
    top_k: int = Field(ge=1)


class ComplexityResponse(BaseModel):
    tokens: int
    channels: int
    groups: int
    top_k: int
    omega_global: float
    omega_dg: float
    ratio: float
    term_attention: float
    term_routing: float
    term_sort: float


class VariantComplexityRequest(BaseModel):
    variant: str = "tiny"
    size: int = Field(default=224, ge=32)


class StageComplexityRow(BaseModel):
    stage: int
    tokens: int
    channels: int
    dense: bool
    groups: int | None
    top_k: int | None
    omega_global: float
    omega_dg: float
    ratio: float


class VariantComplexityResponse(BaseModel):
    variant: str
    size: int
    stages: list[StageComplexityRow]
    params: int
    flops: int


class CheckRequest(BaseModel):
    seed: int = 0
    sabotage: str | None = None


class SuiteReport(BaseModel):
    name: str
    passed: bool
    max_error: float
    detail: str


class CheckResponse(BaseModel):
    passed: bool
    suites: list[SuiteReport]


class GradCheckRequest(BaseModel):
    tokens: int = Field(default=10, ge=1)
    head_dim: int = Field(default=4, ge=1)
    groups: int = Field(default=2, ge=1)
    top_k: int = Field(default=5, ge=1)
    heads: int = Field(default=1, ge=1)
    seed: int = 0


class GradCheckResponse(BaseModel):
    # The routing margin is infinite when no alternative routing exists
    # (single group, exhaustive selection); emit the JSON Infinity constant
    # rather than null so clients keep the value.
    model_config = ConfigDict(ser_json_inf_nan="constants")

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
    passed: bool


class SelectionPayload(BaseModel):
    groups: int
    top_k: int
    id: list[list[int]]
    scores: list[list[float]]


class VizRequest(BaseModel):
    grid: int = Field(default=16, ge=1)
    channels: int = Field(default=8, ge=1)
    groups: int = Field(default=2, ge=1)
    top_k: int = Field(default=8, ge=1)
    seed: int = 0
    bootstrap_iters: int = Field(default=10, ge=0)
    tokens: TensorPayload | None = None


class VizResponse(BaseModel):
    height: int
    width: int
    groups: int
    group_map: list[list[int]]
    pgm_base64: str
    selection: SelectionPayload


class ToyTrainRequest(BaseModel):
    steps: int = Field(default=50, ge=1)
    seed: int = 0
    lr: float = Field(default=0.1, ge=0.0)


class ToyTrainResponse(BaseModel):
    losses: list[float]
    initial_loss: float
    final_loss: float
    csv: str


class BenchRequest(BaseModel):
    tokens: int = Field(default=256, ge=1)
    channels: int = Field(default=32, ge=1)
    groups: int = Field(default=8, ge=1)
    top_k: int = Field(default=64, ge=1)
    tiles: list[int] = [16]
    mode: str = "split"
    seed: int = 0


class BenchRow(BaseModel):
    tile: int
    mode: str
    form: str
    seconds: float
    analytic_tiles: int
    tiles: int
    row_slots: int
    masked_rows: int
    masked_row_fraction: float
    gathered_values: int
    gathered_bytes: int


class BenchResponse(BaseModel):
    rows: list[BenchRow]
    csv: str


class AttentionForwardRequest(BaseModel):
    xq: TensorPayload
    xk: TensorPayload | None = None
    xv: TensorPayload | None = None
    heads: int = Field(default=1, ge=1)
    groups: int = Field(ge=1)
    top_k: int = Field(ge=1)
    tau: float = Field(default=0.999, ge=0.0, le=1.0)
    tile: int = Field(default=16, ge=1)
    plan_mode: str = "split"
    train_mode: bool = False
    literal_appendix_scaling: bool = False
    seed: int = 0
    centroids: list[CentroidsPayload] | None = None


class AttentionForwardResponse(BaseModel):
    y: TensorPayload
    centroids: list[CentroidsPayload]
