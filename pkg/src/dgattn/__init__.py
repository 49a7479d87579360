"""Verification-grade dynamic grouped attention.

Pure NumPy reference implementation of content-adaptive query grouping,
per-group key/value selection, a tile-scheduled grouped matrix-multiply
engine with hand-written gradients, and the convolution/attention block
stack built on top of it. Every contracted operation has an independent
oracle; the ``verify`` module and the HTTP service expose the comparison
suites.
"""

from .attention import (
    ComplexityReport,
    DgAttentionConfig,
    complexity,
    dense_attention_oracle,
    dg_attention_backward,
    dg_attention_forward,
    grouped_attention_oracle,
    make_centroids,
    routing_margin,
)
from .grouped_mm import (
    GroupedLayout,
    TilePlan,
    build_tile_plan,
    form1,
    form2,
    form3,
    form4,
    layout_from_assignment,
    scatter_back,
    sort_by_group,
)
from .grouping import (
    Centroids,
    GroupAssignment,
    assign_groups,
    kmeans_bootstrap,
    update_centroids,
)
from .model import (
    DgtModel,
    DgtVariantConfig,
    build_model,
    config_from_file,
    count_flops,
    count_params,
    load_model,
    model_forward,
    save_model,
    variant_config,
)
from .selection import SelectionIndex, gather_rows, select_topk
from .training import ToyTrainConfig, toy_train
from .verify import grad_check, run_check
from .viz import viz_run

__version__ = "0.1.0"

__all__ = [
    "Centroids",
    "ComplexityReport",
    "DgAttentionConfig",
    "DgtModel",
    "DgtVariantConfig",
    "GroupAssignment",
    "GroupedLayout",
    "SelectionIndex",
    "TilePlan",
    "ToyTrainConfig",
    "__version__",
    "assign_groups",
    "build_model",
    "build_tile_plan",
    "complexity",
    "config_from_file",
    "count_flops",
    "count_params",
    "dense_attention_oracle",
    "dg_attention_backward",
    "dg_attention_forward",
    "form1",
    "form2",
    "form3",
    "form4",
    "gather_rows",
    "grad_check",
    "grouped_attention_oracle",
    "kmeans_bootstrap",
    "layout_from_assignment",
    "load_model",
    "make_centroids",
    "model_forward",
    "routing_margin",
    "run_check",
    "save_model",
    "scatter_back",
    "select_topk",
    "sort_by_group",
    "toy_train",
    "update_centroids",
    "variant_config",
    "viz_run",
]
