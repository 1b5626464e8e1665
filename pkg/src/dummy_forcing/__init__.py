"""Heterogeneous per-head KV-cache management for frame-by-frame generation.

Attention heads are profiled by where their mass lands (sink frame, neighbor
window, current frame), classified by a provably optimal greedy assignment
under a fixed dummy budget, and executed through class-specific cache
policies, optionally packing dummy and sink heads into one attention call.
"""

from .config import SessionConfig
from .engine import (
    RunReport,
    Session,
    StepCounters,
    baseline_step,
    expected_step_macs,
    generate_session,
    hma_step,
    packed_step,
)
from .errors import (
    AssignmentError,
    CapacityError,
    ConfigError,
    DegenerateRowError,
    DummyForcingError,
    OrderingError,
    PackingError,
    ShapeError,
)
from .estimator import HeadClassifier
from .head_programming import (
    HeadAssignment,
    HeadClass,
    brute_force_classify,
    classify_session,
    greedy_classify,
    opportunity_cost,
    value,
)
from .kv_cache import (
    CachePolicy,
    CacheStats,
    FrameBlock,
    HeadKVCache,
    cache_stats,
    derive_policy,
    extension_window,
    uniform_budget_ratio,
)
from .layout import FrameLayout, Region
from .numerics import AttentionOutput, attention, matmul, softmax_rows
from .profiler import (
    FrameAttentionScore,
    GlobalFrameScore,
    HeadIndexSet,
    Probe,
    average_scores,
    core_set_ratio,
    frame_attention_scores,
    global_scores,
    top_n_current,
)
from .scenario import (
    PlantedSpec,
    ToyModelSpec,
    build_toy_model,
    planted_stream,
    stability_perturb,
)

__version__ = "0.1.0"

__all__ = [
    "AssignmentError",
    "AttentionOutput",
    "CachePolicy",
    "CacheStats",
    "CapacityError",
    "ConfigError",
    "DegenerateRowError",
    "DummyForcingError",
    "FrameAttentionScore",
    "FrameBlock",
    "FrameLayout",
    "GlobalFrameScore",
    "HeadAssignment",
    "HeadClass",
    "HeadClassifier",
    "HeadIndexSet",
    "HeadKVCache",
    "OrderingError",
    "PackingError",
    "Probe",
    "Region",
    "RunReport",
    "Session",
    "SessionConfig",
    "ShapeError",
    "StepCounters",
    "ToyModelSpec",
    "PlantedSpec",
    "attention",
    "average_scores",
    "baseline_step",
    "brute_force_classify",
    "build_toy_model",
    "cache_stats",
    "classify_session",
    "core_set_ratio",
    "derive_policy",
    "expected_step_macs",
    "extension_window",
    "frame_attention_scores",
    "generate_session",
    "global_scores",
    "greedy_classify",
    "hma_step",
    "matmul",
    "opportunity_cost",
    "packed_step",
    "planted_stream",
    "softmax_rows",
    "stability_perturb",
    "top_n_current",
    "uniform_budget_ratio",
    "value",
]
