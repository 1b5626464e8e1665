"""Frame attention profiling.

Turns attention maps into per-head region scores (how much mass lands on the
sink frame, the neighbor window, and the current frame), aggregates them
across all heads of a session, and provides the TopN selection and the
core-set stability ratio used to find and track dummy heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics
from .errors import ConfigError, ShapeError
from .layout import FrameLayout

ROW_SUM_TOL = 1e-6

SCORE_COLUMNS = ("sink", "neighbor", "current")
COL_SINK, COL_NEIGHBOR, COL_CURRENT = 0, 1, 2


@dataclass(frozen=True)
class Probe:
    """Which (AR step, denoise iteration) the profiler samples.

    ``denoise_step`` None means the last denoise iteration of the step.
    """

    ar_step: int = 2
    denoise_step: int | None = None


@dataclass(frozen=True)
class FrameAttentionScore:
    """Fractions of one head's attention mass per region; sums to 1."""

    alpha_sink: float
    alpha_neighbor: float
    alpha_current: float

    def __post_init__(self):
        t = self.as_array()
        if (t < -ROW_SUM_TOL).any():
            raise ValueError(f"negative region score in {t}")
        if abs(float(t.sum()) - 1.0) > ROW_SUM_TOL:
            raise ValueError(f"region scores sum to {t.sum()}, expected 1")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.alpha_sink, self.alpha_neighbor, self.alpha_current], dtype=float
        )


@dataclass(frozen=True)
class GlobalFrameScore:
    """Per-head score triples for a whole session, flattened over layers.

    Row ``layer * num_heads + head`` holds (sink, neighbor, current) for that
    head.
    """

    scores: np.ndarray
    num_layers: int
    num_heads: int

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.shape != (self.num_layers * self.num_heads, 3):
            raise ShapeError(
                f"scores shape {s.shape} != ({self.num_layers * self.num_heads}, 3)"
            )
        if (s < -ROW_SUM_TOL).any():
            raise ValueError("region scores must be nonnegative")
        if np.abs(s.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise ValueError("every score row must sum to 1")
        object.__setattr__(self, "scores", s)

    @property
    def total_heads(self) -> int:
        return self.num_layers * self.num_heads

    def row(self, layer: int, head: int) -> np.ndarray:
        return self.scores[layer * self.num_heads + head]


@dataclass(frozen=True)
class HeadIndexSet:
    """A set of (layer, head) locations of fixed cardinality."""

    entries: frozenset[tuple[int, int]]
    N: int

    def __post_init__(self):
        if len(self.entries) != self.N:
            raise ValueError(f"{len(self.entries)} entries but N={self.N}")

    def flat(self, num_heads: int) -> frozenset[int]:
        return frozenset(l * num_heads + h for l, h in self.entries)


def frame_attention_scores(
    attn_map: np.ndarray, frame_layout: FrameLayout
) -> FrameAttentionScore:
    """Region scores of one head from a row-stochastic attention map.

    Each map row is one query; the score for a region is the total mass its
    columns receive, averaged over the rows present (so a query-subsampled
    map stays normalized).
    """
    m = numerics.as_matrix(attn_map, "attention map")
    frame_layout.check_columns(m.shape[1])
    if m.shape[0] < 1:
        raise ShapeError("attention map needs at least one query row")
    row_sums = m.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > ROW_SUM_TOL:
        raise ValueError("attention map rows must sum to 1")
    per_region = {kind: 0.0 for kind in SCORE_COLUMNS}
    for r in frame_layout.regions:
        per_region[r.kind] += float(m[:, r.start : r.stop].sum())
    inv_rows = 1.0 / m.shape[0]
    return FrameAttentionScore(
        alpha_sink=per_region["sink"] * inv_rows,
        alpha_neighbor=per_region["neighbor"] * inv_rows,
        alpha_current=per_region["current"] * inv_rows,
    )


def subsample_rows(num_rows: int, ratio: float) -> np.ndarray:
    """Evenly strided row indices covering ``ratio`` of ``num_rows``.

    Deterministic by construction; ratio 1 returns every row in order.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"subsample ratio {ratio} outside (0, 1]")
    count = int(num_rows * ratio)
    if count < 1:
        raise ConfigError(
            f"subsampling {num_rows} rows at ratio {ratio} yields no queries"
        )
    return (np.arange(count, dtype=np.int64) * num_rows) // count


def global_scores(
    session, probe: Probe | None = None, subsample_ratio: float | None = None
) -> GlobalFrameScore:
    """Score every head of a session at the probe step.

    The session supplies, per head, the probe queries, the full cached
    context, and its layout; the attention map is recomputed here from an
    evenly strided query subset against all keys. Ratio 1 is exact.
    """
    cfg = session.config
    if subsample_ratio is None:
        subsample_ratio = cfg.subsample_ratio
    rows = None
    scale = 1.0 / np.sqrt(cfg.head_dim)
    triples = np.zeros((cfg.total_heads, 3), dtype=float)
    for layer, head, q, keys, frame_layout in session.probe_context(probe):
        if rows is None:
            rows = subsample_rows(q.shape[0], subsample_ratio)
        attn_map = numerics.softmax_rows(numerics.matmul(q[rows], keys.T) * scale)
        score = frame_attention_scores(attn_map, frame_layout)
        triples[cfg.flat_index(layer, head)] = score.as_array()
    return GlobalFrameScore(
        scores=triples, num_layers=cfg.num_layers, num_heads=cfg.num_heads
    )


def average_scores(score_tables: Sequence[GlobalFrameScore]) -> GlobalFrameScore:
    """Mean of several score tables, e.g. across denoise iterations or prompts."""
    if not score_tables:
        raise ConfigError("need at least one score table to average")
    first = score_tables[0]
    for t in score_tables[1:]:
        if (t.num_layers, t.num_heads) != (first.num_layers, first.num_heads):
            raise ConfigError("score tables must share head geometry")
    mean = np.mean([t.scores for t in score_tables], axis=0)
    return GlobalFrameScore(
        scores=mean, num_layers=first.num_layers, num_heads=first.num_heads
    )


def top_n_current(score_table: GlobalFrameScore, n: int) -> HeadIndexSet:
    """The N heads with the largest current-frame score.

    Ties break toward the lower flat head index.
    """
    if not 0 <= n <= score_table.total_heads:
        raise ConfigError(f"N={n} outside [0, {score_table.total_heads}]")
    current = score_table.scores[:, COL_CURRENT]
    order = np.lexsort((np.arange(len(current)), -current))
    chosen = order[:n]
    entries = frozenset(
        divmod(int(i), score_table.num_heads) for i in chosen
    )
    return HeadIndexSet(entries=entries, N=n)


def core_set_ratio(sets: Iterable[HeadIndexSet]) -> float:
    """Fraction of head locations common to every set: |intersection| / N."""
    sets = list(sets)
    if not sets:
        raise ConfigError("need at least one head set")
    n = sets[0].N
    if n < 1:
        raise ConfigError("head sets must be non-empty")
    common = set(sets[0].entries)
    for s in sets[1:]:
        if s.N != n:
            raise ConfigError(f"mismatched set sizes {s.N} != {n}")
        common &= s.entries
    return len(common) / n
