"""Per-head KV storage with class-derived retention policies.

Every attention head owns one cache of whole-frame K/V blocks. What a cache
retains after each append is decided by its policy:

  baseline_window   sink frame + the window_len-1 most recent frames
  sink_only         the sink frame alone
  neighbor_window   the most recent frames (window_len-1, or an extended
                    count when freed budget is reallocated)
  dummy_empty       nothing
  dummy_packed      the single most recent frame

Before enough history exists a cache simply holds everything its capacity
allows; no policy ever evicts below capacity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SessionConfig
from .errors import ConfigError, OrderingError, ShapeError
from .head_programming import HeadAssignment, HeadClass
from .layout import FrameLayout

POLICY_KINDS = (
    "baseline_window",
    "sink_only",
    "neighbor_window",
    "dummy_empty",
    "dummy_packed",
)


@dataclass(frozen=True, eq=False)
class FrameBlock:
    """K/V rows of one frame for one head; keys and values are (HW, dim)."""

    frame_id: int
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.ndim != 2 or self.values.ndim != 2:
            raise ShapeError("frame keys/values must be 2-D")
        if self.keys.shape[0] != self.values.shape[0]:
            raise ShapeError(
                f"keys rows {self.keys.shape[0]} != values rows {self.values.shape[0]}"
            )

    @property
    def tokens(self) -> int:
        return self.keys.shape[0]


@dataclass(frozen=True)
class CachePolicy:
    kind: str
    window_len: int
    sink_frame: int = 0
    extended_window: int | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind in ("baseline_window", "neighbor_window") and self.window_len < 2:
            raise ConfigError(f"{self.kind} needs window_len >= 2")
        if self.extended_window is not None:
            if self.kind != "neighbor_window":
                raise ConfigError("extended_window only applies to neighbor_window")
            if self.extended_window < self.window_len - 1:
                raise ConfigError(
                    "extended_window must be at least the plain window size"
                )

    @property
    def recent_capacity(self) -> int:
        """How many most-recent past frames this policy retains."""
        if self.kind == "baseline_window":
            return self.window_len - 1
        if self.kind == "sink_only":
            return 0
        if self.kind == "neighbor_window":
            return (
                self.extended_window
                if self.extended_window is not None
                else self.window_len - 1
            )
        if self.kind == "dummy_empty":
            return 0
        return 1  # dummy_packed

    @property
    def keeps_sink(self) -> bool:
        return self.kind in ("baseline_window", "sink_only")

    def warm_past_frames(self) -> int:
        """Past frames held once history is long enough to fill the policy."""
        return self.recent_capacity + (1 if self.keeps_sink else 0)


def derive_policy(
    head_class: HeadClass,
    config: SessionConfig,
    extended_window: int | None = None,
) -> CachePolicy:
    """Cache policy implied by a head's class under the session config.

    ``extended_window`` carries the precomputed context-extension budget for
    neighbor heads; see `extension_window`. When ``config.merged_window`` is
    set, both non-dummy classes share one combined sink+recent policy of that
    many past frames.
    """
    base = dict(window_len=config.window_len, sink_frame=config.sink_frame)
    if head_class is HeadClass.DUMMY:
        kind = "dummy_packed" if config.packing_enabled else "dummy_empty"
        return CachePolicy(kind=kind, **base)
    if config.merged_window is not None:
        return CachePolicy(
            kind="baseline_window",
            window_len=config.merged_window,
            sink_frame=config.sink_frame,
        )
    if head_class is HeadClass.SINK:
        return CachePolicy(kind="sink_only", **base)
    if config.context_extension and extended_window is not None:
        return CachePolicy(
            kind="neighbor_window", extended_window=extended_window, **base
        )
    return CachePolicy(kind="neighbor_window", **base)


def baseline_policy(config: SessionConfig) -> CachePolicy:
    return CachePolicy(
        kind="baseline_window",
        window_len=config.window_len,
        sink_frame=config.sink_frame,
    )


def extension_window(assignment: HeadAssignment, config: SessionConfig) -> int | None:
    """Extended neighbor window from the budget freed by sink and dummy heads.

    The total baseline budget (every head caching the full past window) minus
    what sink and dummy heads use is split evenly across neighbor heads,
    floored, and never below the plain window. None when there are no
    neighbor heads.
    """
    counts = assignment.counts()
    n_neighbor = counts[HeadClass.NEIGHBOR.value]
    if n_neighbor == 0:
        return None
    dummy_frames = 1 if config.packing_enabled else 0
    budget = assignment.total_heads * config.baseline_past_frames
    used = counts[HeadClass.SINK.value] * 1 + counts[HeadClass.DUMMY.value] * dummy_frames
    return max((budget - used) // n_neighbor, config.window_len - 1)


class HeadKVCache:
    """Ordered frame blocks for one head, kept within the policy's capacity."""

    def __init__(self, policy: CachePolicy, blocks: list[FrameBlock] | None = None):
        self.policy = policy
        self.blocks: list[FrameBlock] = []
        for b in blocks or []:
            self.append_and_evict(b)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def frame_ids(self) -> list[int]:
        return [b.frame_id for b in self.blocks]

    def append_and_evict(self, block: FrameBlock) -> "HeadKVCache":
        """Append one frame, then drop whatever the policy does not retain."""
        if self.blocks and block.frame_id <= self.blocks[-1].frame_id:
            raise OrderingError(
                f"frame {block.frame_id} not newer than cached {self.blocks[-1].frame_id}"
            )
        self.blocks.append(block)
        self._evict()
        return self

    def _evict(self) -> None:
        p = self.policy

        def is_sink(b: FrameBlock) -> bool:
            return p.keeps_sink and b.frame_id == p.sink_frame

        sink = [b for b in self.blocks if is_sink(b)]
        non_sink = [b for b in self.blocks if not is_sink(b)]
        keep = min(p.recent_capacity, len(non_sink))
        recent = non_sink[len(non_sink) - keep :] if keep else []
        self.blocks = sorted(sink + recent, key=lambda b: b.frame_id)

    def rebuild(self, policy: CachePolicy) -> "HeadKVCache":
        """A new cache holding what ``policy`` would have retained of this history."""
        return HeadKVCache(policy, list(self.blocks))

    def gather_context(
        self, current: FrameBlock
    ) -> tuple[np.ndarray, np.ndarray, FrameLayout]:
        """Concatenate cached K/V in frame order followed by the current frame."""
        if self.blocks and current.frame_id <= self.blocks[-1].frame_id:
            raise OrderingError(
                f"current frame {current.frame_id} not newer than cache"
            )
        blocks = self.blocks + [current]
        keys = np.concatenate([b.keys for b in blocks], axis=0)
        values = np.concatenate([b.values for b in blocks], axis=0)
        kinds = [
            "sink" if b.frame_id == self.policy.sink_frame else "neighbor"
            for b in self.blocks
        ] + ["current"]
        frame_layout = FrameLayout.from_frame_kinds(current.tokens, kinds)
        return keys, values, frame_layout

    def past_tokens(self) -> int:
        return sum(b.tokens for b in self.blocks)


@dataclass(frozen=True)
class CacheStats:
    """Warm-state accounting of an assignment against the baseline window."""

    per_head_past_frames: tuple[int, ...]
    baseline_past_frames: int
    tokens_per_frame: int
    reduction_ratio: float

    @property
    def total_cached_tokens(self) -> int:
        return sum(self.per_head_past_frames) * self.tokens_per_frame


def cache_stats(assignment: HeadAssignment, config: SessionConfig) -> CacheStats:
    """Per-head cached past frames and the cache-reduction ratio.

    Warm state is assumed (history at least the window length). The ratio is
    total cached past frames over what the baseline window would cache for
    the same heads, so the all-baseline assignment gives exactly 1.
    """
    ext = (
        extension_window(assignment, config) if config.context_extension else None
    )
    per_head = tuple(
        derive_policy(c, config, extended_window=ext).warm_past_frames()
        for c in assignment.classes
    )
    baseline = config.baseline_past_frames
    ratio = sum(per_head) / (assignment.total_heads * baseline)
    return CacheStats(
        per_head_past_frames=per_head,
        baseline_past_frames=baseline,
        tokens_per_frame=config.HW,
        reduction_ratio=ratio,
    )


def uniform_budget_ratio(budget_frames: float, baseline_past_frames: int) -> float:
    """Cache-reduction ratio of a flat per-head frame budget."""
    if baseline_past_frames < 1:
        raise ConfigError("baseline_past_frames must be >= 1")
    if budget_frames < 0:
        raise ConfigError("budget_frames must be >= 0")
    return budget_frames / baseline_past_frames


def cache_snapshot(caches: list[list[HeadKVCache]]) -> dict[str, np.ndarray]:
    """Flatten session caches into named tensors for the container format.

    Names are ``layer{l}/head{h}/frame{id}/keys`` (and ``/values``), so a
    snapshot can be diffed against a golden container byte for byte.
    """
    out: dict[str, np.ndarray] = {}
    for l, layer in enumerate(caches):
        for h, cache in enumerate(layer):
            for b in cache.blocks:
                prefix = f"layer{l}/head{h}/frame{b.frame_id}"
                out[f"{prefix}/keys"] = b.keys
                out[f"{prefix}/values"] = b.values
    return out
