"""Multi-head causal attention over cached context, three ways.

``baseline_step`` runs every head against the full sliding window in one
batched call. ``hma_step`` dispatches each head class against its own
context (three calls when all classes are present). ``packed_step`` exploits
that dummy heads with a packing frame and sink heads see the same context
length, batching them into a single call so a mixed layer needs two calls
instead of three.

All three count kernel launches and key-token MACs and are checked against
the single-head reference path in `numerics` by masking: a head's output
must equal full-context attention with the out-of-class key columns masked.

A `Session` owns per-head caches across AR steps, runs the denoise loop,
profiles itself once at the probe step when running a compressed mode, and
accumulates counters into a `RunReport`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import profiler
from .config import SessionConfig
from .container import array_digest
from .errors import AssignmentError, ConfigError, PackingError
from .head_programming import HeadAssignment, HeadClass, greedy_classify
from .kv_cache import (
    CachePolicy,
    FrameBlock,
    HeadKVCache,
    baseline_policy,
    cache_stats,
    derive_policy,
    extension_window,
)
from .layout import FrameLayout
from .profiler import Probe

MODES = ("baseline", "hma", "packed")

# hma groups heads strictly by class in this order; packed merges the first
# two groups (equal context lengths) into one call.
_HMA_GROUP_ORDER = (HeadClass.DUMMY, HeadClass.SINK, HeadClass.NEIGHBOR)


@dataclass
class LayerCounters:
    kernel_calls: int = 0
    key_token_macs: int = 0
    wall_time_ns: int = 0


@dataclass
class StepCounters:
    """Aggregated counters for one (AR step, denoise iteration)."""

    kernel_calls: list[int] = field(default_factory=list)  # per layer
    key_token_macs: int = 0
    wall_time_ns: int = 0

    def add_layer(self, lc: LayerCounters) -> None:
        self.kernel_calls.append(lc.kernel_calls)
        self.key_token_macs += lc.key_token_macs
        self.wall_time_ns += lc.wall_time_ns


@dataclass
class StepTrace:
    """Per-layer observation handed to a session observer."""

    ar_step: int
    denoise_step: int
    layer: int
    q: np.ndarray  # (heads, HW, head_dim)
    outputs: np.ndarray  # (heads, HW, head_dim)
    classes: list[HeadClass] | None
    contexts: list[tuple[np.ndarray, np.ndarray, FrameLayout, list[int]]]
    shadow_contexts: list[tuple[np.ndarray, np.ndarray, list[int]]] | None


def _batched_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _batched_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float
) -> np.ndarray:
    """(B, HW, d) x (B, ctx, d) attention; one call == one kernel launch."""
    logits = np.matmul(q, k.transpose(0, 2, 1)) * scale
    return np.matmul(_batched_softmax(logits), v)


def _gather(
    caches: list[HeadKVCache], current_blocks: list[FrameBlock]
) -> list[tuple[np.ndarray, np.ndarray, FrameLayout, list[int]]]:
    out = []
    for cache, block in zip(caches, current_blocks):
        keys, values, frame_layout = cache.gather_context(block)
        out.append((keys, values, frame_layout, cache.frame_ids + [block.frame_id]))
    return out


def _run_groups(
    q_heads: np.ndarray,
    contexts: list[tuple[np.ndarray, np.ndarray, FrameLayout, list[int]]],
    groups: list[list[int]],
    head_dim: int,
) -> tuple[np.ndarray, LayerCounters]:
    """Execute one batched attention call per head group; scatter outputs back."""
    outputs = np.empty_like(q_heads)
    counters = LayerCounters()
    scale = 1.0 / math.sqrt(head_dim)
    t0 = time.perf_counter_ns()
    for group in groups:
        if not group:
            continue
        ctx_lens = {contexts[h][0].shape[0] for h in group}
        if len(ctx_lens) != 1:
            raise PackingError(
                f"context lengths {sorted(ctx_lens)} differ within one batch"
            )
        k = np.stack([contexts[h][0] for h in group])
        v = np.stack([contexts[h][1] for h in group])
        q = q_heads[group]
        outputs[group] = _batched_attention(q, k, v, scale)
        counters.kernel_calls += 1
        counters.key_token_macs += len(group) * q.shape[1] * k.shape[1] * head_dim
    counters.wall_time_ns = time.perf_counter_ns() - t0
    return outputs, counters


def baseline_step(
    q_heads: np.ndarray,
    caches: list[HeadKVCache],
    current_blocks: list[FrameBlock],
    config: SessionConfig,
) -> tuple[np.ndarray, LayerCounters]:
    """Full-window attention for every head of one layer in a single call."""
    for c in caches:
        if c.policy.kind != "baseline_window":
            raise ConfigError(f"baseline_step got a {c.policy.kind} cache")
    contexts = _gather(caches, current_blocks)
    groups = [list(range(len(caches)))]
    return _run_groups(q_heads, contexts, groups, config.head_dim)


def _class_groups(classes: list[HeadClass]) -> list[list[int]]:
    return [
        [h for h, c in enumerate(classes) if c is hc] for hc in _HMA_GROUP_ORDER
    ]


def hma_step(
    q_heads: np.ndarray,
    caches: list[HeadKVCache],
    current_blocks: list[FrameBlock],
    classes: list[HeadClass],
    config: SessionConfig,
) -> tuple[np.ndarray, LayerCounters]:
    """Class-specific attention: one batched call per head class present."""
    if len(classes) != len(caches):
        raise AssignmentError(
            f"{len(classes)} classes for {len(caches)} heads in this layer"
        )
    contexts = _gather(caches, current_blocks)
    return _run_groups(q_heads, contexts, _class_groups(classes), config.head_dim)


def packed_step(
    q_heads: np.ndarray,
    caches: list[HeadKVCache],
    current_blocks: list[FrameBlock],
    classes: list[HeadClass],
    config: SessionConfig,
) -> tuple[np.ndarray, LayerCounters]:
    """Dummy and sink heads share one batched call; neighbors run the other."""
    if not config.packing_enabled:
        raise ConfigError("packed_step requires packing_enabled")
    if len(classes) != len(caches):
        raise AssignmentError(
            f"{len(classes)} classes for {len(caches)} heads in this layer"
        )
    contexts = _gather(caches, current_blocks)
    dummy_sink, neighbor = [], []
    for h, c in enumerate(classes):
        (neighbor if c is HeadClass.NEIGHBOR else dummy_sink).append(h)
    return _run_groups(q_heads, contexts, [dummy_sink, neighbor], config.head_dim)


def expected_step_macs(
    config: SessionConfig,
    mode: str,
    history_frames: int,
    assignment: HeadAssignment | None = None,
) -> int:
    """Closed-form key-token MACs of one denoise iteration across all layers.

    ``history_frames`` is the number of past AR steps already cached. The
    formula mirrors the retention policies; the instrumented counters measure
    the actual array shapes, so the two are independent routes to the same
    number.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    ext = None
    if assignment is not None and config.context_extension:
        ext = extension_window(assignment, config)

    def past_frames(policy: CachePolicy) -> int:
        h = history_frames
        if h == 0:
            return 0
        sink_seen = policy.sink_frame < h
        if policy.kind == "baseline_window":
            non_sink = h - 1 if sink_seen else h
            return min(non_sink, policy.window_len - 1) + (1 if sink_seen else 0)
        if policy.kind == "sink_only":
            return 1 if sink_seen else 0
        return min(h, policy.recent_capacity)

    per_head_tokens = []
    if mode == "baseline" or assignment is None:
        ctx = (past_frames(baseline_policy(config)) + 1) * config.HW
        per_head_tokens = [ctx] * config.total_heads
    else:
        for c in assignment.classes:
            pol = derive_policy(c, config, extended_window=ext)
            per_head_tokens.append((past_frames(pol) + 1) * config.HW)
    return sum(config.HW * ctx * config.head_dim for ctx in per_head_tokens)


@dataclass
class RunReport:
    """Machine-readable summary of one generation run."""

    mode: str
    config: dict
    cache_reduction_ratio: float
    assignment: dict | None
    steps: list[dict]
    kernel_calls_steady: list[int]
    total_key_token_macs: int
    total_wall_time_ns: int
    output_digest: str

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config,
            "cache_reduction_ratio": self.cache_reduction_ratio,
            "assignment": self.assignment,
            "steps": self.steps,
            "kernel_calls_steady": self.kernel_calls_steady,
            "total_key_token_macs": self.total_key_token_macs,
            "total_wall_time_ns": self.total_wall_time_ns,
            "output_digest": self.output_digest,
        }


class Session:
    """One generation run: owns caches, assignment, and counters.

    Modes hma/packed start with baseline caches, profile themselves at the
    configured probe step, classify heads once, rebuild the caches under the
    class policies, and continue compressed. With ``dummy_count`` 0 there is
    nothing to compress and the session simply executes the baseline path.
    """

    def __init__(
        self,
        model,
        config: SessionConfig,
        mode: str = "baseline",
        observer: Callable[[StepTrace], None] | None = None,
        shadow: bool = False,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}, expected one of {MODES}")
        if mode == "packed" and not config.packing_enabled:
            raise ConfigError("packed mode requires packing_enabled")
        if mode == "packed" and config.merged_window is not None:
            raise ConfigError(
                "merged_window gives sink heads a context longer than packed "
                "dummy heads; packing requires the plain sink policy"
            )
        self.model = model
        self.config = config
        self.mode = mode
        self.observer = observer
        self.assignment: HeadAssignment | None = None
        self.objective: float | None = None
        self._next_step = 0
        self._frames: list[np.ndarray] = []
        self._step_records: list[dict] = []
        self._kernel_calls_last: list[int] = []
        self._captures: dict[tuple[int, int], list] = {}
        self._capture_requests: set[tuple[int, int]] = set()
        # Where classification will happen; None when this run never
        # compresses (baseline mode, zero dummy budget, or probe past the
        # end of the session).
        self._classify_at: tuple[int, int] | None = None
        if (
            mode != "baseline"
            and config.dummy_count > 0
            and config.probe_ar_step < config.ar_steps
        ):
            self._classify_at = self._probe_key(None)
            self._capture_requests.add(self._classify_at)
        pol = baseline_policy(config)
        self.caches = [
            [HeadKVCache(pol) for _ in range(config.num_heads)]
            for _ in range(config.num_layers)
        ]
        self._shadow = shadow and mode != "baseline"
        self.shadow_caches = (
            [
                [HeadKVCache(pol) for _ in range(config.num_heads)]
                for _ in range(config.num_layers)
            ]
            if self._shadow
            else None
        )

    # -- probe bookkeeping -------------------------------------------------

    def _probe_key(self, probe: Probe | None) -> tuple[int, int]:
        if probe is None:
            probe = Probe(self.config.probe_ar_step, self.config.probe_denoise_step)
        dn = probe.denoise_step
        if dn is None:
            dn = self.config.denoise_steps - 1
        if not 0 <= dn < self.config.denoise_steps:
            raise ConfigError(f"probe denoise step {dn} out of range")
        if not 0 <= probe.ar_step < self.config.ar_steps:
            raise ConfigError(f"probe AR step {probe.ar_step} out of range")
        return probe.ar_step, dn

    def probe_context(self, probe: Probe | None = None) -> list:
        """(layer, head, q, full-context K, layout) per head at the probe step.

        Runs the session forward to the probe if needed. The context is the
        head's cache as of the probe step plus the current frame, so in a
        compressed session the probe must not lie beyond the classification
        point (contexts would no longer be the full window).
        """
        key = self._probe_key(probe)
        if key not in self._captures:
            if self._next_step > key[0]:
                raise ConfigError(
                    f"session already advanced past AR step {key[0]}"
                )
            if self._classify_at is not None and key[0] > self._classify_at[0]:
                raise ConfigError(
                    "probe lies beyond the classification step of this session"
                )
            self._capture_requests.add(key)
            while self._next_step <= key[0]:
                self._run_step(self._next_step)
        return self._captures[key]

    # -- stepping ----------------------------------------------------------

    def _effective_mode(self) -> str:
        if self.mode == "baseline" or self.assignment is None:
            return "baseline"
        return self.mode

    def _classes_for_layer(self, layer: int) -> list[HeadClass]:
        assert self.assignment is not None
        h = self.config.num_heads
        return list(self.assignment.classes[layer * h : (layer + 1) * h])

    def _layer_attention(self, layer, q, caches, current_blocks):
        mode = self._effective_mode()
        if mode == "baseline":
            return baseline_step(q, caches, current_blocks, self.config)
        classes = self._classes_for_layer(layer)
        if mode == "hma":
            return hma_step(q, caches, current_blocks, classes, self.config)
        return packed_step(q, caches, current_blocks, classes, self.config)

    def _classify(self) -> None:
        table = profiler.global_scores(self)
        self.assignment, self.objective = greedy_classify(
            table, self.config.dummy_count
        )
        ext = (
            extension_window(self.assignment, self.config)
            if self.config.context_extension
            else None
        )
        for layer in range(self.config.num_layers):
            classes = self._classes_for_layer(layer)
            self.caches[layer] = [
                cache.rebuild(derive_policy(c, self.config, extended_window=ext))
                for cache, c in zip(self.caches[layer], classes)
            ]

    def _run_step(self, ar_step: int) -> None:
        cfg = self.config
        final_kv: list[tuple[np.ndarray, np.ndarray]] = []
        step_macs = 0
        step_wall = 0
        layer_walls: list[int] = []  # one sample per (denoise iter, layer)
        kernel_calls: list[int] = []
        x = None
        for t in range(cfg.denoise_steps):
            x = self.model.frame_input(ar_step, t)
            final = t == cfg.denoise_steps - 1
            capture = (ar_step, t) in self._capture_requests
            if final:
                final_kv = []
            counters = StepCounters()
            for layer in range(cfg.num_layers):
                q, k, v = self.model.qkv(layer, x, ar_step, t)
                current_blocks = [
                    FrameBlock(ar_step, k[h], v[h]) for h in range(cfg.num_heads)
                ]
                outputs, lc = self._layer_attention(
                    layer, q, self.caches[layer], current_blocks
                )
                counters.add_layer(lc)
                layer_walls.append(lc.wall_time_ns)
                if capture:
                    rows = self._captures.setdefault((ar_step, t), [])
                    for h in range(cfg.num_heads):
                        keys, _, frame_layout = self.caches[layer][h].gather_context(
                            current_blocks[h]
                        )
                        rows.append((layer, h, q[h].copy(), keys, frame_layout))
                if self.observer is not None:
                    self._notify(ar_step, t, layer, q, outputs, current_blocks)
                if final:
                    final_kv.append((k, v))
                x = x + self.model.mix(layer, outputs)
            step_macs += counters.key_token_macs
            step_wall += counters.wall_time_ns
            if final:
                kernel_calls = counters.kernel_calls
        assert x is not None

        if (
            self._classify_at is not None
            and self.assignment is None
            and ar_step == self._classify_at[0]
        ):
            self._classify()

        for layer in range(cfg.num_layers):
            k, v = final_kv[layer]
            for h in range(cfg.num_heads):
                block = FrameBlock(ar_step, k[h], v[h])
                self.caches[layer][h].append_and_evict(block)
                if self.shadow_caches is not None:
                    self.shadow_caches[layer][h].append_and_evict(block)

        self._frames.append(x)
        self._step_records.append(
            {
                "ar_step": ar_step,
                "key_token_macs": step_macs,
                "kernel_calls_per_layer": kernel_calls,
                "wall_time_ns": step_wall,
                "layer_wall_time_ns": layer_walls,
            }
        )
        self._kernel_calls_last = kernel_calls
        self._next_step = ar_step + 1

    def _notify(self, ar_step, t, layer, q, outputs, current_blocks) -> None:
        contexts = _gather(self.caches[layer], current_blocks)
        shadow = None
        if self.shadow_caches is not None:
            shadow = []
            for h, block in enumerate(current_blocks):
                keys, values, _ = self.shadow_caches[layer][h].gather_context(block)
                shadow.append(
                    (keys, values, self.shadow_caches[layer][h].frame_ids + [ar_step])
                )
        classes = (
            self._classes_for_layer(layer)
            if self._effective_mode() != "baseline"
            else None
        )
        self.observer(
            StepTrace(
                ar_step=ar_step,
                denoise_step=t,
                layer=layer,
                q=q,
                outputs=outputs,
                classes=classes,
                contexts=contexts,
                shadow_contexts=shadow,
            )
        )

    def run(self) -> tuple[list[np.ndarray], RunReport]:
        while self._next_step < self.config.ar_steps:
            self._run_step(self._next_step)
        return self._frames, self._report()

    def time_step(self, reps: int = 5) -> dict:
        """Re-dispatch the next step's attention ``reps`` times without
        advancing the session; returns the median wall time plus counters.

        Timing covers the attention dispatch only (one denoise iteration),
        so modes are comparable on identical cache state.
        """
        if reps < 1:
            raise ConfigError("reps must be >= 1")
        cfg = self.config
        ar_step = self._next_step
        t = cfg.denoise_steps - 1
        walls = []
        counters = StepCounters()
        for rep in range(reps):
            counters = StepCounters()
            x = self.model.frame_input(ar_step, t)
            for layer in range(cfg.num_layers):
                q, k, v = self.model.qkv(layer, x, ar_step, t)
                current_blocks = [
                    FrameBlock(ar_step, k[h], v[h]) for h in range(cfg.num_heads)
                ]
                outputs, lc = self._layer_attention(
                    layer, q, self.caches[layer], current_blocks
                )
                counters.add_layer(lc)
                x = x + self.model.mix(layer, outputs)
            walls.append(counters.wall_time_ns)
        walls.sort()
        mid = len(walls) // 2
        median = (
            walls[mid]
            if len(walls) % 2
            else (walls[mid - 1] + walls[mid]) // 2
        )
        return {
            "wall_time_ns_median": int(median),
            "key_token_macs": counters.key_token_macs,
            "kernel_calls_per_layer": counters.kernel_calls,
        }

    def _report(self) -> RunReport:
        cfg = self.config
        if self.assignment is not None:
            ratio = cache_stats(self.assignment, cfg).reduction_ratio
            assignment = {
                "n_dummy": self.assignment.dummy_count,
                "objective": self.objective,
                "counts": self.assignment.counts(),
                "per_layer": self.assignment.per_layer_histogram(cfg.num_heads),
                "heads": self.assignment.to_records(cfg.num_heads),
            }
        else:
            ratio = 1.0
            assignment = None
        return RunReport(
            mode=self.mode,
            config=cfg.to_dict(),
            cache_reduction_ratio=ratio,
            assignment=assignment,
            steps=self._step_records,
            kernel_calls_steady=self._kernel_calls_last,
            total_key_token_macs=sum(s["key_token_macs"] for s in self._step_records),
            total_wall_time_ns=sum(s["wall_time_ns"] for s in self._step_records),
            output_digest=array_digest(*self._frames),
        )


def generate_session(
    model,
    config: SessionConfig,
    mode: str = "baseline",
    observer: Callable[[StepTrace], None] | None = None,
    shadow: bool = False,
) -> tuple[list[np.ndarray], RunReport]:
    """Run a full session and return (per-step frame outputs, report)."""
    return Session(model, config, mode, observer=observer, shadow=shadow).run()
