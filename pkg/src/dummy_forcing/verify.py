"""Self-contained verification suites behind the CLI's verify command.

Each suite returns a list of named pass/fail results so the CLI can print
one line per check and tests can reuse the same machinery:

  greedy       greedy assignment matches an exhaustive enumeration oracle
               over every head count and dummy budget
  equivalence  per-head engine outputs equal masked full-context reference
               attention, across random sessions in all modes
  cache        retention capacities, warm-up behavior, and the accounting
               identities of the cache-reduction ratio

Sessions in the equivalence suite are independent and run on a small thread
pool; DF_THREADS caps the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics
from .config import SessionConfig
from .engine import Session, StepTrace, expected_step_macs
from .head_programming import greedy_classify
from .kv_cache import (
    CachePolicy,
    FrameBlock,
    HeadKVCache,
    cache_stats,
    uniform_budget_ratio,
)
from .head_programming import HeadAssignment, HeadClass
from .scenario import ToyModelSpec, build_toy_model

GREEDY_TOL = 1e-12
EQUIVALENCE_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        suffix = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}{suffix}"


def worker_count() -> int:
    """Worker cap from DF_THREADS, defaulting to a small pool."""
    raw = os.environ.get("DF_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return max(1, n) if n else min(4, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# greedy suite
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _enumeration_tables(total_heads: int) -> tuple[np.ndarray, np.ndarray]:
    """All 3^H class vectors as base-3 digits, plus each vector's dummy count."""
    powers = 3 ** np.arange(total_heads, dtype=np.int64)
    idx = np.arange(3**total_heads, dtype=np.int64)
    digits = ((idx[:, None] // powers[None, :]) % 3).astype(np.int8)
    n_dummy = (digits == 2).sum(axis=1)
    return digits, n_dummy


def _brute_force_best_per_n(scores: np.ndarray) -> np.ndarray:
    """Max objective for every dummy budget, by full enumeration."""
    total = scores.shape[0]
    digits, n_dummy = _enumeration_tables(total)
    values = np.empty((total, 3))
    values[:, 0] = scores[:, 0] + scores[:, 2]
    values[:, 1] = scores[:, 1] + scores[:, 2]
    values[:, 2] = scores[:, 2]
    objectives = values[np.arange(total)[None, :], digits.astype(np.int64)].sum(axis=1)
    return np.array(
        [objectives[n_dummy == n].max() for n in range(total + 1)]
    )


def random_score_matrix(rng: np.random.Generator, total_heads: int) -> np.ndarray:
    """Random row-stochastic (H, 3) score matrix."""
    raw = rng.random((total_heads, 3)) + 1e-9
    return raw / raw.sum(axis=1, keepdims=True)


def greedy_suite(
    seed: int = 20240, max_heads: int = 10, matrices: int = 200
) -> list[CheckResult]:
    """Greedy objective equals exhaustive-enumeration objective everywhere."""
    results = []
    rng = np.random.default_rng(seed)
    for total in range(1, max_heads + 1):
        worst = 0.0
        ok = True
        for _ in range(matrices):
            scores = random_score_matrix(rng, total)
            best = _brute_force_best_per_n(scores)
            for n in range(total + 1):
                _, objective = greedy_classify(scores, n)
                gap = abs(objective - best[n])
                worst = max(worst, gap)
                if gap > GREEDY_TOL:
                    ok = False
        results.append(
            CheckResult(
                f"greedy-vs-brute-force heads={total} ({matrices} matrices, all N)",
                ok,
                f"max |gap| = {worst:.2e}",
            )
        )
    return results


# ---------------------------------------------------------------------------
# equivalence suite
# ---------------------------------------------------------------------------


def _masked_oracle_observer(errors: list, tol: float):
    """Observer asserting per-head outputs equal the masked reference path."""

    def observe(trace: StepTrace) -> None:
        for h in range(trace.q.shape[0]):
            if trace.shadow_contexts is not None:
                full_k, full_v, full_ids = trace.shadow_contexts[h]
                head_ids = set(trace.contexts[h][3])
                hw = trace.q.shape[1]
                mask = np.zeros(full_k.shape[0], dtype=bool)
                for j, fid in enumerate(full_ids):
                    if fid in head_ids:
                        mask[j * hw : (j + 1) * hw] = True
            else:
                full_k, full_v = trace.contexts[h][0], trace.contexts[h][1]
                mask = None
            oracle = numerics.attention(trace.q[h], full_k, full_v, mask=mask)
            gap = float(np.abs(oracle.output - trace.outputs[h]).max())
            if gap > tol:
                errors.append(
                    (trace.ar_step, trace.denoise_step, trace.layer, h, gap)
                )

    return observe


def random_session_config(
    rng: np.random.Generator,
    max_layers: int = 4,
    max_heads: int = 8,
    max_hw: int = 64,
) -> SessionConfig:
    layers = int(rng.integers(1, max_layers + 1))
    heads = int(rng.integers(1, max_heads + 1))
    window = int(rng.integers(2, 6))
    probe = int(rng.integers(1, 4))
    total = layers * heads
    return SessionConfig(
        num_layers=layers,
        num_heads=heads,
        head_dim=int(rng.integers(4, 17)),
        HW=int(rng.integers(2, max_hw + 1)),
        window_len=window,
        ar_steps=probe + int(rng.integers(2, 5)),
        denoise_steps=int(rng.integers(1, 3)),
        dummy_count=int(rng.integers(1, total + 1)),
        packing_enabled=bool(rng.integers(0, 2)),
        probe_ar_step=probe,
        subsample_ratio=1.0,
    )


def _run_equivalence_case(seed: int, mode: str) -> tuple[int, list]:
    rng = np.random.default_rng(seed)
    config = random_session_config(rng)
    if mode == "packed" and not config.packing_enabled:
        config = SessionConfig(**{**config.to_dict(), "packing_enabled": True})
    spec = ToyModelSpec(
        num_layers=config.num_layers,
        num_heads=config.num_heads,
        head_dim=config.head_dim,
        HW=config.HW,
        denoise_steps=config.denoise_steps,
        seed=int(rng.integers(0, 2**63)),
        weight_scale=1.0,
    )
    errors: list = []
    session = Session(
        build_toy_model(spec),
        config,
        mode,
        observer=_masked_oracle_observer(errors, EQUIVALENCE_TOL),
        shadow=True,
    )
    session.run()
    checks = (
        config.ar_steps * config.denoise_steps * config.num_layers * config.num_heads
    )
    return checks, errors


def equivalence_suite(seed: int = 31337, sessions: int = 50) -> list[CheckResult]:
    """hma/packed outputs match the masked full-context oracle everywhere."""
    cases = []
    rng = np.random.default_rng(seed)
    for i in range(sessions):
        mode = "hma" if i % 2 == 0 else "packed"
        cases.append((int(rng.integers(0, 2**63)), mode))
    results = []
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        outcomes = list(pool.map(lambda c: _run_equivalence_case(*c), cases))
    for mode in ("hma", "packed"):
        checked = sum(
            n for (n, errs), (_, m) in zip(outcomes, cases) if m == mode
        )
        failures = [
            e for (n, errs), (_, m) in zip(outcomes, cases) if m == mode for e in errs
        ]
        results.append(
            CheckResult(
                f"masked-oracle equivalence mode={mode}",
                not failures,
                f"{checked} head-steps checked"
                + (f", first failure {failures[0]}" if failures else ""),
            )
        )
    return results


# ---------------------------------------------------------------------------
# cache suite
# ---------------------------------------------------------------------------


def _random_block(rng: np.random.Generator, frame_id: int, hw: int = 3, d: int = 4):
    return FrameBlock(frame_id, rng.random((hw, d)), rng.random((hw, d)))


def cache_suite(seed: int = 9001) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    # Capacity and sink retention under long random append streams.
    policies = [
        CachePolicy("baseline_window", 4),
        CachePolicy("sink_only", 4),
        CachePolicy("neighbor_window", 4),
        CachePolicy("neighbor_window", 4, extended_window=7),
        CachePolicy("dummy_empty", 4),
        CachePolicy("dummy_packed", 4),
    ]
    ok = True
    detail = ""
    for policy in policies:
        cache = HeadKVCache(policy)
        for fid in range(12):
            cache.append_and_evict(_random_block(rng, fid))
            cap = policy.recent_capacity + (1 if policy.keeps_sink else 0)
            if len(cache) > cap:
                ok, detail = False, f"{policy.kind} exceeded capacity {cap}"
            if policy.keeps_sink and fid >= 1 and 0 not in cache.frame_ids:
                ok, detail = False, f"{policy.kind} evicted the sink frame"
            if cache.frame_ids != sorted(cache.frame_ids):
                ok, detail = False, f"{policy.kind} lost frame order"
    results.append(CheckResult("retention capacity and sink persistence", ok, detail))

    # Warm-up: with short history nothing is evicted below capacity.
    ok = True
    for policy in policies:
        if policy.kind in ("dummy_empty", "dummy_packed", "sink_only"):
            continue
        cache = HeadKVCache(policy)
        cache.append_and_evict(_random_block(rng, 0))
        cache.append_and_evict(_random_block(rng, 1))
        if cache.frame_ids != [0, 1]:
            ok = False
    results.append(CheckResult("warm-up retains full short history", ok))

    # Accounting identities.
    cfg = SessionConfig(
        num_layers=1,
        num_heads=360,
        head_dim=4,
        HW=4,
        window_len=9,
        ar_steps=12,
        dummy_count=180,
        packing_enabled=True,
        merged_window=4,
    )
    classes = tuple(
        [HeadClass.DUMMY] * 180 + [HeadClass.SINK] * 90 + [HeadClass.NEIGHBOR] * 90
    )
    stats = cache_stats(HeadAssignment(classes=classes, dummy_count=180), cfg)
    ok = abs(stats.reduction_ratio - 2.5 / 9.0) < 1e-9
    results.append(
        CheckResult(
            "half packed-dummy, half merged 4-frame heads vs 9-frame baseline",
            ok,
            f"ratio = {stats.reduction_ratio:.4f}",
        )
    )
    ratio = uniform_budget_ratio(1.5, 9)
    results.append(
        CheckResult(
            "uniform 1.5-frame budget vs 9-frame baseline",
            abs(ratio - 1.5 / 9.0) < 1e-9,
            f"ratio = {ratio:.4f}",
        )
    )
    base_cfg = SessionConfig(
        num_layers=2,
        num_heads=4,
        head_dim=4,
        HW=4,
        window_len=5,
        ar_steps=8,
        dummy_count=0,
    )
    all_baseline = HeadAssignment(
        classes=tuple([HeadClass.NEIGHBOR] * 8), dummy_count=0
    )
    merged_cfg = SessionConfig(**{**base_cfg.to_dict(), "merged_window": 5})
    stats = cache_stats(all_baseline, merged_cfg)
    results.append(
        CheckResult(
            "all-baseline assignment has ratio 1",
            abs(stats.reduction_ratio - 1.0) < 1e-12,
            f"ratio = {stats.reduction_ratio}",
        )
    )

    # Permutation invariance of the ratio.
    perm_cfg = SessionConfig(**{**base_cfg.to_dict(), "dummy_count": 3})
    classes = [HeadClass.DUMMY] * 3 + [HeadClass.SINK] * 2 + [HeadClass.NEIGHBOR] * 3
    r0 = cache_stats(
        HeadAssignment(classes=tuple(classes), dummy_count=3), perm_cfg
    ).reduction_ratio
    ok = True
    for _ in range(10):
        rng.shuffle(classes)
        r = cache_stats(
            HeadAssignment(classes=tuple(classes), dummy_count=3), perm_cfg
        ).reduction_ratio
        if abs(r - r0) > 1e-15:
            ok = False
    results.append(CheckResult("ratio invariant under head permutation", ok))

    # Analytic MAC formula agrees with instrumented counts on a small session.
    cfg = SessionConfig(
        num_layers=2,
        num_heads=4,
        head_dim=8,
        HW=6,
        window_len=3,
        ar_steps=6,
        denoise_steps=2,
        dummy_count=4,
        probe_ar_step=2,
    )
    spec = ToyModelSpec(
        num_layers=2, num_heads=4, head_dim=8, HW=6, denoise_steps=2, seed=5, weight_scale=1.0
    )
    session = Session(build_toy_model(spec), cfg, "hma")
    _, report = session.run()
    ok = True
    for step in report.steps:
        mode = "baseline" if step["ar_step"] <= cfg.probe_ar_step else "hma"
        assignment = session.assignment if mode == "hma" else None
        expected = cfg.denoise_steps * expected_step_macs(
            cfg, mode, step["ar_step"], assignment
        )
        if expected != step["key_token_macs"]:
            ok = False
    results.append(CheckResult("closed-form MACs equal instrumented MACs", ok))

    return results


SUITES = {
    "greedy": greedy_suite,
    "equivalence": equivalence_suite,
    "cache": cache_suite,
}


def run_suites(names: list[str]) -> list[CheckResult]:
    results: list[CheckResult] = []
    for name in names:
        results.extend(SUITES[name]())
    return results
