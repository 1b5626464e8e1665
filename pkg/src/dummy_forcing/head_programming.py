"""Constrained head classification.

Given per-head region scores, choose a class for every head (sink, neighbor,
or dummy) so that exactly N heads are dummy and the total retained attention
mass is maximal. A head keeps its sink score as a sink head, its neighbor
score as a neighbor head, and only its current score as a dummy head; the
current score is always retained.

The greedy solver sorts heads by opportunity cost (the mass forfeited by
making a head dummy) and takes the N cheapest. ``brute_force_classify``
enumerates every admissible assignment and is kept as the independent
optimality oracle; it never shares logic with the greedy path beyond the
value table itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import AssignmentError, CapacityError, ConfigError
from .profiler import COL_CURRENT, COL_NEIGHBOR, COL_SINK, GlobalFrameScore, Probe

BRUTE_FORCE_MAX_HEADS = 16
_ENUM_CHUNK = 3**12


class HeadClass(str, enum.Enum):
    SINK = "sink"
    NEIGHBOR = "neighbor"
    DUMMY = "dummy"


# Integer codes used by the enumerating oracle; order is part of its
# tie-breaking behavior (lowest code wins at equal objective).
_CLASS_CODES = (HeadClass.SINK, HeadClass.NEIGHBOR, HeadClass.DUMMY)
_DUMMY_CODE = 2


@dataclass(frozen=True)
class HeadAssignment:
    """One class per head (flat layer-major order) with a fixed dummy count."""

    classes: tuple[HeadClass, ...]
    dummy_count: int

    def __post_init__(self):
        n = sum(1 for c in self.classes if c is HeadClass.DUMMY)
        if n != self.dummy_count:
            raise AssignmentError(
                f"assignment has {n} dummy heads, expected {self.dummy_count}"
            )

    @property
    def total_heads(self) -> int:
        return len(self.classes)

    def class_of(self, flat_index: int) -> HeadClass:
        return self.classes[flat_index]

    def indices_of(self, head_class: HeadClass) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c is head_class]

    def counts(self) -> dict[str, int]:
        return {
            hc.value: sum(1 for c in self.classes if c is hc) for hc in HeadClass
        }

    def per_layer_histogram(self, num_heads: int) -> list[dict[str, int]]:
        """Class counts per layer, for head-distribution inspection."""
        if self.total_heads % num_heads:
            raise AssignmentError("total heads not divisible by heads per layer")
        rows = []
        for start in range(0, self.total_heads, num_heads):
            chunk = self.classes[start : start + num_heads]
            rows.append(
                {hc.value: sum(1 for c in chunk if c is hc) for hc in HeadClass}
            )
        return rows

    def to_records(self, num_heads: int) -> list[dict]:
        return [
            {"layer": i // num_heads, "head": i % num_heads, "class": c.value}
            for i, c in enumerate(self.classes)
        ]

    @classmethod
    def from_records(cls, records: list[dict], num_heads: int) -> "HeadAssignment":
        classes: dict[int, HeadClass] = {}
        for r in records:
            classes[r["layer"] * num_heads + r["head"]] = HeadClass(r["class"])
        if sorted(classes) != list(range(len(classes))):
            raise AssignmentError("records do not cover heads 0..H-1 exactly once")
        ordered = tuple(classes[i] for i in range(len(classes)))
        return cls(
            classes=ordered,
            dummy_count=sum(1 for c in ordered if c is HeadClass.DUMMY),
        )


def _score_array(scores: GlobalFrameScore | np.ndarray) -> np.ndarray:
    if isinstance(scores, GlobalFrameScore):
        return scores.scores
    a = np.asarray(scores, dtype=float)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ConfigError(f"expected an (H, 3) score array, got {a.shape}")
    return a


def value(score_row: np.ndarray, head_class: HeadClass) -> float:
    """Attention mass retained by a head under the given class."""
    row = np.asarray(score_row, dtype=float)
    if head_class is HeadClass.SINK:
        return float(row[COL_SINK] + row[COL_CURRENT])
    if head_class is HeadClass.NEIGHBOR:
        return float(row[COL_NEIGHBOR] + row[COL_CURRENT])
    return float(row[COL_CURRENT])


def opportunity_cost(scores: GlobalFrameScore | np.ndarray) -> np.ndarray:
    """Per-head mass forfeited by forcing the head dummy: max(sink, neighbor)."""
    a = _score_array(scores)
    return np.maximum(a[:, COL_SINK], a[:, COL_NEIGHBOR])


def _value_table(a: np.ndarray) -> np.ndarray:
    """(H, 3) retained value per head per class, columns in _CLASS_CODES order."""
    table = np.empty((a.shape[0], 3), dtype=float)
    table[:, 0] = a[:, COL_SINK] + a[:, COL_CURRENT]
    table[:, 1] = a[:, COL_NEIGHBOR] + a[:, COL_CURRENT]
    table[:, 2] = a[:, COL_CURRENT]
    return table


def _objective(values: np.ndarray, codes: np.ndarray) -> float:
    return float(np.sum(values[np.arange(len(codes)), codes]))


def greedy_classify(
    scores: GlobalFrameScore | np.ndarray, n_dummy: int
) -> tuple[HeadAssignment, float]:
    """Optimal assignment with exactly ``n_dummy`` dummy heads.

    The N heads with the smallest opportunity cost become dummy (ties to the
    lower head index); each remaining head becomes sink when its sink score
    is >= its neighbor score, else neighbor.
    """
    a = _score_array(scores)
    total = a.shape[0]
    if not 0 <= n_dummy <= total:
        raise ConfigError(f"n_dummy={n_dummy} outside [0, {total}]")
    cost = np.maximum(a[:, COL_SINK], a[:, COL_NEIGHBOR])
    order = np.lexsort((np.arange(total), cost))
    dummy = np.zeros(total, dtype=bool)
    dummy[order[:n_dummy]] = True

    codes = np.where(a[:, COL_SINK] >= a[:, COL_NEIGHBOR], 0, 1)
    codes[dummy] = _DUMMY_CODE
    assignment = HeadAssignment(
        classes=tuple(_CLASS_CODES[c] for c in codes), dummy_count=n_dummy
    )
    return assignment, _objective(_value_table(a), codes)


def brute_force_classify(
    scores: GlobalFrameScore | np.ndarray, n_dummy: int
) -> tuple[HeadAssignment, float]:
    """Exhaustive maximizer over all 3^H assignments with N dummy heads.

    Independent check for the greedy solver; guarded to 16 heads. Among
    equal-objective assignments the one with the lowest base-3 code wins.
    """
    a = _score_array(scores)
    total = a.shape[0]
    if total > BRUTE_FORCE_MAX_HEADS:
        raise CapacityError(
            f"{total} heads exceeds the exhaustive limit of {BRUTE_FORCE_MAX_HEADS}"
        )
    if not 0 <= n_dummy <= total:
        raise ConfigError(f"n_dummy={n_dummy} outside [0, {total}]")
    values = _value_table(a)
    powers = 3 ** np.arange(total, dtype=np.int64)
    head_idx = np.arange(total)

    best_obj = -np.inf
    best_code = -1
    count = 3**total
    for start in range(0, count, _ENUM_CHUNK):
        stop = min(start + _ENUM_CHUNK, count)
        idx = np.arange(start, stop, dtype=np.int64)
        digits = (idx[:, None] // powers[None, :]) % 3
        admissible = (digits == _DUMMY_CODE).sum(axis=1) == n_dummy
        if not admissible.any():
            continue
        digits = digits[admissible]
        objectives = values[head_idx[None, :], digits].sum(axis=1)
        k = int(np.argmax(objectives))
        if objectives[k] > best_obj:
            best_obj = float(objectives[k])
            best_code = int(idx[admissible][k])

    digits = (best_code // powers) % 3
    assignment = HeadAssignment(
        classes=tuple(_CLASS_CODES[int(c)] for c in digits), dummy_count=n_dummy
    )
    # Recompute with the same reduction as the greedy path so the two
    # objectives are comparable at full precision.
    return assignment, _objective(values, digits.astype(np.int64))


def classify_session(
    session,
    n_dummy: int | None = None,
    probe: Probe | None = None,
    subsample_ratio: float | None = None,
) -> tuple[HeadAssignment, float]:
    """Profile a session once at the probe step and classify all heads.

    The returned assignment is meant to stay fixed for the rest of the
    session; callers re-derive cache policies from it exactly once.
    """
    from . import profiler

    if n_dummy is None:
        n_dummy = session.config.dummy_count
    table = profiler.global_scores(session, probe=probe, subsample_ratio=subsample_ratio)
    return greedy_classify(table, n_dummy)
