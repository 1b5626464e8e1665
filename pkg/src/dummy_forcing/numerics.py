"""Dense matrix primitives: matmul, row softmax, scaled dot-product attention.

Matrices are 2-D numpy arrays of 32- or 64-bit floats, row-major. All
arithmetic is carried out in float64 regardless of storage precision so the
pruned-context execution paths can be checked against this reference path at
tight tolerances. Masking is expressed as -inf logits rather than key
removal; the equivalence of the two is the property the rest of the package
relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError, ShapeError

NEG_INF = float("-inf")


def as_matrix(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D float array and return it as float64."""
    a = np.asarray(m)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return np.ascontiguousarray(a, dtype=np.float64)


@dataclass
class AttentionOutput:
    """Result of one attention call.

    ``output`` has one row per query; ``map`` is the row-stochastic attention
    map (queries x keys), present only when requested.
    """

    output: np.ndarray
    map: np.ndarray | None = None


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two matrices, accumulated in float64.

    Raises:
        ShapeError: if inner dimensions disagree.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; -inf entries map to exactly 0.

    Entries must be finite or -inf (masked). Raises DegenerateRowError if a
    row is entirely masked.
    """
    a = as_matrix(m)
    if np.isnan(a).any() or np.isposinf(a).any():
        raise ValueError("softmax input must be finite or -inf")
    row_max = np.max(a, axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        bad = int(np.where(np.isneginf(row_max))[0][0])
        raise DegenerateRowError(f"row {bad} has no unmasked entry")
    e = np.exp(a - row_max)
    return e / np.sum(e, axis=1, keepdims=True)


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    scale: float | None = None,
    mask: np.ndarray | None = None,
    want_map: bool = False,
) -> AttentionOutput:
    """Scaled dot-product attention for a single head.

    Args:
        q: queries, (num_queries, head_dim).
        k: keys, (num_keys, head_dim).
        v: values, (num_keys, value_dim).
        scale: logit scale; defaults to 1/sqrt(head_dim).
        mask: optional boolean vector over keys; False keys are excluded by
            setting their logits to -inf.
        want_map: also return the attention map.

    Raises:
        ShapeError: on any dimension mismatch, including mask length.
        DegenerateRowError: if every key is masked.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q cols {q.shape[1]} != k cols {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k rows {k.shape[0]} != v rows {v.shape[0]}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")

    logits = (q @ k.T) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (k.shape[0],):
            raise ShapeError(f"mask length {mask.shape} != key count {k.shape[0]}")
        logits = np.where(mask[None, :], logits, NEG_INF)
    weights = softmax_rows(logits)
    out = weights @ v
    return AttentionOutput(output=out, map=weights if want_map else None)
