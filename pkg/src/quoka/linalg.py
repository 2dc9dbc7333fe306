"""Minimal float32 kernel layer.

Everything higher up (attention, selectors, the prefill engine) is built from
the operations in this module: products, masked row softmax, L2 row
normalization, cosine similarity, deterministic top-k, row gather and
axis reductions.  All values are 32-bit floats; verification oracles live in
:mod:`quoka.reference` and run in 64-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import BoundsError, DegenerateInputError, DimensionError, ValidationError

DTYPE = np.float32

# Additive mask sentinel: the most negative finite float32, so masked score
# tensors stay finite end to end.  softmax_rows treats it as exclusion.
MASK_SENTINEL = np.float32(np.finfo(np.float32).min)


def as_tensor(x, shape=None) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float32 array, rejecting NaN/Inf."""
    out = np.ascontiguousarray(x, dtype=DTYPE)
    if shape is not None and out.shape != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {out.shape}")
    if not np.isfinite(out).all():
        raise ValidationError("tensor contains non-finite values")
    return out


def _require_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise ValidationError(f"{what} produced non-finite values")
    return x


def matmul(a, b_transposed) -> np.ndarray:
    """Product ``a @ b_transposed.T`` in float32.

    ``a`` is (m, k) and ``b_transposed`` is (n, k); the result is (m, n).
    Raises if the inner dimensions disagree or the product overflows.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b_transposed, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} vs {b.shape}")
    with np.errstate(over="ignore"):   # overflow becomes a ValidationError below
        out = a @ b.T
    return _require_finite(out, "matmul")


def _stacked_product(a: np.ndarray, b_transposed: np.ndarray) -> np.ndarray:
    """Batched form of :func:`matmul` over leading dimensions (internal)."""
    out = np.matmul(a, np.swapaxes(b_transposed, -1, -2))
    return _require_finite(out, "matmul")


def _masked_softmax(scores: np.ndarray, exclude: np.ndarray | None) -> np.ndarray:
    """Row softmax over the last axis; ``exclude`` marks entries forced to 0.

    ``exclude`` is boolean and broadcastable against ``scores``.  The row max
    is taken over non-excluded entries before exponentiation; excluded entries
    come out exactly 0.
    """
    if exclude is None:
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
    else:
        if exclude.all(axis=-1).any():
            raise DegenerateInputError("softmax row with every entry masked")
        work = np.where(exclude, MASK_SENTINEL, scores)
        m = work.max(axis=-1, keepdims=True)
        e = np.exp(work - m)
        e = np.where(exclude, DTYPE(0.0), e)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(scores, mask=None) -> np.ndarray:
    """Numerically stable per-row softmax with optional exclusion mask.

    ``mask`` entries must be either 0 (keep) or :data:`MASK_SENTINEL`
    (exclude); excluded entries map to exactly 0 in the output.  A fully
    masked row is an error.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValidationError("softmax_rows requires finite scores")
    exclude = None
    if mask is not None:
        mask = np.asarray(mask, dtype=DTYPE)
        if mask.shape != scores.shape:
            raise DimensionError(f"mask shape {mask.shape} != scores shape {scores.shape}")
        exclude = mask == MASK_SENTINEL
        if not np.logical_or(exclude, mask == 0.0).all():
            raise ValidationError("mask entries must be 0 or the sentinel value")
    return _masked_softmax(scores, exclude)


def l2_normalize_rows(x, eps: float = 1e-12) -> np.ndarray:
    """Scale each row (last axis) to unit L2 norm, flooring the norm at ``eps``.

    Rows with norm below ``eps`` pass through scaled by 1/eps; in particular
    all-zero rows stay all-zero.  Norms are accumulated in float64 so large
    entries cannot overflow.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    x = np.asarray(x, dtype=DTYPE)
    with np.errstate(over="ignore"):
        sq = np.einsum("...i,...i->...", x, x)
    if not np.isfinite(sq).all():
        # float32 squares overflowed; redo the affected reduction in float64
        sq = np.einsum("...i,...i->...", x.astype(np.float64), x.astype(np.float64))
    norms = np.sqrt(sq.astype(np.float64, copy=False))
    scale = (1.0 / np.maximum(norms, eps)).astype(DTYPE)
    return x * scale[..., None]


def cosine_sim(a, b, eps: float = 1e-12) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` (m, d) and ``b`` (n, d)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_sim expects (m,d) and (n,d), got {a.shape} and {b.shape}")
    return matmul(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps))


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` largest entries, sorted ascending.

    Ties are broken toward the lower index, deterministically.  An empty
    input is an error.
    """
    s = np.asarray(scores)
    if s.ndim != 1:
        raise DimensionError(f"topk_indices expects a flat array, got shape {s.shape}")
    n = s.size
    if n == 0:
        raise DegenerateInputError("topk_indices on an empty array")
    if k < 1:
        raise ValidationError("k must be >= 1")
    k = min(int(k), n)
    if k == n:
        return np.arange(n, dtype=np.int64)
    # Threshold split keeps this O(n); ties at the threshold fill by lowest index.
    part = np.argpartition(s, n - k)
    thresh = s[part[n - k]]
    above = np.flatnonzero(s > thresh)
    need = k - above.size
    if need > 0:
        at = np.flatnonzero(s == thresh)[:need]
        above = np.concatenate([above, at])
    return np.sort(above).astype(np.int64, copy=False)


def gather_rows(x, indices) -> np.ndarray:
    """Copy the given rows of ``x`` (first axis), bit-identical, in order."""
    x = np.asarray(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("indices must be a flat list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise BoundsError(f"index outside [0, {x.shape[0]})")
    return x[idx].copy()


def reduce(x, axis: int, kind: str) -> np.ndarray:
    """Reduce one axis by arithmetic mean or maximum; the axis is dropped."""
    x = np.asarray(x, dtype=DTYPE)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DegenerateInputError(f"cannot reduce zero-length axis {axis}")
    if kind == "mean":
        return np.mean(x, axis=axis, dtype=DTYPE)
    if kind == "max":
        return np.max(x, axis=axis)
    raise ValidationError(f"unknown reduction kind {kind!r}")
