"""Dense float64 substrate: batched QK products, stable row softmax, AV products.

Tensors are plain ``numpy.ndarray`` objects of shape ``(heads, rows, cols)``
in C (row-major) order. Indexing is always ``(head, row, col)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


def as_tensor3(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a contiguous float64 array of rank 3 with no empty axis."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have 3 dims (heads, rows, cols), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty axis: {arr.shape}")
    return arr


@dataclass(frozen=True)
class RowStats:
    """Per-row softmax statistics.

    ``row_sum`` is the sum of ``exp(logit - row_max)`` over the row, so the
    unshifted denominator is ``exp(row_max) * row_sum``.
    """

    row_max: np.ndarray
    row_sum: np.ndarray

    @property
    def log_denom(self) -> np.ndarray:
        return self.row_max + np.log(self.row_sum)


def qk_logits(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """``scale * Q K^T`` per head; the scale is passed explicitly."""
    q = as_tensor3(q, "Q")
    k = as_tensor3(k, "K")
    if q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"Q {q.shape} and K {k.shape} disagree on heads or head_dim")
    return np.einsum("hid,hjd->hij", q, k) * scale


def scaled_qk(q: np.ndarray, k: np.ndarray, d_h: int) -> np.ndarray:
    """Pre-softmax logits ``Q K^T / sqrt(d_h)`` with shape ``(h, T, T)``.

    Raises:
        ShapeError: if Q and K disagree, or ``d_h`` is not their last dim.
    """
    q = as_tensor3(q, "Q")
    k = as_tensor3(k, "K")
    if q.shape != k.shape:
        raise ShapeError(f"Q {q.shape} and K {k.shape} must have identical shape")
    if int(d_h) != q.shape[2] or d_h < 1:
        raise ShapeError(f"d_h={d_h} does not match head_dim {q.shape[2]}")
    return qk_logits(q, k, 1.0 / np.sqrt(d_h))


def row_softmax(a_pre: np.ndarray) -> tuple[np.ndarray, RowStats]:
    """Softmax over the last axis, stabilised by subtracting each row's max.

    Returns the probabilities and the :class:`RowStats` used to form them.

    Raises:
        NumericError: if the input contains NaN or Inf.
    """
    a_pre = as_tensor3(a_pre, "A_pre")
    if not np.all(np.isfinite(a_pre)):
        raise NumericError("row_softmax input contains NaN or Inf")
    row_max = a_pre.max(axis=-1)
    e = np.exp(a_pre - row_max[..., None])
    row_sum = e.sum(axis=-1)
    return e / row_sum[..., None], RowStats(row_max=row_max, row_sum=row_sum)


def matmul_av(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched ``A @ V`` with ``A`` of shape ``(h, T, T)`` and ``V`` of ``(h, T, d)``."""
    a = as_tensor3(a, "A")
    v = as_tensor3(v, "V")
    if a.shape[0] != v.shape[0] or a.shape[2] != v.shape[1]:
        raise ShapeError(f"cannot multiply A {a.shape} by V {v.shape}")
    return np.einsum("hij,hjd->hid", a, v)
