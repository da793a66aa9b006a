"""Attention backends: full, sparse, post-softmax masked, and ratio-reshaped.

All backends share one output type, :class:`AttentionOutput`, which carries
the attention-weighted values, the dense attention weights actually applied,
and the per-row mass of those weights.

The reshaped backend scales the sparse softmax of each row by a cached
denominator ratio ``rho = sum_{j in S} exp(a_j) / sum_j exp(a_j)``. With the
exact ratio this reproduces the full-softmax weights on the included entries,
and the residual ``full - reshaped`` is the contribution of the excluded ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import CacheMissError, InvalidMaskError, NumericError, ParameterError, ShapeError
from .masks import SparseMask
from .tensor import as_tensor3, qk_logits, row_softmax

if TYPE_CHECKING:
    from .schedule import AttentionCache

# Floor for rho when every included logit underflows relative to the row max.
RHO_FLOOR = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class AttentionInputs:
    """Q, K, V of shape ``(h, T, d_h)`` and the logit scale (``1/sqrt(d_h)`` by default)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scale: Optional[float] = None

    def __post_init__(self):
        q = as_tensor3(self.q, "Q")
        k = as_tensor3(self.k, "K")
        v = as_tensor3(self.v, "V")
        if q.shape[:2] != k.shape[:2] or q.shape[2] != k.shape[2]:
            raise ShapeError(f"Q {q.shape} and K {k.shape} must match")
        if v.shape[:2] != k.shape[:2]:
            raise ShapeError(f"V {v.shape} must share (heads, tokens) with K {k.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / np.sqrt(q.shape[2]))

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def tokens(self) -> int:
        return self.q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[2]

    def logits(self) -> np.ndarray:
        return qk_logits(self.q, self.k, self.scale)


@dataclass(frozen=True)
class DenominatorStats:
    """Softmax denominators per ``(head, row)``.

    Denominators are sums of ``exp(logit - shared_row_max)``. For the ratio
    computation both sums use the full-row max, so ``rho`` is an exact quotient.
    """

    full_denom: Optional[np.ndarray]
    sparse_denom: Optional[np.ndarray]
    rho: Optional[np.ndarray]
    shared_row_max: np.ndarray

    def log_full_denom(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.shared_row_max + np.log(self.full_denom)

    def log_sparse_denom(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.shared_row_max + np.log(self.sparse_denom)

    # Unshifted denominators; these overflow to inf for very large logits.
    def raw_full_denom(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_full_denom())

    def raw_sparse_denom(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_sparse_denom())


@dataclass(frozen=True)
class AttentionOutput:
    out: np.ndarray
    weights: np.ndarray
    row_mass: np.ndarray
    stats: Optional[DenominatorStats] = field(default=None)


def _check_mask(inp: AttentionInputs, mask: SparseMask) -> None:
    if mask.shape != (inp.heads, inp.tokens, inp.tokens):
        raise ShapeError(f"mask shape {mask.shape} does not match inputs (h={inp.heads}, T={inp.tokens})")


def full_attention(inp: AttentionInputs) -> AttentionOutput:
    a, rs = row_softmax(inp.logits())
    out = np.einsum("hij,hjd->hid", a, inp.v)
    stats = DenominatorStats(full_denom=rs.row_sum, sparse_denom=None, rho=None, shared_row_max=rs.row_max)
    return AttentionOutput(out=out, weights=a, row_mass=a.sum(axis=-1), stats=stats)


def sparse_attention(inp: AttentionInputs, mask: SparseMask) -> AttentionOutput:
    """Softmax restricted to each row's included keys.

    Only included logits are formed: K and V rows are gathered per query by
    the mask's padded index sets before the dot products.

    Raises:
        InvalidMaskError: if some row includes no key.
    """
    _check_mask(inp, mask)
    if np.any(mask.row_sizes == 0):
        raise InvalidMaskError("mask has a row with no included key")
    index, valid = mask.padded_indices
    h, T = inp.heads, inp.tokens
    heads = np.arange(h)[:, None, None]
    k_sel = inp.k[heads, index]  # (h, T, L, d)
    v_sel = inp.v[heads, index]
    logits = np.einsum("hid,hild->hil", inp.q, k_sel) * inp.scale
    if not np.all(np.isfinite(logits[valid])):
        raise NumericError("sparse logits contain NaN or Inf")
    logits = np.where(valid, logits, -np.inf)
    row_max = logits.max(axis=-1)
    e = np.where(valid, np.exp(logits - row_max[..., None]), 0.0)
    denom = e.sum(axis=-1)
    p = e / denom[..., None]
    out = np.einsum("hil,hild->hid", p, v_sel)

    weights = np.zeros((h, T, T))
    # padded slots carry p == 0 and would overwrite column 0; scatter valid slots only
    kk, ii, ll = np.nonzero(valid)
    weights[kk, ii, index[kk, ii, ll]] = p[kk, ii, ll]

    stats = DenominatorStats(full_denom=None, sparse_denom=denom, rho=None, shared_row_max=row_max)
    return AttentionOutput(out=out, weights=weights, row_mass=p.sum(axis=-1), stats=stats)


def post_softmax_masked(inp: AttentionInputs, mask: SparseMask) -> AttentionOutput:
    """Full softmax with excluded entries zeroed afterwards (diagnostic, no savings).

    The row mass of the result is the full-attention probability captured by
    the mask, i.e. the exact denominator ratio.
    """
    _check_mask(inp, mask)
    full = full_attention(inp)
    a = full.weights * mask.bits
    out = np.einsum("hij,hjd->hid", a, inp.v)
    return AttentionOutput(out=out, weights=a, row_mass=a.sum(axis=-1), stats=full.stats)


def compute_denominator_ratio(inp: AttentionInputs, mask: SparseMask) -> DenominatorStats:
    _check_mask(inp, mask)
    a_pre = inp.logits()
    if not np.all(np.isfinite(a_pre)):
        raise NumericError("logits contain NaN or Inf")
    row_max = a_pre.max(axis=-1)
    e = np.exp(a_pre - row_max[..., None])
    full = e.sum(axis=-1)
    sparse = np.where(mask.bits, e, 0.0).sum(axis=-1)
    rho = np.clip(sparse / full, RHO_FLOOR, 1.0)
    return DenominatorStats(full_denom=full, sparse_denom=sparse, rho=rho, shared_row_max=row_max)


def _check_rho(rho, shape) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != shape:
        rho = np.broadcast_to(rho, shape)
    if not np.all((rho > 0.0) & (rho <= 1.0)):
        raise ParameterError("rho must lie in (0, 1] elementwise")
    return rho


def reshape_attention(inp: AttentionInputs, mask: SparseMask, rho) -> AttentionOutput:
    """Sparse attention with row ``(k, i)`` scaled by ``rho[k, i]``.

    ``rho`` may be an ``(h, T)`` array or anything that broadcasts to it.
    """
    rho = _check_rho(rho, (inp.heads, inp.tokens))
    sp = sparse_attention(inp, mask)
    r = rho[..., None]
    return AttentionOutput(
        out=sp.out * r,
        weights=sp.weights * r,
        row_mass=sp.row_mass * rho,
        stats=sp.stats,
    )


def compute_residual(full_out: AttentionOutput, reshaped_out: AttentionOutput) -> np.ndarray:
    if full_out.out.shape != reshaped_out.out.shape:
        raise ShapeError(f"output shapes differ: {full_out.out.shape} vs {reshaped_out.out.shape}")
    return full_out.out - reshaped_out.out


def rettention_attention(inp: AttentionInputs, mask: SparseMask, cache: "AttentionCache | None") -> AttentionOutput:
    """Reshape the sparse softmax with the cached ratio, then add the cached residual.

    Raises:
        CacheMissError: if ``cache`` is ``None``.
    """
    if cache is None:
        raise CacheMissError("no cached ratio/residual; run a full (caching) step first")
    if cache.residual.shape != inp.v.shape:
        raise ShapeError(f"cached residual {cache.residual.shape} does not match V {inp.v.shape}")
    reshaped = reshape_attention(inp, mask, cache.current_rho)
    return AttentionOutput(
        out=reshaped.out + cache.residual,
        weights=reshaped.weights,
        row_mass=reshaped.row_mass,
        stats=reshaped.stats,
    )
