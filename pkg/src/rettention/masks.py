"""Static sparse-attention masks and sparsity accounting.

A mask is a boolean ``(h, T, T)`` inclusion matrix. The constructors here
always include the diagonal, so every query row has at least one key and the
sparse softmax denominator is never empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class VideoLayout:
    """Token layout of a video: ``frames`` blocks of ``spatial_tokens`` each."""

    frames: int
    spatial_tokens: int

    def __post_init__(self):
        if self.frames < 1 or self.spatial_tokens < 1:
            raise ParameterError(f"frames and spatial_tokens must be >= 1, got {self}")

    @property
    def tokens(self) -> int:
        return self.frames * self.spatial_tokens


class SparseMask:
    """Boolean inclusion matrix ``bits[k, i, j]`` plus derived index sets.

    Instances are treated as immutable; ``bits`` is stored read-only.
    """

    def __init__(self, bits):
        bits = np.array(bits, dtype=bool)
        if bits.ndim != 3 or bits.shape[1] != bits.shape[2] or min(bits.shape) < 1:
            raise ShapeError(f"mask bits must have shape (h, T, T), got {bits.shape}")
        bits.setflags(write=False)
        self.bits = bits

    def __repr__(self) -> str:
        return f"SparseMask(h={self.heads}, T={self.tokens}, sparsity={sparsity(self):.3f}%)"

    def __eq__(self, other) -> bool:
        return isinstance(other, SparseMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None

    @property
    def heads(self) -> int:
        return self.bits.shape[0]

    @property
    def tokens(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bits.shape

    @cached_property
    def included_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @cached_property
    def row_sizes(self) -> np.ndarray:
        """``|S_{k,i}|`` as an ``(h, T)`` integer array."""
        return self.bits.sum(axis=-1)

    @cached_property
    def row_sets(self) -> list[list[np.ndarray]]:
        """Ascending included column indices per ``(head, row)``."""
        return [[np.flatnonzero(row) for row in head] for head in self.bits]

    @cached_property
    def padded_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Row sets packed into ``(h, T, L)`` arrays with ``L = max |S_{k,i}|``.

        Returns ``(index, valid)``; padded slots point at column 0 and have
        ``valid == False``. Ascending order is preserved in the valid prefix.
        """
        width = max(int(self.row_sizes.max()), 1)
        # stable argsort of ~bits puts included columns first, in ascending order
        order = np.argsort(~self.bits, axis=-1, kind="stable")[..., :width]
        valid = np.arange(width) < self.row_sizes[..., None]
        index = np.where(valid, order, 0)
        index.setflags(write=False)
        valid.setflags(write=False)
        return index, valid

    def is_head_uniform(self) -> bool:
        return bool(np.all(self.bits == self.bits[:1]))

    def has_diagonal(self) -> bool:
        return bool(np.all(np.diagonal(self.bits, axis1=1, axis2=2)))

    def to_dict(self) -> dict:
        return {
            "h": self.heads,
            "T": self.tokens,
            "rows": [[s.tolist() for s in head] for head in self.row_sets],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SparseMask":
        h, t = int(doc["h"]), int(doc["T"])
        rows = doc["rows"]
        if len(rows) != h or any(len(head) != t for head in rows):
            raise ShapeError(f"mask document rows do not match h={h}, T={t}")
        bits = np.zeros((h, t, t), dtype=bool)
        for k, head in enumerate(rows):
            for i, cols in enumerate(head):
                cols = np.asarray(cols, dtype=np.int64)
                if cols.size and (cols.min() < 0 or cols.max() >= t):
                    raise ShapeError(f"column index out of range in row ({k}, {i})")
                bits[k, i, cols] = True
        return cls(bits)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "SparseMask":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_heads(h: int) -> None:
    if h < 1:
        raise ParameterError(f"heads must be >= 1, got {h}")


def _band(n: int, w: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= w


def full_mask(h: int, T: int) -> SparseMask:
    _check_heads(h)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    return SparseMask(np.ones((h, T, T), dtype=bool))


def sliding_window_mask(h: int, T: int, w: int) -> SparseMask:
    """Row ``i`` includes every ``j`` with ``|i - j| <= w``; same for all heads."""
    _check_heads(h)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0 <= w < T:
        raise ParameterError(f"half-width w must satisfy 0 <= w < T={T}, got {w}")
    return SparseMask(np.broadcast_to(_band(T, w), (h, T, T)))


def framewise_window_mask(h: int, layout: VideoLayout, w: int) -> SparseMask:
    """Spatial window of half-width ``w`` repeated across every pair of frames.

    Token ``f * S_f + s`` attends to ``g * S_f + s'`` for all frames ``g``
    whenever ``|s - s'| <= w``.
    """
    _check_heads(h)
    if not 0 <= w < layout.spatial_tokens:
        raise ParameterError(
            f"half-width w must satisfy 0 <= w < spatial_tokens={layout.spatial_tokens}, got {w}"
        )
    spatial = _band(layout.spatial_tokens, w)
    bits = np.kron(np.ones((layout.frames, layout.frames), dtype=bool), spatial)
    T = layout.tokens
    return SparseMask(np.broadcast_to(bits, (h, T, T)))


def block_diagonal_mask(h: int, T: int, block: int) -> SparseMask:
    """Tokens attend within consecutive blocks of ``block`` tokens (last may be short)."""
    _check_heads(h)
    if not 1 <= block <= T:
        raise ParameterError(f"block must satisfy 1 <= block <= T={T}, got {block}")
    ids = np.arange(T) // block
    return SparseMask(np.broadcast_to(ids[:, None] == ids[None, :], (h, T, T)))


def sparsity(mask: SparseMask) -> float:
    """Percentage of excluded entries, ``(1 - |S| / (h T^2)) * 100``."""
    h, T, _ = mask.shape
    return (1.0 - mask.included_count / (h * T * T)) * 100.0


def row_index_sets(mask: SparseMask) -> list[list[np.ndarray]]:
    return mask.row_sets


def window_included_count(T: int, w: int) -> int:
    """Closed-form ``|S|`` of a single-head window mask: ``T(2w+1) - w(w+1)``."""
    return T * (2 * w + 1) - w * (w + 1)


def window_for_sparsity(T: int, target: float) -> int:
    """Largest half-width ``w`` whose window mask on ``T`` tokens has sparsity >= ``target``.

    Sparsity only decreases as ``w`` grows, so the scan stops at the first miss.

    Raises:
        ParameterError: if even ``w = 0`` (diagonal only) is below ``target``.
    """
    best = None
    for w in range(T):
        achieved = (1.0 - window_included_count(T, w) / (T * T)) * 100.0
        if achieved < target:
            break
        best = w
    if best is None:
        limit = (1.0 - 1.0 / T) * 100.0
        raise ParameterError(
            f"target sparsity {target}% is unreachable on T={T}; diagonal-only gives {limit:.4f}%"
        )
    return best
