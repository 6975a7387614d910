"""Top-K / bottom-K selection, masking and error-feedback bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .tensor_core import as_dense


class SparseMask:
    """Sorted, duplicate-free set of indices in ``[0, dim)``."""

    __slots__ = ("dim", "indices")

    def __init__(self, dim: int, indices=()):
        idx = np.array(indices, dtype=np.int64).ravel()
        if dim < 0:
            raise InvalidArgument("mask dim must be nonnegative")
        if idx.size:
            if idx.size > 1 and np.any(np.diff(idx) <= 0):
                idx = np.unique(idx)
            if idx[0] < 0 or idx[-1] >= dim:
                raise InvalidArgument(f"mask index out of range [0, {dim})")
        self.dim = int(dim)
        self.indices = idx
        self.indices.flags.writeable = False

    @classmethod
    def full(cls, dim: int) -> SparseMask:
        return cls(dim, np.arange(dim))

    @classmethod
    def from_dense(cls, flags) -> SparseMask:
        flags = np.asarray(flags)
        return cls(flags.shape[0], np.flatnonzero(flags))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=bool)
        out[self.indices] = True
        return out

    def __len__(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMask):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash((self.dim, self.indices.tobytes()))

    def __repr__(self) -> str:
        shown = self.indices[:8].tolist()
        more = "..." if len(self) > 8 else ""
        return f"SparseMask(dim={self.dim}, indices={shown}{more})"

    def union(self, other: SparseMask) -> SparseMask:
        _check_same_dim(self, other)
        return SparseMask(self.dim, np.union1d(self.indices, other.indices))

    def difference(self, other: SparseMask) -> SparseMask:
        _check_same_dim(self, other)
        return SparseMask(self.dim, np.setdiff1d(self.indices, other.indices, assume_unique=True))

    def issubset(self, other: SparseMask) -> bool:
        return self.dim == other.dim and np.isin(self.indices, other.indices).all()

    def symmetric_difference_size(self, other: SparseMask) -> int:
        _check_same_dim(self, other)
        return int(np.setxor1d(self.indices, other.indices, assume_unique=True).size)


def _check_same_dim(a: SparseMask, b: SparseMask):
    if a.dim != b.dim:
        raise InvalidArgument(f"mask dims differ: {a.dim} != {b.dim}")


@dataclass
class SparseUpdate:
    mask: SparseMask
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.mask),):
            raise InvalidArgument("values must align with mask indices")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("non-finite values in sparse update")

    @property
    def dim(self) -> int:
        return self.mask.dim

    def densify(self) -> np.ndarray:
        out = np.zeros(self.mask.dim)
        out[self.mask.indices] = self.values
        return out


@dataclass
class ErrorAccumulator:
    """Per-worker residual of update mass that was not transmitted."""

    residual: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> ErrorAccumulator:
        return cls(np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.residual.shape[0]


def largest_indices(scores: np.ndarray, K: int) -> np.ndarray:
    """Sorted indices of the K largest scores; ties go to the lower index."""
    d = scores.shape[0]
    if K <= 0:
        return np.empty(0, dtype=np.int64)
    if K >= d:
        return np.arange(d, dtype=np.int64)
    kth = np.partition(scores, d - K)[d - K]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[: K - above.size]
    return np.sort(np.concatenate([above, ties]))


def top_k_mask(v, K: int) -> SparseMask:
    v = as_dense(v)
    if not 1 <= K <= v.shape[0]:
        raise InvalidArgument(f"K={K} out of range [1, {v.shape[0]}]")
    return SparseMask(v.shape[0], largest_indices(np.abs(v), K))


def bottom_k_mask(v, K: int, support: SparseMask) -> SparseMask:
    """The K indices of ``support`` with the smallest ``|v|``."""
    v = as_dense(v, support.dim)
    if not 0 <= K <= len(support):
        raise InvalidArgument(f"K={K} out of range [0, {len(support)}]")
    picked = largest_indices(-np.abs(v[support.indices]), K)
    return SparseMask(support.dim, support.indices[picked])


def apply_mask(v, mask: SparseMask) -> SparseUpdate:
    v = as_dense(v)
    if v.shape[0] != mask.dim:
        raise InvalidArgument(f"dimension mismatch: {v.shape[0]} != {mask.dim}")
    return SparseUpdate(mask, v[mask.indices].copy())


def accumulate(delta, acc: ErrorAccumulator) -> np.ndarray:
    delta = as_dense(delta)
    if delta.shape[0] != acc.dim:
        raise InvalidArgument(f"dimension mismatch: {delta.shape[0]} != {acc.dim}")
    return delta + acc.residual


def residual(delta_bar, sent: SparseUpdate, received: np.ndarray | None = None) -> np.ndarray:
    """Error left behind after sending ``sent``.

    By default only sparsification error is kept (masked positions become
    zero). Passing ``received`` (what the server actually decodes at the
    masked positions) also keeps the quantization error there.
    """
    delta_bar = as_dense(delta_bar)
    if delta_bar.shape[0] != sent.dim:
        raise InvalidArgument(f"dimension mismatch: {delta_bar.shape[0]} != {sent.dim}")
    out = delta_bar.copy()
    idx = sent.mask.indices
    if received is None:
        out[idx] = 0.0
    else:
        out[idx] = delta_bar[idx] - np.asarray(received, dtype=np.float64)
    return out
