"""Consensus-mask construction from worker votes.

Vote counts are plain int64 arrays of length ``dim``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ProtocolViolation
from .sparsify import SparseMask, bottom_k_mask, largest_indices
from .tensor_core import as_dense


@dataclass
class AddDrop:
    adds: SparseMask
    drops: SparseMask

    def apply_to(self, vote: SparseMask) -> SparseMask:
        """The worker's new vote: ``vote + adds - drops``."""
        keep = np.setdiff1d(vote.indices, self.drops.indices, assume_unique=True)
        return SparseMask(vote.dim, np.union1d(keep, self.adds.indices))


def tally_votes(masks: list[SparseMask]) -> np.ndarray:
    if not masks:
        raise InvalidArgument("need at least one vote")
    dim = masks[0].dim
    counts = np.zeros(dim, dtype=np.int64)
    for m in masks:
        if m.dim != dim:
            raise InvalidArgument(f"vote dims differ: {m.dim} != {dim}")
        counts[m.indices] += 1
    return counts


def select_topk_mask(counts: np.ndarray, K: int) -> SparseMask:
    """The K most-voted positions, ties toward the lower index."""
    counts = np.asarray(counts)
    if not 1 <= K <= counts.shape[0]:
        raise InvalidArgument(f"K={K} out of range [1, {counts.shape[0]}]")
    return SparseMask(counts.shape[0], largest_indices(counts, K))


def select_random_weighted(counts: np.ndarray, K: int, rng: np.random.Generator) -> SparseMask:
    """K distinct positions drawn sequentially without replacement, each draw
    proportional to the vote counts of the positions still available.

    Uses exponential race keys ``log(u) / w``: keeping the K largest keys has
    the same law as the sequential draw. Positions with zero votes are never
    picked; if fewer than K positions have votes, all of them are returned.
    """
    counts = np.asarray(counts)
    if K < 1:
        raise InvalidArgument("K must be >= 1")
    positive = counts > 0
    n_pos = int(np.count_nonzero(positive))
    if n_pos == 0:
        raise InvalidArgument("all vote counts are zero")
    u = rng.random(counts.shape[0])
    if n_pos <= K:
        return SparseMask(counts.shape[0], np.flatnonzero(positive))
    keys = np.full(counts.shape[0], -np.inf)
    keys[positive] = np.log(u[positive]) / counts[positive]
    return SparseMask(counts.shape[0], largest_indices(keys, K))


def ad_propose(prev_vote: SparseMask, cur_topk: SparseMask, delta_bar, K_ad: int) -> AddDrop:
    """Move at most K_ad positions of the previous vote toward the current top-K.

    Adds are the largest-|delta_bar| positions of ``cur_topk - prev_vote``; drops
    are the same number of smallest-|delta_bar| positions of
    ``prev_vote - cur_topk``, so the vote keeps its size.
    """
    if len(prev_vote) != len(cur_topk) or prev_vote.dim != cur_topk.dim:
        raise InvalidArgument("previous vote and current top-K must have equal size")
    if K_ad < 0:
        raise InvalidArgument("K_ad must be nonnegative")
    mag = np.abs(as_dense(delta_bar, prev_vote.dim))
    candidates = cur_topk.difference(prev_vote)
    stale = prev_vote.difference(cur_topk)
    m = min(K_ad, len(candidates))
    adds = SparseMask(prev_vote.dim, candidates.indices[largest_indices(mag[candidates.indices], m)])
    drops = bottom_k_mask(mag, m, stale)
    return AddDrop(adds, drops)


def ad_apply(vote_sum: np.ndarray, changes: list[AddDrop]) -> np.ndarray:
    """Cumulative vote count after every worker's add/drop, applied in order."""
    out = np.array(vote_sum, dtype=np.int64, copy=True)
    for n, ch in enumerate(changes):
        out[ch.adds.indices] += 1
        out[ch.drops.indices] -= 1
        if ch.drops.indices.size and out[ch.drops.indices].min() < 0:
            raise ProtocolViolation(f"worker {n} dropped a position with no votes")
    return out
