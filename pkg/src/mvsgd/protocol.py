"""Round-based parameter-server protocol for the sparse DSGD schemes.

Every message between workers and the server goes through the codec and
is metered by a :class:`CommLedger`; the receiving side only ever sees the
decoded stream. Uplink bits are summed over workers, downlink bits count one
copy of each broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec
from .config import ExperimentConfig
from .errors import DegenerateInput, InvalidArgument, ProtocolViolation
from .sparsify import (ErrorAccumulator, SparseMask, SparseUpdate, accumulate, apply_mask,
                       residual, top_k_mask)
from .tensor_core import BatchSampler, Dataset, Model, Shard, local_steps, loss, lr_at
from .voting import (AddDrop, ad_apply, ad_propose, select_random_weighted, select_topk_mask,
                     tally_votes)

LEDGER_FIELDS = ("up_loc", "up_val", "up_overhead", "down_loc", "down_val", "down_overhead")
CSV_COLUMNS = ("round", "train_loss", "eval_loss", "mask_churn") + tuple(
    f"{name}_bits" for name in LEDGER_FIELDS)


@dataclass
class WorkerState:
    id: int
    model: Model
    shard: Shard
    error: ErrorAccumulator
    sampler: BatchSampler
    prev_vote: SparseMask | None = None


@dataclass
class ServerState:
    model: Model
    scheme: str
    rng: np.random.Generator
    train: Dataset
    eval: Dataset
    vote_sum: np.ndarray | None = None
    prev_mask: SparseMask | None = None
    round: int = 0


@dataclass
class RoundBits:
    up_loc: int = 0
    up_val: int = 0
    up_overhead: int = 0
    down_loc: int = 0
    down_val: int = 0
    down_overhead: int = 0

    def up_total(self) -> int:
        return self.up_loc + self.up_val + self.up_overhead

    def down_total(self) -> int:
        return self.down_loc + self.down_val + self.down_overhead


@dataclass
class CommLedger:
    rounds: list[RoundBits] = field(default_factory=list)
    warmup: list[bool] = field(default_factory=list)

    def open_round(self, warmup: bool = False) -> RoundBits:
        self.rounds.append(RoundBits())
        self.warmup.append(warmup)
        return self.rounds[-1]

    def credit(self, kind: str, stream_or_bits) -> None:
        bits = stream_or_bits if isinstance(stream_or_bits, int) else stream_or_bits.bit_len
        if bits < 0:
            raise InvalidArgument("bit counts are nonnegative")
        rec = self.rounds[-1]
        setattr(rec, kind, getattr(rec, kind) + bits)

    def totals(self, include_warmup: bool = True) -> RoundBits:
        out = RoundBits()
        for rec, w in zip(self.rounds, self.warmup):
            if w and not include_warmup:
                continue
            for name in LEDGER_FIELDS:
                setattr(out, name, getattr(out, name) + getattr(rec, name))
        return out


@dataclass
class RoundReport:
    round: int
    train_loss: float
    eval_loss: float
    mask_churn: int
    bits: RoundBits
    warmup: bool
    mask: SparseMask | None
    vote_churn: list[int] = field(default_factory=list)

    def csv_row(self) -> list[str]:
        return [str(self.round), repr(self.train_loss), repr(self.eval_loss), str(self.mask_churn)] + [
            str(getattr(self.bits, name)) for name in LEDGER_FIELDS]


def server_aggregate(updates: list[SparseUpdate], N: int) -> SparseUpdate:
    """Mean over N workers of updates sharing one mask, summed in list order."""
    if not updates:
        raise InvalidArgument("no updates to aggregate")
    mask = updates[0].mask
    total = np.zeros(len(mask))
    for n, u in enumerate(updates):
        if u.mask != mask:
            raise ProtocolViolation(f"update {n} does not use the common mask")
        total = total + u.values
    return SparseUpdate(mask, total / N)


def apply_update(model: Model, agg: SparseUpdate) -> Model:
    if agg.dim != model.dim:
        raise InvalidArgument(f"dimension mismatch: {agg.dim} != {model.dim}")
    params = model.params.copy()
    params[agg.mask.indices] += agg.values
    return model.with_params(params)


# ---------------------------------------------------------------------------
# message helpers: encode on the sender, decode on the receiver

def _send_mask(ledger, direction, mask, block):
    stream = codec.encode_mask(mask, *block)
    ledger.credit(f"{direction}_loc", stream)
    return codec.decode_mask(stream, mask.dim, *block)


def _send_values(ledger, direction, values, q):
    """Transmit a value vector; returns what the receiver decodes."""
    if q >= 32:
        stream = codec.encode_raw_values(values)
        ledger.credit(f"{direction}_val", stream)
        return codec.read_raw_values(stream.reader(), len(values))
    try:
        block = codec.quantize_values(values, q)
    except DegenerateInput:
        # all zero: codes all point at interval L, whose mean is 0
        L = 1 << (q - 1)
        n = len(values)
        block = codec.QuantizedBlock(q, np.zeros(n, np.uint8), np.full(n, L), np.zeros(L), 0.0, 0.0)
    code_bits, mean_bits = codec.quantized_stream_bits(len(values), q)
    stream = codec.encode_quantized(block)
    assert stream.bit_len == code_bits + mean_bits
    ledger.credit(f"{direction}_val", code_bits)
    ledger.credit(f"{direction}_overhead", mean_bits)
    return codec.dequantize(codec.read_quantized(stream.reader(), len(values), q))


def _broadcast(server, workers, ledger, agg: SparseUpdate):
    values = _send_values(ledger, "down", agg.values, 32)
    received = SparseUpdate(agg.mask, values)
    server.model = apply_update(server.model, received)
    for w in workers:
        w.model = apply_update(w.model, received)


def _dense_round(server, workers, cfg, ledger, deltas):
    """Uncompressed exchange: baseline DSGD and warmup rounds."""
    full = SparseMask.full(server.model.dim)
    updates = [SparseUpdate(full, _send_values(ledger, "up", d, 32)) for d in deltas]
    _broadcast(server, workers, ledger, server_aggregate(updates, cfg.workers))
    return None


def _vote_masks(server, workers, cfg, ledger, deltas_bar, mask_block, ad_block):
    """Voting phase; returns the common mask M_t and per-worker vote churn."""
    K = cfg.K
    own = [top_k_mask(db, K) for db in deltas_bar]
    churn = []
    if cfg.scheme == "mv-ad" and server.vote_sum is not None:
        changes = []
        for w, m, db in zip(workers, own, deltas_bar):
            ch = ad_propose(w.prev_vote, m, db, cfg.K_ad)
            stream = codec.encode_mask(ch.adds, *ad_block)
            codec.encode_mask(ch.drops, *ad_block, out=stream)
            ledger.credit("up_loc", stream)
            reader = stream.reader()
            got = AddDrop(codec.read_mask(reader, m.dim, *ad_block),
                          codec.read_mask(reader, m.dim, *ad_block))
            if reader.remaining:
                raise ProtocolViolation(f"worker {w.id} sent trailing bits")
            new_vote = ch.apply_to(w.prev_vote)
            churn.append(new_vote.symmetric_difference_size(w.prev_vote))
            w.prev_vote = new_vote
            changes.append(got)
        server.vote_sum = ad_apply(server.vote_sum, changes)
        counts = server.vote_sum
    else:
        votes = [_send_mask(ledger, "up", m, mask_block) for m in own]
        counts = tally_votes(votes)
        if cfg.scheme == "mv-ad":
            # bootstrap: full votes initialize the per-worker votes and the running sum
            for w, m in zip(workers, own):
                w.prev_vote = m
            server.vote_sum = counts
    if cfg.scheme == "mv-rs":
        mask = select_random_weighted(counts, K, server.rng)
    else:
        mask = select_topk_mask(counts, K)
    return _send_mask(ledger, "down", mask, mask_block), churn


def _sparse_round(server, workers, cfg, ledger, deltas):
    deltas_bar = [accumulate(d, w.error) for d, w in zip(deltas, workers)]
    mask_block = codec.block_params_for_ratio(cfg.phi)
    churn = []
    if cfg.scheme == "topk-local":
        sent = [apply_mask(db, top_k_mask(db, cfg.K)) for db in deltas_bar]
        received = []
        for s in sent:
            m = _send_mask(ledger, "up", s.mask, mask_block)
            received.append(SparseUpdate(m, _send_values(ledger, "up", s.values, cfg.q)))
        dense = np.zeros(server.model.dim)
        support = SparseMask(server.model.dim)
        for r in received:
            dense[r.mask.indices] += r.values
            support = support.union(r.mask)
        agg = SparseUpdate(support, dense[support.indices] / cfg.workers)
        union_block = codec.block_params_for_ratio(min(1.0, cfg.workers * cfg.phi))
        mask = _send_mask(ledger, "down", agg.mask, union_block)
        agg = SparseUpdate(mask, agg.values)
    else:
        ad_block = codec.block_params_for_ratio(cfg.phi_ad) if cfg.scheme == "mv-ad" else None
        mask, churn = _vote_masks(server, workers, cfg, ledger, deltas_bar, mask_block, ad_block)
        sent = [apply_mask(db, mask) for db in deltas_bar]
        received = [SparseUpdate(mask, _send_values(ledger, "up", s.values, cfg.q)) for s in sent]
        agg = server_aggregate(received, cfg.workers)
    for w, db, s, r in zip(workers, deltas_bar, sent, received):
        if cfg.error_feedback:
            w.error = ErrorAccumulator(residual(db, s, r.values if cfg.quant_feedback else None))
    _broadcast(server, workers, ledger, agg)
    return mask, churn


def run_round(server: ServerState, workers: list[WorkerState], cfg: ExperimentConfig,
              ledger: CommLedger) -> RoundReport:
    t = server.round
    lr = lr_at(cfg.schedule(), t)
    warmup = t < cfg.warmup_rounds
    ledger.open_round(warmup)
    for w in workers:
        if not np.array_equal(w.model.params, server.model.params):
            raise ProtocolViolation(f"worker {w.id} is out of sync with the server model")
    deltas = [local_steps(w.model, w.shard, cfg.H, lr, w.sampler) for w in workers]
    churn = []
    if warmup or cfg.scheme == "baseline-dsgd":
        mask = _dense_round(server, workers, cfg, ledger, deltas)
    else:
        mask, churn = _sparse_round(server, workers, cfg, ledger, deltas)
    mask_churn = 0
    if mask is not None and server.prev_mask is not None:
        mask_churn = mask.symmetric_difference_size(server.prev_mask)
    server.prev_mask = mask
    server.round += 1
    return RoundReport(
        round=t,
        train_loss=loss(server.model, server.train.inputs, server.train.targets),
        eval_loss=loss(server.model, server.eval.inputs, server.eval.targets),
        mask_churn=mask_churn,
        bits=ledger.rounds[-1],
        warmup=warmup,
        mask=mask,
        vote_churn=churn,
    )
