import copy
import math

import numpy as np
import pytest

from mvsgd.codec import block_params_for_ratio, encode_mask, mask_stream_bits
from mvsgd.config import ExperimentConfig
from mvsgd.errors import InvalidArgument, ProtocolViolation
from mvsgd.experiment import build_simulation, render_csv, run_experiment
from mvsgd.protocol import (CommLedger, ServerState, WorkerState, apply_update, run_round,
                            server_aggregate)
from mvsgd.sparsify import ErrorAccumulator, SparseMask, SparseUpdate, top_k_mask
from mvsgd.tensor_core import BatchSampler, Dataset, Model, Shard, local_steps, lr_at
from mvsgd.voting import tally_votes

f32 = lambda x: np.asarray(x, dtype=np.float32).astype(np.float64)  # noqa: E731


def small_cfg(**kw):
    base = dict(workers=4, d_in=64, n_samples=256, n_eval=64, batch_size=8, phi=0.1,
                phi_ad=0.03, rounds=12, lr=0.05, scheme="mv")
    base.update(kw)
    return ExperimentConfig(**base)


def run(cfg):
    sim = build_simulation(cfg)
    return sim, [sim.step() for _ in range(cfg.rounds)]


def snapshot_delta_bars(sim):
    """Recompute each worker's accumulated update for the coming round on copies."""
    cfg = sim.cfg
    lr = lr_at(cfg.schedule(), sim.server.round)
    out = []
    for w in sim.workers:
        d = local_steps(w.model, w.shard, cfg.H, lr, copy.deepcopy(w.sampler))
        out.append(d + w.error.residual)
    return out


class TestAggregate:
    def test_mean_over_workers(self):
        m = SparseMask(5, [1, 3])
        agg = server_aggregate([SparseUpdate(m, [1.0, 2.0]), SparseUpdate(m, [3.0, 6.0])], 2)
        assert agg.mask == m and agg.values.tolist() == [2.0, 4.0]

    def test_single_worker(self):
        m = SparseMask(3, [0])
        assert server_aggregate([SparseUpdate(m, [7.0])], 1).values.tolist() == [7.0]

    def test_mask_mismatch(self):
        with pytest.raises(ProtocolViolation):
            server_aggregate([SparseUpdate(SparseMask(3, [0]), [1.0]),
                              SparseUpdate(SparseMask(3, [1]), [1.0])], 2)

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            server_aggregate([], 1)

    def test_apply_update(self):
        model = Model("linear-regression", np.array([1.0, 1.0, 1.0]), 3)
        out = apply_update(model, SparseUpdate(SparseMask(3, [0, 2]), [0.5, -1.0]))
        assert out.params.tolist() == [1.5, 1.0, 0.0]
        assert model.params.tolist() == [1.0, 1.0, 1.0]
        assert apply_update(model, SparseUpdate(SparseMask(3), [])).params.tolist() == [1.0, 1.0, 1.0]

    def test_apply_update_dim_mismatch(self):
        with pytest.raises(InvalidArgument):
            apply_update(Model("linear-regression", np.zeros(3), 3),
                         SparseUpdate(SparseMask(4, [0]), [1.0]))


class TestHandTrace:
    """Three workers, one sample each, target 1 and zero start: every local
    update equals the worker's input row."""

    rows = np.array([[5, 4, 0, 0, 0, 0, 0, 1],
                     [0, 4, 3, 0, 0, 0, 0, 0],
                     [0, 4, 0, 0, 6, 0, 0, 0]], dtype=float)

    def build(self):
        cfg = ExperimentConfig(workers=3, d_in=8, n_samples=3, n_eval=1, batch_size=0, phi=0.25,
                               lr=0.5, weight_decay=0.0, rounds=1, scheme="mv")
        model = Model("linear-regression", np.zeros(8), 8, weight_decay=0.0)
        y = np.ones(1)
        workers = [WorkerState(n, model.with_params(np.zeros(8)),
                               Shard(n, np.array([n]), self.rows[n:n + 1], y),
                               ErrorAccumulator.zeros(8), BatchSampler(1)) for n in range(3)]
        train = Dataset(self.rows, np.ones(3))
        server = ServerState(model, "mv", np.random.default_rng(0), train, train)
        return cfg, server, workers

    def test_round(self):
        cfg, server, workers = self.build()
        assert cfg.K == 2
        report = run_round(server, workers, cfg, CommLedger())
        assert report.mask.indices.tolist() == [0, 1]
        expected = np.zeros(8)
        expected[0], expected[1] = f32(5 / 3), 4.0
        assert np.array_equal(server.model.params, expected)
        for w in workers:
            assert np.array_equal(w.model.params, expected)
        errs = [w.error.residual.tolist() for w in workers]
        assert errs[0] == [0, 0, 0, 0, 0, 0, 0, 1]
        assert errs[1] == [0, 0, 3, 0, 0, 0, 0, 0]
        assert errs[2] == [0, 0, 0, 0, 6, 0, 0, 0]

    def test_round_bits(self):
        cfg, server, workers = self.build()
        bits = run_round(server, workers, cfg, CommLedger()).bits
        # 8 positions addressed in blocks of 4 with 2-bit offsets
        assert block_params_for_ratio(0.25) == (2, 4)
        assert bits.up_loc == 3 * (2 * 3 + 2)
        assert bits.up_val == 3 * 2 * 32
        assert bits.down_loc == 2 * 3 + 2
        assert bits.down_val == 2 * 32
        assert bits.up_overhead == bits.down_overhead == 0

    def test_out_of_sync_worker(self):
        cfg, server, workers = self.build()
        workers[1].model = workers[1].model.with_params(np.ones(8))
        with pytest.raises(ProtocolViolation):
            run_round(server, workers, cfg, CommLedger())


class TestDegenerateCases:
    def test_full_mask_matches_baseline_bitwise(self):
        sim_a, a = run(small_cfg(scheme="mv", phi=1.0))
        sim_b, b = run(small_cfg(scheme="baseline-dsgd", phi=1.0))
        assert [x.train_loss for x in a] == [y.train_loss for y in b]
        assert np.array_equal(sim_a.server.model.params, sim_b.server.model.params)

    def test_single_worker_mask_is_own_topk(self):
        cfg = small_cfg(workers=1, n_samples=64)
        sim = build_simulation(cfg)
        for _ in range(cfg.rounds):
            (db,) = snapshot_delta_bars(sim)
            report = sim.step()
            assert report.mask == top_k_mask(db, cfg.K)

    def test_baseline_matches_dense_recursion(self):
        cfg = small_cfg(scheme="baseline-dsgd", rounds=20)
        sim = build_simulation(cfg)
        theta = sim.server.model.params.copy()
        samplers = [copy.deepcopy(w.sampler) for w in sim.workers]
        model = sim.server.model
        for t in range(cfg.rounds):
            lr = lr_at(cfg.schedule(), t)
            m = model.with_params(theta)
            total = np.zeros_like(theta)
            for w, s in zip(sim.workers, samplers):
                total = total + f32(local_steps(m, w.shard, cfg.H, lr, s))
            theta = theta + f32(total / cfg.workers)
            sim.step()
            np.testing.assert_allclose(sim.server.model.params, theta, rtol=1e-6, atol=1e-9)

    def test_no_error_feedback_keeps_errors_zero(self):
        sim, _ = run(small_cfg(error_feedback=False))
        for w in sim.workers:
            assert not w.error.residual.any()


class TestLedger:
    @pytest.mark.parametrize("q", [32, 4])
    def test_mv_bits_match_stream_lengths(self, q):
        cfg = small_cfg(q=q)
        sim, reports = run(cfg)
        b, B = block_params_for_ratio(cfg.phi)
        loc = mask_stream_bits(cfg.K, cfg.dim, b, B)
        for r in reports:
            assert r.bits.up_loc == cfg.workers * loc
            assert r.bits.down_loc == loc
            assert r.bits.up_val == cfg.workers * cfg.K * q
            assert r.bits.down_val == cfg.K * 32
            assert r.bits.up_overhead == (0 if q == 32 else cfg.workers * 2 ** (q - 1) * 32)
            assert r.bits.down_overhead == 0
        tot = sim.ledger.totals()
        assert tot.up_loc == sum(r.bits.up_loc for r in reports)

    def test_mv_ad_bits(self):
        cfg = small_cfg(scheme="mv-ad", rounds=15)
        sim, reports = run(cfg)
        b, B = block_params_for_ratio(cfg.phi)
        b_ad, B_ad = block_params_for_ratio(cfg.phi_ad)
        assert reports[0].bits.up_loc == cfg.workers * mask_stream_bits(cfg.K, cfg.dim, b, B)
        for r in reports[1:]:
            assert len(r.vote_churn) == cfg.workers
            expected = sum(2 * mask_stream_bits(c // 2, cfg.dim, b_ad, B_ad) for c in r.vote_churn)
            assert r.bits.up_loc == expected
            assert r.bits.down_loc == mask_stream_bits(cfg.K, cfg.dim, b, B)

    def test_topk_local_sends_union(self):
        cfg = small_cfg(scheme="topk-local", rounds=5)
        sim = build_simulation(cfg)
        b, B = block_params_for_ratio(min(1.0, cfg.workers * cfg.phi))
        for _ in range(cfg.rounds):
            dbs = snapshot_delta_bars(sim)
            report = sim.step()
            union = SparseMask(cfg.dim)
            for db in dbs:
                union = union.union(top_k_mask(db, cfg.K))
            assert report.mask == union
            assert report.bits.down_loc == len(encode_mask(union, b, B))
            assert report.bits.down_val == 32 * len(union)

    def test_warmup_rounds_are_dense(self):
        cfg = small_cfg(warmup_rounds=3, warmup_start=0.01)
        sim, reports = run(cfg)
        for r in reports[:3]:
            assert r.warmup and r.mask is None
            assert r.bits.up_loc == 0 and r.bits.up_val == cfg.workers * 32 * cfg.dim
            assert r.bits.down_val == 32 * cfg.dim
        assert not reports[3].warmup and len(reports[3].mask) == cfg.K
        assert sim.ledger.totals(include_warmup=False).up_val == cfg.workers * 32 * cfg.K * 9


class TestMajorityVoteAddDrop:
    def test_running_sum_equals_tally(self):
        cfg = small_cfg(scheme="mv-ad", rounds=20)
        sim = build_simulation(cfg)
        for _ in range(cfg.rounds):
            report = sim.step()
            votes = [w.prev_vote for w in sim.workers]
            assert np.array_equal(sim.server.vote_sum, tally_votes(votes))
            assert all(len(v) == cfg.K for v in votes)
            assert all(c <= 2 * cfg.K_ad for c in report.vote_churn)


class TestRandomSelection:
    def test_mask_inside_vote_support(self):
        cfg = small_cfg(scheme="mv-rs")
        sim = build_simulation(cfg)
        for _ in range(cfg.rounds):
            dbs = snapshot_delta_bars(sim)
            counts = tally_votes([top_k_mask(db, cfg.K) for db in dbs])
            report = sim.step()
            assert np.all(counts[report.mask.indices] > 0)
            assert len(report.mask) == min(cfg.K, int((counts > 0).sum()))


class TestErrorFeedback:
    def test_residual_is_unsent_part(self):
        cfg = small_cfg()
        sim = build_simulation(cfg)
        for _ in range(4):
            dbs = snapshot_delta_bars(sim)
            report = sim.step()
            for w, db in zip(sim.workers, dbs):
                expected = db.copy()
                expected[report.mask.indices] = 0.0
                assert np.array_equal(w.error.residual, expected)

    def test_quant_feedback_keeps_decoding_error(self):
        cfg = small_cfg(q=2, quant_feedback=True)
        sim = build_simulation(cfg)
        dbs = snapshot_delta_bars(sim)
        report = sim.step()
        idx = report.mask.indices
        for w, db in zip(sim.workers, dbs):
            outside = np.setdiff1d(np.arange(cfg.dim), idx)
            assert np.array_equal(w.error.residual[outside], db[outside])
            assert np.abs(w.error.residual[idx]).max() > 0
            assert np.all(np.abs(w.error.residual[idx]) <= np.abs(db[idx]).max())


class TestDeterminism:
    @pytest.mark.parametrize("scheme", ["mv", "mv-rs", "mv-ad", "topk-local"])
    def test_same_seed_same_metrics(self, scheme):
        cfg = small_cfg(scheme=scheme, q=4)
        a = run_experiment(cfg, write=False)
        b = run_experiment(cfg, write=False)
        assert render_csv(a.reports) == render_csv(b.reports)
        assert a.summary == b.summary

    def test_different_seed_differs(self):
        a = run_experiment(small_cfg(seed=1), write=False)
        b = run_experiment(small_cfg(seed=2), write=False)
        assert a.summary["final_train_loss"] != b.summary["final_train_loss"]

    def test_summary_compression(self):
        cfg = small_cfg(rounds=5)
        res = run_experiment(cfg, write=False)
        b, B = block_params_for_ratio(cfg.phi)
        per_worker = 5 * (mask_stream_bits(cfg.K, cfg.dim, b, B) + 32 * cfg.K)
        assert math.isclose(res.summary["compression_up"], 32 * cfg.dim * 5 / per_worker)
