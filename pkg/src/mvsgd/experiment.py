"""Build a simulation from a config, run it, and write its metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .protocol import (CSV_COLUMNS, LEDGER_FIELDS, CommLedger, RoundReport, ServerState,
                       WorkerState, run_round)
from .sparsify import ErrorAccumulator
from .tensor_core import (BatchSampler, Dataset, init_model, make_synthetic_classification,
                          make_synthetic_regression, shard_iid)


@dataclass
class Simulation:
    cfg: ExperimentConfig
    server: ServerState
    workers: list[WorkerState]
    ledger: CommLedger

    def step(self) -> RoundReport:
        return run_round(self.server, self.workers, self.cfg, self.ledger)


def _child_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def build_simulation(cfg: ExperimentConfig) -> Simulation:
    cfg.validate()
    data_seq, shard_seq, init_seq, server_seq, *worker_seqs = np.random.SeedSequence(
        cfg.seed).spawn(4 + cfg.workers)
    make = (make_synthetic_classification if cfg.model == "logistic-regression"
            else make_synthetic_regression)
    full, _ = make(_child_seed(data_seq), cfg.n_samples + cfg.n_eval, cfg.d_in, cfg.noise_std)
    train = Dataset(full.inputs[: cfg.n_samples], full.targets[: cfg.n_samples])
    held_out = Dataset(full.inputs[cfg.n_samples :], full.targets[cfg.n_samples :])
    shards = shard_iid(train, cfg.workers, _child_seed(shard_seq))
    model = init_model(cfg.model, cfg.d_in, cfg.hidden, _child_seed(init_seq), cfg.weight_decay)
    workers = []
    for shard, seq in zip(shards, worker_seqs):
        sampler = BatchSampler(len(shard), cfg.batch_size or None, np.random.default_rng(seq))
        workers.append(WorkerState(shard.owner, model.with_params(model.params.copy()), shard,
                                   ErrorAccumulator.zeros(model.dim), sampler))
    server = ServerState(model, cfg.scheme, np.random.default_rng(server_seq), train, held_out)
    return Simulation(cfg, server, workers, CommLedger())


def summarize(cfg: ExperimentConfig, reports: list[RoundReport], ledger: CommLedger) -> dict:
    total = ledger.totals()
    dense_bits = 32 * cfg.dim * cfg.H * len(reports)
    up_per_worker = total.up_total() / cfg.workers
    return {
        "scheme": cfg.scheme,
        "rounds": len(reports),
        "dim": cfg.dim,
        "K": cfg.K,
        "K_ad": cfg.K_ad if cfg.scheme == "mv-ad" else None,
        "final_train_loss": reports[-1].train_loss,
        "final_eval_loss": reports[-1].eval_loss,
        "bits": {name: getattr(total, name) for name in LEDGER_FIELDS},
        "compression_up": dense_bits / up_per_worker,
        "compression_down": dense_bits / total.down_total(),
        "compression_up_excl_overhead": dense_bits * cfg.workers / (total.up_loc + total.up_val),
        "compression_down_excl_overhead": dense_bits / (total.down_loc + total.down_val),
    }


def render_csv(reports: list[RoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


@dataclass
class RunResult:
    reports: list[RoundReport]
    summary: dict
    simulation: Simulation
    csv_path: Path | None = None
    summary_path: Path | None = None


def run_experiment(cfg: ExperimentConfig, output: str | Path | None = None,
                   write: bool = True) -> RunResult:
    """Run ``cfg.rounds`` rounds; write ``rounds.csv`` and ``summary.json``
    into the output directory (``cfg.output`` unless overridden)."""
    sim = build_simulation(cfg)
    reports = [sim.step() for _ in range(cfg.rounds)]
    summary = summarize(cfg, reports, sim.ledger)
    result = RunResult(reports, summary, sim)
    if write:
        out = Path(output if output is not None else cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = out / "rounds.csv"
        result.summary_path = out / "summary.json"
        result.csv_path.write_text(render_csv(reports))
        result.summary_path.write_text(json.dumps(summary, sort_keys=True) + "\n")
    return result
