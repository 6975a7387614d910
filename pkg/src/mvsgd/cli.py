"""Command-line front end: ``mvsgd run | table | codec-selftest``."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import accounting, codec
from .config import load_config
from .errors import MVSGDError
from .experiment import run_experiment
from .sparsify import SparseMask


def codec_selftest(mask_trials: int = 10_000, quant_trials: int = 1_000, seed: int = 0,
                   max_dim: int = 1 << 16, max_block_bits: int = 10) -> dict:
    """Random roundtrips of the mask codec and the quantizer.

    Returns failure counts per check; all zero means the codec is sound.
    """
    rng = np.random.default_rng(seed)
    failures = {"mask_roundtrip": 0, "mask_length": 0, "quant_sign": 0,
                "quant_range": 0, "quant_interval": 0, "quant_wire": 0}
    for _ in range(mask_trials):
        dim = int(rng.integers(1, max_dim + 1))
        block_bits = int(rng.integers(1, max_block_bits + 1))
        block_size = int(rng.integers(1, (1 << block_bits) + 1)) if rng.random() < 0.5 else None
        density = 10 ** rng.uniform(-4, 0)
        mask = SparseMask.from_dense(rng.random(dim) < density)
        stream = codec.encode_mask(mask, block_bits, block_size)
        if stream.bit_len != codec.mask_stream_bits(len(mask), dim, block_bits, block_size):
            failures["mask_length"] += 1
        wire = codec.BitStream.from_bytes(stream.to_bytes(), stream.bit_len)
        if codec.decode_mask(wire, dim, block_bits, block_size) != mask:
            failures["mask_roundtrip"] += 1
    for _ in range(quant_trials):
        n = int(rng.integers(1, 2000))
        q = int(rng.integers(1, 9))
        v = rng.standard_normal(n) * np.exp(rng.uniform(-5, 5, n))
        v[rng.random(n) < 0.05] = 0.0
        if not v.any():
            v[0] = 1.0
        block = codec.quantize_values(v, q)
        out = codec.dequantize(block)
        nz = v != 0
        if np.any(np.sign(out[nz]) != np.sign(v[nz])):
            failures["quant_sign"] += 1
        m = np.abs(out[nz])
        if m.min() < block.v_min or m.max() > block.v_max:
            failures["quant_range"] += 1
        if not interval_membership_ok(block, np.abs(v)):
            failures["quant_interval"] += 1
        wire = codec.encode_quantized(block)
        back = codec.dequantize(codec.read_quantized(wire.reader(), n, q))
        if not np.array_equal(back, np.where(out < 0, -1, 1) * np.abs(out).astype(np.float32)):
            failures["quant_wire"] += 1
    return failures


def interval_membership_ok(block: codec.QuantizedBlock, mags: np.ndarray, rtol: float = 1e-9) -> bool:
    """Each nonzero magnitude lies in (v_max/alpha^l, v_max/alpha^(l-1)] for its level l."""
    nz = mags > 0
    if block.v_max == block.v_min:
        return bool(np.all(block.levels[nz] == 1))
    l = block.levels[nz].astype(np.float64)
    # work in log space: log(v_max/m) / log(alpha) must fall in [l-1, l)
    t = np.log(block.v_max / mags[nz]) * block.L / np.log(block.v_max / block.v_min)
    tol = rtol * block.L
    return bool(np.all((t > l - 1 - tol) | (l == 1)) and np.all(t <= l + tol))


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    try:
        result = run_experiment(cfg, output=args.output)
    except OSError as exc:
        raise MVSGDError(f"io-error: cannot write metrics: {exc}") from None
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def _cmd_table(args) -> int:
    rows = accounting.render_table(phi=args.phi, phi_ad=args.phi_ad, N=args.workers)
    if args.format in ("text", "both"):
        sys.stdout.write(accounting.table_text(rows))
    if args.format == "both":
        sys.stdout.write("\n")
    if args.format in ("csv", "both"):
        sys.stdout.write(accounting.table_csv(rows))
    return 0


def _cmd_selftest(args) -> int:
    failures = codec_selftest(args.mask_trials, args.quant_trials, args.seed)
    for name, count in failures.items():
        print(f"{'PASS' if count == 0 else 'FAIL'}  {name}  failures={count}")
    ok = not any(failures.values())
    print("codec selftest:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvsgd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a training simulation from a config file")
    p.add_argument("config")
    p.add_argument("--output", help="output directory (overrides the config's 'output')")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("table", help="print the analytic bit-budget table")
    p.add_argument("--format", choices=("text", "csv", "both"), default="both")
    p.add_argument("--phi", type=float, default=1e-2)
    p.add_argument("--phi-ad", type=float, default=1e-3)
    p.add_argument("--workers", type=int, default=10)
    p.set_defaults(func=_cmd_table)

    p = sub.add_parser("codec-selftest", help="randomized codec roundtrip checks")
    p.add_argument("--mask-trials", type=int, default=10_000)
    p.add_argument("--quant-trials", type=int, default=1_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MVSGDError as exc:
        print(f"mvsgd: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
