"""Closed-form communication load per parameter per local step.

A position costs ``ceil(log2(1/phi)) + 2`` bits (offset, entry flag and a
block terminator amortized per entry); a value costs ``q`` bits uplink and
32 bits downlink, where the server rebroadcasts full-precision values.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

from .codec import MEAN_BITS, block_params_for_ratio
from .config import SCHEMES
from .errors import InvalidArgument

DENSE_BITS = 32


@dataclass(frozen=True)
class Budget:
    loc_up: float
    val_up: float
    loc_down: float
    val_down: float
    overhead_up: float = 0.0

    @property
    def compression_up(self) -> float:
        return DENSE_BITS / (self.loc_up + self.val_up)

    @property
    def compression_down(self) -> float:
        return DENSE_BITS / (self.loc_down + self.val_down)


def position_bits(phi: float) -> int:
    return block_params_for_ratio(phi)[0] + 2


def analytic_budget(scheme: str, phi: float, phi_ad: float | None = None, q: int = 32,
                    H: int = 1, N: int = 10, dim: int | None = None) -> Budget:
    """Bits per parameter per local step in each direction.

    ``dim`` is only needed to express the quantizer's means table (L*32 bits
    per message) per parameter; it is reported as ``overhead_up`` and left
    out of the compression ratios.
    """
    if scheme not in SCHEMES:
        raise InvalidArgument(f"unknown scheme {scheme!r}")
    if not 0 < phi < 1:
        raise InvalidArgument(f"phi={phi} not in (0, 1)")
    if not 1 <= q <= 32:
        raise InvalidArgument(f"q={q} not in [1, 32]")
    if H < 1 or N < 1:
        raise InvalidArgument("H and N must be >= 1")
    if scheme == "baseline-dsgd":
        return Budget(0.0, DENSE_BITS / H, 0.0, DENSE_BITS / H)
    overhead = 0.0
    if q < 32 and dim is not None:
        overhead = (1 << (q - 1)) * MEAN_BITS / (dim * H)
    loc = phi * position_bits(phi) / H
    val_up = phi * q / H
    loc_down, val_down = loc, phi * DENSE_BITS / H
    loc_up = loc
    if scheme == "mv-ad":
        if phi_ad is None or not 0 < phi_ad <= phi:
            raise InvalidArgument(f"phi_ad={phi_ad} must be in (0, phi]")
        loc_up = 2 * phi_ad * position_bits(phi_ad) / H
    elif scheme == "topk-local":
        phi_n = min(1.0, N * phi)
        loc_down = phi_n * position_bits(phi_n) / H if phi_n < 1 else 0.0
        val_down = phi_n * DENSE_BITS / H
    return Budget(loc_up, val_up, loc_down, val_down, overhead)


# label, scheme, H, q
TABLE_ROWS = [
    ("SSGD-MV", "mv", 1, 32),
    ("SSGD-MV-L2", "mv", 2, 32),
    ("SSGD-MV-L4", "mv", 4, 32),
    ("SSGD-MV-L8", "mv", 8, 32),
    ("SSGD-MV-L8-Q", "mv", 8, 4),
    ("SSGD-MV-RS-L4", "mv-rs", 4, 32),
    ("SSGD-MV-RS-L8", "mv-rs", 8, 32),
    ("SSGD-MV-AD", "mv-ad", 1, 32),
    ("SSGD-MV-AD-L2", "mv-ad", 2, 32),
    ("SSGD-MV-AD-L4", "mv-ad", 4, 32),
    ("SSGD-MV-AD-L4-Q", "mv-ad", 4, 4),
    ("SSGD-MV-AD-L8", "mv-ad", 8, 32),
    ("SSGD-MV-AD-L8-Q", "mv-ad", 8, 4),
    ("SSGD-top-K", "topk-local", 1, 32),
]


@dataclass
class TableRow:
    method: str
    scheme: str
    H: int
    q: int
    loc_up: float
    val_up: float
    loc_down: float
    val_down: float
    compression_up: float
    compression_down: float


def render_table(rows=TABLE_ROWS, phi: float = 1e-2, phi_ad: float = 1e-3,
                 N: int = 10) -> list[TableRow]:
    out = []
    for label, scheme, H, q in rows:
        b = analytic_budget(scheme, phi, phi_ad, q, H, N)
        out.append(TableRow(label, scheme, H, q, b.loc_up, b.val_up, b.loc_down, b.val_down,
                            b.compression_up, b.compression_down))
    return out


def format_ratio(x: float) -> str:
    """Ratios of 10 and above to the nearest integer, smaller ones to one decimal."""
    return f"x{round(x)}" if x >= 10 else f"x{x:.1f}"


def format_budget(x: float) -> str:
    mant, exp = f"{x:.6e}".split("e")
    mant = mant.rstrip("0").rstrip(".")
    return f"{mant}e{int(exp)}"


def table_text(rows: list[TableRow]) -> str:
    header = ["method", "up q_loc", "up q_val", "down q_loc", "down q_val", "up/down"]
    body = [[r.method, format_budget(r.loc_up), format_budget(r.val_up),
             format_budget(r.loc_down), format_budget(r.val_down),
             f"{format_ratio(r.compression_up)} / {format_ratio(r.compression_down)}"]
            for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
             for line in [header] + body]
    return "\n".join(lines) + "\n"


def table_csv(rows: list[TableRow]) -> str:
    buf = io.StringIO()
    fields = list(asdict(rows[0]).keys())
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return buf.getvalue()
