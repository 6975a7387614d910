"""Experiment configuration and its flat ``key = value`` text format.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
``schema_version`` must be present and every key must be known.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .tensor_core import MODEL_KINDS, LrSchedule, param_count

SCHEMA_VERSION = 1
SCHEMES = ("baseline-dsgd", "topk-local", "mv", "mv-rs", "mv-ad")


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    workers: int = 4
    model: str = "linear-regression"
    d_in: int = 256
    hidden: int = 0
    n_samples: int = 2048
    n_eval: int = 512
    noise_std: float = 0.1
    batch_size: int = 32  # 0 = full shard
    scheme: str = "mv"
    phi: float = 0.01
    phi_ad: float = 0.001
    local_steps: int = 1
    q: int = 32  # 32 = raw binary32 values
    rounds: int = 100
    lr: float = 0.1
    warmup_rounds: int = 0
    warmup_start: float | None = None
    decay: list[tuple[int, float]] = field(default_factory=list)
    weight_decay: float = 1e-4
    error_feedback: bool = True
    quant_feedback: bool = False
    output: str = "run"

    @property
    def dim(self) -> int:
        return param_count(self.model, self.d_in, self.hidden)

    @property
    def K(self) -> int:
        return int(round(self.phi * self.dim))

    @property
    def K_ad(self) -> int:
        return int(round(self.phi_ad * self.dim))

    @property
    def H(self) -> int:
        return self.local_steps

    @property
    def quantized(self) -> bool:
        return self.q < 32

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.warmup_rounds, self.warmup_start, list(self.decay))

    def validate(self) -> ExperimentConfig:
        def bad(name, msg):
            raise ConfigError(name, msg)

        if self.schema_version != SCHEMA_VERSION:
            bad("schema_version", f"unsupported version {self.schema_version}")
        if self.model not in MODEL_KINDS:
            bad("model", f"must be one of {', '.join(MODEL_KINDS)}")
        if self.scheme not in SCHEMES:
            bad("scheme", f"must be one of {', '.join(SCHEMES)}")
        if self.d_in < 1:
            bad("d_in", "must be >= 1")
        if self.model == "mlp-1hidden" and self.hidden < 1:
            bad("hidden", "mlp-1hidden needs hidden >= 1")
        if self.workers < 1:
            bad("workers", "must be >= 1")
        if self.n_samples < self.workers:
            bad("n_samples", "need at least one sample per worker")
        if self.n_eval < 1:
            bad("n_eval", "must be >= 1")
        if self.noise_std < 0:
            bad("noise_std", "must be >= 0")
        if self.batch_size < 0 or self.batch_size > self.n_samples // self.workers:
            bad("batch_size", "must be in [0, smallest shard size]")
        if not 0 < self.phi <= 1:
            bad("phi", "must be in (0, 1]")
        if self.K < 1:
            bad("phi", f"K = round(phi * d) = {self.K} must be >= 1")
        if self.scheme == "mv-ad":
            if not 0 < self.phi_ad <= self.phi:
                bad("phi_ad", "must be in (0, phi]")
            if self.K_ad < 1:
                bad("phi_ad", f"K_ad = round(phi_ad * d) = {self.K_ad} must be >= 1")
        if self.local_steps < 1:
            bad("local_steps", "must be >= 1")
        if not 1 <= self.q <= 32:
            bad("q", "must be in [1, 32]")
        if self.rounds < 1:
            bad("rounds", "must be >= 1")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        try:
            self.schedule()
        except ValueError as exc:
            bad("lr", str(exc))
        return self


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_opt_float(s: str) -> float | None:
    return None if s.lower() == "none" else float(s)


def _parse_decay(s: str) -> list[tuple[int, float]]:
    out = []
    for item in filter(None, (p.strip() for p in s.split(","))):
        r, f = item.split(":")
        out.append((int(r), float(f)))
    return out


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(f"{r}:{f!r}" for r, f in value)
    return str(value)


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "float | None": _parse_opt_float,
    "list[tuple[int, float]]": _parse_decay,
}
FIELDS = {f.name: _PARSERS[f.type] for f in dataclasses.fields(ExperimentConfig)}


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "given twice")
        try:
            values[key] = FIELDS[key](value)
        except ValueError as exc:
            raise ConfigError(key, f"bad value {value!r} ({exc})") from None
    if "schema_version" not in values:
        raise ConfigError("schema_version", "missing")
    return ExperimentConfig(**values).validate()


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("path", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)
