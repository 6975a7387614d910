"""Numerical substrate: small closed-form-gradient models, synthetic data, IID
sharding, local SGD and the learning-rate schedule.

Parameter, gradient and model-difference vectors are plain 1-D float64
numpy arrays throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

MODEL_KINDS = ("linear-regression", "logistic-regression", "mlp-1hidden")
DEFAULT_WEIGHT_DECAY = 1e-4


def as_dense(v, dim: int | None = None) -> np.ndarray:
    """Validate and return ``v`` as a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"expected a 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InvalidArgument(f"dimension mismatch: {arr.shape[0]} != {dim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("vector has non-finite entries")
    return arr


def param_count(kind: str, d_in: int, hidden: int = 0) -> int:
    if kind in ("linear-regression", "logistic-regression"):
        return d_in
    if kind == "mlp-1hidden":
        if hidden < 1:
            raise InvalidArgument("mlp-1hidden needs hidden >= 1")
        return hidden * d_in + 2 * hidden + 1
    raise InvalidArgument(f"unknown model kind {kind!r}")


@dataclass
class Model:
    kind: str
    params: np.ndarray
    d_in: int
    hidden: int = 0
    weight_decay: float = DEFAULT_WEIGHT_DECAY

    def __post_init__(self):
        self.params = as_dense(self.params, param_count(self.kind, self.d_in, self.hidden))

    @property
    def dim(self) -> int:
        return self.params.shape[0]

    def with_params(self, params: np.ndarray) -> Model:
        return Model(self.kind, params, self.d_in, self.hidden, self.weight_decay)

    def _mlp_parts(self, params=None):
        p = self.params if params is None else params
        h, d = self.hidden, self.d_in
        w1 = p[: h * d].reshape(h, d)
        b1 = p[h * d : h * d + h]
        w2 = p[h * d + h : h * d + 2 * h]
        b2 = p[-1]
        return w1, b1, w2, b2


def init_model(kind: str, d_in: int, hidden: int = 0, seed: int = 0,
               weight_decay: float = DEFAULT_WEIGHT_DECAY) -> Model:
    """Zero parameters for the linear models; small Gaussian weights for the MLP."""
    dim = param_count(kind, d_in, hidden)
    if kind == "mlp-1hidden":
        rng = np.random.default_rng(seed)
        params = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=dim)
        params[-1] = 0.0
    else:
        params = np.zeros(dim)
    return Model(kind, params, d_in, hidden, weight_decay)


def _check_batch(model: Model, inputs, targets):
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgument("batch must be a non-empty 2-D input matrix")
    if X.shape[1] != model.d_in or y.shape != (X.shape[0],):
        raise InvalidArgument("batch shape does not match the model")
    return X, y


def loss(model: Model, inputs, targets) -> float:
    """Mean loss over the batch plus the L2 penalty (weight_decay/2)*|theta|^2."""
    X, y = _check_batch(model, inputs, targets)
    theta = model.params
    if model.kind == "linear-regression":
        r = X @ theta - y
        data = float(np.mean(r * r))
    elif model.kind == "logistic-regression":
        z = X @ theta
        data = float(np.mean(np.logaddexp(0.0, z) - y * z))
    else:
        w1, b1, w2, b2 = model._mlp_parts()
        out = np.tanh(X @ w1.T + b1) @ w2 + b2
        r = out - y
        data = float(np.mean(r * r))
    return data + 0.5 * model.weight_decay * float(theta @ theta)


def compute_gradient(model: Model, inputs, targets) -> np.ndarray:
    """Gradient of :func:`loss` over the batch."""
    X, y = _check_batch(model, inputs, targets)
    n = X.shape[0]
    theta = model.params
    if model.kind == "linear-regression":
        g = (2.0 / n) * (X.T @ (X @ theta - y))
    elif model.kind == "logistic-regression":
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ theta)))
        g = X.T @ (p - y) / n
    else:
        w1, b1, w2, b2 = model._mlp_parts()
        h = np.tanh(X @ w1.T + b1)
        r = (2.0 / n) * (h @ w2 + b2 - y)
        dh = np.outer(r, w2) * (1.0 - h * h)
        g = np.concatenate([(dh.T @ X).ravel(), dh.sum(axis=0), h.T @ r, [r.sum()]])
    return g + model.weight_decay * theta


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Shard:
    owner: int
    indices: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]


def make_synthetic_regression(seed: int, n: int, d_in: int,
                              noise_std: float) -> tuple[Dataset, np.ndarray]:
    """Gaussian design with ``targets = inputs @ truth + N(0, noise_std^2)``."""
    if n < 1 or d_in < 1:
        raise InvalidArgument("n and d_in must be positive")
    if noise_std < 0:
        raise InvalidArgument("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=d_in)
    X = rng.normal(size=(n, d_in))
    y = X @ truth
    if noise_std > 0:
        y = y + rng.normal(0.0, noise_std, size=n)
    return Dataset(X, y), truth


def make_synthetic_classification(seed: int, n: int, d_in: int,
                                  noise_std: float = 0.0) -> tuple[Dataset, np.ndarray]:
    """Binary labels obtained by thresholding a synthetic regression at zero."""
    data, truth = make_synthetic_regression(seed, n, d_in, noise_std)
    return Dataset(data.inputs, (data.targets > 0).astype(np.float64)), truth


def shard_iid(dataset: Dataset, N: int, seed: int) -> list[Shard]:
    """Random permutation of the sample indices dealt round-robin to N workers."""
    n = len(dataset)
    if not 1 <= N <= n:
        raise InvalidArgument(f"need 1 <= N <= {n}, got N={N}")
    perm = np.random.default_rng(seed).permutation(n)
    shards = []
    for k in range(N):
        idx = np.sort(perm[k::N])
        shards.append(Shard(k, idx, dataset.inputs[idx], dataset.targets[idx]))
    return shards


class BatchSampler:
    """Mini-batches drawn without replacement within an epoch over one shard.

    The order is reshuffled at every epoch by the sampler's own generator; an
    incomplete tail batch is dropped. ``batch_size=None`` means full-batch, in
    shard order, with no randomness.
    """

    def __init__(self, size: int, batch_size: int | None = None,
                 rng: np.random.Generator | None = None):
        if size < 1:
            raise InvalidArgument("cannot sample from an empty shard")
        if batch_size is not None and not 1 <= batch_size <= size:
            raise InvalidArgument(f"batch_size must be in [1, {size}]")
        self.size = size
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._perm = np.arange(size)
        self._cursor = size

    def next(self) -> np.ndarray:
        if self.batch_size is None:
            return np.arange(self.size)
        if self._cursor + self.batch_size > self.size:
            self._perm = self.rng.permutation(self.size)
            self._cursor = 0
        batch = self._perm[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch


def local_steps(model: Model, shard: Shard, H: int, lr: float,
                sampler: BatchSampler) -> np.ndarray:
    """Run H SGD steps from ``model.params`` and return theta^(H) - theta^(0).

    The model passed in is left untouched.
    """
    if H < 1:
        raise InvalidArgument("H must be >= 1")
    if lr < 0:
        raise InvalidArgument("learning rate must be nonnegative")
    start = model.params
    local = model.with_params(start.copy())
    for _ in range(H):
        b = sampler.next()
        g = compute_gradient(local, shard.inputs[b], shard.targets[b])
        local.params = local.params - lr * g
    return local.params - start


@dataclass
class LrSchedule:
    base_rate: float
    warmup_rounds: int = 0
    warmup_start: float | None = None
    decay_points: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.warmup_start is None:
            self.warmup_start = self.base_rate
        if self.base_rate <= 0:
            raise InvalidArgument("base_rate must be positive")
        if self.warmup_rounds < 0:
            raise InvalidArgument("warmup_rounds must be nonnegative")
        if self.warmup_start > self.base_rate:
            raise InvalidArgument("warmup_start must not exceed base_rate")
        for r, f in self.decay_points:
            if not 0 < f <= 1:
                raise InvalidArgument(f"decay factor {f} at round {r} not in (0, 1]")
        self.decay_points = sorted((int(r), float(f)) for r, f in self.decay_points)


def lr_at(schedule: LrSchedule, round: int) -> float:
    """Linear warmup to ``base_rate``, then step decays once their round is reached."""
    if round < 0:
        raise InvalidArgument("round must be nonnegative")
    if round < schedule.warmup_rounds:
        frac = round / schedule.warmup_rounds
        return schedule.warmup_start + (schedule.base_rate - schedule.warmup_start) * frac
    rate = schedule.base_rate
    for r, f in schedule.decay_points:
        if round >= r:
            rate *= f
    return rate
