"""Training loop: NLL of the ground-truth pose against grid or random queries.

Each example is scored against a query set whose element 0 is its ground
truth; the remaining queries come either from the equivolumetric grid
left-translated onto the ground truth, or from fresh Haar-uniform samples.
The loss is -log of the normalized density at the ground truth, with the
log-sum-exp stabilized by max subtraction.

Optimizer: Adam with linear warmup then cosine decay to zero.  All
randomness is derived from (seed, stream, step) so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import model as model_mod
from .grid import EquivolumetricGrid, generate_grid, grid_size
from .model import ImplicitDensityModel, encode_queries
from .rotation import (
    Rotation,
    as_quat_array,
    geodesic_distance,
    quat_conjugate,
    quat_multiply,
    quats_to_matrices,
    sample_uniform_quats,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "NonFiniteLoss",
    "QueryMissingGroundTruth",
    "learning_rate",
    "make_queries",
    "loss_single",
    "train",
    "write_loss_trace",
    "config_from_mapping",
]

HAAR_VOLUME = math.pi ** 2
_MAX_CHUNK_ROWS = 32768


class NonFiniteLoss(RuntimeError):
    """Raised when the training loss stops being finite; carries the step."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class QueryMissingGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    query_count: int = 4096
    query_mode: str = "random"  # or "rotated_grid"
    grid_level: int = 2
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    precision: str = "f32"  # forward/backward dtype; reductions stay f64
    seed: int = 0

    def __post_init__(self):
        if self.query_count < 2:
            raise ValueError("query_count must be >= 2")
        if not self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.query_mode not in ("random", "rotated_grid"):
            raise ValueError(f"unknown query_mode {self.query_mode!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.query_mode == "rotated_grid" and grid_size(self.grid_level) != self.query_count:
            raise ValueError(
                f"rotated_grid mode needs query_count == 72*8^level "
                f"({grid_size(self.grid_level)} at level {self.grid_level})"
            )

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def config_from_mapping(mapping) -> TrainConfig:
    """Build a TrainConfig from string-keyed values (config file / CLI flags)."""
    kwargs = {}
    by_name = {f.name: f for f in fields(TrainConfig)}
    for key, value in mapping.items():
        if key not in by_name:
            raise ValueError(f"unknown training option {key!r}")
        if value is None or isinstance(value, (int, float)):
            kwargs[key] = value
        else:
            text = str(value)
            if key in ("query_mode", "precision"):
                kwargs[key] = text
            elif key == "grad_clip":
                kwargs[key] = None if text.lower() in ("none", "") else float(text)
            elif key in ("base_lr", "adam_beta1", "adam_beta2", "adam_eps"):
                kwargs[key] = float(text)
            else:
                kwargs[key] = int(text)
    return TrainConfig(**kwargs)


def learning_rate(config: TrainConfig, step: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if step <= config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def make_queries(mode, grid_or_rng, gt: Rotation, count: int):
    """(count, 4) query quaternions with element 0 equal to the ground truth."""
    if count < 2:
        raise ValueError("count must be >= 2")
    if mode == "rotated_grid":
        grid = grid_or_rng
        if not isinstance(grid, EquivolumetricGrid) or len(grid) != count:
            raise ValueError("rotated_grid mode needs a grid with `count` cells")
        from .grid import rotate_grid

        return rotate_grid(grid, gt)
    if mode == "random":
        qs = np.empty((count, 4))
        qs[0] = gt.quaternion
        qs[1:] = sample_uniform_quats(grid_or_rng, count - 1)
        return qs
    raise ValueError(f"unknown query mode {mode!r}")


def loss_single(model, descriptor, gt: Rotation, queries) -> float:
    """-log p(gt | x) with p normalized over the query set (volume pi^2/count)."""
    quats = as_quat_array(queries)
    if geodesic_distance(gt, Rotation(quats[0])) > 1e-9:
        raise QueryMissingGroundTruth("queries[0] must equal the ground truth")
    f = model_mod.forward(model, descriptor, quats)
    return _nll_from_scores(f.reshape(1, -1))[0].item()


def _nll_from_scores(f):
    """Per-example loss from (B, N) scores; queries[:, 0] hold the ground truth."""
    f = np.asarray(f, dtype=np.float64)
    peak = f.max(axis=1, keepdims=True)
    lse = np.log(np.exp(f - peak).sum(axis=1)) + peak[:, 0]
    log_volume = math.log(HAAR_VOLUME / f.shape[1])
    return -f[:, 0] + lse + log_volume


def _softmax_rows(f):
    f = np.asarray(f, dtype=np.float64)
    e = np.exp(f - f.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _batch_queries(config, grid, gts, step):
    """Per-example query quaternions for one step, (B, N, 4)."""
    b = gts.shape[0]
    n = config.query_count
    if config.query_mode == "rotated_grid":
        left = quat_multiply(gts, quat_conjugate(grid.quaternions[0]))
        return quat_multiply(left[:, None, :], grid.quaternions[None, :, :])
    rng = np.random.default_rng([config.seed, 1, step])
    qs = np.empty((b, n, 4))
    qs[:, 0] = gts
    qs[:, 1:] = sample_uniform_quats(rng, b * (n - 1)).reshape(b, n - 1, 4)
    return qs


@dataclass
class TrainResult:
    model: ImplicitDensityModel
    trace: list = field(default_factory=list)  # (step, lr, loss) tuples

    @property
    def final_loss(self) -> float:
        return self.trace[-1][2]


class _Adam:
    def __init__(self, params, config):
        self.config = config
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        c = self.config
        self.t += 1
        b1c = 1.0 - c.adam_beta1 ** self.t
        b2c = 1.0 - c.adam_beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1.0 - c.adam_beta2) * np.square(g)
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + c.adam_eps)


def _dataset_arrays(dataset):
    desc = np.stack([np.asarray(rec.descriptor, dtype=np.float64) for rec in dataset])
    gts = np.stack([rec.gt_rotation.quaternion for rec in dataset])
    return desc, gts


def train(model: ImplicitDensityModel, dataset, config: TrainConfig,
          trace_path=None, progress=None, state_path=None,
          state_every: int = 500) -> TrainResult:
    """Run total_steps minibatch updates; deterministic given config.seed.

    dataset: sequence of records with `.descriptor` and `.gt_rotation`.
    Raises NonFiniteLoss (with the offending step) if the loss leaves the
    reals; optional grad_clip bounds the global gradient norm.

    At precision "f32" a torch-backed loop (same math, preallocated
    buffers) is used when torch is importable; the numpy loop below is the
    reference implementation and the fallback.  state_path enables
    periodic resume snapshots (fast path only).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    descriptors, gts = _dataset_arrays(dataset)
    n_data = descriptors.shape[0]

    if config.precision == "f32":
        try:
            from . import _fast
        except ImportError:
            _fast = None
        if _fast is not None:
            trace = _fast.train_loop(model, descriptors, gts, config,
                                     state_path=state_path,
                                     state_every=state_every, progress=progress)
            result = TrainResult(model=model, trace=trace)
            if trace_path is not None:
                write_loss_trace(trace_path, trace)
            return result
    if state_path is not None:
        raise RuntimeError("resume snapshots need the torch fast path (precision f32)")
    grid = generate_grid(config.grid_level) if config.query_mode == "rotated_grid" else None
    dtype = config.dtype
    desc_t = descriptors.astype(dtype)

    params = model.parameters()
    adam = _Adam(params, config)
    trace = []
    perm, perm_epoch = None, -1

    for step in range(config.total_steps):
        # Deterministic shuffled stream: epoch e uses permutation rng([seed, 0, e]).
        start = step * config.batch_size
        idx = np.empty(config.batch_size, dtype=np.int64)
        for k in range(config.batch_size):
            j = start + k
            epoch = j // n_data
            if epoch != perm_epoch:
                perm = np.random.default_rng([config.seed, 0, epoch]).permutation(n_data)
                perm_epoch = epoch
            idx[k] = perm[j % n_data]

        queries = _batch_queries(config, grid, gts[idx], step)
        b, n = queries.shape[:2]
        mats = quats_to_matrices(queries.reshape(-1, 4)).reshape(-1, 9)
        enc = encode_queries(mats, model.config.pe_frequencies,
                             model.config.include_raw_entries).astype(dtype)
        enc = enc.reshape(b, n, -1)

        # Forward/backward in example chunks to bound activation memory.
        chunk = max(1, _MAX_CHUNK_ROWS // n)
        grads = [np.zeros_like(p) for p in params]
        losses = np.empty(b)
        for s in range(0, b, chunk):
            e = min(s + chunk, b)
            f, cache = model_mod.forward_with_cache(model, desc_t[idx[s:e]],
                                                    enc[s:e], dtype=dtype)
            losses[s:e] = _nll_from_scores(f)
            w = _softmax_rows(f)
            w[:, 0] -= 1.0
            w /= b  # minibatch loss is the mean over examples
            for acc, g in zip(grads, model_mod.backward_from_cache(model, cache, w)):
                acc += g

        loss = float(losses.mean())
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        if config.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > config.grad_clip:
                scale = config.grad_clip / norm
                for g in grads:
                    g *= scale

        lr = learning_rate(config, step + 1)
        trace.append((step, lr, loss))
        adam.step(params, grads, lr)
        model.step_count += 1
        if progress is not None:
            progress(step, lr, loss)

    result = TrainResult(model=model, trace=trace)
    if trace_path is not None:
        write_loss_trace(trace_path, trace)
    return result


def write_loss_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in trace:
            fh.write(f"{step},{lr:.10g},{loss:.10g}\n")
