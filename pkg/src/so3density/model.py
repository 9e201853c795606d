"""Implicit density head: MLP over (descriptor, rotation) pairs.

The query rotation enters as its 3x3 matrix, positionally encoded per
entry with sin/cos at frequencies 2^j * pi.  The first layer is kept as
two blocks (descriptor weights, query weights) so that batched inference
can evaluate W_d d_i and W_q q_j separately and combine them with a
broadcast sum instead of tiling the concatenated inputs.

The output is an unnormalized log density; normalization happens against
an equivolumetric grid (see `infer`).  Gradients (w.r.t. inputs and
parameters) are hand-written for exactly this architecture.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .rotation import Rotation, as_quat_array, quats_to_matrices

__all__ = [
    "ModelConfig",
    "ImplicitDensityModel",
    "DimensionMismatch",
    "positional_encode",
    "encode_queries",
    "forward",
    "forward_batch_efficient",
    "forward_batch_naive",
    "input_gradient",
    "parameter_gradients",
    "forward_with_cache",
    "backward_from_cache",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"IPDF"


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    descriptor_dim: int
    pe_frequencies: int = 3
    hidden_width: int = 256
    hidden_layers: int = 4
    include_raw_entries: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.descriptor_dim < 1 or self.hidden_width < 1 or self.hidden_layers < 1:
            raise ValueError("dimensions must be >= 1")
        if self.pe_frequencies < 0:
            raise ValueError("pe_frequencies must be >= 0")

    @property
    def query_dim(self) -> int:
        m = self.pe_frequencies
        if m == 0:
            return 9
        return (9 if self.include_raw_entries else 0) + 18 * m


def positional_encode(r, m: int, include_raw: bool = False):
    """Encode one rotation's matrix entries; length 9 if m=0 else 18m.

    For m >= 1 each entry u yields sin(2^j pi u), cos(2^j pi u) for
    j = 0..m-1 (entry-major); the raw entries are prepended only when
    include_raw is set.
    """
    mat = r.matrix if isinstance(r, Rotation) else np.asarray(r, dtype=np.float64)
    return encode_queries(mat.reshape(1, 9), m, include_raw)[0]


def encode_queries(entries, m: int, include_raw: bool = False):
    """Vectorized positional encoding of (N, 9) flattened rotation matrices."""
    u = np.asarray(entries, dtype=np.float64).reshape(-1, 9)
    if m == 0:
        return u.copy()
    n = u.shape[0]
    freqs = (2.0 ** np.arange(m)) * math.pi
    args = u[:, :, None] * freqs[None, None, :]  # (N, 9, m)
    enc = np.empty((n, 9, 2 * m), dtype=np.float64)
    enc[:, :, 0::2] = np.sin(args)
    enc[:, :, 1::2] = np.cos(args)
    enc = enc.reshape(n, 18 * m)
    if include_raw:
        return np.concatenate([u, enc], axis=1)
    return enc


def _encode_rotations(rotations, cfg: ModelConfig):
    quats = as_quat_array(rotations)
    mats = quats_to_matrices(quats).reshape(-1, 9)
    return encode_queries(mats, cfg.pe_frequencies, cfg.include_raw_entries)


class ImplicitDensityModel:
    """MLP weights plus config; forward is deterministic given both.

    Weight declaration order (also the checkpoint order): w_desc, w_query,
    b_in, then (W, b) per remaining hidden layer, then w_out, b_out.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.step_count = 0
        rng = np.random.default_rng(config.seed)
        h, d, q = config.hidden_width, config.descriptor_dim, config.query_dim
        # He-uniform over the joint first layer, then split into the two blocks.
        first = self._he_uniform(rng, h, d + q)
        self.w_desc = np.ascontiguousarray(first[:, :d])
        self.w_query = np.ascontiguousarray(first[:, d:])
        self.b_in = np.zeros(h)
        self.hidden = [
            (self._he_uniform(rng, h, h), np.zeros(h))
            for _ in range(config.hidden_layers - 1)
        ]
        # Zero-init output: the initial density is exactly uniform.
        self.w_out = np.zeros(h)
        self.b_out = np.zeros(1)

    @staticmethod
    def _he_uniform(rng, rows, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=(rows, fan_in))

    def parameters(self):
        """Live references to all weight arrays, declaration order."""
        params = [self.w_desc, self.w_query, self.b_in]
        for w, b in self.hidden:
            params.extend([w, b])
        params.extend([self.w_out, self.b_out])
        return params

    def set_parameters(self, values):
        for dst, src in zip(self.parameters(), values, strict=True):
            dst[...] = src


def _check_descriptor(model, descriptor):
    d = np.asarray(descriptor, dtype=np.float64).reshape(-1)
    if d.shape[0] != model.config.descriptor_dim:
        raise DimensionMismatch(
            f"descriptor length {d.shape[0]} != {model.config.descriptor_dim}"
        )
    return d


def _run_layers(model, pre1, dtype):
    """Shared tail: ReLU chain and scalar output from first-layer pre-activations."""
    a = np.maximum(pre1, 0.0)
    for w, b in model.hidden:
        a = a @ w.T.astype(dtype) + b.astype(dtype)
        np.maximum(a, 0.0, out=a)
    return a @ model.w_out.astype(dtype) + model.b_out.astype(dtype)[0]


def forward(model, descriptor, rotations):
    """Log densities f(x, R_i) for one descriptor and a set of rotations."""
    d = _check_descriptor(model, descriptor)
    enc = _encode_rotations(rotations, model.config)
    pre1 = enc @ model.w_query.T + (model.w_desc @ d) + model.b_in
    return _run_layers(model, pre1, np.float64)


def forward_batch_efficient(model, descriptors, rotations, dtype=np.float64):
    """(N_B, N_Q) log densities with the split first layer.

    The descriptor and query blocks of the first layer are applied to
    their own inputs and combined by a broadcast sum, avoiding the
    tiled (N_B*N_Q, D+Q) input of the naive layout.
    """
    desc = np.asarray(descriptors, dtype=dtype)
    if desc.ndim != 2 or desc.shape[1] != model.config.descriptor_dim:
        raise DimensionMismatch(f"descriptors must be (N_B, {model.config.descriptor_dim})")
    enc = _encode_rotations(rotations, model.config).astype(dtype)
    t_desc = desc @ model.w_desc.T.astype(dtype)           # (N_B, H)
    t_query = enc @ model.w_query.T.astype(dtype)          # (N_Q, H)
    n_b, n_q = t_desc.shape[0], t_query.shape[0]
    pre1 = (t_desc[:, None, :] + t_query[None, :, :]).reshape(n_b * n_q, -1)
    pre1 += model.b_in.astype(dtype)
    return _run_layers(model, pre1, dtype).reshape(n_b, n_q)


def forward_batch_naive(model, descriptors, rotations, dtype=np.float64):
    """Reference tiled layout: concatenate every (descriptor, query) pair."""
    desc = np.asarray(descriptors, dtype=dtype)
    if desc.ndim != 2 or desc.shape[1] != model.config.descriptor_dim:
        raise DimensionMismatch(f"descriptors must be (N_B, {model.config.descriptor_dim})")
    enc = _encode_rotations(rotations, model.config).astype(dtype)
    n_b, n_q = desc.shape[0], enc.shape[0]
    tiled = np.concatenate(
        [np.repeat(desc, n_q, axis=0), np.tile(enc, (n_b, 1))], axis=1
    )
    w_full = np.concatenate([model.w_desc, model.w_query], axis=1).astype(dtype)
    pre1 = tiled @ w_full.T + model.b_in.astype(dtype)
    return _run_layers(model, pre1, dtype).reshape(n_b, n_q)


def forward_with_cache(model, descriptors, encoded_queries, dtype=np.float64):
    """Batched forward keeping activations for a later backward pass.

    descriptors: (B, D); encoded_queries: (B, N, Q) already positionally
    encoded (each example has its own query set).  Returns ((B, N) outputs
    in float64, cache).
    """
    desc = np.asarray(descriptors, dtype=dtype)
    b, n, q = encoded_queries.shape
    enc = np.ascontiguousarray(encoded_queries, dtype=dtype).reshape(b * n, q)
    t_desc = desc @ model.w_desc.T.astype(dtype)
    pre1 = enc @ model.w_query.T.astype(dtype)
    pre1 += np.repeat(t_desc, n, axis=0)
    pre1 += model.b_in.astype(dtype)
    acts = [np.maximum(pre1, 0.0)]
    for w, bias in model.hidden:
        a = acts[-1] @ w.T.astype(dtype) + bias.astype(dtype)
        np.maximum(a, 0.0, out=a)
        acts.append(a)
    f = acts[-1] @ model.w_out.astype(dtype) + model.b_out.astype(dtype)[0]
    cache = {"desc": desc, "enc": enc, "acts": acts, "shape": (b, n), "dtype": dtype}
    return f.astype(np.float64).reshape(b, n), cache


def backward_from_cache(model, cache, out_weights):
    """Gradients of sum_{b,i} out_weights[b,i] * f_b(R_i) w.r.t. all parameters.

    Returns arrays in `parameters()` order, dtype float64.  Also stashes the
    gradient w.r.t. the encoded queries under key "d_enc" in the cache.
    """
    dtype = cache["dtype"]
    b, n = cache["shape"]
    acts = cache["acts"]
    g = np.asarray(out_weights, dtype=dtype).reshape(b * n)

    d_wout = acts[-1].T @ g
    d_bout = np.array([g.sum()])
    da = g[:, None] * model.w_out.astype(dtype)[None, :]

    hidden_grads = []
    for k in range(len(model.hidden) - 1, -1, -1):
        w, _ = model.hidden[k]
        dz = da * (acts[k + 1] > 0.0)
        hidden_grads.append((dz.T @ acts[k], dz.sum(axis=0)))
        da = dz @ w.astype(dtype)
    hidden_grads.reverse()

    dz1 = da * (acts[0] > 0.0)
    d_wq = dz1.T @ cache["enc"]
    d_bin = dz1.sum(axis=0)
    per_example = dz1.reshape(b, n, -1).sum(axis=1)  # (B, H)
    d_wd = per_example.T @ cache["desc"]
    cache["d_enc"] = dz1 @ model.w_query.astype(dtype)

    grads = [d_wd, d_wq, d_bin]
    for gw, gb in hidden_grads:
        grads.extend([gw, gb])
    grads.extend([d_wout, d_bout])
    return [np.asarray(x, dtype=np.float64) for x in grads]


def _decode_gradient(d_enc, entries, cfg: ModelConfig):
    """Chain gradients from encoded features back to the 9 matrix entries."""
    m = cfg.pe_frequencies
    u = np.asarray(entries, dtype=np.float64).reshape(-1, 9)
    d_enc = np.asarray(d_enc, dtype=np.float64).reshape(u.shape[0], -1)
    if m == 0:
        return d_enc.copy()
    offset = 0
    du = np.zeros_like(u)
    if cfg.include_raw_entries:
        du += d_enc[:, :9]
        offset = 9
    freqs = (2.0 ** np.arange(m)) * math.pi
    args = u[:, :, None] * freqs[None, None, :]
    trig = d_enc[:, offset:].reshape(u.shape[0], 9, 2 * m)
    du += np.sum(trig[:, :, 0::2] * np.cos(args) * freqs, axis=2)
    du -= np.sum(trig[:, :, 1::2] * np.sin(args) * freqs, axis=2)
    return du


def input_gradient(model, descriptor, r):
    """3x3 gradient of f w.r.t. the rotation-matrix entries."""
    d = _check_descriptor(model, descriptor)
    mat = r.matrix if isinstance(r, Rotation) else np.asarray(r, dtype=np.float64)
    entries = mat.reshape(1, 9)
    enc = encode_queries(entries, model.config.pe_frequencies,
                         model.config.include_raw_entries)
    _, cache = forward_with_cache(model, d.reshape(1, -1), enc.reshape(1, 1, -1))
    backward_from_cache(model, cache, np.ones((1, 1)))
    du = _decode_gradient(cache["d_enc"], entries, model.config)
    return du.reshape(3, 3)


def parameter_gradients(model, items, dtype=np.float64):
    """Accumulate parameter gradients over (descriptor, rotations, weights) items.

    Each item contributes sum_i weights[i] * f(descriptor, R_i) to the scalar
    being differentiated; the caller chooses the weights (for the NLL loss
    they are softmax(f) minus the ground-truth indicator).
    """
    total = [np.zeros_like(p) for p in model.parameters()]
    for descriptor, rotations, weights in items:
        d = _check_descriptor(model, descriptor)
        enc = _encode_rotations(rotations, model.config)
        _, cache = forward_with_cache(
            model, d.reshape(1, -1), enc.reshape(1, enc.shape[0], -1), dtype=dtype
        )
        grads = backward_from_cache(model, cache, np.asarray(weights).reshape(1, -1))
        for acc, g in zip(total, grads):
            acc += g
    return total


def save_checkpoint(model, path, extra_metadata=None):
    """Checkpoint: magic 'IPDF', u8 version, u32 JSON length, JSON, f32 weights."""
    cfg = model.config
    meta = {
        "descriptor_dim": cfg.descriptor_dim,
        "m": cfg.pe_frequencies,
        "hidden_width": cfg.hidden_width,
        "hidden_layers": cfg.hidden_layers,
        "include_raw_entries": cfg.include_raw_entries,
        "seed": cfg.seed,
        "steps": model.step_count,
    }
    if extra_metadata:
        meta["extra"] = extra_metadata
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        cfg = ModelConfig(
            descriptor_dim=meta["descriptor_dim"],
            pe_frequencies=meta["m"],
            hidden_width=meta["hidden_width"],
            hidden_layers=meta["hidden_layers"],
            include_raw_entries=meta.get("include_raw_entries", False),
            seed=meta["seed"],
        )
        model = ImplicitDensityModel(cfg)
        model.step_count = meta.get("steps", 0)
        for p in model.parameters():
            raw = fh.read(p.size * 4)
            if len(raw) != p.size * 4:
                raise ValueError(f"{path}: truncated weights")
            p[...] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(p.shape)
    return model, meta
