"""Optional torch-backed training loop (float32, CPU).

Same math as the numpy reference loop in `train` (hand-written layers,
explicit Adam), but with preallocated buffers, in-place ReLU, and oneDNN
GEMMs, which are substantially faster on CPU.  No autograd is involved;
query sampling and shuffling stay in numpy so the random streams match the
reference path.  Loss reductions are float64.

Supports periodic state snapshots so multi-hour runs can resume: the
random streams are derived from (seed, step), so a resumed run reproduces
an uninterrupted one up to float32 state round-trip.
"""

from __future__ import annotations

import math
import os

import numpy as np
import torch

from .rotation import quat_conjugate, quat_multiply, quats_to_matrices, sample_uniform_quats

_STATE_VERSION = 1


def _batch_quats(config, grid, gts, step):
    if config.query_mode == "rotated_grid":
        left = quat_multiply(gts, quat_conjugate(grid.quaternions[0]))
        return quat_multiply(left[:, None, :], grid.quaternions[None, :, :])
    rng = np.random.default_rng([config.seed, 1, step])
    b, n = gts.shape[0], config.query_count
    qs = np.empty((b, n, 4))
    qs[:, 0] = gts
    qs[:, 1:] = sample_uniform_quats(rng, b * (n - 1)).reshape(b, n - 1, 4)
    return qs


class _TorchState:
    """Float32 parameter and Adam state tensors mirroring the model."""

    def __init__(self, model):
        self.names = []
        self.params = []
        for i, p in enumerate(model.parameters()):
            self.names.append(f"p{i}")
            self.params.append(torch.from_numpy(p.astype(np.float32)))
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def write_back(self, model):
        for dst, src in zip(model.parameters(), self.params):
            dst[...] = src.numpy().astype(np.float64)

    def save(self, path, step):
        payload = {"version": np.int64(_STATE_VERSION), "step": np.int64(step),
                   "t": np.int64(self.t)}
        for name, p, m, v in zip(self.names, self.params, self.m, self.v):
            payload[name] = p.numpy()
            payload[name + "_m"] = m.numpy()
            payload[name + "_v"] = v.numpy()
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)

    def load(self, path):
        data = np.load(path)
        if int(data["version"]) != _STATE_VERSION:
            raise ValueError(f"{path}: unsupported train state version")
        for i, name in enumerate(self.names):
            self.params[i] = torch.from_numpy(data[name].copy())
            self.m[i] = torch.from_numpy(data[name + "_m"].copy())
            self.v[i] = torch.from_numpy(data[name + "_v"].copy())
        self.t = int(data["t"])
        return int(data["step"])


def _adam_step(state, grads, lr, config):
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    b1c = 1.0 - b1 ** state.t
    b2c = 1.0 - b2 ** state.t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.addcdiv_(m / b1c, (v / b2c).sqrt_().add_(config.adam_eps), value=-lr)


def train_loop(model, descriptors, gts, config, state_path=None, state_every=500,
               progress=None):
    """Run the full training loop; returns the trace and writes weights back."""
    from .grid import generate_grid
    from .train import NonFiniteLoss, learning_rate

    grid = generate_grid(config.grid_level) if config.query_mode == "rotated_grid" else None
    n_data = descriptors.shape[0]
    b, n = config.batch_size, config.query_count
    rows = b * n
    h = model.config.hidden_width
    m_freq = model.config.pe_frequencies
    include_raw = model.config.include_raw_entries
    q_dim = model.config.query_dim
    n_hidden = len(model.hidden)

    state = _TorchState(model)
    start_step = 0
    trace = []
    if state_path is not None and os.path.exists(state_path):
        start_step = state.load(state_path)
        model.step_count = start_step

    desc_t = torch.from_numpy(descriptors.astype(np.float32))
    freqs = torch.from_numpy(((2.0 ** np.arange(max(m_freq, 1))) * math.pi).astype(np.float32))

    # The public encoding interleaves (sin, cos) per entry; internally the
    # fast path writes sin and cos blocks contiguously (much cheaper) and
    # permutes the first-layer query columns to match.  perm[k_blocked] is
    # the interleaved column index of blocked column k.
    if m_freq > 0:
        offset = 9 if include_raw else 0
        perm = np.empty(q_dim, dtype=np.int64)
        if include_raw:
            perm[:9] = np.arange(9)
        for e in range(9):
            for j in range(m_freq):
                perm[offset + e * m_freq + j] = offset + e * 2 * m_freq + 2 * j
                perm[offset + 9 * m_freq + e * m_freq + j] = offset + e * 2 * m_freq + 2 * j + 1
        perm_t = torch.from_numpy(perm)
    else:
        perm_t = None

    # Reusable buffers: encoded queries, activations, two gradient buffers.
    enc = torch.empty(rows, q_dim)
    acts = [torch.empty(rows, h) for _ in range(n_hidden + 1)]
    g1 = torch.empty(rows, h)
    g2 = torch.empty(rows, h)

    def p(i):
        return state.params[i]

    perm, perm_epoch = None, -1
    for step in range(start_step, config.total_steps):
        start = step * b
        idx = np.empty(b, dtype=np.int64)
        for k in range(b):
            j = start + k
            epoch = j // n_data
            if epoch != perm_epoch:
                perm = np.random.default_rng([config.seed, 0, epoch]).permutation(n_data)
                perm_epoch = epoch
            idx[k] = perm[j % n_data]

        quats = _batch_quats(config, grid, gts[idx], step)
        mats = torch.from_numpy(
            quats_to_matrices(quats.reshape(-1, 4)).reshape(rows, 9).astype(np.float32)
        )
        if m_freq == 0:
            enc.copy_(mats)
        else:
            offset = 9 if include_raw else 0
            if include_raw:
                enc[:, :9] = mats
            args = mats.unsqueeze(2) * freqs[:m_freq]
            torch.sin(args, out=enc[:, offset : offset + 9 * m_freq].view(rows, 9, m_freq))
            torch.cos(args, out=enc[:, offset + 9 * m_freq :].view(rows, 9, m_freq))

        # Forward: split first layer, then the ReLU chain.
        w_desc, w_query, b_in = p(0), p(1), p(2)
        w_query_blk = w_query[:, perm_t] if perm_t is not None else w_query
        torch.mm(enc, w_query_blk.t(), out=acts[0])
        acts[0].view(b, n, h).add_((desc_t[idx] @ w_desc.t()).unsqueeze(1))
        acts[0].add_(b_in)
        torch.nn.functional.relu(acts[0], inplace=True)
        for k in range(n_hidden):
            w, bias = p(3 + 2 * k), p(4 + 2 * k)
            torch.mm(acts[k], w.t(), out=acts[k + 1])
            acts[k + 1].add_(bias)
            torch.nn.functional.relu(acts[k + 1], inplace=True)
        w_out, b_out = p(3 + 2 * n_hidden), p(4 + 2 * n_hidden)
        f = (acts[-1] @ w_out + b_out[0]).view(b, n).double()

        # Loss (float64) and output weights: softmax(f) minus the gt indicator.
        peak = f.max(dim=1, keepdim=True).values
        e = torch.exp(f - peak)
        z = e.sum(dim=1, keepdim=True)
        losses = -f[:, 0] + z.log()[:, 0] + peak[:, 0] + math.log(math.pi ** 2 / n)
        loss = float(losses.mean())
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        w_soft = (e / z)
        w_soft[:, 0] -= 1.0
        g = (w_soft / b).view(rows, 1).float()

        # Backward with ping-pong gradient buffers.
        grads = [None] * len(state.params)
        grads[3 + 2 * n_hidden] = acts[-1].t() @ g[:, 0]
        grads[4 + 2 * n_hidden] = g.sum(dim=0)
        torch.mm(g, w_out.view(1, h), out=g1)
        cur, nxt = g1, g2
        for k in range(n_hidden - 1, -1, -1):
            w = p(3 + 2 * k)
            cur.masked_fill_(acts[k + 1] <= 0, 0.0)
            grads[3 + 2 * k] = cur.t() @ acts[k]
            grads[4 + 2 * k] = cur.sum(dim=0)
            torch.mm(cur, w, out=nxt)
            cur, nxt = nxt, cur
        cur.masked_fill_(acts[0] <= 0, 0.0)
        d_wq_blk = cur.t() @ enc
        if perm_t is not None:
            grads[1] = torch.empty_like(d_wq_blk)
            grads[1][:, perm_t] = d_wq_blk
        else:
            grads[1] = d_wq_blk
        grads[2] = cur.sum(dim=0)
        per_example = cur.view(b, n, h).sum(dim=1)
        grads[0] = per_example.t() @ desc_t[idx]

        if config.grad_clip is not None:
            norm = math.sqrt(sum(float(torch.sum(gg * gg)) for gg in grads))
            if norm > config.grad_clip:
                for gg in grads:
                    gg.mul_(config.grad_clip / norm)

        lr = learning_rate(config, step + 1)
        trace.append((step, lr, loss))
        _adam_step(state, grads, lr, config)
        model.step_count += 1
        if progress is not None:
            progress(step, lr, loss)
        if state_path is not None and (step + 1) % state_every == 0:
            state.write_back(model)
            state.save(state_path, step + 1)

    state.write_back(model)
    if state_path is not None:
        state.save(state_path, config.total_steps)
    return trace
