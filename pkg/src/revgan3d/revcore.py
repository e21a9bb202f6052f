"""Additively coupled reversible blocks and their memory-free backward pass.

A block splits its input channel-wise into ``(x1, x2)`` and computes::

    y1 = x1 + F(x2)
    y2 = x2 + G(y1)

which inverts exactly as ``x2 = y2 - G(y1)``, ``x1 = y1 - F(x2)``.

In ``"reversible"`` memory mode a whole :class:`RevSequence` is recorded on
the tape as a single node that keeps only its output.  Its backward rule
(:func:`rev_backward`) walks the blocks in reverse, reconstructing each
block's input from its output while recomputing F and G on a private tape,
so the retained activations do not depend on depth.  ``"naive"`` mode
records every op of every block, which is the reference the reversible
gradients are checked against.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Conv3d, InstanceNorm3d, LeakyReLU, Module, Sequential
from .tensor import (DEFAULT_DTYPE, Tape, Tensor, backward, concat, enable_grad, grad_enabled,
                     current_tape, narrow, no_grad, record_op, shadow_ledger)

MEMORY_MODES = ("reversible", "naive")


def residual_subnet(channels, *, rng, dtype=DEFAULT_DTYPE):
    """conv3d(k3) -> instance norm -> leaky_relu(0.2) -> conv3d(k3, zero-initialised)."""
    return Sequential(
        Conv3d(channels, channels, 3, padding=1, rng=rng, bias=False, dtype=dtype),
        InstanceNorm3d(channels, dtype=dtype),
        LeakyReLU(0.2),
        Conv3d(channels, channels, 3, padding=1, rng=rng, zero_init=True, dtype=dtype),
    )


class RevBlock(Module):
    def __init__(self, channels, *, rng, dtype=DEFAULT_DTYPE):
        if channels % 2:
            raise ConfigError(f"reversible block needs an even channel count, got {channels}")
        self.channels = channels
        self.f_net = residual_subnet(channels // 2, rng=rng, dtype=dtype)
        self.g_net = residual_subnet(channels // 2, rng=rng, dtype=dtype)
        self.evals = 0

    def f(self, x):
        self.evals += 1
        return self.f_net(x)

    def g(self, x):
        self.evals += 1
        return self.g_net(x)

    def forward(self, x):
        half = self.channels // 2
        x1, x2 = narrow(x, 1, 0, half), narrow(x, 1, half, self.channels)
        y1 = x1 + self.f(x2)
        y2 = x2 + self.g(y1)
        return concat([y1, y2], axis=1)

    def inverse(self, y):
        half = self.channels // 2
        y1, y2 = narrow(y, 1, 0, half), narrow(y, 1, half, self.channels)
        x2 = y2 - self.g(y1)
        x1 = y1 - self.f(x2)
        return concat([x1, x2], axis=1)


class RevSequence(Module):
    """Ordered reversible blocks sharing one channel count; ``depth`` may be 0."""

    def __init__(self, channels, depth, *, rng, dtype=DEFAULT_DTYPE):
        if depth < 0:
            raise ConfigError(f"core depth must be >= 0, got {depth}")
        if depth and channels % 2:
            raise ConfigError(f"reversible core needs an even channel count, got {channels}")
        self.channels = channels
        self.blocks = [RevBlock(channels, rng=rng, dtype=dtype) for _ in range(depth)]

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def subnet_evals(self):
        return sum(b.evals for b in self.blocks)

    def forward(self, x, memory="reversible"):
        return rev_forward(x, self, memory)

    def inverse(self, y, memory="reversible"):
        return rev_inverse(y, self, memory)


def _check(x, seq, memory):
    if memory not in MEMORY_MODES:
        raise ConfigError(f"memory mode must be one of {MEMORY_MODES}, got {memory!r}")
    if x.ndim != 5:
        raise ShapeError(f"reversible core expects N,C,D,H,W input, got shape {x.shape}")
    if seq.depth and x.shape[1] % 2:
        raise ConfigError(f"reversible core needs an even channel count, got {x.shape[1]}")
    if seq.depth and x.shape[1] != seq.channels:
        raise ShapeError(f"core built for {seq.channels} channels, input has {x.shape[1]}")


def _records(x, params):
    return grad_enabled() and (x.requires_grad or any(p.requires_grad for p in params))


def rev_forward(x: Tensor, seq: RevSequence, memory: str = "reversible") -> Tensor:
    _check(x, seq, memory)
    if seq.depth == 0:
        return x
    params = seq.parameters()
    if memory == "naive" or not _records(x, params):
        for block in seq.blocks:
            x = block(x)
        return x

    ledger = current_tape().ledger
    with no_grad(), shadow_ledger(ledger):
        h = x
        for block in seq.blocks:
            h = block(h)
    y = h.data

    def backward_fn(g):
        gx, pgrads = rev_backward(g, y, seq, ledger=ledger)
        return (gx, *pgrads)

    return record_op("rev_forward", y, (x, *params), backward_fn, saved=(y,))


def rev_inverse(y: Tensor, seq: RevSequence, memory: str = "reversible") -> Tensor:
    _check(y, seq, memory)
    if seq.depth == 0:
        return y
    params = seq.parameters()
    if memory == "naive" or not _records(y, params):
        for block in reversed(seq.blocks):
            y = block.inverse(y)
        return y

    ledger = current_tape().ledger
    with no_grad(), shadow_ledger(ledger):
        h = y
        for block in reversed(seq.blocks):
            h = block.inverse(h)
    x = h.data

    def backward_fn(g):
        gy, pgrads = rev_backward(g, x, seq, inverse=True, ledger=ledger)
        return (gy, *pgrads)

    return record_op("rev_inverse", x, (y, *params), backward_fn, saved=(x,))


def _vjp(fn, inp, upstream):
    """Run `fn` on a private tape and pull `upstream` back to `inp` and params."""
    with enable_grad(), Tape() as tape:
        t = Tensor(inp, requires_grad=True)
        out = fn(t)
    backward(out, grad=upstream)
    return out.data, t.grad, tape.ledger.peak_bytes


def _block_backward(block, out, gout):
    """Reconstruct the input of a forward block and pull gradients through it."""
    half = block.channels // 2
    y1, y2 = out[:, :half], out[:, half:]
    dy1, dy2 = gout[:, :half], gout[:, half:]
    g_y1, dg, peak_g = _vjp(block.g, y1, dy2)
    x2 = y2 - g_y1
    dz1 = dy1 + dg
    f_x2, df, peak_f = _vjp(block.f, x2, dz1)
    x1 = y1 - f_x2
    dx2 = dy2 + df
    return (np.concatenate([x1, x2], axis=1), np.concatenate([dz1, dx2], axis=1),
            max(peak_f, peak_g))


def _inverse_block_backward(block, out, gout):
    """Same as :func:`_block_backward` for a block applied in the inverse direction."""
    half = block.channels // 2
    x1, x2 = out[:, :half], out[:, half:]
    dx1, dx2 = gout[:, :half], gout[:, half:]
    f_x2, df, peak_f = _vjp(block.f, x2, -dx1)
    y1 = x1 + f_x2
    dx2_total = dx2 + df
    g_y1, dg, peak_g = _vjp(block.g, y1, -dx2_total)
    y2 = x2 + g_y1
    dy1 = dx1 + dg
    return (np.concatenate([y1, y2], axis=1), np.concatenate([dy1, dx2_total], axis=1),
            max(peak_f, peak_g))


def rev_backward(output_grad, y, seq: RevSequence, inverse: bool = False, ledger=None):
    """Gradients of a reversible sequence from its output alone.

    Returns ``(input_grad, param_grads)`` with `param_grads` aligned with
    ``seq.parameters()``.  Existing ``.grad`` buffers are left untouched.
    With ``inverse=True``, `y` is the output of :func:`rev_inverse`.
    """
    g = np.asarray(output_grad)
    y = np.asarray(y)
    if g.shape != y.shape:
        raise ShapeError(f"rev_backward: gradient shape {g.shape} != output shape {y.shape}")
    params = seq.parameters()
    stash = [p.grad for p in params]
    for p in params:
        p.grad = None
    try:
        step = _inverse_block_backward if inverse else _block_backward
        blocks = seq.blocks if inverse else seq.blocks[::-1]
        cur, gcur = y, g
        for block in blocks:
            cur, gcur, peak = step(block, cur, gcur)
            if ledger is not None:
                # one block's reconstruction plus its private recompute tape
                ledger.transient(cur.nbytes + gcur.nbytes + peak)
        pgrads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    finally:
        for p, s in zip(params, stash):
            p.grad = s
    return gcur, pgrads
