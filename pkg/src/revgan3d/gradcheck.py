"""Central finite-difference check of tape gradients."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor, backward, no_grad


def finite_diff_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps the tensor(s) `x` to a scalar tensor.  `x` may be a single
    64-bit tensor or a sequence of them (e.g. an input plus parameters);
    every coordinate of every tensor is perturbed in place.  The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ConfigError("finite_diff_check requires 64-bit tensors")

    saved = [(t.requires_grad, t.grad) for t in xs]
    try:
        for t in xs:
            t.requires_grad = True
            t.grad = None
            if not t.data.flags.c_contiguous:
                t.data = np.ascontiguousarray(t.data)
        with Tape():
            out = f(*xs) if len(xs) > 1 else f(xs[0])
        if out.size != 1:
            raise ShapeError(f"finite_diff_check: f must return a scalar, got {out.shape}")
        backward(out)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]

        worst = 0.0
        with no_grad():
            for t, a in zip(xs, analytic):
                flat = t.data.reshape(-1)
                aflat = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float((f(*xs) if len(xs) > 1 else f(xs[0])).data)
                    flat[i] = orig - h
                    fm = float((f(*xs) if len(xs) > 1 else f(xs[0])).data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * h)
                    err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]))
                    worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
