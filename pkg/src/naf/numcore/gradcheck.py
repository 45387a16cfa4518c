"""Central finite-difference gradient verification."""

from __future__ import annotations

import numpy as np


def grad_check(loss_fn, params, h=1e-3, limit=None):
    """Max relative error between analytic and central-difference gradients.

    loss_fn: () -> scalar Tensor, rebuilt on every call (fresh graph).
    params: iterable of (name, Tensor) leaves to check.
    limit: optionally check at most this many entries per parameter
    (spread evenly) to keep large checks fast.

    Relative error per entry is |a - n| / max(|a|, |n|, floor) with
    floor = max(0.01 * largest gradient magnitude, 1e-4), so near-zero
    gradients do not blow up the ratio at float32 precision.
    """
    params = list(params)
    total = sum(p.size for _, p in params)
    if total > 10_000:
        raise ValueError(f"grad_check limited to 1e4 parameters, got {total}")

    loss = loss_fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}

    pairs = []
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if limit is not None and n > limit:
            picks = np.linspace(0, n - 1, limit).astype(int)
        else:
            picks = range(n)
        a_flat = analytic[name].reshape(-1)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            pairs.append((float(a_flat[i]), numeric))

    # scale-aware floor: entries below 1% of the largest gradient sit in
    # float32 forward-pass noise and would dominate a fixed tiny floor
    gmax = max((max(abs(a), abs(n)) for a, n in pairs), default=0.0)
    floor = max(1e-2 * gmax, 1e-4)
    worst = 0.0
    for a, n in pairs:
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))
    return worst


def grad_check_mlp(model, x, h=1e-3):
    """Convenience wrapper: checks d(sum(model(x)))/d(params)."""
    from . import tensor as T

    def loss_fn():
        return T.tsum(model(x))

    return grad_check(loss_fn, model.parameters(), h=h)
