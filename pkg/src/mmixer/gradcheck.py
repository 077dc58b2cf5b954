"""Finite-difference gradient verification.

The checker only ever evaluates forward passes, so it is independent of
the backward implementation it is judging. The comparison metric is the
per-tensor relative error ||a - b|| / max(||a||, ||b||): central
differences carry an O(step^2 * f''') truncation term that can swamp
individual near-zero gradient elements even when the gradient is exact,
while the norm ratio stays tiny for a correct gradient and jumps to
order one for a wrong one.
"""

import time

import numpy as np

from .tensor import no_grad


def rel_error(a, b, floor=1e-8):
    """||a - b|| / max(||a||, ||b||, floor) over a gradient (sub)tensor."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / max(na, nb, floor))


def numeric_gradient(f, x, step=1e-4):
    """Central differences of scalar-valued f at every element of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def numeric_gradient_at(f, param, indices, step=1e-4):
    """Central differences of f() at selected flat indices of a parameter.

    f takes no arguments and must read param.data afresh on every call;
    the parameter is perturbed in place and restored.
    """
    flat = param.data.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[j] = (hi - lo) / (2.0 * step)
    return out


def check_model_gradients(loss_fn, named_params, step=1e-4, floor=1e-8,
                          samples=None, seed=0):
    """Compare autodiff grads of loss_fn against central differences.

    loss_fn() runs a fresh forward pass over a fixed batch and returns the
    scalar loss tensor. Every parameter tensor is checked; with `samples`
    set, that many elements per tensor are probed (seeded choice, always
    including the largest-gradient element), otherwise every element.

    Returns (rows, elapsed_seconds) where rows are
    (name, max_rel_err, n_checked) in parameter order.
    """
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
             for _, p in named_params]

    def forward_value():
        with no_grad():
            return float(loss_fn().data)

    rng = np.random.default_rng(seed)
    rows = []
    start = time.perf_counter()
    for (name, p), g in zip(named_params, grads):
        n = p.data.size
        if samples is None or samples >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=samples, replace=False)
            top = int(np.argmax(np.abs(g)))
            if top not in idx:
                idx[0] = top
        fd = numeric_gradient_at(forward_value, p, idx.tolist(), step=step)
        ad = g.reshape(-1)[idx]
        rows.append((name, rel_error(ad, fd, floor=floor), len(idx)))
    return rows, time.perf_counter() - start


def group_report(rows):
    """Collapse per-tensor rows to per-group maxima by dotted name prefix."""
    groups = {}
    for name, err, n in rows:
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("mcu", "cfem") else parts[0]
        prev_err, prev_n = groups.get(key, (0.0, 0))
        groups[key] = (max(prev_err, err), prev_n + n)
    return [(k, e, n) for k, (e, n) in groups.items()]
