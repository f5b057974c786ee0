"""Central finite-difference checks for the hand-written backward passes.

Errors are reported per tensor as ``max|analytic - numeric| / max(max|analytic|,
max|numeric|)``, i.e. relative to the tensor's own gradient scale, which keeps
near-zero entries from dominating.
"""

from __future__ import annotations

import numpy as np


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6, max_entries: int | None = None,
                 rng: np.random.Generator | None = None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    With ``max_entries`` only a random subset of entries is probed; returns
    ``(flat_indices, values)``.
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return idx, out


def check_layer(layer, x, train=True, h=1e-6, seed=0, max_entries=None) -> dict:
    """Check ``layer.backward`` against finite differences of ``sum(G * layer(x))``.

    Returns ``{"input": err, "<param>": err, ...}``.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    G = rng.standard_normal(layer.forward(x, train).shape)

    def loss():
        return float((layer.forward(x, train) * G).sum())

    layer.forward(x, train)
    dx = layer.backward(G)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    errs = {}
    idx, num = numeric_grad(loss, x, h, max_entries, rng)
    errs["input"] = rel_error(dx.reshape(-1)[idx], num)
    for k, p in layer.params.items():
        idx, num = numeric_grad(loss, p, h, max_entries, rng)
        errs[k] = rel_error(grads[k].reshape(-1)[idx], num)
    return errs


def check_function(f, inputs: dict, grads: dict, h=1e-6, max_entries=None, seed=0) -> dict:
    """Compare precomputed ``grads`` of scalar ``f()`` against finite differences.

    ``inputs`` maps names to the arrays ``f`` closes over; they are perturbed in place.
    """
    rng = np.random.default_rng(seed)
    errs = {}
    for name, arr in inputs.items():
        idx, num = numeric_grad(f, arr, h, max_entries, rng)
        errs[name] = rel_error(np.asarray(grads[name]).reshape(-1)[idx], num)
    return errs
