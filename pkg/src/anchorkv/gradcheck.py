"""Central finite-difference check of :func:`loss_and_grads`."""

from __future__ import annotations

import numpy as np

from .model import ModelWeights, loss_and_grads, loss_only
from .numerics import Rng


def numeric_gradient(weights: ModelWeights, batch, name: str, h: float = 1e-5, indices=None, **kw) -> np.ndarray:
    """Central differences of the loss w.r.t. ``weights[name]``; entries not
    in ``indices`` (all by default) are left at zero."""
    p = weights.params[name]
    g = np.zeros_like(p)
    idx = list(np.ndindex(p.shape)) if indices is None else indices
    for i in idx:
        old = p[i]
        p[i] = old + h
        fp = loss_only(weights, batch, **kw)
        p[i] = old - h
        fm = loss_only(weights, batch, **kw)
        p[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gradient_check(weights: ModelWeights, batch, h: float = 1e-5, sample: int | None = None, seed: int = 0, **kw) -> dict[str, float]:
    """Relative error ``|g_a - g_n| / max(|g_a|, |g_n|)`` per parameter tensor.

    Norms are taken over the checked entries: all of them, or ``sample``
    random entries per tensor.
    """
    _, analytic = loss_and_grads(weights, batch, **kw)
    rng = Rng(seed)
    errors = {}
    for name, p in weights.params.items():
        if sample is None or sample >= p.size:
            idx = list(np.ndindex(p.shape))
        else:
            flat = rng.choice(p.size, size=sample, replace=False)
            idx = [np.unravel_index(int(f), p.shape) for f in flat]
        num = numeric_gradient(weights, batch, name, h, idx, **kw)
        sel = tuple(np.array(idx).T)
        a, n = analytic[name][sel], num[sel]
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        errors[name] = float(np.linalg.norm(a - n) / denom)
    return errors
