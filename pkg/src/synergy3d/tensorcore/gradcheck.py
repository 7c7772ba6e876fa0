"""Central finite-difference checks against backprop gradients.

Entries whose +h and -h evaluations take different branches of a non-smooth
op (ReLU, max-pool winner, smooth-L1 region) straddle a kink where the
derivative is undefined; those are skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import record_branches


@dataclass
class GradCheck:
    max_rel_error: float
    n_checked: int
    n_skipped: int

    def __float__(self):
        return self.max_rel_error


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _entries(size, max_entries, rng):
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def numeric_grad(fn, tensors, h=1e-4, max_entries=None, rng=None, skip_kinks=False):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensors``.

    Returns (grads, checked) where ``checked`` holds boolean masks of the
    entries that were actually probed; the rest are NaN in ``grads``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grads, checked = [], []
    for t in tensors:
        g = np.full(t.data.shape, np.nan)
        mask = np.zeros(t.data.shape, dtype=bool)
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError("numeric_grad needs contiguous tensor storage")
        for i in _entries(flat.size, max_entries, rng):
            orig = flat[i]
            flat[i] = orig + h
            with record_branches() as bp:
                fp = float(fn().data)
            flat[i] = orig - h
            with record_branches() as bm:
                fm = float(fn().data)
            flat[i] = orig
            if skip_kinks and not _same_branches(bp, bm):
                continue
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
            mask.reshape(-1)[i] = True
        grads.append(g)
        checked.append(mask)
    return grads, checked


def analytic_grad(fn, tensors):
    for t in tensors:
        t.grad = None
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def max_relative_error(analytic, numeric, atol=1e-8):
    """Largest entrywise gap per tensor, relative to that tensor's largest gradient magnitude.

    Tensors whose analytic and numeric gradients are both below ``atol``
    (structurally zero, e.g. a bias feeding straight into batch norm)
    count as agreeing.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        ok = ~np.isnan(n)
        a, n = np.asarray(a)[ok], np.asarray(n)[ok]
        if a.size == 0:
            continue
        scale = max(np.abs(a).max(), np.abs(n).max())
        if scale < atol:
            continue
        worst = max(worst, float(np.abs(a - n).max()) / scale)
    return worst


def check_gradients(fn, tensors, h=1e-4, max_entries=None, seed=0, skip_kinks=True, atol=1e-8) -> GradCheck:
    """Compare backprop against central differences; see ``GradCheck`` for the summary."""
    tensors = list(tensors)
    analytic = analytic_grad(fn, tensors)
    numeric, checked = numeric_grad(fn, tensors, h, max_entries, np.random.default_rng(seed), skip_kinks)
    n_checked = int(sum(m.sum() for m in checked))
    n_total = sum(min(t.data.size, max_entries or t.data.size) for t in tensors)
    return GradCheck(max_relative_error(analytic, numeric, atol), n_checked, n_total - n_checked)
