"""The four training losses and their weighted sum.

Parameter losses accept either a B x 62 array/tensor or a dict of blocks
(``p``, ``s``, ``e``); only blocks present on both sides contribute. All
losses sum within a sample and average over the batch.
"""

from __future__ import annotations

import numpy as np

from ..morphable import ParamVector
from ..tensorcore.tensor import Tensor, smooth_l1, square, sub

BLOCKS = ParamVector.BLOCKS


def _tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _as_blocks(x):
    if isinstance(x, dict):
        return {m: _tensor(v) for m, v in x.items()}
    t = _tensor(x)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    return {m: t[:, sl] for m, sl in BLOCKS.items()}


def _sq_block_sum(a, b):
    a, b = _as_blocks(a), _as_blocks(b)
    common = [m for m in ("p", "s", "e") if m in a and m in b]
    if not common:
        raise ValueError("no common parameter blocks to compare")
    total = None
    for m in common:
        if a[m].shape != b[m].shape:
            raise ValueError(f"block {m}: shape {a[m].shape} vs {b[m].shape}")
        term = square(sub(a[m], b[m])).sum(axis=1)
        total = term if total is None else total + term
    return total.mean()


def loss_3dmm(alpha, alpha_gt):
    """Sum of squared errors over pose, shape and expression blocks."""
    return _sq_block_sum(alpha, alpha_gt)


def loss_landmark_geometry(alpha_hat, alpha_gt):
    return _sq_block_sum(alpha_hat, alpha_gt)


def loss_consistency(alpha, alpha_hat, stop_grad="none"):
    """Squared gap between image-regressed and landmark-regressed parameters.

    ``stop_grad`` detaches one side: ``"alpha"`` or ``"alpha_hat"``.
    """
    a, b = _as_blocks(alpha), _as_blocks(alpha_hat)
    if stop_grad == "alpha":
        a = {m: v.detach() for m, v in a.items()}
    elif stop_grad == "alpha_hat":
        b = {m: v.detach() for m, v in b.items()}
    return _sq_block_sum(a, b)


def loss_landmark(refined, gt, beta=1.0):
    """Smooth-L1 over every landmark coordinate; inputs are B x N x 3 (or N x 3)."""
    r, g = _tensor(refined), _tensor(gt)
    if r.shape != g.shape:
        raise ValueError(f"landmark shapes differ: {r.shape} vs {g.shape}")
    if r.ndim == 2:
        r, g = r.reshape(1, *r.shape), g.reshape(1, *g.shape)
    per_sample = smooth_l1(sub(r, g), beta).sum(axis=(1, 2))
    return per_sample.mean()


def loss_total(components, weights):
    """Weighted sum; ``components`` maps l3dmm/lmk/l3dmm_lmk/consistency to scalars.

    Missing components count as zero, and a zero weight drops the term from the
    graph so it contributes no gradient at all.
    """
    total = None
    for name in ("l3dmm", "lmk", "l3dmm_lmk", "consistency"):
        w = getattr(weights, name)
        c = components.get(name)
        if c is None or w == 0:
            continue
        term = _tensor(c) * w
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total
