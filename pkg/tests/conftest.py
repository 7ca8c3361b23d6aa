"""Shared test oracles.

The finite-difference helpers here are deliberately independent of the
package's own gradient-check harness: tests difference the loss values
directly so analytic gradients are verified against a second route.

Comparison convention for FD checks: relative error is
|a - d| / max(|a|, |d|, floor).  Central differences at step 1e-6 carry
about 1e-10 of absolute roundoff noise, so entries below the floor are
effectively compared absolutely (to tol * floor); without the floor,
noise-dominated near-zero entries would fabricate relative error.
"""

import numpy as np
import pytest

from segopt.losses import LabelMap, composite_loss
from segopt.model import Model

FD_STEP = 1e-6


def rel_err(analytic, differenced, floor=1e-4) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    d = np.asarray(differenced, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(d)), floor)
    return float((np.abs(a - d) / denom).max())


def rel_err_excluding(analytic, differenced, exclude_below=1e-8) -> float:
    """Max relative error over coordinates where |analytic| >= exclude_below."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    d = np.asarray(differenced, dtype=np.float64).reshape(-1)
    keep = np.abs(a) >= exclude_below
    if not keep.any():
        return 0.0
    a, d = a[keep], d[keep]
    return float((np.abs(a - d) / np.maximum(np.abs(a), np.abs(d))).max())


def fd_loss_gradient(kind, probs, gt, m=None, h=FD_STEP):
    """Central differences of the loss value over every probability entry."""
    out = np.zeros_like(probs)
    for v in range(probs.shape[0]):
        for l in range(probs.shape[1]):
            plus = probs.copy()
            plus[v, l] += h
            minus = probs.copy()
            minus[v, l] -= h
            out[v, l] = (composite_loss(kind, plus, gt, m).value
                         - composite_loss(kind, minus, gt, m).value) / (2 * h)
    return out


def fd_model_gradient(model, features, gt, kind, m=None, h=FD_STEP):
    """Central differences of loss(forward(features)) over every parameter."""
    out = np.zeros_like(model.params)
    for i in range(model.params.size):
        plus = model.params.copy()
        plus[i] += h
        minus = model.params.copy()
        minus[i] -= h
        f_plus = composite_loss(kind, Model(model.spec, plus).forward(features), gt, m).value
        f_minus = composite_loss(kind, Model(model.spec, minus).forward(features), gt, m).value
        out[i] = (f_plus - f_minus) / (2 * h)
    return out


def bounded_probs(rng, n_vox, n_classes):
    """Random rows on the simplex with entries bounded away from 0, so FD
    steps never cross the cross-entropy clamp."""
    raw = rng.uniform(size=(n_vox, n_classes)) + 0.05
    return raw / raw.sum(axis=1, keepdims=True)


def stratified_labels(rng, n_vox, n_classes):
    """Random labels guaranteed to contain every class at least once."""
    assert n_vox >= n_classes
    labels = rng.integers(0, n_classes, size=n_vox)
    pos = rng.permutation(n_vox)[:n_classes]
    labels[pos] = np.arange(n_classes)
    return labels.astype(np.int64)


def dyadic_probs(rng, n_vox, n_classes=4, denom=256):
    """Probability rows whose entries are multiples of 1/256: sums of any
    subset are exact in binary floating point."""
    counts = rng.multinomial(denom, [1.0 / n_classes] * n_classes, size=n_vox)
    return counts.astype(np.float64) / denom


def label_map(labels, num_classes=4, shape=None):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if shape is None:
        shape = (labels.size,)
    return LabelMap(labels, num_classes, shape)


# ---- brute-force surface-distance oracle ----

def oracle_boundary(grid):
    """Mask voxels with at least one face neighbor outside the mask,
    checked voxel by voxel (out-of-grid counts as outside)."""
    grid = np.asarray(grid, dtype=bool)
    out = np.zeros_like(grid)
    for idx in np.argwhere(grid):
        boundary = False
        for axis in range(grid.ndim):
            for delta in (-1, 1):
                nb = list(idx)
                nb[axis] += delta
                if not 0 <= nb[axis] < grid.shape[axis]:
                    boundary = True
                elif not grid[tuple(nb)]:
                    boundary = True
        out[tuple(idx)] = boundary
    return out


def oracle_hd95(mask_a, mask_b, shape, spacing=None):
    """Sorts all pairwise boundary distances; max of directed 95th
    percentiles with linear interpolation."""
    a = np.asarray(mask_a, dtype=bool).reshape(shape)
    b = np.asarray(mask_b, dtype=bool).reshape(shape)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return None
    if spacing is None:
        spacing = (1.0,) * len(shape)
    sa = np.argwhere(oracle_boundary(a)).astype(np.float64) * np.asarray(spacing)
    sb = np.argwhere(oracle_boundary(b)).astype(np.float64) * np.asarray(spacing)
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=2))
    d_ab = np.percentile(d.min(axis=1), 95)
    d_ba = np.percentile(d.min(axis=0), 95)
    return float(max(d_ab, d_ba))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
