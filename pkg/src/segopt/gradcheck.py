"""Finite-difference verification of the analytic gradients.

Two levels are checked for every loss kind: the probability-space
gradient reported by the loss itself, and the parameter-space gradient
produced by backpropagation through the model.  Both use central
differences with step 1e-6 on random instances.

Instances keep probabilities bounded away from 0 so the differencing
step never crosses the cross-entropy clamp, where the loss is
deliberately non-smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import DistanceMatrix, LabelMap, LOSS_KINDS, brats_distance_matrix, composite_loss
from .model import Model, ModelSpec
from .numerics import Rng

__all__ = [
    "FD_STEP",
    "PROB_TOL",
    "PARAM_TOL",
    "GradCheckResult",
    "fd_prob_gradient",
    "fd_param_gradient",
    "max_rel_error",
    "run_gradcheck",
]

FD_STEP = 1e-6
PROB_TOL = 1e-5
PARAM_TOL = 1e-4

# Central differences at step h carry ~eps*|f|/(2h) = 1e-10 of absolute
# roundoff noise, so ratios against entries smaller than this floor measure
# noise, not gradient error.  Flooring the denominator compares such
# entries absolutely (to tol * floor) instead.
DENOM_FLOOR = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    kind: str
    trials: int
    worst_prob_err: float
    worst_param_err: float

    @property
    def passed(self) -> bool:
        return self.worst_prob_err <= PROB_TOL and self.worst_param_err <= PARAM_TOL


def max_rel_error(analytic: np.ndarray, differenced: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    d = np.asarray(differenced, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(d)), DENOM_FLOOR)
    rel = np.abs(a - d) / denom
    return float(rel.max()) if rel.size else 0.0


def fd_prob_gradient(kind: str, probs: np.ndarray, gt: LabelMap,
                     m: DistanceMatrix | None, h: float = FD_STEP) -> np.ndarray:
    out = np.zeros_like(probs)
    for v in range(probs.shape[0]):
        for l in range(probs.shape[1]):
            plus = probs.copy()
            minus = probs.copy()
            plus[v, l] += h
            minus[v, l] -= h
            f_plus = composite_loss(kind, plus, gt, m).value
            f_minus = composite_loss(kind, minus, gt, m).value
            out[v, l] = (f_plus - f_minus) / (2.0 * h)
    return out


def fd_param_gradient(model: Model, features: np.ndarray, gt: LabelMap, kind: str,
                      m: DistanceMatrix | None, h: float = FD_STEP) -> np.ndarray:
    out = np.zeros_like(model.params)
    for i in range(model.params.size):
        plus = model.params.copy()
        minus = model.params.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = composite_loss(
            kind, Model(model.spec, plus).forward(features), gt, m).value
        f_minus = composite_loss(
            kind, Model(model.spec, minus).forward(features), gt, m).value
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def _random_instance(rng: Rng, num_classes: int = 4):
    n_vox = int(rng.integers(2, 33))
    labels = rng.integers(0, num_classes, n_vox).astype(np.int64)
    gt = LabelMap(labels, num_classes, (n_vox,))
    raw = rng.uniform((n_vox, num_classes)) + 0.05
    probs = raw / raw.sum(axis=1, keepdims=True)
    features = rng.normal((n_vox, 3))
    return gt, probs, features


def run_gradcheck(kinds=None, trials: int = 100, seed: int = 0,
                  inject_bug: bool = False) -> list:
    """Check every requested loss kind on ``trials`` random instances.

    inject_bug deliberately corrupts one analytic gradient entry per
    trial; it exists so the harness itself can be shown to catch errors.
    """
    if kinds is None:
        kinds = LOSS_KINDS
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    matrix = brats_distance_matrix()
    results = []
    for kind in kinds:
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")
        m = matrix if "gwdl" in kind else None
        worst_prob = 0.0
        worst_param = 0.0
        rng = Rng(seed)
        for trial in range(trials):
            gt, probs, features = _random_instance(rng)
            analytic = composite_loss(kind, probs, gt, m, want_gradient=True).gradient
            if inject_bug:
                analytic = analytic.copy()
                analytic[0, 0] += 1e-3
            fd = fd_prob_gradient(kind, probs, gt, m)
            worst_prob = max(worst_prob, max_rel_error(analytic, fd))

            spec = (ModelSpec("linear", 3, 4, seed=seed + trial)
                    if trial % 2 == 0
                    else ModelSpec("mlp", 3, 4, hidden_width=5, seed=seed + trial))
            model = Model.init(spec)
            _, param_grad = model.backward(features, gt, kind, m)
            if inject_bug:
                param_grad = param_grad.copy()
                param_grad[0] += 1e-3
            fd_p = fd_param_gradient(model, features, gt, kind, m)
            worst_param = max(worst_param, max_rel_error(param_grad, fd_p))
        results.append(GradCheckResult(kind, trials, worst_prob, worst_param))
    return results
