"""Hardness-weighted sampling for distributionally robust training.

Instead of minimizing the plain mean of per-sample losses, distributionally
robust optimization lets an adversary reweight the samples, with a KL
penalty pulling the weights back toward uniform.  The inner maximization
has a closed form: sample i gets weight proportional to exp(beta * loss_i),
a Gibbs distribution over the running loss estimates.  Training realizes
the objective simply by drawing batches from that distribution instead of
shuffling, updating each sample's loss estimate whenever it is visited.

beta interpolates between the two regimes: beta -> 0 recovers uniform
sampling (plain empirical risk), beta -> inf concentrates on the current
hardest sample.
"""

from __future__ import annotations

import json

import numpy as np

from .numerics import Rng, softmax

__all__ = ["HardnessWeightedSampler", "DEFAULT_BETA"]

DEFAULT_BETA = 100.0


class HardnessWeightedSampler:
    """Gibbs sampler over per-sample loss estimates.

    Single-writer: one training loop owns and mutates the state.  Loss
    estimates are stale between visits; that staleness is the on-line
    approximation that keeps the overhead negligible.
    """

    def __init__(self, n: int, beta: float = DEFAULT_BETA, init_loss: float = 1.0,
                 seed: int = 0):
        if n < 1:
            raise ValueError(f"need at least one sample, got n={n}")
        if not beta > 0:
            raise ValueError(f"beta must be positive, got {beta}")
        if not np.isfinite(init_loss):
            raise ValueError("initial loss estimate must be finite")
        self.n = int(n)
        self.beta = float(beta)
        # Optimistic initialization: unvisited samples keep maximal weight
        # so every sample gets explored early.
        self.loss_estimates = np.full(self.n, float(init_loss))
        self.initialized = np.zeros(self.n, dtype=bool)
        self.rng = Rng(seed)

    def probabilities(self) -> np.ndarray:
        """Current sampling distribution: softmax of beta * loss estimates."""
        return softmax(self.beta * self.loss_estimates)

    def update_loss(self, sample_index: int, new_loss: float) -> None:
        """Record a freshly computed per-sample loss (last write wins)."""
        if not 0 <= sample_index < self.n:
            raise ValueError(f"sample index {sample_index} out of range [0, {self.n})")
        if not np.isfinite(new_loss):
            raise ValueError(f"loss estimate for sample {sample_index} is not finite")
        self.loss_estimates[sample_index] = float(new_loss)
        self.initialized[sample_index] = True

    def sample_batch(self, batch_size: int) -> np.ndarray:
        """Draw ``batch_size`` indices i.i.d. with replacement.

        Inverse-CDF on uniform draws, so the result is a pure function of
        the rng stream position and the current probabilities.
        """
        if batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {batch_size}")
        cdf = np.cumsum(self.probabilities())
        u = self.rng.uniform(size=batch_size)
        return np.minimum(np.searchsorted(cdf, u, side="right"), self.n - 1)

    def entropy(self) -> float:
        """Shannon entropy (nats) of the sampling distribution."""
        q = self.probabilities()
        nz = q > 0
        return float(-np.sum(q[nz] * np.log(q[nz])))

    def to_json(self) -> str:
        return json.dumps(
            {
                "beta": self.beta,
                "loss_estimates": self.loss_estimates.tolist(),
                "seed": self.rng.seed,
            }
        )

    @classmethod
    def from_json(cls, payload: str) -> "HardnessWeightedSampler":
        data = json.loads(payload)
        sampler = cls(
            n=len(data["loss_estimates"]),
            beta=float(data["beta"]),
            seed=int(data["seed"]),
        )
        sampler.loss_estimates = np.asarray(data["loss_estimates"], dtype=np.float64)
        sampler.initialized = np.ones(sampler.n, dtype=bool)
        return sampler
