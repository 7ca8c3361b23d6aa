"""Hardness-weighted sampling: train on what hurts.

The sampler keeps a per-case loss estimate and draws cases with
probability proportional to exp(beta * loss).  Low beta is a uniform
shuffle; high beta is hard-example mining.  This script shows the law,
its shift invariance, and what the temperature does to the draw
distribution as losses spread out.
"""

import numpy as np

from segopt.dro import HardnessWeightedSampler


def main():
    losses = [0.01, 0.02]
    s = HardnessWeightedSampler(2, beta=100.0, seed=11)
    for i, loss in enumerate(losses):
        s.update_loss(i, loss)
    print("two cases with losses 0.01 and 0.02 at beta=100:")
    print(f"  analytic probabilities: {s.probabilities().round(4).tolist()}")
    draws = s.sample_batch(100_000)
    freq = np.bincount(draws, minlength=2) / 100_000.0
    print(f"  frequencies over 1e5 draws: {freq.round(4).tolist()}")
    print()

    print("the same spread at different temperatures (losses 0.2..0.9):")
    case_losses = [0.2, 0.4, 0.6, 0.9]
    for beta in (0.0001, 1.0, 5.0, 20.0, 100.0):
        s = HardnessWeightedSampler(4, beta=beta, seed=0)
        for i, loss in enumerate(case_losses):
            s.update_loss(i, loss)
        p = s.probabilities()
        print(f"  beta {beta:8.4f}: {p.round(3).tolist()}  "
              f"entropy {s.entropy():.3f}")
    print()

    # Only loss differences matter: adding a constant to every estimate
    # leaves the distribution untouched, so there is no overflow however
    # large the raw losses get.
    a = HardnessWeightedSampler(4, beta=7.0, seed=0)
    b = HardnessWeightedSampler(4, beta=7.0, seed=0)
    for i, loss in enumerate(case_losses):
        a.update_loss(i, loss)
        b.update_loss(i, loss + 1e6)
    drift = np.abs(a.probabilities() - b.probabilities()).max()
    print(f"shifting every loss by 1e6 moves probabilities by {drift:.1e}")
    print()

    # During training the estimates refresh as cases are visited; watch
    # the sampler chase the hardest case as its loss decays.
    print("a hard case getting easier (beta=20):")
    s = HardnessWeightedSampler(3, beta=20.0, seed=1)
    estimates = [0.3, 0.3, 0.9]
    for i, loss in enumerate(estimates):
        s.update_loss(i, loss)
    for step in range(5):
        p = s.probabilities()
        print(f"  case losses {np.round(estimates, 2).tolist()} -> "
              f"draw probabilities {p.round(3).tolist()}")
        estimates[2] = max(0.3, estimates[2] - 0.15)  # it improves with attention
        s.update_loss(2, estimates[2])


if __name__ == "__main__":
    main()
