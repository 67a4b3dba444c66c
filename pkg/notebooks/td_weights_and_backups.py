"""
Tail-bootstrapped multi-step TD
===============================

Every window of length l bootstraps once, at its tail.  Position i therefore
sums l - i real rewards before the bootstrap, and the loss mixes the u
leading positions with weights proportional to lambda**i.
"""

import numpy as np

from rdpg.replay import backup_lengths, window_starts
from rdpg.tdlearn import interp_weights, multi_step_td, closed_form_weights

np.set_printoptions(precision=4, suppress=True)

# normalized weights sum to one; lambda = 1 is uniform, small lambda favours
# the longest backup at position 0
for lam in (0.3, 0.9, 1.0):
    w = interp_weights(lam, 8)
    print(f"lambda={lam}: {w}  sum={w.sum():.15f}")

# the closed-form prefactor (lambda (1 - lambda**u) / (1 - lambda))**-1 sums to
# 1/lambda instead of 1; the package divides by the exact sum instead
wp = closed_form_weights(0.9, 8)
print("closed-form prefactor sum:", wp.sum(), " 1/lambda:", 1 / 0.9)

# %%
# One window by hand: rewards [1, 2, 3], gamma 0.5, tail value 8, q_beh 0.
r = np.array([1.0, 2.0, 3.0])
for i in range(3):
    print(f"TD_{i} (backup {3 - i}):", multi_step_td(r, 0.0, 8.0, 0.5, i, 3))

# gamma = 0 drops everything except the reward at the position itself
print("gamma=0:", [float(multi_step_td(r, 0.0, 8.0, 0.0, i, 3)) for i in range(3)])

# %%
# Backup coverage: in an episode of T steps, windows start at 0 .. T - l, and
# an interior step t sits at every position of the l windows containing it.
T, l = 10, 4
print("window starts:", window_starts(T, l))
for t in range(T):
    lens = sorted(backup_lengths(t, T, l))
    tag = "interior" if l - 1 <= t <= T - l else "edge"
    print(f"t={t:2d} {tag:8s} backup lengths {lens}")
