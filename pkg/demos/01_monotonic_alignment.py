"""Monotonic attention with infinite lookback, step by step.

Run: python demos/01_monotonic_alignment.py
"""

import numpy as np

from polarbev.monotonic import alpha_bruteforce_oracle, flip_direction, mail_beta, monotonic_alpha

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# Four ray slots scan a column of six image rows. p[i, j] is the chance that
# slot i stops at row j, given it got that far.
p = rng.uniform(0.2, 0.8, (4, 6))
print("selection probabilities p\n", p)

# The recurrence gives the expected stop positions in O(r H).
alpha = monotonic_alpha(p).data
print("\nexpected alignment alpha\n", alpha)

# Enumerating every path agrees to rounding.
print("\nmax difference from path enumeration:", np.abs(alpha - alpha_bruteforce_oracle(p)).max())

# Rows may sum to less than one: the remainder is the chance the slot ran off the end.
print("mass per slot:", alpha.sum(axis=1))

# Where each slot expects to stop never moves back up the column.
stop = (alpha * np.arange(6)).sum(1) / alpha.sum(1)
print("expected stop row per slot:", stop)

# Lookback spreads every stop softly over the rows at or before it.
e = rng.normal(size=(4, 6))
beta = mail_beta(alpha, e).data
print("\nlookback weights beta\n", beta)
print("beta keeps the mass of alpha:", np.allclose(beta.sum(1), alpha.sum(1)))

# Scanning the other way is the same computation on the flipped column.
memory = np.arange(6.0)[:, None]
print("\nmemory rows top to bottom:", memory[:, 0])
print("flipped, as mono_down sees it:", flip_direction(memory, axis=0).data[:, 0])
