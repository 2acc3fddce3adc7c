import math

import numpy as np


def held_out_count(n: int, fraction: float) -> int:
    """Size of the held-out side: ``ceil(n * fraction)`` (guarded against float fuzz)."""
    return int(math.ceil(n * fraction - 1e-9))


def stratified_split_indices(keys, fraction: float, rng: np.random.Generator):
    """Split row indices into (kept, held_out), preserving key proportions.

    The held-out total is ``held_out_count(n, fraction)``; it is shared among
    strata by largest remainder so every stratum keeps its proportion to within
    one row.  Both index arrays come back sorted so row order is stable.
    """
    keys = np.asarray(keys)
    n = len(keys)
    total = held_out_count(n, fraction)
    strata = [np.flatnonzero(keys == k) for k in np.unique(keys)]
    quotas = np.array([len(m) * total / n for m in strata]) if n else np.array([])
    counts = np.floor(quotas).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    held = [m[rng.permutation(len(m))][:c] for m, c in zip(strata, counts)]
    held_out = np.sort(np.concatenate(held)) if held else np.array([], dtype=int)
    mask = np.ones(n, dtype=bool)
    mask[held_out] = False
    return np.flatnonzero(mask), held_out


def random_split_indices(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    k = held_out_count(n, fraction)
    return np.sort(perm[k:]), np.sort(perm[:k])
