"""Independent statistics oracles used by tests.

These reimplement the quantities under test through different routes: the
rank test is checked against an exact permutation distribution built from
brute-force placement counts, and the fits are checked against closed-form
normal-equation arithmetic. Nothing here imports the package under test.
"""
import itertools

import numpy as np


def _placement_matrix(z):
    # C[j, i] = 1 if z[j] < z[i], 0.5 if equal, else 0
    lt = z[:, None] < z[None, :]
    eq = z[:, None] == z[None, :]
    return lt.astype(np.float64) + 0.5 * eq.astype(np.float64)


def studentized_statistics_all_partitions(x, y):
    """Rank-test statistic for every balanced partition of the pooled sample.

    For each way of choosing which pooled values play the role of x, computes
    the studentized rank statistic from placement counts (how many opposite-
    group values lie below each element). Returns the statistic array with
    the observed partition first.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = x.size, y.size
    z = np.concatenate([x, y])
    n = z.size
    C = _placement_matrix(z)

    combos = list(itertools.combinations(range(n), nx))
    observed = tuple(range(nx))
    combos.remove(observed)
    combos.insert(0, observed)
    M = np.zeros((len(combos), n))
    for row, combo in enumerate(combos):
        M[row, list(combo)] = 1.0

    # placements of every element among the opposite group, per partition
    H = (1.0 - M) @ C
    G = M @ C
    hx_mean = (M * H).sum(axis=1) / nx
    hy_mean = ((1.0 - M) * G).sum(axis=1) / ny
    vx = ((M * H**2).sum(axis=1) - nx * hx_mean**2) / (nx - 1)
    vy = (((1.0 - M) * G**2).sum(axis=1) - ny * hy_mean**2) / (ny - 1)
    denom = (nx + ny) * np.sqrt(np.maximum(nx * vx + ny * vy, 0.0))
    mean_shift = (hy_mean - hx_mean) + (ny - nx) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        stats = nx * ny * mean_shift / denom
    stats[denom == 0.0] = np.inf * np.sign(mean_shift[denom == 0.0] + 1e-300)
    return stats


def exact_permutation_p(x, y):
    """Two-sided p of the studentized permutation test over all partitions."""
    stats = studentized_statistics_all_partitions(x, y)
    observed = abs(stats[0])
    return float(np.mean(np.abs(stats) >= observed - 1e-12))


def two_pass_pearson(x, y):
    """Textbook two-pass Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = x.mean(), y.mean()
    num = ((x - mx) * (y - my)).sum()
    den = np.sqrt(((x - mx) ** 2).sum() * ((y - my) ** 2).sum())
    return float(num / den)


def normal_equation_line(x, y):
    """Closed-form least-squares slope and intercept from raw sums."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    sx, sy = x.sum(), y.sum()
    sxx, sxy = (x * x).sum(), (x * y).sum()
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    intercept = (sy - slope * sx) / n
    return float(slope), float(intercept)
