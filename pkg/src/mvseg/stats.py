"""Bootstrap aggregation and two-sample hypothesis tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import StatsError


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    sd: float
    replicate_means: np.ndarray


def bootstrap(values, replicates: int = 100, seed: int = 0) -> BootstrapResult:
    """Resample patients with replacement ``replicates`` times.

    Replicate ``r`` draws from its own generator spawned off
    ``SeedSequence(seed)``, so results do not depend on evaluation order.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise StatsError("bootstrap needs at least one value")
    if replicates < 1:
        raise StatsError(f"replicates must be >= 1, got {replicates}")
    children = np.random.SeedSequence(seed).spawn(replicates)
    means = np.empty(replicates)
    for r, child in enumerate(children):
        idx = np.random.default_rng(child).integers(0, v.size, size=v.size)
        means[r] = v[idx].mean()
    sd = float(means.std(ddof=1)) if replicates > 1 else 0.0
    return BootstrapResult(float(means.mean()), sd, means)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df: float | None = None

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05

    def __iter__(self):
        yield self.statistic
        yield self.p_value


def welch_t(a, b) -> TestResult:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise StatsError(f"Welch t needs >= 2 values per sample, got {a.size} and {b.size}")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return TestResult(0.0, 1.0, float("nan"))
        return TestResult(float(np.copysign(np.inf, diff)), 0.0, float("nan"))
    t = diff / np.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * sps.t.sf(abs(t), df)
    return TestResult(float(t), float(min(1.0, p)), float(df))


def mann_whitney_u(a, b) -> TestResult:
    """Two-sided Mann-Whitney U via the normal approximation with tie and
    continuity corrections.  The statistic is the ``a``-side U."""
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1:
        raise StatsError(f"Mann-Whitney U needs >= 1 value per sample, got {n1} and {n2}")
    pooled = np.concatenate([a, b])
    ranks = sps.rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    mu = n1 * n2 / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - (tie / (n * (n - 1)) if n > 1 else 0.0))
    if var <= 0:
        return TestResult(u, 1.0)
    z = (abs(u - mu) - 0.5) / np.sqrt(var)
    p = 1.0 if z <= 0 else 2.0 * sps.norm.sf(z)
    return TestResult(u, float(min(1.0, p)))
