"""Validation metrics and bootstrap significance machinery.

Standard OPE metrics (absolute error, regret@1, Spearman rank
correlation) plus episode-level bootstrap and the Welch two-sample
t-test used to compare bootstrap distributions across policies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.special


@dataclass
class EstimateResult:
    estimator: str
    point_estimate: float
    bootstrap_samples: list[float] | None = None
    reward_channel: str = "sparse"
    failed_replicas: int = 0
    note: str | None = None


@dataclass
class PolicyEvaluation:
    policy: str
    true_value: float | None
    estimates: dict[str, EstimateResult] = field(default_factory=dict)


@dataclass
class SignificanceReport:
    pair: tuple[str, str]
    t_statistic: float
    p_value: float
    significant: bool
    degenerate: bool = False


def absolute_error(true_value: float, estimate: float) -> float:
    return abs(true_value - estimate)


def regret_at_1(evaluations: list[PolicyEvaluation],
                estimator: str) -> tuple[float, bool]:
    """Normalized value gap between the truly best policy and the one the
    estimator ranks first.

    Returns (regret, normalized).  With max true value 0 the raw
    difference is returned with ``normalized=False``.
    """
    if len(evaluations) < 2:
        raise ValueError("regret@1 needs at least 2 policies")
    true_values = np.array([e.true_value for e in evaluations])
    estimates = np.array([e.estimates[estimator].point_estimate
                          for e in evaluations])
    best_true = true_values.max()
    picked = true_values[int(np.argmax(estimates))]
    if best_true == 0.0:
        return float(best_true - picked), False
    return float((best_true - picked) / best_true), True


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ordinal ranks with ties assigned their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rank(true_values, estimates) -> float:
    """Pearson correlation of average-ranked vectors."""
    a = np.asarray(true_values, dtype=np.float64)
    b = np.asarray(estimates, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise ValueError("inputs must be equal-length vectors of size >= 2")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    var_a, var_b = ra @ ra, rb @ rb
    if var_a == 0.0 or var_b == 0.0:
        raise ValueError("rank variance is zero; correlation undefined")
    return float(ra @ rb / np.sqrt(var_a * var_b))


def bootstrap(estimator_fn, n: int, b: int = 500,
              seed: int = 0) -> tuple[list[float], int]:
    """Episode-level bootstrap of a resample-aware estimator.

    ``estimator_fn`` maps an index array (a with-replacement resample
    of trajectory indices) to a value.  Replica i draws from the stream
    seed ^ i, so results are independent of scheduling.  Failed
    replicas are excluded; their count is returned.
    """
    if b < 1:
        raise ValueError("bootstrap needs at least one replica")
    samples = []
    failures = 0
    for i in range(b):
        rng = np.random.default_rng(seed ^ i)
        sel = rng.integers(0, n, size=n)
        try:
            samples.append(float(estimator_fn(sel)))
        except ValueError:
            failures += 1
    return samples, failures


def welch_t_test(a, b, alpha: float = 0.05) -> SignificanceReport:
    """Welch unequal-variance t-test, two-sided.

    Both variances zero is degenerate: p = 1 if the means agree, else 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each sample needs at least 2 observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.shape[0], b.shape[0]
    if va == 0.0 and vb == 0.0:
        equal = a.mean() == b.mean()
        return SignificanceReport(("a", "b"), 0.0 if equal else np.inf,
                                  1.0 if equal else 0.0,
                                  significant=not equal, degenerate=True)
    se2 = va / na + vb / nb
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    # two-sided p-value from the regularized incomplete beta function
    x = df / (df + t ** 2)
    p = float(scipy.special.betainc(df / 2.0, 0.5, x))
    return SignificanceReport(("a", "b"), float(t), p,
                              significant=p < alpha)
