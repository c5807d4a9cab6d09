"""Pair-level randomization inference for effect ratios.

Under the proportional-effect model, Y_i - beta0 * S_i is symmetric
about zero at the true beta0, so H0: beta = beta0 is tested by the
Wilcoxon signed rank test or the sign test on the adjusted values.
Point estimation uses the Wald ratio with its large-sample standard
deviation, and confidence intervals come from test inversion.

Orientation note: pairs are encoded encouraged-first (smaller dose),
so S_i = D_encouraged - D_control. When treatment uptake increases
with dose, sum(S) is negative and the alternative "beta > beta0"
shifts the adjusted values downward; pick ``side`` accordingly
(``sign((beta - beta0) * sum(S))`` gives the direction of the shift).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.stats import binom, norm, rankdata

from .cohort import Cohort
from .matching import MatchedDesign

__all__ = [
    "PairStats",
    "TestReport",
    "WaldReport",
    "WeakInstrumentError",
    "pair_stats",
    "pair_stats_from_arrays",
    "wilcoxon_signed_rank",
    "sign_test",
    "wald_estimate",
    "wald_from_stats",
    "invert_ci",
    "invert_ci_from_stats",
]

_SIDES = ("greater", "less", "two_sided")

# exact Wilcoxon null enumeration cap (pair count after zero removal)
EXACT_LIMIT = 30


class WeakInstrumentError(ValueError):
    """The compliance sum is zero, so the Wald ratio is undefined."""


@dataclass(frozen=True)
class PairStats:
    """Per-pair encouraged-minus-control contrasts.

    y_i is the outcome contrast, s_i in {-1, 0, 1} the treatment
    contrast, and adjusted_i = y_i - beta0 * s_i.
    """

    y: np.ndarray
    s: np.ndarray
    beta0: float
    adjusted: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class TestReport:
    statistic: float
    p_value: float
    method: str
    side: str
    beta0: float
    exact: bool
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def summary(self) -> str:
        kind = "exact" if self.exact else "approx"
        return (
            f"{self.method} test of beta0={self.beta0:g} ({self.side}, {kind}): "
            f"statistic={self.statistic:g}, p={self.p_value:.4g}"
        )


@dataclass(frozen=True)
class WaldReport:
    beta_hat: float
    compliance_hat: float
    sd: Optional[float]
    n_pairs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def summary(self) -> str:
        sd = f"{self.sd:.4g}" if self.sd is not None else "n/a"
        return (
            f"beta_hat={self.beta_hat:.4g} (sd={sd}), "
            f"compliance_hat={self.compliance_hat:.3g}, pairs={self.n_pairs}"
        )


# ---------------------------------------------------------------------------
# pair statistics


def pair_stats(design: MatchedDesign, cohort: Cohort, beta0: float = 0.0) -> PairStats:
    """Y_i, S_i, and adjusted values for an encoded design."""
    if not design.is_encoded:
        raise ValueError("encode encouragement before computing pair statistics")
    by_id = {s.id: s for s in cohort.subjects}
    y = np.empty(len(design.pairs))
    s = np.empty(len(design.pairs))
    for i, (a, b) in enumerate(design.pairs):
        sa, sb = by_id[a], by_id[b]
        y[i] = sa.outcome - sb.outcome
        s[i] = sa.treatment - sb.treatment
    return pair_stats_from_arrays(y, s, beta0)


def pair_stats_from_arrays(y: np.ndarray, s: np.ndarray, beta0: float = 0.0) -> PairStats:
    """Build PairStats from raw encouraged-minus-control contrasts."""
    y = np.asarray(y, dtype=float)
    s = np.asarray(s, dtype=float)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("y and s must be equal-length vectors")
    return PairStats(y=y, s=s, beta0=float(beta0), adjusted=y - beta0 * s)


# ---------------------------------------------------------------------------
# Wilcoxon signed rank test


def _signed_ranks(adjusted: np.ndarray):
    """Nonzero values with average ranks of their absolute values."""
    nz = adjusted[adjusted != 0]
    if nz.size == 0:
        return nz, np.empty(0)
    return nz, rankdata(np.abs(nz), method="average")


def _exact_wilcoxon_tail(w_obs: float, m: int):
    """P(W >= obs) and P(W <= obs) under the classical exact null.

    The null distribution is the subset-sum recursion over untied
    ranks 1..m (each sign pattern has probability 2^-m), as in the
    standard critical tables; the observed statistic may carry
    averaged tied ranks and is compared against that integer grid.
    """
    total = m * (m + 1) // 2
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for d in range(1, m + 1):
        counts[d:] += counts[: total + 1 - d]
    denom = counts.sum()  # 2^m, float is fine for m <= 30
    lo = int(math.ceil(w_obs - 1e-9))
    hi = int(math.floor(w_obs + 1e-9))
    p_ge = counts[max(lo, 0) :].sum() / denom
    p_le = counts[: min(hi, total) + 1].sum() / denom
    return p_ge, p_le


def _two_sided(p_greater: float, p_less: float) -> float:
    return min(1.0, 2.0 * min(p_greater, p_less))


def wilcoxon_signed_rank(stats: PairStats, side: str = "two_sided") -> TestReport:
    """Signed rank test that the adjusted values are symmetric about 0.

    Zeros are dropped and tied absolute values get averaged ranks. The
    null distribution is exact (subset-sum recursion) up to
    ``EXACT_LIMIT`` nonzero pairs and a continuity-corrected normal
    approximation with tie-adjusted variance beyond.
    """
    if side not in _SIDES:
        raise ValueError(f"side must be one of {_SIDES}")
    nz, ranks = _signed_ranks(stats.adjusted)
    m = nz.size
    if m == 0:
        return TestReport(
            statistic=0.0,
            p_value=1.0,
            method="wilcoxon",
            side=side,
            beta0=stats.beta0,
            exact=True,
            degenerate=True,
        )
    w_plus = float(ranks[nz > 0].sum())
    if m <= EXACT_LIMIT:
        p_ge, p_le = _exact_wilcoxon_tail(w_plus, m)
        exact = True
    else:
        mu = m * (m + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = float(((tie_counts**3 - tie_counts).sum())) / 48.0
        var = m * (m + 1) * (2 * m + 1) / 24.0 - tie_term
        sd = math.sqrt(var)
        p_ge = float(norm.sf((w_plus - mu - 0.5) / sd))
        p_le = float(norm.cdf((w_plus - mu + 0.5) / sd))
        exact = False
    if side == "greater":
        p = p_ge
    elif side == "less":
        p = p_le
    else:
        p = _two_sided(p_ge, p_le)
    return TestReport(
        statistic=w_plus,
        p_value=min(1.0, max(0.0, p)),
        method="wilcoxon",
        side=side,
        beta0=stats.beta0,
        exact=exact,
    )


# ---------------------------------------------------------------------------
# sign test


def sign_test(stats: PairStats, side: str = "two_sided") -> TestReport:
    """Binomial(m, 1/2) test on the sign of the adjusted values."""
    if side not in _SIDES:
        raise ValueError(f"side must be one of {_SIDES}")
    nz = stats.adjusted[stats.adjusted != 0]
    m = nz.size
    if m == 0:
        return TestReport(
            statistic=0.0,
            p_value=1.0,
            method="sign",
            side=side,
            beta0=stats.beta0,
            exact=True,
            degenerate=True,
        )
    n_plus = int((nz > 0).sum())
    p_ge = float(binom.sf(n_plus - 1, m, 0.5))
    p_le = float(binom.cdf(n_plus, m, 0.5))
    if side == "greater":
        p = p_ge
    elif side == "less":
        p = p_le
    else:
        p = _two_sided(p_ge, p_le)
    return TestReport(
        statistic=float(n_plus),
        p_value=min(1.0, max(0.0, p)),
        method="sign",
        side=side,
        beta0=stats.beta0,
        exact=True,
    )


_TESTS = {"wilcoxon": wilcoxon_signed_rank, "sign": sign_test}


# ---------------------------------------------------------------------------
# Wald estimation


def wald_from_stats(stats: PairStats, sigma_hat: Optional[float] = None) -> WaldReport:
    """Wald ratio sum(Y)/sum(S) with its large-sample sd.

    sd(beta_hat) = sqrt(2) * sigma / (sqrt(I) * |compliance_hat|),
    reported when sigma_hat is supplied.
    """
    s_sum = float(stats.s.sum())
    if s_sum == 0:
        raise WeakInstrumentError(
            "sum of treatment contrasts is zero; the ratio estimator is undefined"
        )
    n = stats.n_pairs
    beta_hat = float(stats.y.sum()) / s_sum
    compliance = abs(s_sum) / n
    sd = None
    if sigma_hat is not None:
        sd = math.sqrt(2.0) * sigma_hat / (math.sqrt(n) * compliance)
    return WaldReport(
        beta_hat=beta_hat, compliance_hat=compliance, sd=sd, n_pairs=n
    )


def wald_estimate(
    design: MatchedDesign, cohort: Cohort, sigma_hat: Optional[float] = None
) -> WaldReport:
    return wald_from_stats(pair_stats(design, cohort, 0.0), sigma_hat)


# ---------------------------------------------------------------------------
# confidence intervals by test inversion


def _p_two_sided(y: np.ndarray, s: np.ndarray, beta0: float, test: str) -> float:
    stats = pair_stats_from_arrays(y, s, beta0)
    return _TESTS[test](stats, "two_sided").p_value


def invert_ci(
    design: MatchedDesign,
    cohort: Cohort,
    test: str = "wilcoxon",
    alpha: float = 0.05,
    search: Optional[tuple] = None,
    tol: float = 1e-6,
) -> tuple:
    """{beta0 : p(beta0) > alpha} by bisection on each endpoint.

    ``search`` brackets the acceptance region; the default is
    beta_hat +/- 20 sd (sigma estimated from the adjusted spread at
    beta_hat), doubled geometrically until both ends reject. Raises if
    no rejecting bracket is found or the test is not monotone between
    the center and the bracket ends.
    """
    stats = pair_stats(design, cohort, 0.0)
    return invert_ci_from_stats(stats.y, stats.s, test, alpha, search, tol)


def invert_ci_from_stats(
    y: np.ndarray,
    s: np.ndarray,
    test: str = "wilcoxon",
    alpha: float = 0.05,
    search: Optional[tuple] = None,
    tol: float = 1e-6,
) -> tuple:
    if test not in _TESTS:
        raise ValueError(f"test must be one of {tuple(_TESTS)}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    wald = wald_from_stats(pair_stats_from_arrays(y, s, 0.0))
    center = wald.beta_hat
    if search is None:
        resid = y - center * s
        sigma0 = float(np.std(resid, ddof=1)) / math.sqrt(2.0) if len(y) > 1 else 1.0
        half = 20.0 * math.sqrt(2.0) * max(sigma0, 1e-12) / (
            math.sqrt(len(y)) * max(wald.compliance_hat, 1e-12)
        )
        lo, hi = center - half, center + half
    else:
        lo, hi = float(search[0]), float(search[1])
        if not lo < center < hi:
            raise ValueError("search bracket must contain the Wald estimate")

    if _p_two_sided(y, s, center, test) <= alpha:
        raise ValueError(
            "test rejects at the Wald estimate; no acceptance interval found"
        )
    for _ in range(60):
        if _p_two_sided(y, s, lo, test) <= alpha:
            break
        lo = center - 2.0 * (center - lo)
    else:
        raise ValueError("no rejecting lower bracket end found")
    for _ in range(60):
        if _p_two_sided(y, s, hi, test) <= alpha:
            break
        hi = center + 2.0 * (hi - center)
    else:
        raise ValueError("no rejecting upper bracket end found")

    # lower endpoint: p <= alpha at lo, > alpha at center
    a, b = lo, center
    while b - a > tol:
        mid = 0.5 * (a + b)
        if _p_two_sided(y, s, mid, test) > alpha:
            b = mid
        else:
            a = mid
    lower = b
    a, b = center, hi
    while b - a > tol:
        mid = 0.5 * (a + b)
        if _p_two_sided(y, s, mid, test) > alpha:
            a = mid
        else:
            b = mid
    upper = a
    return (lower, upper)
