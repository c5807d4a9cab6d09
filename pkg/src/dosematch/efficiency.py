"""Design efficiency for paired encouragement studies.

The test statistics gain power through the compliers, so the slope of
the power function at the null depends on the complier share and on how
far the always-taker and never-taker outcome means sit from the
complier mean. This module evaluates those slopes (psi) for the signed
rank and sign tests, turns them into relative efficiencies, and runs
the Monte-Carlo sample-size search that the asymptotics approximate.

Conventions: a pair contributes one error draw (the within-pair
difference of subject noise), the encouraged member takes treatment
unless a never-taker, and the control member takes treatment only when
an always-taker.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.stats import binom, norm, rankdata

from .cohort import ComplianceMix
from .densities import ErrorDensity
from .inference import EXACT_LIMIT, pair_stats_from_arrays, wilcoxon_signed_rank

__all__ = [
    "PsiBreakdown",
    "PowerEstimate",
    "SampleSizeReport",
    "self_convolution",
    "psi_wilcoxon",
    "psi_sign",
    "are",
    "simulate_power",
    "required_sample_size",
    "theoretical_sample_size",
    "effective_sample_size",
]

_TESTS = ("wilcoxon", "sign")

#: Replications per derived seed block; keeps aggregation independent of
#: scheduling so distributed and sequential runs agree.
_SEED_BLOCK = 2048


def _block_rows(n_pairs: int) -> int:
    """Replications per block, shrunk for large designs to bound memory."""
    return max(1, min(_SEED_BLOCK, 4_000_000 // max(1, n_pairs)))


def self_convolution(density: ErrorDensity, x) -> float:
    """Evaluate {f*f}(x), the density of the sum of two error draws."""
    return density.self_convolution(x)


@dataclass(frozen=True)
class PsiBreakdown:
    """Power-function slope split into coefficient-times-monomial terms.

    coefficients maps the term names to convolution evaluations and
    monomials maps the same names to the class-share products they
    multiply; value is their inner product.
    """

    value: float
    coefficients: Dict[str, float]
    monomials: Dict[str, float]

    def __post_init__(self) -> None:
        if set(self.coefficients) != set(self.monomials):
            raise ValueError("coefficient and monomial names must agree")
        inner = sum(self.coefficients[k] * self.monomials[k] for k in self.coefficients)
        if abs(inner - self.value) > 1e-12:
            raise ValueError(
                f"value {self.value!r} is not the coefficient-monomial "
                f"inner product {inner!r}"
            )


def psi_wilcoxon(mix: ComplianceMix) -> PsiBreakdown:
    """Slope of the signed rank power function at the null.

    Ten terms: one per way a complier pair can meet another pair's
    class combination, each weighted by the self-convolution of the
    error density at the relevant mean gap.
    """
    f2 = mix.error_density.self_convolution
    d_ac = mix.mu_a - mix.mu_c
    d_nc = mix.mu_n - mix.mu_c
    d_an = mix.mu_a - mix.mu_n
    at0 = float(f2(0.0))
    coefficients = {
        "A": 2.0 * at0,
        "B1": 6.0 * float(f2(d_ac)),
        "B2": 4.0 * at0 + 2.0 * float(f2(2.0 * d_ac)),
        "B3": 2.0 * float(f2(d_ac)),
        "C1": 6.0 * float(f2(d_nc)),
        "C2": 4.0 * at0 + 2.0 * float(f2(2.0 * d_nc)),
        "C3": 2.0 * float(f2(d_nc)),
        "D1": 8.0 * float(f2(d_an)) + 4.0 * float(f2(d_ac + d_nc)),
        "D2": 4.0 * float(f2(d_nc)) + 2.0 * float(f2(2.0 * d_ac - d_nc)),
        "D3": 4.0 * float(f2(d_ac)) + 2.0 * float(f2(d_ac - 2.0 * d_nc)),
    }
    c, a, n = mix.iota_c, mix.iota_a, mix.iota_n
    monomials = {
        "A": c**4,
        "B1": c**3 * a,
        "B2": c**2 * a**2,
        "B3": c * a**3,
        "C1": c**3 * n,
        "C2": c**2 * n**2,
        "C3": c * n**3,
        "D1": c**2 * a * n,
        "D2": c * a**2 * n,
        "D3": c * a * n**2,
    }
    value = sum(coefficients[k] * monomials[k] for k in coefficients)
    return PsiBreakdown(value=value, coefficients=coefficients, monomials=monomials)


def psi_sign(mix: ComplianceMix) -> float:
    """Slope of the sign test power function at the null."""
    f = mix.error_density.pdf
    return (
        mix.iota_c**2 * float(f(0.0))
        + mix.iota_c * mix.iota_n * float(f(mix.mu_n - mix.mu_c))
        + mix.iota_c * mix.iota_a * float(f(mix.mu_c - mix.mu_a))
    )


def _psi_value(mix: ComplianceMix, test: str) -> float:
    if test == "wilcoxon":
        return psi_wilcoxon(mix).value
    return psi_sign(mix)


def are(mix1: ComplianceMix, mix2: ComplianceMix, test: str = "wilcoxon") -> float:
    """Limit of the sample-size ratio I_1 / I_2 for two instruments.

    A value above 1 means the first instrument needs more pairs than
    the second to reach the same power against the same local
    alternative. Both mixes must use the same error density since the
    slopes are only comparable under a common noise model.
    """
    if test not in _TESTS:
        raise ValueError(f"test must be one of {_TESTS}")
    if mix1.error_density.name != mix2.error_density.name:
        raise ValueError(
            "relative efficiency requires a common error density, got "
            f"{mix1.error_density.name!r} and {mix2.error_density.name!r}"
        )
    psi1 = _psi_value(mix1, test)
    psi2 = _psi_value(mix2, test)
    if psi1 == 0.0:
        raise ValueError("the first instrument has zero slope; ratio undefined")
    return (psi2 / psi1) ** 2


@dataclass(frozen=True)
class PowerEstimate:
    """Monte-Carlo rejection rate with its binomial standard error."""

    power: float
    se: float
    reps: int


def _simulate_adjusted(
    mix: ComplianceMix, n_pairs: int, effect: float, rows: int, rng
) -> np.ndarray:
    """Draw a (rows, n_pairs) matrix of adjusted pair differences."""
    shares = np.array([mix.iota_c, mix.iota_a, mix.iota_n])
    cuts = np.cumsum(shares)[:2]
    u = rng.random((2, rows, n_pairs))
    # class codes 0=complier, 1=always-taker, 2=never-taker
    enc = (u[0] > cuts[0]).astype(np.int8) + (u[0] > cuts[1]).astype(np.int8)
    ctl = (u[1] > cuts[0]).astype(np.int8) + (u[1] > cuts[1]).astype(np.int8)
    means = np.array([mix.mu_c, mix.mu_a, mix.mu_n])
    s = (enc != 2).astype(np.float64) - (ctl == 1).astype(np.float64)
    eps = mix.error_density.sampler((rows, n_pairs), rng)
    return means[enc] - means[ctl] + effect * s + eps


def _wilcoxon_rejects(adjusted: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise one-sided signed rank rejections, mirroring the paired test."""
    rows, m = adjusted.shape
    if m <= EXACT_LIMIT or (adjusted == 0.0).any():
        out = np.empty(rows, dtype=bool)
        ones = np.ones(m)
        for i in range(rows):
            stats_i = pair_stats_from_arrays(adjusted[i], ones)
            out[i] = wilcoxon_signed_rank(stats_i, side="greater").p_value <= alpha
        return out
    ranks = rankdata(np.abs(adjusted), axis=1)
    w_plus = (ranks * (adjusted > 0)).sum(axis=1)
    mu = m * (m + 1) / 4.0
    sd = math.sqrt(m * (m + 1) * (2 * m + 1) / 24.0)
    p = norm.sf((w_plus - mu - 0.5) / sd)
    return p <= alpha


def _sign_rejects(adjusted: np.ndarray, alpha: float) -> np.ndarray:
    m = (adjusted != 0.0).sum(axis=1)
    n_plus = (adjusted > 0.0).sum(axis=1)
    p = binom.sf(n_plus - 1, m, 0.5)
    return (p <= alpha) & (m > 0)


def simulate_power(
    mix: ComplianceMix,
    n_pairs: int,
    effect: float,
    alpha: float = 0.05,
    test: str = "wilcoxon",
    reps: int = 20000,
    seed: int = 0,
) -> PowerEstimate:
    """Monte-Carlo power of the one-sided test at the given effect.

    Replications are drawn in fixed-size blocks with seeds derived from
    (seed, n_pairs, block), so the estimate does not depend on how the
    blocks are scheduled.
    """
    if test not in _TESTS:
        raise ValueError(f"test must be one of {_TESTS}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if reps < 1:
        raise ValueError("reps must be positive")
    rejects = 0
    done = 0
    block = 0
    while done < reps:
        rows = min(_block_rows(n_pairs), reps - done)
        rng = np.random.default_rng(np.random.SeedSequence([seed, n_pairs, block]))
        adjusted = _simulate_adjusted(mix, n_pairs, effect, rows, rng)
        if test == "wilcoxon":
            rejects += int(_wilcoxon_rejects(adjusted, alpha).sum())
        else:
            rejects += int(_sign_rejects(adjusted, alpha).sum())
        done += rows
        block += 1
    power = rejects / reps
    se = math.sqrt(power * (1.0 - power) / reps)
    return PowerEstimate(power=power, se=se, reps=reps)


def theoretical_sample_size(
    mix: ComplianceMix,
    effect: float,
    alpha: float = 0.05,
    target_power: float = 0.8,
    test: str = "wilcoxon",
) -> int:
    """Pairs needed per the asymptotic slope, rounded up.

    The signed rank statistic has null sd ~ sqrt(I^3 / 12) and mean
    slope I^2 psi, the sign statistic sd sqrt(I) / 2 and slope
    I psi, which gives the 3 and 4 in the denominators.
    """
    if test not in _TESTS:
        raise ValueError(f"test must be one of {_TESTS}")
    z = norm.ppf(1.0 - alpha) + norm.ppf(target_power)
    psi = _psi_value(mix, test)
    if psi <= 0:
        raise ValueError("the instrument has zero slope; no finite sample size")
    if test == "wilcoxon":
        need = z**2 / (3.0 * psi**2 * effect**2)
    else:
        need = z**2 / (4.0 * psi**2 * effect**2)
    return int(math.ceil(need))


@dataclass(frozen=True)
class SampleSizeReport:
    """Result of the Monte-Carlo sample-size search.

    n_pairs is the smallest bracket endpoint whose estimated power
    reaches the target at the search resolution; power/se are its
    Monte-Carlo estimate, theoretical the asymptotic prediction, and
    evaluations the (n_pairs, power) pairs visited by the search.
    """

    n_pairs: int
    power: float
    se: float
    reps: int
    seed: int
    theoretical: int
    evaluations: Tuple[Tuple[int, float], ...] = field(default_factory=tuple)

    def __int__(self) -> int:
        return self.n_pairs

    def __index__(self) -> int:
        return self.n_pairs

    def to_json(self) -> Dict[str, float]:
        return {
            "theo": self.theoretical,
            "sim": self.n_pairs,
            "power": self.power,
            "se": self.se,
            "reps": self.reps,
            "seed": self.seed,
        }


def required_sample_size(
    mix: ComplianceMix,
    effect: float,
    alpha: float = 0.05,
    target_power: float = 0.8,
    test: str = "wilcoxon",
    reps: int = 20000,
    seed: int = 0,
) -> SampleSizeReport:
    """Binary search for the pairs needed to hit the target power.

    The bracket starts at [16, 262144] and the upper end doubles on
    demand; the search stops once the bracket width drops below half a
    percent of its midpoint (or one pair). Probing starts from the
    asymptotic prediction and expands geometrically before bisecting,
    so the expensive power evaluations stay near the answer instead of
    at the huge initial midpoints. Estimated power is not exactly
    monotone in the sample size, so crossings beyond three joint
    standard errors are reported as a warning rather than chased.
    """
    if not (0.0 < alpha < target_power < 1.0):
        raise ValueError("need 0 < alpha < target_power < 1")
    if effect <= 0:
        raise ValueError("effect must be positive")
    cache: Dict[int, PowerEstimate] = {}

    def power_at(n: int) -> PowerEstimate:
        if n not in cache:
            cache[n] = simulate_power(
                mix, n, effect, alpha=alpha, test=test, reps=reps, seed=seed
            )
        return cache[n]

    lo, hi = 16, 2**18
    if power_at(lo).power >= target_power:
        hi = lo
    else:
        guess = theoretical_sample_size(mix, effect, alpha, target_power, test)
        probe = min(max(guess, lo + 1), hi)
        while power_at(probe).power < target_power:
            lo = probe
            if probe == hi:
                if hi >= 2**24:
                    raise RuntimeError(
                        f"power {power_at(hi).power:.3f} at {hi} pairs still "
                        f"below target {target_power}"
                    )
                hi *= 2
            probe = min(2 * probe, hi)
        hi = probe
    while hi - lo > max(1, int(0.005 * (lo + hi) / 2)):
        mid = (lo + hi) // 2
        if power_at(mid).power >= target_power:
            hi = mid
        else:
            lo = mid
    visited = sorted(cache.items())
    for (n1, e1), (n2, e2) in zip(visited, visited[1:]):
        if e2.power < e1.power - 3.0 * (e1.se + e2.se):
            warnings.warn(
                f"Monte-Carlo power dipped from {e1.power:.3f} at {n1} to "
                f"{e2.power:.3f} at {n2}; estimate is at search resolution",
                stacklevel=2,
            )
    final = power_at(hi)
    return SampleSizeReport(
        n_pairs=hi,
        power=final.power,
        se=final.se,
        reps=reps,
        seed=seed,
        theoretical=theoretical_sample_size(mix, effect, alpha, target_power, test),
        evaluations=tuple((n, e.power) for n, e in visited),
    )


def effective_sample_size(n_pairs: int, iota_c: float) -> float:
    """Pairs discounted by squared compliance: n_pairs * iota_c**2."""
    if n_pairs < 0:
        raise ValueError("n_pairs must be nonnegative")
    if not (0.0 <= iota_c <= 1.0):
        raise ValueError("iota_c must lie in [0, 1]")
    return float(n_pairs) * iota_c**2
