"""Model-assisted sensitivity analysis for matched encouragement designs.

The question answered here: how would the instrumental-variable effect
estimate from a matched design move if an unmeasured binary confounder
U influenced both the dose and the outcome?  The confounder is given a
parametric form, P(U = 1 | dose, covariates) = logistic(lambda0 +
lambda1 * Zr), where Zr is the standardized residual of the dose after
regressing out the covariates.  The pair (lambda0, lambda1) is
reparametrized as (tau, lambda1), where tau is the gap in P(U = 1)
between the above-median and below-median halves of Zr - a quantity a
subject-matter reader can calibrate.  For each assumed outcome shift
delta and each confounder model, U is multiply imputed, the IV estimate
is bias-corrected per imputation, and the corrected estimates are
pooled with a between/within variance split.  The union of the pooled
confidence intervals over a zone of (delta, tau, lambda1) values is the
sensitivity interval; the largest standardized delta a design can
absorb while still excluding zero is the design's robustness measure.

Also here: the power of the whole pipeline under synthetic favorable
data (no real confounding) for two competing designs, and an audit
showing that within-pair treatment-dose assignment probabilities depend
on the dose gap whenever the dose actually carries confounding - the
behaviour a constant-odds sensitivity model cannot represent.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize
from scipy import stats as spstats
from scipy.special import expit

from .bias import _pair_rows
from .cohort import (
    Cohort,
    PartiallyLinearDgp,
    SemiparametricDoseDgp,
    generate_partially_linear_cohort,
    generate_semiparametric_dose_cohort,
)
from .inference import WeakInstrumentError
from .matching import DistanceSpec, MatchedDesign, strengthen

__all__ = [
    "InfeasibleZoneError",
    "AuditError",
    "StandardizedResidual",
    "standardize_residual",
    "ConfounderModel",
    "model_implied_tau",
    "solve_lambda0",
    "fit_confounder_model",
    "UImputations",
    "impute_u",
    "PooledEstimate",
    "PooledInterval",
    "pooled_ci",
    "SensitivityZone",
    "SensitivityInterval",
    "sensitivity_interval",
    "save_interval_csv",
    "SigmaEstimate",
    "estimate_sigma",
    "HeatmapGrid",
    "heatmap_grid",
    "PowerSetting",
    "PowerRow",
    "PowerTable",
    "power_study",
    "sensitivity_power",
    "AuditStratum",
    "GammaAuditReport",
    "pair_assignment_probability",
    "gamma_model_audit",
]

# Floor applied to the paired-difference variance estimate (2 * sigma^2)
# when the moment-based method goes nonpositive.
_SIGMA_SQ2_FLOOR = 1e-12

# Relative threshold below which the across-imputation variance is treated
# as exactly zero (pure floating-point residue from identical estimates).
_ACROSS_EPS = 1e-25


class InfeasibleZoneError(ValueError):
    """No intercept can produce the requested (tau, lambda1) pair."""


class AuditError(ValueError):
    """The audit stratum selects too few pairs to test anything."""


def _make_rng(seed) -> np.random.Generator:
    """Accept an int, a sequence of ints, a SeedSequence, or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    if isinstance(seed, (list, tuple)):
        return np.random.default_rng(np.random.SeedSequence([int(v) for v in seed]))
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def _entropy_int(*parts: int) -> int:
    """Collapse a tag tuple into a single well-mixed integer seed."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Standardized dose residual
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StandardizedResidual:
    """Dose residuals after a linear covariate fit, scaled to mean 0, var 1.

    coefficients holds the fitted (intercept, per-covariate) regression
    coefficients; used_ridge marks that collinear covariates forced a
    small ridge penalty into the normal equations.
    """

    values: np.ndarray
    coefficients: np.ndarray
    used_ridge: bool = False

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if abs(float(vals.mean())) > 1e-10:
            raise ValueError("standardized residuals must have mean 0")
        if abs(float(vals.var()) - 1.0) > 1e-10:
            raise ValueError("standardized residuals must have variance 1")

    def __array__(self, dtype=None, copy=None) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)

    def __len__(self) -> int:
        return self.values.shape[0]


def standardize_residual(cohort: Cohort) -> StandardizedResidual:
    """Residualize the dose on the covariates and scale to mean 0, var 1.

    Fits dose ~ intercept + covariates by least squares.  A rank-deficient
    covariate matrix falls back to a lightly ridged solve and is flagged.
    A dose that is an exact linear function of the covariates leaves no
    residual variation and raises, since there is nothing left to model.
    """
    z = cohort.doses
    x = cohort.covariate_matrix
    n, p = x.shape
    if n <= p + 1:
        raise ValueError(
            f"need more subjects ({n}) than regression columns ({p + 1}) "
            "to residualize the dose"
        )
    a = np.column_stack([np.ones(n), x])
    coef, _, rank, _ = np.linalg.lstsq(a, z, rcond=None)
    used_ridge = False
    if rank < p + 1:
        gram = a.T @ a
        ridge = 1e-8 * (np.trace(gram) / gram.shape[0])
        coef = np.linalg.solve(gram + ridge * np.eye(p + 1), a.T @ z)
        used_ridge = True
        warnings.warn(
            "collinear covariates: dose residualization used a ridge fallback",
            stacklevel=2,
        )
    resid = z - a @ coef
    resid = resid - resid.mean()
    scale = float(resid.std())
    if scale <= 1e-10 * max(1.0, float(np.abs(z).max())):
        raise ValueError(
            "dose is (numerically) an exact linear function of the "
            "covariates; no residual variation left to model"
        )
    return StandardizedResidual(
        values=resid / scale, coefficients=np.asarray(coef, dtype=float),
        used_ridge=used_ridge,
    )


# ---------------------------------------------------------------------------
# Confounder model and the (tau, lambda1) -> lambda0 solve
# ---------------------------------------------------------------------------


def model_implied_tau(lambda0: float, lambda1: float, residuals) -> float:
    """Gap in P(U=1) between the above- and below-median residual halves.

    Averages logistic(lambda0 + lambda1 * r) over the strictly-above and
    strictly-below halves of the empirical residual distribution; values
    tied with the median belong to neither half.
    """
    r = np.asarray(residuals, dtype=float)
    med = float(np.median(r))
    upper = r > med
    lower = r < med
    if not upper.any() or not lower.any():
        raise ValueError("residuals are degenerate: an above/below-median split is empty")
    probs = expit(lambda0 + lambda1 * r)
    return float(probs[upper].mean() - probs[lower].mean())


def solve_lambda0(tau: float, lambda1: float, residuals, tol: float = 1e-6) -> float:
    """Find the intercept whose model-implied median-halves gap equals tau.

    The implied gap, as a function of the intercept, rises from 0 (all
    probabilities pinned near 0), peaks, and falls back to 0 (pinned near
    1), always carrying the sign of lambda1.  Of the two intercepts that
    hit an attainable target, the smaller one - the low-prevalence branch
    - is returned as the canonical choice.  Targets beyond the peak, or
    with the wrong sign, do not correspond to any intercept and raise
    InfeasibleZoneError rather than being clamped.
    """
    r = np.asarray(residuals, dtype=float)
    if not math.isfinite(lambda1):
        raise ValueError("lambda1 must be finite")
    if lambda1 == 0.0:
        if abs(tau) <= tol:
            return 0.0
        raise InfeasibleZoneError(
            f"lambda1 = 0 forces a median-halves gap of 0; tau = {tau} is unattainable"
        )
    if tau == 0.0:
        raise InfeasibleZoneError(
            "with lambda1 != 0 the implied gap is nonzero for every finite "
            "intercept; tau = 0 is only a limit"
        )
    if tau * lambda1 < 0.0:
        raise InfeasibleZoneError(
            f"the implied gap carries the sign of lambda1 = {lambda1}; "
            f"tau = {tau} has the wrong sign"
        )

    sign = 1.0 if lambda1 > 0 else -1.0
    target = abs(tau)

    def gap(b: float) -> float:
        return sign * model_implied_tau(b, lambda1, r)

    bound = 60.0 + abs(lambda1) * float(np.abs(r).max())
    lo, hi = -bound, bound
    for _ in range(200):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if gap(m1) < gap(m2):
            lo = m1
        else:
            hi = m2
    peak = 0.5 * (lo + hi)
    sup = gap(peak)
    if target > sup + tol:
        raise InfeasibleZoneError(
            f"tau = {tau} exceeds the largest attainable gap {sign * sup:.8g} "
            f"at lambda1 = {lambda1}"
        )
    if target >= sup:
        root = peak
    else:
        left = peak - 1.0
        while gap(left) >= target and left > -bound:
            left = peak - 2.0 * (peak - left)
        left = max(left, -bound)
        root = float(
            optimize.brentq(
                lambda b: gap(b) - target, left, peak, xtol=1e-13, maxiter=200
            )
        )
    achieved = model_implied_tau(root, lambda1, r)
    if abs(achieved - tau) > tol:
        raise RuntimeError(
            f"intercept solve did not converge: implied gap {achieved}, target {tau}"
        )
    return float(root)


@dataclass(frozen=True)
class ConfounderModel:
    """A solved confounder law: P(U=1) = logistic(lambda0 + lambda1 * Zr).

    residual is the standardized dose residual the model was fitted
    against.  When tau is stored, construction re-derives the implied
    median-halves gap and insists it agrees within 1e-6, so a model
    object can never silently disagree with its own reparametrization.
    """

    lambda0: float
    lambda1: float
    residual: StandardizedResidual
    tau: Optional[float] = None

    def __post_init__(self) -> None:
        if self.tau is not None:
            implied = model_implied_tau(
                self.lambda0, self.lambda1, self.residual.values
            )
            if abs(implied - self.tau) > 1e-6:
                raise ValueError(
                    f"stored tau {self.tau} disagrees with the model-implied "
                    f"gap {implied:.10g}"
                )

    def implied_tau(self) -> float:
        return model_implied_tau(self.lambda0, self.lambda1, self.residual.values)

    def probabilities(self) -> np.ndarray:
        return expit(self.lambda0 + self.lambda1 * self.residual.values)


def fit_confounder_model(
    cohort_or_residual: Union[Cohort, StandardizedResidual],
    tau: float,
    lambda1: float,
    tol: float = 1e-6,
) -> ConfounderModel:
    """Residualize (if needed), solve the intercept, return the model."""
    if isinstance(cohort_or_residual, StandardizedResidual):
        residual = cohort_or_residual
    else:
        residual = standardize_residual(cohort_or_residual)
    lambda0 = solve_lambda0(tau, lambda1, residual.values, tol=tol)
    stored_tau = tau if lambda1 != 0.0 else None  # gap is identically 0 there
    return ConfounderModel(
        lambda0=lambda0, lambda1=lambda1, residual=residual, tau=stored_tau
    )


# ---------------------------------------------------------------------------
# Multiple imputation of the confounder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UImputations:
    """k independent per-subject draws of the binary confounder.

    u has shape (k, n_subjects) in cohort order, entries 0/1.
    """

    u: np.ndarray
    model: ConfounderModel

    def __post_init__(self) -> None:
        arr = np.asarray(self.u, dtype=np.int8)
        arr.setflags(write=False)
        object.__setattr__(self, "u", arr)

    @property
    def k(self) -> int:
        return self.u.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.u.shape[1]


def impute_u(
    design: MatchedDesign,
    cohort: Cohort,
    model: ConfounderModel,
    k: int = 50,
    seed=0,
) -> UImputations:
    """Draw k independent confounder vectors from the solved model.

    Every subject in the cohort is imputed (matched or not) so that any
    downstream consumer can look confounder values up by cohort row.
    """
    if k < 2:
        raise ValueError("need at least 2 imputations to split variance")
    if design.n_pairs == 0:
        raise ValueError("design has no matched pairs")
    if len(model.residual) != len(cohort):
        raise ValueError("confounder model was fitted on a different cohort")
    probs = model.probabilities()
    rng = _make_rng(seed)
    draws = (rng.random((k, len(cohort))) < probs[None, :]).astype(np.int8)
    return UImputations(u=draws, model=model)


# ---------------------------------------------------------------------------
# Pair-level contrasts shared by every estimator below
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _PairData:
    near: np.ndarray  # cohort rows of the more-encouraged (smaller-dose) members
    far: np.ndarray
    y: np.ndarray  # outcome contrasts, near minus far
    s: np.ndarray  # treatment contrasts, near minus far

    @property
    def n_pairs(self) -> int:
        return self.near.shape[0]

    @property
    def s_sum(self) -> float:
        return float(self.s.sum())

    @property
    def beta_hat(self) -> float:
        return float(self.y.sum()) / self.s_sum

    @property
    def iota(self) -> float:
        return abs(self.s_sum) / self.n_pairs


def _pair_data(design: MatchedDesign, cohort: Cohort) -> _PairData:
    near, far = _pair_rows(design, cohort)
    d = cohort.treatments.astype(float)
    r = cohort.outcomes
    s = d[near] - d[far]
    if s.sum() == 0.0:
        raise WeakInstrumentError(
            "summed treatment contrast is zero; the ratio estimator is undefined"
        )
    return _PairData(near=near, far=far, y=r[near] - r[far], s=s)


def _corrections(u: np.ndarray, pairs: _PairData) -> np.ndarray:
    """Per-imputation bias-correction slopes: sum of paired U contrasts
    over the summed treatment contrast.  Multiplying by delta gives the
    shift removed from the IV estimate under that imputation."""
    du = u[:, pairs.near].astype(np.int16) - u[:, pairs.far].astype(np.int16)
    return du.sum(axis=1) / pairs.s_sum


# ---------------------------------------------------------------------------
# Pooling corrected estimates across imputations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PooledEstimate:
    """Point estimate and variance split across k imputations.

    across_var already carries its (1 + 1/k)/(k - 1) small-k inflation
    factor, so total_var = across_var + within_var exactly.  dof is the
    Satterthwaite-style (k - 1) * (1 + within/across)^2; an exactly-zero
    across_var makes it undefined and is stored as infinity.
    """

    point: float
    within_var: float
    across_var: float
    total_var: float
    dof: float
    k: int

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError("pooling requires at least 2 imputations")
        recomposed = self.across_var + self.within_var
        if abs(recomposed - self.total_var) > 1e-12 * max(1.0, abs(self.total_var)):
            raise ValueError("total_var must equal across_var + within_var")
        if self.across_var == 0.0:
            if not math.isinf(self.dof):
                raise ValueError("zero across-variance must report infinite dof")
        else:
            expected = (self.k - 1) * (1.0 + self.within_var / self.across_var) ** 2
            if abs(self.dof - expected) > 1e-9 * max(1.0, expected):
                raise ValueError("dof is inconsistent with the stored variances")


@dataclass(frozen=True)
class PooledInterval:
    """A pooled confidence interval plus its variance bookkeeping."""

    lower: float
    upper: float
    alpha: float
    estimate: PooledEstimate
    normal_fallback: bool = False

    def contains(self, x: float) -> bool:
        return self.lower <= x <= self.upper


def _pooled_from_parts(
    beta_hat: float,
    corr: np.ndarray,
    delta: float,
    sigma_sq_k: np.ndarray,
    n_pairs: int,
    iota: float,
    alpha: float,
) -> PooledInterval:
    """Pool the per-imputation corrected estimates into one interval.

    Per imputation: estimate = beta_hat - delta * corr_k, sampling
    variance = 2 * sigma_k^2 / (n_pairs * iota^2).  The across-imputation
    spread is inflated by (1 + 1/k)/(k - 1); the reference distribution
    is Student t unless the spread vanishes, in which case the normal
    quantile is used and flagged.
    """
    k = corr.shape[0]
    beta_k = beta_hat - delta * corr
    point = float(beta_k.mean())
    ssd = float(((beta_k - point) ** 2).sum())
    across = (1.0 + 1.0 / k) / (k - 1.0) * ssd
    within = float((2.0 * sigma_sq_k / (n_pairs * iota**2)).mean())
    if across <= _ACROSS_EPS * max(1.0, point * point):
        across = 0.0
    total = across + within
    if across == 0.0:
        dof = math.inf
        quantile = float(spstats.norm.ppf(1.0 - alpha / 2.0))
        fallback = True
    else:
        dof = (k - 1.0) * (1.0 + within / across) ** 2
        quantile = float(spstats.t.ppf(1.0 - alpha / 2.0, dof))
        fallback = False
    half = quantile * math.sqrt(total)
    estimate = PooledEstimate(
        point=point,
        within_var=within,
        across_var=across,
        total_var=total,
        dof=dof,
        k=k,
    )
    return PooledInterval(
        lower=point - half,
        upper=point + half,
        alpha=alpha,
        estimate=estimate,
        normal_fallback=fallback,
    )


def pooled_ci(
    design: MatchedDesign,
    cohort: Cohort,
    imputations: UImputations,
    delta: float,
    sigma_hats,
    alpha: float = 0.05,
) -> PooledInterval:
    """Bias-correct the IV estimate under each imputed confounder set and
    pool with a between/within variance split.

    sigma_hats is the per-imputation residual scale (scalar = known and
    shared).  The within-imputation variance of each corrected estimate
    is 2 * sigma_k^2 / (n_pairs * iota^2) with iota the design's
    compliance rate, held at its observed value: the imputed confounder
    changes neither treatments nor doses.
    """
    pairs = _pair_data(design, cohort)
    k = imputations.k
    sig = np.asarray(sigma_hats, dtype=float)
    if sig.ndim == 0:
        sig = np.full(k, float(sig))
    if sig.shape != (k,):
        raise ValueError(f"need one sigma per imputation ({k}), got shape {sig.shape}")
    if np.any(sig < 0):
        raise ValueError("sigma estimates must be nonnegative")
    corr = _corrections(imputations.u, pairs)
    return _pooled_from_parts(
        beta_hat=pairs.beta_hat,
        corr=corr,
        delta=float(delta),
        sigma_sq_k=sig**2,
        n_pairs=pairs.n_pairs,
        iota=pairs.iota,
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# Residual-scale (sigma) estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SigmaEstimate:
    value: float
    method: str
    floored: bool = False


def estimate_sigma(
    design: MatchedDesign,
    cohort: Cohort,
    imputation=None,
    delta: float = 0.0,
    beta_hat: Optional[float] = None,
    method: str = "linear_f",
) -> SigmaEstimate:
    """Estimate the outcome noise scale under one imputed confounder set.

    linear_f (default): assume the covariate signal is linear and fit the
    paired-difference form of the model - outcome gaps (minus delta
    times the U gap) on treatment gaps and covariate gaps - so half the
    residual variance estimates sigma^2.  Differencing within matched
    pairs cancels the shared covariate signal, so mild nonlinearity the
    subject-level fit would dump into its residual is absorbed by the
    pairing instead.  matched_moments: evaluate the paired-difference
    moment identity - the average of (outcome gap - beta * treatment gap
    - delta * U gap)^2 over pairs estimates twice the noise variance -
    expanded into its six sample moments.  imputation may be hard 0/1
    draws or probabilities in [0, 1]; with probabilities the U moments
    are replaced by their model expectations (independent draws within a
    pair), which is no longer a perfect square and can go nonpositive -
    such estimates are floored and flagged.
    """
    if method not in ("linear_f", "matched_moments"):
        raise ValueError(f"unknown sigma method {method!r}")
    pairs = _pair_data(design, cohort)
    delta = float(delta)
    u = None
    soft = False
    if imputation is not None:
        u = np.asarray(imputation, dtype=float).reshape(-1)
        if u.shape[0] != len(cohort):
            raise ValueError("imputation vector must cover the whole cohort")
        if np.any((u < 0) | (u > 1)):
            raise ValueError("imputation values must lie in [0, 1]")
        soft = bool(np.any((u > 0) & (u < 1)))
    if delta != 0.0 and u is None:
        raise ValueError("a nonzero delta requires an imputed confounder vector")

    if method == "linear_f":
        x = cohort.covariate_matrix
        dx = x[pairs.near] - x[pairs.far]
        a = np.column_stack([np.ones(pairs.n_pairs), pairs.s, dx])
        dof = pairs.n_pairs - a.shape[1]
        if dof <= 0:
            raise ValueError(
                f"too few matched pairs ({pairs.n_pairs}) for "
                f"{a.shape[1]} regression columns"
            )
        target = pairs.y
        if u is not None and delta != 0.0:
            target = target - delta * (u[pairs.near] - u[pairs.far])
        coef, _, _, _ = np.linalg.lstsq(a, target, rcond=None)
        rss = float(((target - a @ coef) ** 2).sum())
        return SigmaEstimate(
            value=math.sqrt(max(rss / (2.0 * dof), 0.0)), method=method, floored=False
        )

    # matched_moments
    near, far = pairs.near, pairs.far
    dr = pairs.y
    dd = pairs.s
    m_rr = float((dr**2).mean())
    m_dd = float((dd**2).mean())
    m_rd = float((dr * dd).mean())
    if u is not None:
        mean_du = u[near] - u[far]
        if soft:
            # E[(U_a - U_b)^2] for independent Bernoulli draws
            sq_du = u[near] + u[far] - 2.0 * u[near] * u[far]
        else:
            sq_du = mean_du**2
        m_uu = float(sq_du.mean())
        m_ru = float((dr * mean_du).mean())
        m_du = float((dd * mean_du).mean())
        du_sum = float(mean_du.sum())
    else:
        m_uu = m_ru = m_du = du_sum = 0.0
    if beta_hat is None:
        beta_hat = pairs.beta_hat - delta * (du_sum / pairs.s_sum)
    b = float(beta_hat)
    two_sigma_sq = (
        m_rr
        + b**2 * m_dd
        + delta**2 * m_uu
        - 2.0 * b * m_rd
        - 2.0 * delta * m_ru
        + 2.0 * b * delta * m_du
    )
    floored = two_sigma_sq < _SIGMA_SQ2_FLOOR
    if floored:
        two_sigma_sq = _SIGMA_SQ2_FLOOR
    return SigmaEstimate(
        value=math.sqrt(two_sigma_sq / 2.0), method=method, floored=bool(floored)
    )


class _SigmaEngine:
    """Vectorized per-imputation sigma estimates across many delta values.

    For linear_f the residual sum of squares of (outcome gap - delta *
    U gap) on the fixed paired-difference design matrix is exactly
    quadratic in delta once the gaps are projected off the fitted
    column span, so one QR factorization serves every (imputation,
    delta) pair.  The matched_moments path precomputes the six pairwise
    moments per imputation.  Either path reproduces estimate_sigma to
    rounding.
    """

    def __init__(self, design: MatchedDesign, cohort: Cohort, method: str):
        if method not in ("linear_f", "matched_moments"):
            raise ValueError(f"unknown sigma method {method!r}")
        self.method = method
        self.pairs = _pair_data(design, cohort)
        pairs = self.pairs
        if method == "linear_f":
            x = cohort.covariate_matrix
            dx = x[pairs.near] - x[pairs.far]
            a = np.column_stack([np.ones(pairs.n_pairs), pairs.s, dx])
            self.dof = pairs.n_pairs - a.shape[1]
            if self.dof <= 0:
                raise ValueError("too few matched pairs for the linear fit")
            q, _ = np.linalg.qr(a, mode="reduced")
            self.q = q
            self.proj_r = pairs.y - q @ (q.T @ pairs.y)
            self.rr = float(self.proj_r @ self.proj_r)
        else:
            dr, dd = pairs.y, pairs.s
            self.m_rr = float((dr**2).mean())
            self.m_dd = float((dd**2).mean())
            self.m_rd = float((dr * dd).mean())
        self._warned_floor = False

    def sigma_sq(self, u: Optional[np.ndarray], delta: float) -> np.ndarray:
        """(k,) array of sigma^2 estimates; u is (k, n_subjects) or None."""
        delta = float(delta)
        if u is None or delta == 0.0:
            k = 1 if u is None else u.shape[0]
            if self.method == "linear_f":
                return np.full(k, self.rr / (2.0 * self.dof))
            base = self._moments_value(0.0, 0.0, 0.0, 0.0, delta=0.0)
            return np.full(k, base)
        if self.method == "linear_f":
            pairs = self.pairs
            w = (
                u[:, pairs.near].astype(np.int16) - u[:, pairs.far].astype(np.int16)
            ).astype(float).T  # (I, k) of U gaps
            proj_w = w - self.q @ (self.q.T @ w)
            b = self.proj_r @ proj_w  # (k,)
            c = (proj_w * proj_w).sum(axis=0)  # (k,)
            rss = self.rr - 2.0 * delta * b + delta**2 * c
            return np.clip(rss, 0.0, None) / (2.0 * self.dof)
        pairs = self.pairs
        du = u[:, pairs.near].astype(np.int16) - u[:, pairs.far].astype(np.int16)
        m_uu = (du.astype(float) ** 2).mean(axis=1)
        m_ru = (pairs.y[None, :] * du).mean(axis=1)
        m_du = (pairs.s[None, :] * du).mean(axis=1)
        corr = du.sum(axis=1) / pairs.s_sum
        out = np.empty(u.shape[0])
        for i in range(u.shape[0]):
            out[i] = self._moments_value(
                m_uu[i], m_ru[i], m_du[i], corr[i], delta=delta
            )
        return out

    def _moments_value(self, m_uu, m_ru, m_du, corr, delta: float) -> float:
        b = self.pairs.beta_hat - delta * corr
        two_sq = (
            self.m_rr
            + b**2 * self.m_dd
            + delta**2 * m_uu
            - 2.0 * b * self.m_rd
            - 2.0 * delta * m_ru
            + 2.0 * b * delta * m_du
        )
        if two_sq < _SIGMA_SQ2_FLOOR:
            two_sq = _SIGMA_SQ2_FLOOR
            if not self._warned_floor:
                warnings.warn(
                    "moment-based sigma estimate went nonpositive; floored",
                    stacklevel=3,
                )
                self._warned_floor = True
        return two_sq / 2.0


# ---------------------------------------------------------------------------
# Sensitivity zones and intervals
# ---------------------------------------------------------------------------


def _sorted_floats(values, name: str) -> Tuple[float, ...]:
    out = tuple(sorted({float(v) for v in values}))
    if not out:
        raise ValueError(f"{name} must be nonempty")
    if any(not math.isfinite(v) for v in out):
        raise ValueError(f"{name} must be finite")
    return out


@dataclass(frozen=True)
class SensitivityZone:
    """A finite grid of (delta, tau, lambda1) sensitivity assumptions.

    The zone is the Cartesian product of the three component sets; a
    (tau, lambda1) pair with no achievable intercept is discovered at
    evaluation time and flagged rather than silently dropped here.
    """

    delta_set: Tuple[float, ...]
    tau_set: Tuple[float, ...]
    lambda1_set: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta_set", _sorted_floats(self.delta_set, "delta_set"))
        object.__setattr__(self, "tau_set", _sorted_floats(self.tau_set, "tau_set"))
        object.__setattr__(
            self, "lambda1_set", _sorted_floats(self.lambda1_set, "lambda1_set")
        )

    @classmethod
    def product(cls, deltas, taus, lambda1s) -> "SensitivityZone":
        return cls(delta_set=tuple(deltas), tau_set=tuple(taus), lambda1_set=tuple(lambda1s))

    @classmethod
    def symmetric(
        cls, delta_sup: float, tau: float, lambda1: float, n_deltas: int = 21
    ) -> "SensitivityZone":
        """A [-delta_sup, delta_sup] grid (0 included when n_deltas is odd)."""
        return cls(
            delta_set=symmetric_grid(delta_sup, n_deltas),
            tau_set=(tau,),
            lambda1_set=(lambda1,),
        )

    @property
    def size(self) -> int:
        return len(self.delta_set) * len(self.tau_set) * len(self.lambda1_set)

    def model_pairs(self) -> Tuple[Tuple[float, float], ...]:
        """All (tau, lambda1) combinations, sorted."""
        return tuple(itertools.product(self.tau_set, self.lambda1_set))

    def points(self):
        return itertools.product(self.delta_set, self.tau_set, self.lambda1_set)

    def issubset(self, other: "SensitivityZone") -> bool:
        return (
            set(self.delta_set) <= set(other.delta_set)
            and set(self.tau_set) <= set(other.tau_set)
            and set(self.lambda1_set) <= set(other.lambda1_set)
        )


def symmetric_grid(delta_sup: float, n_deltas: int = 21) -> Tuple[float, ...]:
    """An origin-symmetric delta grid over [-delta_sup, delta_sup].

    Built by mirroring a nonnegative half-grid so the symmetry is exact
    in floating point and 0 is on the grid whenever n_deltas is odd.
    """
    delta_sup = float(delta_sup)
    if delta_sup < 0:
        raise ValueError("delta_sup must be nonnegative")
    if n_deltas < 1:
        raise ValueError("need at least one grid point")
    if delta_sup == 0.0:
        return (0.0,)
    if n_deltas == 1:
        return (delta_sup,)
    if n_deltas % 2:
        pos = np.linspace(0.0, delta_sup, (n_deltas + 1) // 2)
        grid = np.concatenate([-pos[:0:-1], pos])
    else:
        pos = np.linspace(delta_sup / n_deltas, delta_sup, n_deltas // 2)
        grid = np.concatenate([-pos[::-1], pos])
    return tuple(float(v) for v in grid)


def _merge_cis(
    cis: Sequence[Tuple[float, float]]
) -> Tuple[Tuple[float, float], ...]:
    """Merge overlapping intervals; the gaps between runs are the holes
    the hull papers over."""
    ordered = sorted(cis)
    merged = [list(ordered[0])]
    for lo, hi in ordered[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return tuple((float(lo), float(hi)) for lo, hi in merged)


@dataclass(frozen=True)
class SensitivityInterval:
    """The union of pooled CIs over a sensitivity zone.

    lower/upper give the hull of the union; gaps lists any open holes
    inside the hull (possible because a finite union of intervals need
    not be an interval).  infeasible records (tau, lambda1) pairs with
    no achievable intercept.  Containment checks work on the actual
    union, not the hull.
    """

    lower: float
    upper: float
    alpha: float
    zone: SensitivityZone
    per_point_cis: Mapping[Tuple[float, float, float], Tuple[float, float]]
    gaps: Tuple[Tuple[float, float], ...] = ()
    infeasible: Tuple[Tuple[float, float], ...] = ()

    def contains(self, x: float) -> bool:
        return any(lo <= x <= hi for lo, hi in self.per_point_cis.values())

    def excludes(self, x: float) -> bool:
        """True when every per-point CI excludes x - the rejection rule."""
        return not self.contains(x)

    @property
    def hull(self) -> Tuple[float, float]:
        return (self.lower, self.upper)

    def to_json(self) -> str:
        doc = {
            "lower": self.lower,
            "upper": self.upper,
            "alpha": self.alpha,
            "excludes_zero": self.excludes(0.0),
            "gaps": [list(g) for g in self.gaps],
            "infeasible": [list(p) for p in self.infeasible],
            "zone": {
                "delta_set": list(self.zone.delta_set),
                "tau_set": list(self.zone.tau_set),
                "lambda1_set": list(self.zone.lambda1_set),
            },
            "per_point_cis": [
                {
                    "delta": pt[0],
                    "tau": pt[1],
                    "lambda1": pt[2],
                    "lower": ci[0],
                    "upper": ci[1],
                }
                for pt, ci in sorted(self.per_point_cis.items())
            ],
        }
        return json.dumps(doc, indent=2)


def save_interval_csv(si: SensitivityInterval, path) -> None:
    """One row per zone point: (delta, tau, lambda1, lower, upper)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta", "tau", "lambda1", "lower", "upper"])
        for (d, t, l1), (lo, hi) in sorted(si.per_point_cis.items()):
            writer.writerow([repr(d), repr(t), repr(l1), repr(lo), repr(hi)])


def sensitivity_interval(
    design: MatchedDesign,
    cohort: Cohort,
    zone: SensitivityZone,
    alpha: float = 0.05,
    k: int = 50,
    seed: int = 0,
    sigma: Optional[float] = None,
    sigma_method: str = "linear_f",
    residual: Optional[StandardizedResidual] = None,
    lambda0_overrides: Optional[Mapping[Tuple[float, float], float]] = None,
) -> SensitivityInterval:
    """Pooled CIs over every zone point, reported as union hull + gaps.

    One imputation batch is drawn per (tau, lambda1) model and shared by
    every delta, so the delta direction costs arithmetic only.  sigma:
    a float is treated as the known noise scale; None re-estimates it
    per imputation with sigma_method.  lambda0_overrides pins the
    intercept for chosen (tau, lambda1) pairs, bypassing the solve -
    the escape hatch for studies that calibrate the intercept directly.
    """
    if residual is None:
        residual = standardize_residual(cohort)
    pairs = _pair_data(design, cohort)
    engine = None if sigma is not None else _SigmaEngine(design, cohort, sigma_method)
    per_point: Dict[Tuple[float, float, float], Tuple[float, float]] = {}
    infeasible = []
    messages = []
    for gi, (tau, l1) in enumerate(zone.model_pairs()):
        model = _resolve_model(tau, l1, residual, lambda0_overrides)
        if model is None:
            try:
                lam0 = solve_lambda0(tau, l1, residual.values)
            except InfeasibleZoneError as exc:
                infeasible.append((tau, l1))
                messages.append(str(exc))
                continue
            model = ConfounderModel(
                lambda0=lam0, lambda1=l1, residual=residual,
                tau=tau if l1 != 0.0 else None,
            )
        imputations = impute_u(design, cohort, model, k=k, seed=(seed, gi))
        corr = _corrections(imputations.u, pairs)
        for delta in zone.delta_set:
            if engine is None:
                sig_sq = np.full(k, float(sigma) ** 2)
            else:
                sig_sq = engine.sigma_sq(imputations.u, delta)
            interval = _pooled_from_parts(
                beta_hat=pairs.beta_hat,
                corr=corr,
                delta=delta,
                sigma_sq_k=sig_sq,
                n_pairs=pairs.n_pairs,
                iota=pairs.iota,
                alpha=alpha,
            )
            per_point[(delta, tau, l1)] = (interval.lower, interval.upper)
    if not per_point:
        raise InfeasibleZoneError(
            "every (tau, lambda1) pair in the zone is infeasible: "
            + "; ".join(messages)
        )
    merged = _merge_cis(list(per_point.values()))
    gaps = tuple(
        (merged[i][1], merged[i + 1][0]) for i in range(len(merged) - 1)
    )
    return SensitivityInterval(
        lower=merged[0][0],
        upper=merged[-1][1],
        alpha=alpha,
        zone=zone,
        per_point_cis=per_point,
        gaps=gaps,
        infeasible=tuple(infeasible),
    )


def _resolve_model(
    tau: float,
    l1: float,
    residual: StandardizedResidual,
    overrides: Optional[Mapping[Tuple[float, float], float]],
) -> Optional[ConfounderModel]:
    if not overrides:
        return None
    key = (float(tau), float(l1))
    if key not in overrides:
        return None
    return ConfounderModel(
        lambda0=float(overrides[key]), lambda1=l1, residual=residual, tau=None
    )


# ---------------------------------------------------------------------------
# Largest-explainable-effect heatmap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeatmapGrid:
    """Per-(tau, lambda1) largest standardized effect still excluded by
    the sensitivity interval.

    delta_sup_std is in outcome-standard-deviation units (the shift
    divided by outcome_sd); delta_sup_raw is on the outcome scale.
    NaN cells are infeasible (tau, lambda1) pairs; capped cells hit the
    search ceiling without ever covering zero.
    """

    taus: Tuple[float, ...]
    lambda1s: Tuple[float, ...]
    delta_sup_std: np.ndarray
    delta_sup_raw: np.ndarray
    capped: np.ndarray
    outcome_sd: float
    alpha: float
    k: int
    n_deltas: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "tau",
                    "lambda1",
                    "delta_sup_std",
                    "delta_sup_raw",
                    "feasible",
                    "capped",
                    "outcome_sd",
                    "alpha",
                    "k",
                    "n_deltas",
                ]
            )
            for i, tau in enumerate(self.taus):
                for j, l1 in enumerate(self.lambda1s):
                    val = self.delta_sup_std[i, j]
                    writer.writerow(
                        [
                            repr(tau),
                            repr(l1),
                            "" if math.isnan(val) else repr(float(val)),
                            ""
                            if math.isnan(val)
                            else repr(float(self.delta_sup_raw[i, j])),
                            int(not math.isnan(val)),
                            int(bool(self.capped[i, j])),
                            repr(self.outcome_sd),
                            repr(self.alpha),
                            self.k,
                            self.n_deltas,
                        ]
                    )

    @classmethod
    def from_csv(cls, path) -> "HeatmapGrid":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append(row)
        if not rows:
            raise ValueError("empty heatmap CSV")
        taus = tuple(sorted({float(r["tau"]) for r in rows}))
        lambda1s = tuple(sorted({float(r["lambda1"]) for r in rows}))
        std = np.full((len(taus), len(lambda1s)), math.nan)
        raw = np.full((len(taus), len(lambda1s)), math.nan)
        capped = np.zeros((len(taus), len(lambda1s)), dtype=bool)
        ti = {t: i for i, t in enumerate(taus)}
        li = {l: j for j, l in enumerate(lambda1s)}
        for r in rows:
            i, j = ti[float(r["tau"])], li[float(r["lambda1"])]
            if r["delta_sup_std"] != "":
                std[i, j] = float(r["delta_sup_std"])
                raw[i, j] = float(r["delta_sup_raw"])
            capped[i, j] = bool(int(r["capped"]))
        first = rows[0]
        return cls(
            taus=taus,
            lambda1s=lambda1s,
            delta_sup_std=std,
            delta_sup_raw=raw,
            capped=capped,
            outcome_sd=float(first["outcome_sd"]),
            alpha=float(first["alpha"]),
            k=int(first["k"]),
            n_deltas=int(first["n_deltas"]),
        )


def heatmap_grid(
    design: MatchedDesign,
    cohort: Cohort,
    tau_grid,
    lambda1_grid,
    alpha: float = 0.05,
    k: int = 50,
    seed: int = 0,
    n_deltas: int = 21,
    sigma: Optional[float] = None,
    sigma_method: str = "linear_f",
    tol: float = 1e-3,
    max_std: float = 1e3,
    residual: Optional[StandardizedResidual] = None,
) -> HeatmapGrid:
    """For each (tau, lambda1), the largest standardized shift delta/sd
    whose symmetric sensitivity zone still excludes zero.

    Found by doubling-then-bisection on the shift, to tol in
    standardized units.  A design whose naive interval already covers
    zero gets 0; infeasible cells are NaN; a cell still rejecting at
    max_std standardized units is reported there and marked capped.
    """
    taus = _sorted_floats(tau_grid, "tau_grid")
    lambda1s = _sorted_floats(lambda1_grid, "lambda1_grid")
    if residual is None:
        residual = standardize_residual(cohort)
    pairs = _pair_data(design, cohort)
    engine = None if sigma is not None else _SigmaEngine(design, cohort, sigma_method)
    sd_out = float(np.std(np.asarray(cohort.outcomes, dtype=float), ddof=1))
    if sd_out <= 0:
        raise ValueError("outcome standard deviation is zero")

    std = np.full((len(taus), len(lambda1s)), math.nan)
    raw = np.full((len(taus), len(lambda1s)), math.nan)
    capped = np.zeros((len(taus), len(lambda1s)), dtype=bool)

    def rejects(corr: np.ndarray, delta_sup: float) -> bool:
        for delta in symmetric_grid(delta_sup, n_deltas):
            if engine is None:
                sig_sq = np.full(k, float(sigma) ** 2)
            else:
                sig_sq = engine.sigma_sq(u_current, delta)
            ci = _pooled_from_parts(
                beta_hat=pairs.beta_hat,
                corr=corr,
                delta=delta,
                sigma_sq_k=sig_sq,
                n_pairs=pairs.n_pairs,
                iota=pairs.iota,
                alpha=alpha,
            )
            if ci.contains(0.0):
                return False
        return True

    for i, tau in enumerate(taus):
        for j, l1 in enumerate(lambda1s):
            try:
                lam0 = solve_lambda0(tau, l1, residual.values)
            except InfeasibleZoneError:
                continue
            model = ConfounderModel(
                lambda0=lam0, lambda1=l1, residual=residual,
                tau=tau if l1 != 0.0 else None,
            )
            imputations = impute_u(
                design, cohort, model, k=k, seed=(seed, 2, i, j)
            )
            u_current = imputations.u
            corr = _corrections(u_current, pairs)
            if not rejects(corr, 0.0):
                std[i, j] = 0.0
                raw[i, j] = 0.0
                continue
            lo = 0.0
            hi = sd_out
            while rejects(corr, hi):
                lo = hi
                hi *= 2.0
                if hi / sd_out > max_std:
                    break
            if hi / sd_out > max_std:
                std[i, j] = max_std
                raw[i, j] = max_std * sd_out
                capped[i, j] = True
                continue
            while (hi - lo) / sd_out > tol:
                mid = 0.5 * (lo + hi)
                if rejects(corr, mid):
                    lo = mid
                else:
                    hi = mid
            std[i, j] = lo / sd_out
            raw[i, j] = lo
    return HeatmapGrid(
        taus=taus,
        lambda1s=lambda1s,
        delta_sup_std=std,
        delta_sup_raw=raw,
        capped=capped,
        outcome_sd=sd_out,
        alpha=alpha,
        k=k,
        n_deltas=n_deltas,
    )


# ---------------------------------------------------------------------------
# Power of the sensitivity analysis under favorable synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerSetting:
    """One simulated scenario: effect size, dose-response steepness, and
    the sensitivity zone the analyst would apply.

    lambda0, when given, pins the confounder-model intercept per design
    label instead of solving it from (tau, lambda1) on each replication;
    it requires a zone with a single (tau, lambda1) pair.
    """

    label: str
    beta: float
    xi: float
    zone: SensitivityZone
    lambda0: Optional[Mapping[str, float]] = None

    def __post_init__(self) -> None:
        if self.lambda0 is not None and len(self.zone.model_pairs()) != 1:
            raise ValueError(
                "a pinned intercept needs a zone with exactly one "
                "(tau, lambda1) pair"
            )

    @classmethod
    def table_row(
        cls,
        label: str,
        beta: float,
        xi: float,
        delta_sup: float,
        lambda1: float,
        tau: float = 0.01,
        n_deltas: int = 21,
        lambda0: Optional[Mapping[str, float]] = None,
    ) -> "PowerSetting":
        zone = SensitivityZone.symmetric(delta_sup, tau, lambda1, n_deltas)
        return cls(label=label, beta=beta, xi=xi, zone=zone, lambda0=lambda0)

    @property
    def delta_sup(self) -> float:
        return max(abs(d) for d in self.zone.delta_set)


@dataclass(frozen=True)
class PowerRow:
    """Simulated operating characteristics of one (setting, design) cell.

    bias is the average magnitude of the applied correction at the zone
    edge (delta_sup times the mean correction slope); sd is the average
    pooled total standard error at the zone edge.
    """

    label: str
    design: str
    xi: float
    lambda1: float
    beta: float
    delta_sup: float
    tau: float
    power: float
    power_se: float
    bias: float
    sd: float
    compliance: float
    reps: int
    failures: int = 0


@dataclass(frozen=True)
class PowerTable:
    rows: Tuple[PowerRow, ...]

    def to_csv(self, path) -> None:
        cols = [
            "xi",
            "lambda1",
            "design",
            "power",
            "bias",
            "sd",
            "beta",
            "delta_sup",
            "tau",
            "compliance",
            "power_se",
            "reps",
            "failures",
            "label",
        ]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow(
                    [
                        repr(row.xi),
                        repr(row.lambda1),
                        row.design,
                        repr(row.power),
                        repr(row.bias),
                        repr(row.sd),
                        repr(row.beta),
                        repr(row.delta_sup),
                        repr(row.tau),
                        repr(row.compliance),
                        repr(row.power_se),
                        row.reps,
                        row.failures,
                        row.label,
                    ]
                )

    def cell(self, label: str, design: str) -> PowerRow:
        for row in self.rows:
            if row.label == label and row.design == design:
                return row
        raise KeyError(f"no power row for ({label!r}, {design!r})")


def power_study(
    base_dgp: PartiallyLinearDgp,
    design_specs: Mapping[str, DistanceSpec],
    settings: Sequence[PowerSetting],
    reps: int = 2000,
    alpha: float = 0.05,
    k: int = 50,
    seed: int = 0,
    sigma: Optional[float] = None,
    sigma_method: str = "matched_moments",
) -> PowerTable:
    """Simulate the rejection rate of the full sensitivity pipeline for
    several scenarios over the same stream of synthetic cohorts.

    The data are favorable: no confounder enters the generator, so the
    imputation-based correction is pure insurance and its cost/benefit
    across designs is what the table reveals.  Within a replication all
    settings share the same covariate/dose draws (the generator's stream
    layout guarantees it), and matching depends only on those, so each
    design is matched once per replication and reused across settings -
    common random numbers, sharpening every between-cell contrast.

    sigma=None (the benchmark convention) re-estimates the noise scale
    per imputation; the matched_moments default absorbs whatever
    covariate signal the pairing left unbalanced, which keeps the test
    calibrated even for designs whose calipers trade covariate
    closeness for dose separation.  A float treats the scale as known -
    expect mild size inflation when pairs retain covariate noise.
    A replication whose matched treatment contrasts sum to zero cannot
    produce an estimate and is counted as a non-rejection + failure.
    """
    if base_dgp.delta != 0.0 or base_dgp.confounder_form != "none":
        raise ValueError(
            "power simulations require a favorable generator: no confounder "
            "term (delta = 0, confounder_form = 'none')"
        )
    if "xi" not in base_dgp.treatment_rule:
        raise ValueError("base generator must use a dose-response rule with xi")
    if reps < 1:
        raise ValueError("need at least one replication")
    labels = list(design_specs)
    if not labels:
        raise ValueError("need at least one design spec")
    if not settings:
        raise ValueError("need at least one power setting")

    rejections = {(s.label, d): 0 for s in settings for d in labels}
    failures = {(s.label, d): 0 for s in settings for d in labels}
    bias_sum = {(s.label, d): 0.0 for s in settings for d in labels}
    sd_sum = {(s.label, d): 0.0 for s in settings for d in labels}
    iota_sum = {(s.label, d): 0.0 for s in settings for d in labels}

    for r in range(reps):
        cohort_seed = _entropy_int(seed, 0, r)
        cohorts: Dict[Tuple[float, float], Cohort] = {}

        def cohort_for(xi: float, beta: float) -> Cohort:
            key = (xi, beta)
            if key not in cohorts:
                rule = dict(base_dgp.treatment_rule)
                rule["xi"] = xi
                spec = PartiallyLinearDgp(
                    n=base_dgp.n,
                    beta=beta,
                    treatment_rule=rule,
                    outcome_form=base_dgp.outcome_form,
                    coefficients=base_dgp.coefficients,
                    delta=0.0,
                    confounder_form="none",
                    dose_mean=base_dgp.dose_mean,
                    dose_sd=base_dgp.dose_sd,
                    error_corr=base_dgp.error_corr,
                )
                cohorts[key] = generate_partially_linear_cohort(spec, seed=cohort_seed)
            return cohorts[key]

        first = cohort_for(settings[0].xi, settings[0].beta)
        designs = {name: strengthen(first, spec) for name, spec in design_specs.items()}
        residual = standardize_residual(first)

        for si, setting in enumerate(settings):
            cohort = cohort_for(setting.xi, setting.beta)
            for di, name in enumerate(labels):
                design = designs[name]
                try:
                    pairs = _pair_data(design, cohort)
                except WeakInstrumentError:
                    failures[(setting.label, name)] += 1
                    continue
                iota_sum[(setting.label, name)] += pairs.iota
                engine = (
                    None
                    if sigma is not None
                    else _SigmaEngine(design, cohort, sigma_method)
                )
                reject = True
                bias_rep = 0.0
                sd_rep = 0.0
                for gi, (tau, l1) in enumerate(setting.zone.model_pairs()):
                    if setting.lambda0 is not None:
                        lam0 = float(setting.lambda0[name])
                        model = ConfounderModel(
                            lambda0=lam0, lambda1=l1, residual=residual, tau=None
                        )
                    else:
                        model = ConfounderModel(
                            lambda0=solve_lambda0(tau, l1, residual.values),
                            lambda1=l1,
                            residual=residual,
                            tau=tau if l1 != 0.0 else None,
                        )
                    needs_u = any(d != 0.0 for d in setting.zone.delta_set)
                    if needs_u:
                        imputations = impute_u(
                            design,
                            cohort,
                            model,
                            k=k,
                            seed=(seed, 1, r, si, di, gi),
                        )
                        u = imputations.u
                        corr = _corrections(u, pairs)
                    else:
                        u = None
                        corr = np.zeros(k)
                    edge = max(abs(d) for d in setting.zone.delta_set)
                    bias_rep = max(bias_rep, edge * abs(float(corr.mean())))
                    for delta in setting.zone.delta_set:
                        if sigma is not None:
                            sig_sq = np.full(k, float(sigma) ** 2)
                        else:
                            sig_sq = engine.sigma_sq(u, delta)
                        ci = _pooled_from_parts(
                            beta_hat=pairs.beta_hat,
                            corr=corr,
                            delta=delta,
                            sigma_sq_k=sig_sq,
                            n_pairs=pairs.n_pairs,
                            iota=pairs.iota,
                            alpha=alpha,
                        )
                        if abs(delta) == edge:
                            sd_rep = max(sd_rep, math.sqrt(ci.estimate.total_var))
                        if ci.contains(0.0):
                            reject = False
                bias_sum[(setting.label, name)] += bias_rep
                sd_sum[(setting.label, name)] += sd_rep
                if reject:
                    rejections[(setting.label, name)] += 1

    rows = []
    for setting in settings:
        (tau0, l10) = setting.zone.model_pairs()[0]
        single = len(setting.zone.model_pairs()) == 1
        for name in labels:
            key = (setting.label, name)
            ok = reps - failures[key]
            power = rejections[key] / reps
            rows.append(
                PowerRow(
                    label=setting.label,
                    design=name,
                    xi=setting.xi,
                    lambda1=l10 if single else math.nan,
                    beta=setting.beta,
                    delta_sup=setting.delta_sup,
                    tau=tau0 if single else math.nan,
                    power=power,
                    power_se=math.sqrt(max(power * (1.0 - power), 0.0) / reps),
                    bias=bias_sum[key] / ok if ok else math.nan,
                    sd=sd_sum[key] / ok if ok else math.nan,
                    compliance=iota_sum[key] / ok if ok else math.nan,
                    reps=reps,
                    failures=failures[key],
                )
            )
    return PowerTable(rows=tuple(rows))


def sensitivity_power(
    dgp: PartiallyLinearDgp,
    design_specs: Mapping[str, DistanceSpec],
    zone: SensitivityZone,
    alpha: float = 0.05,
    reps: int = 2000,
    k: int = 50,
    seed: int = 0,
    sigma: Optional[float] = 1.0,
    sigma_method: str = "linear_f",
    lambda0: Optional[Mapping[str, float]] = None,
) -> PowerTable:
    """Rejection rate of the zone-union test for each design under the
    given favorable generator - one scenario, full pipeline per
    replication.  See power_study for the simulation mechanics."""
    xi = float(dgp.treatment_rule.get("xi", math.nan))
    if not math.isfinite(xi):
        raise ValueError("generator treatment rule must carry a finite xi")
    setting = PowerSetting(
        label="scenario", beta=dgp.beta, xi=xi, zone=zone, lambda0=lambda0
    )
    return power_study(
        base_dgp=dgp,
        design_specs=design_specs,
        settings=[setting],
        reps=reps,
        alpha=alpha,
        k=k,
        seed=seed,
        sigma=sigma,
        sigma_method=sigma_method,
    )


# ---------------------------------------------------------------------------
# Within-pair assignment-odds audit
# ---------------------------------------------------------------------------


def pair_assignment_probability(dose_gap: float, u_gap: float, gamma: float) -> float:
    """Probability that the pair's dose assignment lands the larger dose
    on the member it did, under a dose-tilted confounder of strength
    gamma: logistic(gamma * dose_gap * u_gap)."""
    return float(expit(gamma * dose_gap * u_gap))


@dataclass(frozen=True)
class AuditStratum:
    """Which matched pairs enter the audit: mixed-confounder pairs whose
    u_value member's dose falls in [dose_low, dose_high]."""

    dose_low: float
    dose_high: float
    u_value: int = 1

    def __post_init__(self) -> None:
        if self.dose_low >= self.dose_high:
            raise ValueError("dose_low must be below dose_high")
        if self.u_value not in (0, 1):
            raise ValueError("u_value must be 0 or 1")


@dataclass(frozen=True)
class GammaAuditReport:
    """Across-replication summary of the within-pair assignment audit.

    Per replication: among qualifying pairs, the rank correlation
    between 'the u_value member received the larger dose' and the size
    of the pair's dose gap, with its p-value.  A constant-pair-odds
    sensitivity model predicts zero correlation; a dose-tilted
    confounder makes the assignment probability grow with the gap.
    """

    gamma: float
    stratum: AuditStratum
    alpha: float
    p_values: np.ndarray
    rho_values: np.ndarray
    n_qualifying: np.ndarray
    rejection_rate: float
    strict_rejection_rate: float  # share of runs with p < 0.01
    reference_gaps: np.ndarray
    reference_probs: np.ndarray
    empirical_gap_bins: np.ndarray
    empirical_frequencies: np.ndarray

    def to_json(self) -> str:
        doc = {
            "gamma": self.gamma,
            "alpha": self.alpha,
            "stratum": {
                "dose_low": self.stratum.dose_low,
                "dose_high": self.stratum.dose_high,
                "u_value": self.stratum.u_value,
            },
            "reps": int(self.p_values.shape[0]),
            "rejection_rate": self.rejection_rate,
            "strict_rejection_rate": self.strict_rejection_rate,
            "median_p": float(np.median(self.p_values)),
            "median_rho": float(np.median(self.rho_values)),
            "mean_qualifying": float(self.n_qualifying.mean()),
            "reference_curve": [
                {"dose_gap": float(g), "probability": float(p)}
                for g, p in zip(self.reference_gaps, self.reference_probs)
            ],
            "empirical_curve": [
                {"dose_gap": float(g), "frequency": float(p)}
                for g, p in zip(self.empirical_gap_bins, self.empirical_frequencies)
            ],
        }
        return json.dumps(doc, indent=2)


def gamma_model_audit(
    dgp: SemiparametricDoseDgp,
    spec: DistanceSpec,
    stratum: AuditStratum,
    reps: int = 200,
    seed: int = 0,
    alpha: float = 0.05,
) -> GammaAuditReport:
    """Generate, match, and test: does the within-pair probability of
    receiving the larger dose depend on the dose gap?

    Under the generator's dose-tilted confounder the probability is
    logistic(gamma * gap) for mixed pairs, so any model that assigns
    every pair constant odds regardless of gap is contradicted; at
    gamma = 0 the test's rejection rate should sit at its level.  Each
    replication matches a fresh cohort, keeps mixed-confounder pairs
    whose u_value member's dose lies in the stratum window, and rank-
    correlates the assignment indicator with the absolute dose gap.
    """
    if reps < 1:
        raise ValueError("need at least one replication")
    p_values = np.empty(reps)
    rho_values = np.empty(reps)
    n_qual = np.empty(reps, dtype=int)
    pooled_gaps = []
    pooled_indicators = []
    for ri in range(reps):
        cohort = generate_semiparametric_dose_cohort(
            dgp, seed=_entropy_int(seed, 3, ri)
        )
        design = strengthen(cohort, spec)
        near, far = _pair_rows(design, cohort)
        u = cohort.latent_u
        if u is None:
            raise AuditError("audit cohorts must carry the latent confounder")
        z = cohort.doses
        mixed = u[near] != u[far]
        # near holds the smaller dose, so the u_value member's dose is
        # z[near] when it is the near member, z[far] otherwise.
        member_is_far = u[far] == stratum.u_value
        member_dose = np.where(member_is_far, z[far], z[near])
        in_window = (member_dose >= stratum.dose_low) & (
            member_dose <= stratum.dose_high
        )
        keep = mixed & in_window
        count = int(keep.sum())
        if count < 10:
            raise AuditError(
                f"replication {ri}: only {count} qualifying pairs in the "
                "stratum (need at least 10)"
            )
        n_qual[ri] = count
        gaps = (z[far] - z[near])[keep]
        indicator = member_is_far[keep].astype(float)
        rho, p = spstats.spearmanr(indicator, gaps)
        if not math.isfinite(p):  # constant indicator: no rank signal
            rho, p = 0.0, 1.0
        p_values[ri] = p
        rho_values[ri] = rho
        pooled_gaps.append(gaps)
        pooled_indicators.append(indicator)

    gaps_all = np.concatenate(pooled_gaps)
    ind_all = np.concatenate(pooled_indicators)
    ref_gaps = np.linspace(0.0, float(np.quantile(gaps_all, 0.99)), 50)
    ref_probs = expit(dgp.gamma * ref_gaps)
    edges = np.quantile(gaps_all, np.linspace(0.0, 1.0, 11))
    edges[-1] += 1e-9
    centers = np.empty(10)
    freqs = np.empty(10)
    for b in range(10):
        mask = (gaps_all >= edges[b]) & (gaps_all < edges[b + 1])
        centers[b] = gaps_all[mask].mean() if mask.any() else math.nan
        freqs[b] = ind_all[mask].mean() if mask.any() else math.nan
    return GammaAuditReport(
        gamma=dgp.gamma,
        stratum=stratum,
        alpha=alpha,
        p_values=p_values,
        rho_values=rho_values,
        n_qualifying=n_qual,
        rejection_rate=float((p_values < alpha).mean()),
        strict_rejection_rate=float((p_values < 0.01).mean()),
        reference_gaps=ref_gaps,
        reference_probs=ref_probs,
        empirical_gap_bins=centers,
        empirical_frequencies=freqs,
    )
