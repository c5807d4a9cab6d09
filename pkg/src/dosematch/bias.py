"""Oracle bias accounting for the Wald estimator.

Under the outcome model R = beta D + f(X) + delta U + noise, the Wald
estimator picks up two systematic errors: residual imbalance in f(X)
across the near/far groups, and the unadjusted lurking variable U.
Both enter through the same compliance denominator, so strengthening a
design can shrink one while inflating the other. The functions here
evaluate each piece exactly on a matched design given oracle (or
surrogate) f and U values; nothing is fitted silently.

Per-subject inputs (f_values, u_values) align with cohort.subjects
order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Dict, Sequence, Tuple

import numpy as np

from .cohort import Cohort
from .inference import WeakInstrumentError
from .matching import DistanceSpec, MatchedDesign, strengthen

__all__ = [
    "BiasDecomposition",
    "AobReport",
    "DeltaRatio",
    "LeaveOneOutRow",
    "LinearImbalanceReport",
    "finite_sample_bias",
    "aob_estimate",
    "bias_ratio",
    "leave_one_out_diagnostic",
    "linear_imbalance_bias",
    "save_leave_one_out_csv",
]

#: Gaps below this are treated as exactly zero when forming ratios.
_DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class BiasDecomposition:
    """Two-part bias at fixed delta.

    confounding_term is the raw U ratio; delta scales it only inside
    total, so one decomposition serves a whole range of deltas.
    """

    imbalance_term: float
    confounding_term: float
    delta: float
    total: float

    def __post_init__(self) -> None:
        expect = self.imbalance_term + self.delta * self.confounding_term
        if abs(expect - self.total) > 1e-12:
            raise ValueError("total does not match its decomposition")


@dataclass(frozen=True)
class AobReport:
    """Plug-in estimate of the limiting bias from matched group means."""

    e_f_near: float
    e_f_far: float
    e_d_near: float
    e_d_far: float
    e_u_near: float
    e_u_far: float
    delta: float
    aob: float

    def __post_init__(self) -> None:
        d_gap = self.e_d_near - self.e_d_far
        expect = (self.e_f_near - self.e_f_far) / d_gap + self.delta * (
            self.e_u_near - self.e_u_far
        ) / d_gap
        if abs(expect - self.aob) > 1e-12:
            raise ValueError("aob does not match the stored expectations")


@dataclass(frozen=True)
class DeltaRatio:
    """Ratio of confounding-bias magnitudes between two designs.

    degenerate marks the 0/0 case (reported as 1) and the zero
    denominator case (reported as inf).
    """

    value: float
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def _pair_rows(design: MatchedDesign, cohort: Cohort) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices of the encouraged and control members of each pair."""
    if not design.is_encoded:
        raise ValueError("encode encouragement before bias accounting")
    if design.n_pairs == 0:
        raise ValueError("design has no matched pairs")
    row = {s.id: i for i, s in enumerate(cohort.subjects)}
    near = np.array([row[a] for a, _ in design.pairs])
    far = np.array([row[b] for _, b in design.pairs])
    return near, far


def _per_subject(values, cohort: Cohort, label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (len(cohort),):
        raise ValueError(
            f"{label} must align with the cohort: expected {len(cohort)} "
            f"values, got shape {arr.shape}"
        )
    return arr


def finite_sample_bias(
    design: MatchedDesign,
    cohort: Cohort,
    f_values,
    delta: float,
    u_values,
) -> BiasDecomposition:
    """Exact bias of the Wald estimator on this design.

    Both terms share the summed treatment contrast as denominator, so
    on a noiseless cohort the total equals beta_hat minus the true
    beta identically.
    """
    near, far = _pair_rows(design, cohort)
    f_vals = _per_subject(f_values, cohort, "f_values")
    u_vals = _per_subject(u_values, cohort, "u_values")
    d = cohort.treatments
    s_sum = float(d[near].sum() - d[far].sum())
    if s_sum == 0.0:
        raise WeakInstrumentError("summed treatment contrast is zero")
    imbalance = float((f_vals[near] - f_vals[far]).sum()) / s_sum
    confounding = float((u_vals[near] - u_vals[far]).sum()) / s_sum
    return BiasDecomposition(
        imbalance_term=imbalance,
        confounding_term=confounding,
        delta=float(delta),
        total=imbalance + float(delta) * confounding,
    )


def aob_estimate(
    design: MatchedDesign,
    cohort: Cohort,
    f_values,
    delta: float,
    u_values,
) -> AobReport:
    """Limiting bias with group means plugged in for the expectations.

    Consistent only when the matched-group distributions and their
    sample means converge; on any finite design the value coincides
    with finite_sample_bias because the pair count cancels.
    """
    near, far = _pair_rows(design, cohort)
    f_vals = _per_subject(f_values, cohort, "f_values")
    u_vals = _per_subject(u_values, cohort, "u_values")
    d = cohort.treatments
    e_d_near = float(d[near].mean())
    e_d_far = float(d[far].mean())
    d_gap = e_d_near - e_d_far
    if d_gap == 0.0:
        raise WeakInstrumentError("matched treatment means are equal")
    e_f_near = float(f_vals[near].mean())
    e_f_far = float(f_vals[far].mean())
    e_u_near = float(u_vals[near].mean())
    e_u_far = float(u_vals[far].mean())
    aob = (e_f_near - e_f_far) / d_gap + float(delta) * (e_u_near - e_u_far) / d_gap
    return AobReport(
        e_f_near=e_f_near,
        e_f_far=e_f_far,
        e_d_near=e_d_near,
        e_d_far=e_d_far,
        e_u_near=e_u_near,
        e_u_far=e_u_far,
        delta=float(delta),
        aob=aob,
    )


def _u_bias_magnitude(design: MatchedDesign, cohort: Cohort, u_vals: np.ndarray) -> float:
    """|U gap| / |D gap| for one design; the per-unit-delta U bias."""
    near, far = _pair_rows(design, cohort)
    d = cohort.treatments
    d_gap = float(d[near].mean() - d[far].mean())
    if d_gap == 0.0:
        raise WeakInstrumentError("matched treatment means are equal")
    u_gap = float(u_vals[near].mean() - u_vals[far].mean())
    return abs(u_gap / d_gap)


def bias_ratio(
    design0: MatchedDesign,
    design1: MatchedDesign,
    cohort: Cohort,
    u_values,
) -> DeltaRatio:
    """How much more U-driven bias design1 carries than design0.

    The scale of U and the confounding coefficient both cancel, so the
    ratio is a pure property of the two designs. Values above 1 mean
    the second design amplifies the confounding bias.
    """
    u_vals = _per_subject(u_values, cohort, "u_values")
    mag0 = _u_bias_magnitude(design0, cohort, u_vals)
    mag1 = _u_bias_magnitude(design1, cohort, u_vals)
    if mag0 <= _DEGENERATE_TOL and mag1 <= _DEGENERATE_TOL:
        return DeltaRatio(value=1.0, degenerate=True)
    if mag0 <= _DEGENERATE_TOL:
        return DeltaRatio(value=float("inf"), degenerate=True)
    return DeltaRatio(value=mag1 / mag0)


@dataclass(frozen=True)
class LeaveOneOutRow:
    """Diagnostics when one covariate is hidden from both designs."""

    covariate: str
    compliance0: float
    compliance1: float
    udiff0: float
    udiff1: float
    bias0_per_delta: float
    bias1_per_delta: float
    delta_ratio: float
    degenerate: bool = False


def _without_covariate(cohort: Cohort, j: int) -> Cohort:
    names = cohort.covariate_names[:j] + cohort.covariate_names[j + 1 :]
    subjects = tuple(
        replace(s, covariates=s.covariates[:j] + s.covariates[j + 1 :])
        for s in cohort.subjects
    )
    return Cohort(subjects=subjects, covariate_names=names, provenance=cohort.provenance)


def leave_one_out_diagnostic(
    cohort: Cohort,
    spec0: DistanceSpec,
    spec1: DistanceSpec,
) -> Tuple[LeaveOneOutRow, ...]:
    """Hide each covariate in turn and compare the two designs on it.

    For every covariate j the cohort is rematched under both distance
    specifications without j, and the held-out column plays the role
    of the lurking variable: the row reports each design's compliance,
    its absolute encouraged-minus-control gap in the hidden covariate,
    the implied bias per unit of confounding, and their ratio.
    """
    if len(cohort.covariate_names) < 2:
        raise ValueError("need at least 2 covariates to leave one out")
    x = cohort.covariate_matrix
    rows = []
    for j, name in enumerate(cohort.covariate_names):
        reduced = _without_covariate(cohort, j)
        design0 = strengthen(reduced, spec0)
        design1 = strengthen(reduced, spec1)
        held_out = x[:, j]
        near0, far0 = _pair_rows(design0, reduced)
        near1, far1 = _pair_rows(design1, reduced)
        udiff0 = abs(float(held_out[near0].mean() - held_out[far0].mean()))
        udiff1 = abs(float(held_out[near1].mean() - held_out[far1].mean()))
        ratio = bias_ratio(design0, design1, reduced, held_out)
        rows.append(
            LeaveOneOutRow(
                covariate=name,
                compliance0=design0.compliance_hat,
                compliance1=design1.compliance_hat,
                udiff0=udiff0,
                udiff1=udiff1,
                bias0_per_delta=_u_bias_magnitude(design0, reduced, held_out),
                bias1_per_delta=_u_bias_magnitude(design1, reduced, held_out),
                delta_ratio=ratio.value,
                degenerate=ratio.degenerate,
            )
        )
    return tuple(rows)


def save_leave_one_out_csv(rows: Sequence[LeaveOneOutRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "covariate",
                "compliance0",
                "compliance1",
                "udiff0",
                "udiff1",
                "bias0_per_delta",
                "bias1_per_delta",
                "delta_ratio",
            ]
        )
        for row in rows:
            writer.writerow(
                [
                    row.covariate,
                    repr(row.compliance0),
                    repr(row.compliance1),
                    repr(row.udiff0),
                    repr(row.udiff1),
                    repr(row.bias0_per_delta),
                    repr(row.bias1_per_delta),
                    repr(row.delta_ratio),
                ]
            )


@dataclass(frozen=True)
class LinearImbalanceReport:
    """Per-covariate imbalance bias under a declared linear f."""

    contributions: Dict[str, float]
    signed_total: float


def linear_imbalance_bias(
    design: MatchedDesign,
    cohort: Cohort,
    gamma,
) -> LinearImbalanceReport:
    """Attribute imbalance bias to covariates when f(X) = X' gamma.

    contributions holds |gamma_j * mean gap_j / compliance| per
    covariate; signed_total sums the signed versions and equals the
    imbalance term of finite_sample_bias with f_values = X @ gamma.
    """
    coefs = np.asarray(gamma, dtype=float)
    p = len(cohort.covariate_names)
    if coefs.shape != (p,):
        raise ValueError(f"gamma must have one coefficient per covariate ({p})")
    near, far = _pair_rows(design, cohort)
    d = cohort.treatments
    d_gap = float(d[near].mean() - d[far].mean())
    if d_gap == 0.0:
        raise WeakInstrumentError("matched treatment means are equal")
    x = cohort.covariate_matrix
    gaps = x[near].mean(axis=0) - x[far].mean(axis=0)
    contributions = {
        name: abs(coefs[j] * float(gaps[j]) / d_gap)
        for j, name in enumerate(cohort.covariate_names)
    }
    signed_total = float((coefs * gaps).sum() / d_gap)
    return LinearImbalanceReport(contributions=contributions, signed_total=signed_total)
