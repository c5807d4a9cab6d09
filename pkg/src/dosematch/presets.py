"""Frozen simulation presets runnable by name.

Each preset bundles a generator spec and an analysis configuration
whose constants were calibrated once and then frozen here, so the
benchmark studies (`table2`, `table3`, `table5`, `table6`, `audit`)
are reproducible by name from the command line and from tests. The
``run_*`` functions expose ``reps``/``seed`` so smaller, faster
replications draw from the same frozen configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .bias import finite_sample_bias
from .cohort import (
    Cohort,
    ComplianceMix,
    PartiallyLinearDgp,
    SemiparametricDoseDgp,
    generate_partially_linear_cohort,
)
from .debias import DebiasConfig, TwoStepResult, two_step_debias
from .efficiency import are, required_sample_size
from .matching import DistanceSpec, strengthen
from .sensitivity import (
    AuditStratum,
    GammaAuditReport,
    PowerSetting,
    PowerTable,
    gamma_model_audit,
    power_study,
)

__all__ = [
    "PRESET_NAMES",
    "TABLE2",
    "TABLE3",
    "TABLE5",
    "TABLE6",
    "AUDIT",
    "Table2Preset",
    "Table3Preset",
    "Table5Preset",
    "Table6Preset",
    "AuditPreset",
    "run_table2",
    "run_table3",
    "run_table5",
    "run_table6",
    "run_audit",
]


# ---------------------------------------------------------------------------
# table2: strength-versus-size trade-off for the sample-size calculator


@dataclass(frozen=True)
class Table2Preset:
    """Two compliance mixes whose required sizes exhibit the ARE ratio."""

    iota_weak: float = 0.5
    iota_strong: float = 0.6
    effect: float = 0.1
    alpha: float = 0.05
    target_power: float = 0.8
    test: str = "wilcoxon"
    reps: int = 20000

    def mixes(self, iota_a: float = 0.0) -> tuple:
        """The (weak, strong) compliance mixes; ``iota_a`` splits the
        non-complier share between always- and never-takers."""
        out = []
        for iota_c in (self.iota_weak, self.iota_strong):
            iota_n = 1.0 - iota_c - iota_a
            out.append(ComplianceMix(iota_c=iota_c, iota_a=iota_a, iota_n=iota_n))
        return tuple(out)


TABLE2 = Table2Preset()


def run_table2(
    reps: Optional[int] = None, seed: int = 0, iota_a: float = 0.0
) -> dict:
    """Required sizes for both mixes plus the simulated/theoretical ratio."""
    p = TABLE2
    reps = p.reps if reps is None else reps
    weak, strong = p.mixes(iota_a)
    r_weak = required_sample_size(
        weak, p.effect, p.alpha, p.target_power, p.test, reps=reps, seed=seed
    )
    r_strong = required_sample_size(
        strong, p.effect, p.alpha, p.target_power, p.test, reps=reps, seed=seed + 1
    )
    theo = are(weak, strong, p.test)
    return {
        "weak": r_weak,
        "strong": r_strong,
        "ratio_sim": r_weak.n_pairs / r_strong.n_pairs,
        "ratio_theory": theo,
        "iota_a": iota_a,
        "reps": reps,
        "seed": seed,
    }


# ---------------------------------------------------------------------------
# table3: sensitivity-analysis power of a plain versus a strengthened design


@dataclass(frozen=True)
class Table3Preset:
    """Size and the two power-reversal settings, with frozen designs.

    The strengthened design absorbs half the cohort into sinks behind a
    dose-separation caliper; the caliper and the confounder-model
    intercepts below were calibrated against the benchmark operating
    characteristics and frozen. Intercepts are per design label because
    the strengthened design's residual spread differs slightly.
    """

    n: int = 1000
    sinks: int = 500
    caliper: float = 1.3
    block_plain: int = 250
    block_strong: int = 200
    sigma: Optional[float] = None
    sigma_method: str = "matched_moments"
    k: int = 50
    alpha: float = 0.05
    reps: int = 2000
    lambda0_case1: Mapping[str, float] = None  # type: ignore[assignment]
    lambda0_case2: Mapping[str, float] = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.lambda0_case1 is None:
            object.__setattr__(
                self,
                "lambda0_case1",
                {"plain": -3.009033203125, "strong": -3.218994140625},
            )
        if self.lambda0_case2 is None:
            object.__setattr__(
                self,
                "lambda0_case2",
                {"plain": -9.034423828125, "strong": -9.073486328125},
            )

    def dgp(self, xi: float = 1.0, beta: float = 0.0) -> PartiallyLinearDgp:
        return PartiallyLinearDgp(
            n=self.n,
            beta=beta,
            treatment_rule={"rule": "logistic_dose", "xi": xi},
            outcome_form="sin_log_sin",
        )

    def designs(self) -> dict:
        return {
            "plain": DistanceSpec(block_size=self.block_plain),
            "strong": DistanceSpec(
                caliper_lambda=self.caliper,
                sinks=self.sinks,
                block_size=self.block_strong,
            ),
        }

    def settings(self) -> list:
        return [
            PowerSetting.table_row(
                "size", beta=0.0, xi=1.0, delta_sup=0.0, lambda1=1.0
            ),
            PowerSetting.table_row(
                "case1",
                beta=0.8,
                xi=1.0,
                delta_sup=0.5,
                lambda1=1.0,
                lambda0=dict(self.lambda0_case1),
            ),
            PowerSetting.table_row(
                "case2",
                beta=4.0,
                xi=4.0,
                delta_sup=10.0,
                lambda1=6.0,
                lambda0=dict(self.lambda0_case2),
            ),
        ]


TABLE3 = Table3Preset()


def run_table3(
    reps: Optional[int] = None, seed: int = 0, settings: Optional[Sequence] = None
) -> PowerTable:
    """The three frozen settings through the full matched-power pipeline."""
    p = TABLE3
    return power_study(
        p.dgp(),
        p.designs(),
        list(p.settings() if settings is None else settings),
        reps=p.reps if reps is None else reps,
        alpha=p.alpha,
        k=p.k,
        seed=seed,
        sigma=p.sigma,
        sigma_method=p.sigma_method,
    )


# ---------------------------------------------------------------------------
# table5: who gets discarded when strengthening, and what that does to bias


@dataclass(frozen=True)
class Table5Preset:
    """Three confounder laws with opposite discard-the-extremes effects.

    Model 1: confounder follows the dose linearly; strengthening is
    bias-neutral. Model 2: confounder explodes at mid-range doses, the
    subjects sinks discard, so strengthening helps. Model 3: confounder
    explodes at extreme doses, which strengthening keeps, so it hurts.
    """

    n: int = 400
    sinks: int = 200
    caliper: float = 8.0
    penalty_mode: str = "threshold"
    beta: float = 1.0
    delta: tuple = (1.0, 1.0, 1e-6)
    reps: int = 2000

    def dgp(self, model: int) -> PartiallyLinearDgp:
        if model == 1:
            rule = {"rule": "cubic_threshold", "c1": 0.0, "c2": 1.0, "c3": 0.0}
            form, mean, sd = "identity", 0.0, 1.0
        elif model == 2:
            rule = {"rule": "cubic_threshold", "c1": 1.0, "c2": 1.0, "c3": 4.0}
            form, mean, sd = "inverse_shift", 1.0, math.sqrt(5.0)
        elif model == 3:
            rule = {"rule": "cubic_threshold", "c1": 1.0, "c2": 1.0, "c3": 4.0}
            form, mean, sd = "exp", 1.0, math.sqrt(5.0)
        else:
            raise ValueError(f"model must be 1, 2, or 3, got {model}")
        return PartiallyLinearDgp(
            n=self.n,
            beta=self.beta,
            treatment_rule=rule,
            outcome_form="sin_cube",
            delta=self.delta[model - 1],
            confounder_form=form,
            dose_mean=mean,
            dose_sd=sd,
            error_corr=0.5,
        )

    def designs(self) -> dict:
        return {
            "plain": DistanceSpec(),
            "strong": DistanceSpec(
                caliper_lambda=self.caliper,
                sinks=self.sinks,
                penalty_mode=self.penalty_mode,
            ),
        }


TABLE5 = Table5Preset()


def run_table5(
    reps: Optional[int] = None, seed: int = 0, models: Sequence[int] = (1, 2, 3)
) -> dict:
    """Per-model compliance, confounder gap, bias, and the bias ratio.

    Returns {model: {design: {compliance, u_gap, bias}, "delta_ratio"}}
    with every quantity averaged over replications before the final
    strengthened-to-plain bias ratio is formed.
    """
    p = TABLE5
    reps = p.reps if reps is None else reps
    specs = p.designs()
    out = {}
    for model in models:
        dgp = p.dgp(model)
        acc = {
            name: {"compliance": 0.0, "u_gap": 0.0, "bias": 0.0}
            for name in specs
        }
        for r in range(reps):
            cohort = generate_partially_linear_cohort(
                dgp, seed=_mix_seed(seed, 97 * model, r)
            )
            u = cohort.latent_u
            f0 = np.zeros(len(cohort))
            for name, spec in specs.items():
                design = strengthen(cohort, spec)
                dec = finite_sample_bias(design, cohort, f0, dgp.delta, u)
                idx = {s.id: i for i, s in enumerate(cohort.subjects)}
                near = np.array([idx[a] for a, _ in design.pairs])
                far = np.array([idx[b] for _, b in design.pairs])
                acc[name]["compliance"] += design.compliance_hat
                acc[name]["u_gap"] += abs(float(np.mean(u[far] - u[near])))
                acc[name]["bias"] += abs(dec.confounding_term) * dgp.delta
        for name in specs:
            for key in acc[name]:
                acc[name][key] /= reps
        acc["delta_ratio"] = (
            acc["strong"]["bias"] / acc["plain"]["bias"]
            if acc["plain"]["bias"] > 0
            else float("inf")
        )
        out[model] = acc
    return out


def _mix_seed(*parts: int) -> int:
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# table6: the two-step debiased match on a dose-confounded cohort


@dataclass(frozen=True)
class Table6Preset:
    """A 200-subject cohort where dose separation fights balance.

    Doses lean on both covariates, so forcing wider dose gaps pulls
    covariates apart; the two-step solve must discard subjects to hold
    stage-one balance, landing between the plain and sink designs.
    """

    n: int = 200
    dose_x1: float = 0.8
    dose_x2: float = -0.5
    treat_slope: float = 1.2
    k_phi: float = 2.0
    sink_caliper: float = 1.5
    sinks: int = 100
    time_budget: float = 30.0
    restarts: int = 2

    def cohort(self, seed: int = 20250812) -> Cohort:
        from scipy.special import expit

        from .cohort import Provenance, Subject

        rng = np.random.default_rng(seed)
        x = rng.normal(size=(self.n, 2))
        z = self.dose_x1 * x[:, 0] + self.dose_x2 * x[:, 1] + rng.normal(size=self.n)
        treat = (rng.random(self.n) < expit(self.treat_slope * z)).astype(int)
        subjects = tuple(
            Subject(
                id=f"s{i:04d}",
                dose=float(z[i]),
                treatment=int(treat[i]),
                outcome=0.0,
                covariates=(float(x[i, 0]), float(x[i, 1])),
            )
            for i in range(self.n)
        )
        return Cohort(
            subjects=subjects,
            covariate_names=("x_1", "x_2"),
            provenance=Provenance(kind="generated", seed=seed, dgp_id="table6"),
        )

    def config(self, workers: int = 1) -> DebiasConfig:
        return DebiasConfig(
            k=self.k_phi,
            solver="local_search",
            time_budget=self.time_budget,
            restarts=self.restarts,
            workers=workers,
        )


TABLE6 = Table6Preset()


def run_table6(seed: int = 20250812, workers: int = 1) -> TwoStepResult:
    """Stage comparison for the frozen two-step benchmark cohort."""
    p = TABLE6
    return two_step_debias(
        p.cohort(seed),
        DistanceSpec(),
        p.config(workers),
        sink_spec=DistanceSpec(caliper_lambda=p.sink_caliper, sinks=p.sinks),
    )


# ---------------------------------------------------------------------------
# audit: exclusion-principle check on a dose-structured latent model


@dataclass(frozen=True)
class AuditPreset:
    """Audit operating characteristics under violation and under null."""

    n: int = 2400
    block_size: int = 300
    dose_low: float = -50.0
    dose_high: float = 50.0
    reps: int = 200
    alpha: float = 0.05

    def dgp(self, gamma: float) -> SemiparametricDoseDgp:
        return SemiparametricDoseDgp(n=self.n, gamma=gamma)

    def spec(self) -> DistanceSpec:
        return DistanceSpec(block_size=self.block_size)

    def stratum(self) -> AuditStratum:
        return AuditStratum(
            dose_low=self.dose_low, dose_high=self.dose_high, u_value=1
        )


AUDIT = AuditPreset()


def run_audit(
    gamma: float, reps: Optional[int] = None, seed: int = 0
) -> GammaAuditReport:
    """The audit at one exclusion-violation strength ``gamma``."""
    p = AUDIT
    return gamma_model_audit(
        p.dgp(gamma),
        p.spec(),
        p.stratum(),
        reps=p.reps if reps is None else reps,
        seed=seed,
        alpha=p.alpha,
    )


PRESET_NAMES = ("table2", "table3", "table5", "table6", "audit")
