"""Subjects, cohorts, CSV round-trips, and seeded synthetic generators.

Cohorts are immutable after construction and safe to share across workers.
Every generator is a pure function of (spec, seed): the RNG is a
numpy Generator seeded through SeedSequence, and each field is drawn
vectorized in a fixed order (one logical stream per field, subjects in
cohort order), so identical inputs give bit-identical cohorts on any
platform.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np

from .densities import ErrorDensity, normal_density

__all__ = [
    "LatentClass",
    "Subject",
    "Provenance",
    "Cohort",
    "ComplianceMix",
    "PartiallyLinearDgp",
    "SemiparametricDoseDgp",
    "CohortValidationError",
    "load_cohort",
    "save_cohort",
    "generate_compliance_cohort",
    "generate_partially_linear_cohort",
    "generate_semiparametric_dose_cohort",
    "tilted_dose_normalizer",
    "dgp_spec_to_json",
    "dgp_spec_from_json",
]


class LatentClass(enum.Enum):
    """Compliance class; defiers are excluded by assumption."""

    COMPLIER = "complier"
    ALWAYS_TAKER = "always_taker"
    NEVER_TAKER = "never_taker"

    @property
    def d_encouraged(self) -> int:
        return 0 if self is LatentClass.NEVER_TAKER else 1

    @property
    def d_control(self) -> int:
        return 1 if self is LatentClass.ALWAYS_TAKER else 0


@dataclass(frozen=True)
class Subject:
    """One pre-matching subject.

    dose is the continuous instrument; smaller doses are the more
    encouraging ones under the near/far convention used throughout.
    latent_u, latent_class and potential_outcomes only exist on
    generated cohorts and are reserved for oracle studies.
    """

    id: str
    dose: float
    treatment: int
    outcome: float
    covariates: tuple
    latent_u: Optional[float] = None
    latent_class: Optional[LatentClass] = None
    potential_outcomes: Optional[tuple] = None

    def __post_init__(self) -> None:
        if self.treatment not in (0, 1):
            raise ValueError(f"subject {self.id}: treatment must be 0 or 1")
        if not math.isfinite(self.dose):
            raise ValueError(f"subject {self.id}: dose must be finite")


@dataclass(frozen=True)
class Provenance:
    kind: str  # "file" | "generated"
    seed: Optional[int] = None
    dgp_id: Optional[str] = None
    path: Optional[str] = None


class CohortValidationError(ValueError):
    """Raised when one or more rows fail validation; lists line numbers."""


@dataclass(frozen=True)
class Cohort:
    """An ordered, immutable collection of subjects."""

    subjects: tuple
    covariate_names: tuple
    provenance: Provenance = field(default=Provenance(kind="file"))

    def __post_init__(self) -> None:
        if len(self.subjects) < 2:
            raise ValueError("a cohort needs at least 2 subjects")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        p = len(self.covariate_names)
        for s in self.subjects:
            if len(s.covariates) != p:
                raise ValueError(
                    f"subject {s.id}: expected {p} covariates, got {len(s.covariates)}"
                )

    def __len__(self) -> int:
        return len(self.subjects)

    @cached_property
    def doses(self) -> np.ndarray:
        return np.array([s.dose for s in self.subjects], dtype=float)

    @cached_property
    def treatments(self) -> np.ndarray:
        return np.array([s.treatment for s in self.subjects], dtype=float)

    @cached_property
    def outcomes(self) -> np.ndarray:
        return np.array([s.outcome for s in self.subjects], dtype=float)

    @cached_property
    def covariate_matrix(self) -> np.ndarray:
        return np.array([s.covariates for s in self.subjects], dtype=float)

    @cached_property
    def latent_u(self) -> Optional[np.ndarray]:
        vals = [s.latent_u for s in self.subjects]
        if any(v is None for v in vals):
            return None
        return np.array(vals, dtype=float)


# ---------------------------------------------------------------------------
# DGP specifications


@dataclass(frozen=True)
class ComplianceMix:
    """Population shares and control-outcome means of the three classes."""

    iota_c: float
    iota_a: float = 0.0
    iota_n: float = 0.0
    mu_c: float = 0.0
    mu_a: float = 0.0
    mu_n: float = 0.0
    error_density: ErrorDensity = field(default_factory=normal_density)

    def __post_init__(self) -> None:
        total = self.iota_c + self.iota_a + self.iota_n
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"class shares must sum to 1, got {total!r}")
        if min(self.iota_c, self.iota_a, self.iota_n) < 0:
            raise ValueError("class shares must be nonnegative")
        if self.iota_c <= 0:
            raise ValueError("the complier share must be positive")


@dataclass(frozen=True)
class PartiallyLinearDgp:
    """Partially linear outcome model with a dose-driven treatment rule.

    outcome_form: "sin_log_sin" (0.2 x1 + 0.5 log|x2| + 0.3 sin x3),
    "sin_cube" (sin x1 + x2^3), or "linear" with explicit coefficients.
    treatment_rule: {"rule": "logistic_dose", "xi": ...} draws
    D ~ Bern(exp(xi z)/(1+exp(xi z))); {"rule": "cubic_threshold",
    "c1": ..., "c2": ..., "c3": ...} sets D = 1 when
    c1 z^3 + c2 z + 0.2 x1 + 0.4 x2 + e2 > c3, with corr(e1, e2) =
    error_corr. confounder_form: "none", "identity", "inverse_shift"
    (1/(z-1)), "exp", or "logistic_binary"; the confounder enters the
    outcome scaled by delta and is stored as latent_u. The continuous
    forms add standard-normal noise to a function of the dose;
    "logistic_binary" draws U ~ Bern(logistic(l0 + l1 zstd)) from the
    standardized dose, with l0/l1 read from confounder_params.
    """

    n: int
    beta: float
    treatment_rule: Mapping
    outcome_form: str = "sin_log_sin"
    coefficients: tuple = ()
    delta: float = 0.0
    confounder_form: str = "none"
    confounder_params: Mapping = field(default_factory=dict)
    dose_mean: float = 0.0
    dose_sd: float = 1.0
    error_corr: float = 0.0
    kind: str = field(default="partially_linear", init=False)


@dataclass(frozen=True)
class SemiparametricDoseDgp:
    """Dose model of the exclusion audit: the dose density of subject j is
    proportional to exp(chi(z, x) + gamma z u)."""

    n: int
    gamma: float
    chi_form: str = "quadratic_decay"
    p_u: float = 0.5
    n_covariates: int = 2
    kind: str = field(default="semiparametric_dose", init=False)


_OUTCOME_FORMS = {
    "sin_log_sin": lambda x: 0.2 * x[:, 0] + 0.5 * np.log(np.abs(x[:, 1])) + 0.3 * np.sin(x[:, 2]),
    "sin_cube": lambda x: np.sin(x[:, 0]) + x[:, 1] ** 3,
}

_CONFOUNDER_FORMS = {
    "identity": lambda z: z,
    "inverse_shift": lambda z: 1.0 / (z - 1.0),
    "exp": lambda z: np.exp(z),
}


def _f_of_x(spec: PartiallyLinearDgp, x: np.ndarray) -> np.ndarray:
    if spec.outcome_form == "linear":
        coef = np.asarray(spec.coefficients, dtype=float)
        if coef.shape != (x.shape[1],):
            raise ValueError("linear outcome_form needs one coefficient per covariate")
        return x @ coef
    try:
        return _OUTCOME_FORMS[spec.outcome_form](x)
    except KeyError:
        raise ValueError(f"unknown outcome_form {spec.outcome_form!r}") from None


def _covariate_count(spec: PartiallyLinearDgp) -> int:
    if spec.outcome_form == "sin_log_sin":
        return 3
    if spec.outcome_form == "sin_cube":
        return 2
    return len(spec.coefficients)


# ---------------------------------------------------------------------------
# Generators


def generate_compliance_cohort(
    mix: ComplianceMix, n: int, beta: float, seed: int
) -> Cohort:
    """Randomized-encouragement cohort of n subjects in n/2 pairs.

    Each subject's class is drawn i.i.d. from the mix, the control
    outcome is the class mean plus error-density noise, and the effect
    is proportional: r_T - r_C = beta (d_T - d_C). One member of each
    consecutive pair is encouraged at random; doses encode the
    encouragement inversely (encouraged member has dose 0, the other
    dose 1) so that the near/far convention applies downstream.
    """
    if n % 2:
        raise ValueError("n must be even: subjects come pre-paired")
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    classes = rng.choice(
        3, size=n, p=[mix.iota_c, mix.iota_a, mix.iota_n]
    )
    noise = mix.error_density.sampler(n, rng)
    first_encouraged = rng.integers(0, 2, size=n // 2)

    mu = np.array([mix.mu_c, mix.mu_a, mix.mu_n])
    class_enum = (LatentClass.COMPLIER, LatentClass.ALWAYS_TAKER, LatentClass.NEVER_TAKER)
    encouraged = np.zeros(n, dtype=bool)
    encouraged[0::2] = first_encouraged == 1
    encouraged[1::2] = first_encouraged == 0

    subjects = []
    for i in range(n):
        lc = class_enum[classes[i]]
        r_c = mu[classes[i]] + noise[i]
        r_t = r_c + beta * (lc.d_encouraged - lc.d_control)
        z = bool(encouraged[i])
        d = lc.d_encouraged if z else lc.d_control
        r = r_t if z else r_c
        subjects.append(
            Subject(
                id=f"s{i:06d}",
                dose=0.0 if z else 1.0,
                treatment=int(d),
                outcome=float(r),
                covariates=(),
                latent_class=lc,
                potential_outcomes=(float(r_t), float(r_c)),
            )
        )
    return Cohort(
        subjects=tuple(subjects),
        covariate_names=(),
        provenance=Provenance(kind="generated", seed=seed, dgp_id="compliance_mix"),
    )


def generate_partially_linear_cohort(spec: PartiallyLinearDgp, seed: int) -> Cohort:
    """Generate R = beta D + f(X) + delta U + e1 with the spec's
    treatment rule and confounder form; latents are retained."""
    n = spec.n
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    p = _covariate_count(spec)
    x = rng.normal(size=(n, p))
    z = rng.normal(spec.dose_mean, spec.dose_sd, size=n)

    rule = dict(spec.treatment_rule)
    kind = rule.get("rule")
    if kind == "logistic_dose":
        xi = float(rule["xi"])
        prob = 1.0 / (1.0 + np.exp(-xi * z))
        d = (rng.random(n) < prob).astype(int)
        e1 = rng.normal(size=n)
    elif kind == "cubic_threshold":
        c1, c2, c3 = (float(rule[k]) for k in ("c1", "c2", "c3"))
        rho = spec.error_corr
        e1 = rng.normal(size=n)
        e2 = rho * e1 + math.sqrt(max(0.0, 1.0 - rho * rho)) * rng.normal(size=n)
        score = c1 * z**3 + c2 * z + 0.2 * x[:, 0] + 0.4 * x[:, 1] + e2
        d = (score > c3).astype(int)
    else:
        raise ValueError(f"unknown treatment rule {kind!r}")

    if spec.confounder_form == "none":
        u = None
        u_term = 0.0
    elif spec.confounder_form == "logistic_binary":
        l0 = float(spec.confounder_params.get("lambda0", 0.0))
        l1 = float(spec.confounder_params.get("lambda1", 0.0))
        z_std = (z - z.mean()) / z.std()
        logit = np.clip(l0 + l1 * z_std, -700.0, 700.0)
        prob = 1.0 / (1.0 + np.exp(-logit))
        u = (rng.random(n) < prob).astype(float)
        u_term = spec.delta * u
    else:
        try:
            u_signal = _CONFOUNDER_FORMS[spec.confounder_form](z)
        except KeyError:
            raise ValueError(
                f"unknown confounder_form {spec.confounder_form!r}"
            ) from None
        u = u_signal + rng.normal(size=n)
        u_term = spec.delta * u

    r = spec.beta * d + _f_of_x(spec, x) + u_term + e1

    subjects = tuple(
        Subject(
            id=f"s{i:06d}",
            dose=float(z[i]),
            treatment=int(d[i]),
            outcome=float(r[i]),
            covariates=tuple(float(v) for v in x[i]),
            latent_u=None if u is None else float(u[i]),
        )
        for i in range(n)
    )
    return Cohort(
        subjects=subjects,
        covariate_names=tuple(f"x_{j+1}" for j in range(p)),
        provenance=Provenance(kind="generated", seed=seed, dgp_id="partially_linear"),
    )


def tilted_dose_normalizer(gamma: float, u: int, chi_form: str = "quadratic_decay") -> float:
    """Normalizing constant alpha of the tilted dose density
    exp(chi(z) + gamma z u); analytic for the quadratic-decay base."""
    if chi_form != "quadratic_decay":
        raise ValueError(f"unknown chi_form {chi_form!r}")
    # integral of exp(-z^2/2 + gamma u z) dz = sqrt(2 pi) exp((gamma u)^2 / 2)
    return 1.0 / (math.sqrt(2.0 * math.pi) * math.exp(0.5 * (gamma * u) ** 2))


def generate_semiparametric_dose_cohort(spec: SemiparametricDoseDgp, seed: int) -> Cohort:
    """Cohort whose doses follow the tilted density of the exclusion
    audit. With the quadratic-decay base the tilted density is
    N(gamma u, 1), sampled exactly. Treatment and outcome are zeroed;
    the audit never reads them."""
    if spec.chi_form != "quadratic_decay":
        raise ValueError(f"unknown chi_form {spec.chi_form!r}")
    n = spec.n
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = rng.normal(size=(n, spec.n_covariates))
    u = (rng.random(n) < spec.p_u).astype(int)
    z = rng.normal(size=n) + spec.gamma * u

    subjects = tuple(
        Subject(
            id=f"s{i:06d}",
            dose=float(z[i]),
            treatment=0,
            outcome=0.0,
            covariates=tuple(float(v) for v in x[i]),
            latent_u=float(u[i]),
        )
        for i in range(n)
    )
    return Cohort(
        subjects=subjects,
        covariate_names=tuple(f"x_{j+1}" for j in range(spec.n_covariates)),
        provenance=Provenance(kind="generated", seed=seed, dgp_id="semiparametric_dose"),
    )


# ---------------------------------------------------------------------------
# CSV ingestion / export

_DEFAULT_FIELDS = ("id", "z", "d", "r")


def load_cohort(path, schema: Optional[Mapping] = None) -> Cohort:
    """Load a cohort from a UTF-8 CSV with a header row.

    schema maps logical fields to column names: keys id, dose,
    treatment, outcome, covariates (list of columns), and optionally
    latent_u and latent_class. Without a schema the default layout is
    used: id, z, d, r, x_1..x_p, optional u and class. Rows that fail
    validation are reported with their file line numbers.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CohortValidationError(f"{path}: empty file")
        header = list(reader.fieldnames)
        rows = list(reader)

    if schema is None:
        missing = [c for c in _DEFAULT_FIELDS if c not in header]
        if missing:
            raise CohortValidationError(f"{path}: missing columns {missing}")
        xcols = sorted(
            (c for c in header if c.startswith("x_")),
            key=lambda c: int(c.split("_", 1)[1]),
        )
        schema = {
            "id": "id",
            "dose": "z",
            "treatment": "d",
            "outcome": "r",
            "covariates": xcols,
        }
        if "u" in header:
            schema["latent_u"] = "u"
        if "class" in header:
            schema["latent_class"] = "class"
    else:
        schema = dict(schema)
        needed = [schema[k] for k in ("id", "dose", "treatment", "outcome")]
        needed += list(schema.get("covariates", ()))
        missing = [c for c in needed if c not in header]
        if missing:
            raise CohortValidationError(f"{path}: missing columns {missing}")

    xcols = list(schema.get("covariates", ()))
    subjects = []
    problems = []
    for k, row in enumerate(rows):
        line = k + 2  # header is line 1
        try:
            d_raw = row[schema["treatment"]].strip()
            if d_raw not in ("0", "1"):
                raise ValueError(f"treatment must be 0 or 1, got {d_raw!r}")
            u_val = None
            if "latent_u" in schema and row.get(schema["latent_u"], "") != "":
                u_val = float(row[schema["latent_u"]])
            cls = None
            if "latent_class" in schema and row.get(schema["latent_class"], "") != "":
                cls = LatentClass(row[schema["latent_class"]])
            subjects.append(
                Subject(
                    id=row[schema["id"]],
                    dose=float(row[schema["dose"]]),
                    treatment=int(d_raw),
                    outcome=float(row[schema["outcome"]]),
                    covariates=tuple(float(row[c]) for c in xcols),
                    latent_u=u_val,
                    latent_class=cls,
                )
            )
        except (ValueError, KeyError) as exc:
            problems.append(f"line {line}: {exc}")
    if problems:
        raise CohortValidationError(f"{path}: " + "; ".join(problems))
    return Cohort(
        subjects=tuple(subjects),
        covariate_names=tuple(xcols),
        provenance=Provenance(kind="file", path=str(path)),
    )


def save_cohort(cohort: Cohort, path) -> None:
    """Export to the default CSV layout with full-precision floats so a
    round-trip reproduces every field bit-exactly."""
    has_u = cohort.latent_u is not None
    has_class = all(s.latent_class is not None for s in cohort.subjects)
    xcols = [f"x_{j+1}" for j in range(len(cohort.covariate_names))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["id", "z", "d", "r", *xcols]
        if has_u:
            header.append("u")
        if has_class:
            header.append("class")
        writer.writerow(header)
        for s in cohort.subjects:
            row = [s.id, repr(s.dose), s.treatment, repr(s.outcome)]
            row += [repr(float(v)) for v in s.covariates]
            if has_u:
                row.append(repr(float(s.latent_u)))
            if has_class:
                row.append(s.latent_class.value)
            writer.writerow(row)


# ---------------------------------------------------------------------------
# DgpSpec JSON documents


def dgp_spec_to_json(spec) -> str:
    if isinstance(spec, PartiallyLinearDgp):
        doc = {
            "kind": "partially_linear",
            "n": spec.n,
            "beta": spec.beta,
            "treatment_rule": dict(spec.treatment_rule),
            "outcome_form": spec.outcome_form,
            "coefficients": list(spec.coefficients),
            "delta": spec.delta,
            "confounder_form": spec.confounder_form,
            "confounder_params": dict(spec.confounder_params),
            "dose_mean": spec.dose_mean,
            "dose_sd": spec.dose_sd,
            "error_corr": spec.error_corr,
        }
    elif isinstance(spec, SemiparametricDoseDgp):
        doc = {
            "kind": "semiparametric_dose",
            "n": spec.n,
            "gamma": spec.gamma,
            "chi_form": spec.chi_form,
            "p_u": spec.p_u,
            "n_covariates": spec.n_covariates,
        }
    else:
        raise TypeError(f"cannot serialize {type(spec).__name__}")
    return json.dumps(doc, indent=2, sort_keys=True)


def dgp_spec_from_json(text: str):
    doc = json.loads(text)
    kind = doc.pop("kind")
    if kind == "partially_linear":
        doc["treatment_rule"] = dict(doc["treatment_rule"])
        doc["coefficients"] = tuple(doc.get("coefficients", ()))
        doc["confounder_params"] = dict(doc.get("confounder_params", {}))
        return PartiallyLinearDgp(**doc)
    if kind == "semiparametric_dose":
        return SemiparametricDoseDgp(**doc)
    raise ValueError(f"unknown DgpSpec kind {kind!r}")
