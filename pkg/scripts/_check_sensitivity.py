"""Scratch validation for the sensitivity module."""

import math
import warnings

import numpy as np
from scipy import stats as spstats

from dosematch.cohort import (
    Cohort,
    PartiallyLinearDgp,
    Subject,
    generate_partially_linear_cohort,
)
from dosematch.inference import pair_stats, wald_from_stats
from dosematch.matching import DistanceSpec, strengthen
from dosematch.sensitivity import (
    AuditStratum,
    ConfounderModel,
    InfeasibleZoneError,
    PowerSetting,
    SensitivityZone,
    _pooled_from_parts,
    _SigmaEngine,
    estimate_sigma,
    fit_confounder_model,
    gamma_model_audit,
    heatmap_grid,
    impute_u,
    model_implied_tau,
    pair_assignment_probability,
    pooled_ci,
    power_study,
    sensitivity_interval,
    solve_lambda0,
    standardize_residual,
    symmetric_grid,
)

rng = np.random.default_rng(7)

# ---------------------------------------------------------------------------
# 1. Pooling formulas: two-imputation hand example, evaluated exactly.
#    beta_hat=2 with corrections (1, -1) at delta=1 gives per-imputation
#    estimates (1, 3); n_pairs=4, iota=1, sigma=1 gives within 0.5 each.
# ---------------------------------------------------------------------------
iv = _pooled_from_parts(
    beta_hat=2.0,
    corr=np.array([1.0, -1.0]),
    delta=1.0,
    sigma_sq_k=np.array([1.0, 1.0]),
    n_pairs=4,
    iota=1.0,
    alpha=0.05,
)
est = iv.estimate
assert est.point == 2.0
assert abs(est.across_var - 3.0) < 1e-14
assert abs(est.within_var - 0.5) < 1e-14
assert abs(est.total_var - 3.5) < 1e-14
assert abs(est.dof - 49.0 / 36.0) < 1e-12
assert not iv.normal_fallback
q = spstats.t.ppf(0.975, 49.0 / 36.0)
assert abs((iv.upper - iv.lower) - 2 * q * math.sqrt(3.5)) < 1e-10
print("pooling hand example ok:", est)

# ---------------------------------------------------------------------------
# 2. Intercept solve vs an independent forward evaluation on 1e6 draws.
# ---------------------------------------------------------------------------
r_big = rng.standard_normal(1_000_000)
lam0 = solve_lambda0(0.01, 1.0, r_big)
med = np.median(r_big)
probs = 1.0 / (1.0 + np.exp(-(lam0 + 1.0 * r_big)))
tau_fwd = probs[r_big > med].mean() - probs[r_big < med].mean()
print("lambda0:", lam0, "forward tau:", tau_fwd)
assert abs(tau_fwd - 0.01) <= 1e-6
assert lam0 < -4.0  # low-prevalence branch

# canonical flat model + infeasibility + sign checks
assert solve_lambda0(0.0, 0.0, r_big[:1000]) == 0.0
for bad in [(0.9, 0.5), (0.3, 0.0), (-0.01, 1.0), (0.0, 1.0)]:
    try:
        solve_lambda0(bad[0], bad[1], r_big[:1000])
    except InfeasibleZoneError as exc:
        print("infeasible as expected:", bad, "->", str(exc)[:60])
    else:
        raise AssertionError(f"{bad} should be infeasible")

# negative-lambda1 branch mirrors
lam0_neg = solve_lambda0(-0.01, -1.0, r_big[:100_000])
tau_neg = model_implied_tau(lam0_neg, -1.0, r_big[:100_000])
assert abs(tau_neg + 0.01) <= 1e-6

# ---------------------------------------------------------------------------
# 3. Residualizer vs normal equations on a 50-row cohort.
# ---------------------------------------------------------------------------
n50 = 50
x50 = rng.normal(size=(n50, 3))
z50 = 1.0 + x50 @ np.array([0.5, -0.2, 0.8]) + rng.normal(size=n50)
subjects50 = tuple(
    Subject(
        id=f"c{i:03d}",
        dose=float(z50[i]),
        treatment=int(i % 2),
        outcome=float(rng.normal()),
        covariates=tuple(x50[i]),
    )
    for i in range(n50)
)
c50 = Cohort(subjects=subjects50, covariate_names=("x_1", "x_2", "x_3"))
res50 = standardize_residual(c50)
a50 = np.column_stack([np.ones(n50), x50])
coef_oracle = np.linalg.solve(a50.T @ a50, a50.T @ z50)
assert np.max(np.abs(res50.coefficients - coef_oracle)) < 1e-8
assert abs(res50.values.mean()) < 1e-10
assert abs(res50.values.var() - 1.0) < 1e-10
assert not res50.used_ridge
resid_oracle = z50 - a50 @ coef_oracle
resid_oracle = (resid_oracle - resid_oracle.mean()) / resid_oracle.std()
assert np.max(np.abs(res50.values - resid_oracle)) < 1e-8
print("residualizer matches normal equations")

# degenerate dose: exact linear function of covariates
bad_subjects = tuple(
    Subject(
        id=f"d{i:03d}",
        dose=float(2.0 * x50[i, 0]),
        treatment=0,
        outcome=0.0,
        covariates=tuple(x50[i]),
    )
    for i in range(n50)
)
c_bad = Cohort(subjects=bad_subjects, covariate_names=("x_1", "x_2", "x_3"))
try:
    standardize_residual(c_bad)
except ValueError as exc:
    print("degenerate dose raises:", str(exc)[:50])
else:
    raise AssertionError("exact linear dose must raise")

# ---------------------------------------------------------------------------
# 4. Model invariant: stored tau must be recomputable.
# ---------------------------------------------------------------------------
model = fit_confounder_model(c50, tau=0.03, lambda1=2.0)
assert abs(model.implied_tau() - 0.03) < 1e-6
try:
    ConfounderModel(lambda0=model.lambda0 + 0.5, lambda1=2.0, residual=res50, tau=0.03)
except ValueError:
    print("tau mismatch rejected")
else:
    raise AssertionError("inconsistent tau must raise")

# ---------------------------------------------------------------------------
# 5. Imputation frequencies.
# ---------------------------------------------------------------------------
spec_plain = DistanceSpec()
design50 = strengthen(c50, spec_plain)
flat = ConfounderModel(lambda0=0.0, lambda1=0.0, residual=res50, tau=None)
imp_flat = impute_u(design50, c50, flat, k=1000, seed=11)
assert abs(imp_flat.u.mean() - 0.5) < 0.01
imp_many = impute_u(design50, c50, model, k=10000, seed=12)
freq = imp_many.u.mean(axis=0)
assert np.max(np.abs(freq - model.probabilities())) < 0.02
step = ConfounderModel(lambda0=-25.0, lambda1=50.0, residual=res50, tau=None)
imp_step = impute_u(design50, c50, step, k=50, seed=13)
threshold = (res50.values > 0.5).astype(np.int8)
agreement = (imp_step.u == threshold[None, :]).mean()
print("step-limit agreement:", agreement)
assert agreement > 0.95
print("imputation frequencies ok")

# ---------------------------------------------------------------------------
# 6. delta = 0 pooled interval equals the naive Wald interval.
# ---------------------------------------------------------------------------
dgp = PartiallyLinearDgp(
    n=400, beta=0.8, treatment_rule={"rule": "logistic_dose", "xi": 1.0}
)
cohort = generate_partially_linear_cohort(dgp, seed=99)
design = strengthen(cohort, spec_plain)
residual = standardize_residual(cohort)
model_c = fit_confounder_model(residual, tau=0.01, lambda1=1.0)
imps = impute_u(design, cohort, model_c, k=50, seed=3)
naive = pooled_ci(design, cohort, imps, delta=0.0, sigma_hats=1.0, alpha=0.05)
assert naive.normal_fallback
stats = pair_stats(design, cohort)
wald = wald_from_stats(stats, sigma_hat=1.0)
zq = spstats.norm.ppf(0.975)
assert abs(naive.estimate.point - wald.beta_hat) < 1e-12
assert abs(naive.lower - (wald.beta_hat - zq * wald.sd)) < 1e-10
assert abs(naive.upper - (wald.beta_hat + zq * wald.sd)) < 1e-10
print("delta=0 equals naive Wald")

# ---------------------------------------------------------------------------
# 7. Singleton zone (0, 0, 0): interval equals the naive CI; monotonicity.
# ---------------------------------------------------------------------------
si0 = sensitivity_interval(
    design, cohort, SensitivityZone.product([0.0], [0.0], [0.0]), sigma=1.0, seed=5
)
assert abs(si0.lower - naive.lower) < 1e-10
assert abs(si0.upper - naive.upper) < 1e-10
assert not si0.gaps

zone_small = SensitivityZone.product([-0.2, 0.0, 0.2], [0.01], [1.0])
zone_large = SensitivityZone.product([-0.4, -0.2, 0.0, 0.2, 0.4], [0.01], [1.0])
assert zone_small.issubset(zone_large)
si_small = sensitivity_interval(design, cohort, zone_small, sigma=1.0, seed=5)
si_large = sensitivity_interval(design, cohort, zone_large, sigma=1.0, seed=5)
assert si_large.lower <= si_small.lower + 1e-12
assert si_large.upper >= si_small.upper - 1e-12
print("zone monotonicity ok:", si_small.hull, "within", si_large.hull)

# ---------------------------------------------------------------------------
# 8. Sigma estimation.
# ---------------------------------------------------------------------------
# noiseless linear outcome: R = 1.5 D + X @ g exactly
g = np.array([0.4, -0.3, 0.2])
nl = 400
xl = rng.normal(size=(nl, 3))
zl = rng.normal(size=nl)
dl = (rng.random(nl) < 1.0 / (1.0 + np.exp(-zl))).astype(int)
rl = 1.5 * dl + xl @ g
subs_l = tuple(
    Subject(
        id=f"l{i:04d}",
        dose=float(zl[i]),
        treatment=int(dl[i]),
        outcome=float(rl[i]),
        covariates=tuple(xl[i]),
    )
    for i in range(nl)
)
c_lin = Cohort(subjects=subs_l, covariate_names=("x_1", "x_2", "x_3"))
d_lin = strengthen(c_lin, spec_plain)
sig0 = estimate_sigma(d_lin, c_lin, method="linear_f")
print("noiseless linear_f sigma:", sig0.value)
assert sig0.value < 1e-6

# noiseless with a confounder and no covariate signal: matched_moments at
# the true (beta, delta, U) is an exact mean of squared zeros -> floor
u_true = (rng.random(nl) < 0.4).astype(float)
rl2 = 1.5 * dl + 0.7 * u_true
subs_l2 = tuple(
    Subject(
        id=f"m{i:04d}",
        dose=float(zl[i]),
        treatment=int(dl[i]),
        outcome=float(rl2[i]),
        covariates=tuple(xl[i]),
    )
    for i in range(nl)
)
c_lin2 = Cohort(subjects=subs_l2, covariate_names=("x_1", "x_2", "x_3"))
d_lin2 = strengthen(c_lin2, spec_plain)
sig_mm = estimate_sigma(
    d_lin2, c_lin2, imputation=u_true, delta=0.7, beta_hat=1.5,
    method="matched_moments",
)
print("noiseless matched_moments sigma:", sig_mm.value, "floored:", sig_mm.floored)
assert sig_mm.value < 1e-6
assert sig_mm.floored  # exact zero square lands on the floor

# 20-pair fixture: six-moment route vs direct mean of squares
ni = 20
dr_f = rng.normal(size=ni)
dd_f = rng.integers(-1, 2, size=ni).astype(float)
if dd_f.sum() == 0:
    dd_f[0] = 1.0
du_f = rng.integers(-1, 2, size=ni).astype(float)
beta_f, delta_f = 0.9, 0.4
direct = float(((dr_f - beta_f * dd_f - delta_f * du_f) ** 2).mean()) / 2.0
m_rr = float((dr_f**2).mean())
m_dd = float((dd_f**2).mean())
m_uu = float((du_f**2).mean())
m_rd = float((dr_f * dd_f).mean())
m_ru = float((dr_f * du_f).mean())
m_du = float((dd_f * du_f).mean())
six = (
    m_rr + beta_f**2 * m_dd + delta_f**2 * m_uu
    - 2 * beta_f * m_rd - 2 * delta_f * m_ru + 2 * beta_f * delta_f * m_du
) / 2.0
assert abs(direct - six) < 1e-12
# and the module agrees on a real design with hard draws
u_hard = imps.u[0].astype(float)
sig_mod = estimate_sigma(
    design, cohort, imputation=u_hard, delta=0.4, beta_hat=0.9,
    method="matched_moments",
)
by_row = {s.id: i for i, s in enumerate(cohort.subjects)}
dr_d = np.array(
    [
        cohort.subjects[by_row[a]].outcome - cohort.subjects[by_row[b]].outcome
        for a, b in design.pairs
    ]
)
dd_d = np.array(
    [
        cohort.subjects[by_row[a]].treatment - cohort.subjects[by_row[b]].treatment
        for a, b in design.pairs
    ],
    dtype=float,
)
du_d = np.array([u_hard[by_row[a]] - u_hard[by_row[b]] for a, b in design.pairs])
oracle_val = math.sqrt(
    float(((dr_d - 0.9 * dd_d - 0.4 * du_d) ** 2).mean()) / 2.0
)
assert abs(sig_mod.value - oracle_val) < 1e-10
print("matched_moments matches the direct oracle:", sig_mod.value)

# soft probabilities can go nonpositive -> floored flag reachable
p_soft = np.full(nl, 0.5)
sig_soft = estimate_sigma(
    d_lin2, c_lin2, imputation=p_soft, delta=0.0001, beta_hat=1.5,
    method="matched_moments",
)
print("soft-probability sigma:", sig_soft.value, "floored:", sig_soft.floored)

# Eq.-13-style data with sigma = 1: linear_f lands near 1
vals = []
for s in range(10):
    dgp_s = PartiallyLinearDgp(
        n=1000, beta=0.8, treatment_rule={"rule": "logistic_dose", "xi": 1.0}
    )
    c_s = generate_partially_linear_cohort(dgp_s, seed=1000 + s)
    d_s = strengthen(c_s, spec_plain)
    vals.append(estimate_sigma(d_s, c_s, method="linear_f").value)
print("linear_f sigma over 10 synthetic cohorts:", np.round(vals, 4))
assert all(0.9 <= v <= 1.1 for v in vals)

# engine reproduces estimate_sigma across deltas and imputations
engine = _SigmaEngine(design, cohort, "linear_f")
for dlt in (0.0, 0.25, -0.6):
    fast = engine.sigma_sq(imps.u, dlt)
    for kk in (0, 7, 49):
        slow = estimate_sigma(
            design, cohort, imputation=imps.u[kk].astype(float), delta=dlt,
            method="linear_f",
        ).value
        assert abs(math.sqrt(fast[kk]) - slow) < 1e-10
engine_mm = _SigmaEngine(design, cohort, "matched_moments")
for dlt in (0.0, 0.25):
    fast = engine_mm.sigma_sq(imps.u, dlt)
    for kk in (0, 7):
        slow = estimate_sigma(
            design, cohort, imputation=imps.u[kk].astype(float), delta=dlt,
            method="matched_moments",
        ).value
        assert abs(math.sqrt(fast[kk]) - slow) < 1e-10
print("sigma engine matches estimate_sigma")

# ---------------------------------------------------------------------------
# 9. Sign symmetry: flipping (delta, U) leaves corrected estimates alike.
# ---------------------------------------------------------------------------
l0, l1 = model_c.lambda0, model_c.lambda1
model_flip = ConfounderModel(lambda0=-l0, lambda1=-l1, residual=residual, tau=None)
pa = model_c.probabilities()
pb = model_flip.probabilities()
assert np.max(np.abs(pa + pb - 1.0)) < 1e-12
imp_a = impute_u(design, cohort, model_c, k=4000, seed=21)
imp_b = impute_u(design, cohort, model_flip, k=4000, seed=22)
ci_a = pooled_ci(design, cohort, imp_a, delta=0.5, sigma_hats=1.0)
ci_b = pooled_ci(design, cohort, imp_b, delta=-0.5, sigma_hats=1.0)
se = math.sqrt(ci_a.estimate.across_var / 4000 + ci_b.estimate.across_var / 4000)
print("sign symmetry points:", ci_a.estimate.point, ci_b.estimate.point)
assert abs(ci_a.estimate.point - ci_b.estimate.point) < 6 * max(se, 1e-6)

# ---------------------------------------------------------------------------
# 10. Heatmap basics on a small cohort with a clearly nonzero effect.
# ---------------------------------------------------------------------------
dgp_hm = PartiallyLinearDgp(
    n=400, beta=2.0, treatment_rule={"rule": "logistic_dose", "xi": 1.0}
)
c_hm = generate_partially_linear_cohort(dgp_hm, seed=77)
d_hm = strengthen(c_hm, spec_plain)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    grid = heatmap_grid(
        d_hm,
        c_hm,
        tau_grid=[0.01, 0.05],
        lambda1_grid=[1.0, 2.0, 3.0],
        k=20,
        seed=9,
        sigma=1.0,
        n_deltas=11,
    )
print("heatmap delta_sup (std units), taus x lambda1s:")
print(np.round(grid.delta_sup_std, 3))
assert np.all(np.isfinite(grid.delta_sup_std)), "all cells feasible here"
assert np.all(grid.delta_sup_std > 0), "a strong effect must absorb some shift"
assert not grid.capped.any()
import tempfile, os

tmp = os.path.join(tempfile.mkdtemp(), "grid.csv")
grid.to_csv(tmp)
grid2 = type(grid).from_csv(tmp)
assert np.allclose(grid.delta_sup_std, grid2.delta_sup_std, equal_nan=True)
assert grid.taus == grid2.taus and grid.lambda1s == grid2.lambda1s
print("heatmap CSV round-trips")

# ---------------------------------------------------------------------------
# 11. Power smoke run (tiny): machinery works end to end.
# ---------------------------------------------------------------------------
base = PartiallyLinearDgp(
    n=300, beta=0.8, treatment_rule={"rule": "logistic_dose", "xi": 1.0}
)
table = power_study(
    base,
    {"plain": DistanceSpec(), "strong": DistanceSpec(caliper_lambda=1.3, sinks=150)},
    [
        PowerSetting.table_row("row", beta=0.8, xi=1.0, delta_sup=0.5, lambda1=1.0),
        PowerSetting.table_row("size", beta=0.0, xi=1.0, delta_sup=0.0, lambda1=1.0),
    ],
    reps=25,
    k=20,
    seed=17,
)
for row in table.rows:
    print(
        f"  {row.label:5s} {row.design:6s} power={row.power:.2f} "
        f"bias={row.bias:.3f} sd={row.sd:.3f} iota={row.compliance:.3f}"
    )
    assert 0.0 <= row.power <= 1.0
    assert row.failures == 0
strong_row = table.cell("row", "strong")
plain_row = table.cell("row", "plain")
assert strong_row.compliance > plain_row.compliance

# ---------------------------------------------------------------------------
# 12. Audit: plug-in value, gamma=1 signal, gamma=0 level (few reps).
# ---------------------------------------------------------------------------
assert abs(pair_assignment_probability(2.0, 1.0, 1.0) - math.exp(2) / (1 + math.exp(2))) < 1e-12
from dosematch.cohort import SemiparametricDoseDgp

stratum = AuditStratum(dose_low=-10.0, dose_high=10.0, u_value=1)
audit1 = gamma_model_audit(
    SemiparametricDoseDgp(n=1200, gamma=1.0),
    DistanceSpec(block_size=200),
    stratum,
    reps=10,
    seed=31,
)
print(
    "gamma=1 audit: median p =", float(np.median(audit1.p_values)),
    "strict rate =", audit1.strict_rejection_rate,
    "mean qualifying =", audit1.n_qualifying.mean(),
)
assert audit1.strict_rejection_rate >= 0.8  # smoke bound; tests pin >= 0.95
audit0 = gamma_model_audit(
    SemiparametricDoseDgp(n=1200, gamma=0.0),
    DistanceSpec(block_size=200),
    stratum,
    reps=40,
    seed=32,
)
print("gamma=0 audit rejection at 0.05:", audit0.rejection_rate)
assert audit0.rejection_rate <= 0.2  # loose smoke bound; tests use 200 reps

# grid helper sanity
assert symmetric_grid(0.0) == (0.0,)
g21 = symmetric_grid(0.5, 21)
assert len(g21) == 21 and 0.0 in g21
assert all(abs(a + b) < 1e-18 for a, b in zip(g21, reversed(g21)))

print("ALL SENSITIVITY CHECKS PASSED")
