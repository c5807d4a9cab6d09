"""Scratch validation for the bias module."""

import math

import numpy as np

from dosematch.bias import (
    aob_estimate,
    bias_ratio,
    finite_sample_bias,
    leave_one_out_diagnostic,
    linear_imbalance_bias,
)
from dosematch.cohort import Cohort, Subject
from dosematch.inference import wald_estimate
from dosematch.matching import DistanceSpec, strengthen

rng = np.random.default_rng(42)
n = 120
beta = 0.8
delta = 0.7
z = rng.normal(0, 1.5, n)
x = rng.normal(0, 1, (n, 3))
u = (rng.random(n) < 1 / (1 + np.exp(-z))).astype(float)
dtr = (rng.random(n) < 1 / (1 + np.exp(-1.2 * z))).astype(int)
f_vals = 0.4 * x[:, 0] + np.sin(x[:, 1]) - 0.2 * x[:, 2] ** 2
r = beta * dtr + f_vals + delta * u  # noiseless outcome

subjects = tuple(
    Subject(
        id=f"s{i:04d}",
        dose=float(z[i]),
        treatment=int(dtr[i]),
        outcome=float(r[i]),
        covariates=tuple(x[i]),
    )
    for i in range(n)
)
cohort = Cohort(subjects=subjects, covariate_names=("x_1", "x_2", "x_3"))

spec0 = DistanceSpec()
spec1 = DistanceSpec(caliper_lambda=1.0, penalty=None, sinks=40)
m0 = strengthen(cohort, spec0)
m1 = strengthen(cohort, spec1)
print("compliance:", m0.compliance_hat, m1.compliance_hat)

# 1. noiseless identity: wald - beta == total
for design in (m0, m1):
    wald = wald_estimate(design, cohort)
    dec = finite_sample_bias(design, cohort, f_vals, delta, u)
    print("wald-beta", wald.beta_hat - beta, "total", dec.total)
    assert abs((wald.beta_hat - beta) - dec.total) < 1e-10

# 2. delta=0 and constant f
dec0 = finite_sample_bias(m0, cohort, f_vals, 0.0, u)
assert dec0.total == dec0.imbalance_term
dec_c = finite_sample_bias(m0, cohort, np.ones(n), delta, u)
assert dec_c.imbalance_term == 0.0

# 3. aob == finite sample total
aob = aob_estimate(m0, cohort, f_vals, delta, u)
assert abs(aob.aob - finite_sample_bias(m0, cohort, f_vals, delta, u).total) < 1e-12
print("aob fields:", aob.e_d_near, aob.e_d_far, aob.aob)

# 4. ratio invariances
r1 = bias_ratio(m0, m1, cohort, u)
r2 = bias_ratio(m0, m1, cohort, 13.7 * u)
assert abs(r1.value - r2.value) < 1e-12
assert bias_ratio(m0, m0, cohort, u).value == 1.0
assert bias_ratio(m0, m0, cohort, np.zeros(n)).degenerate
print("delta ratio:", r1.value)

# 5. linear f consistency
gamma = np.array([0.5, -1.2, 0.3])
lin = linear_imbalance_bias(m0, cohort, gamma)
dec_lin = finite_sample_bias(m0, cohort, x @ gamma, 0.0, u)
print("linear signed total", lin.signed_total, "vs", dec_lin.imbalance_term)
assert abs(lin.signed_total - dec_lin.imbalance_term) < 1e-10

# 6. leave-one-out smoke
rows = leave_one_out_diagnostic(cohort, spec0, spec1)
for row in rows:
    print(row.covariate, f"c0={row.compliance0:.3f}", f"c1={row.compliance1:.3f}",
          f"udiff0={row.udiff0:.4f}", f"udiff1={row.udiff1:.4f}",
          f"ratio={row.delta_ratio:.3f}")
print("bias checks OK")
