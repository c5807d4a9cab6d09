"""Scratch validation for the efficiency module (oracles + timings)."""

import math
import time

import numpy as np
from scipy.stats import laplace, norm

from dosematch.cohort import ComplianceMix
from dosematch.densities import custom_density, laplace_density, normal_density
from dosematch.efficiency import (
    are,
    effective_sample_size,
    psi_sign,
    psi_wilcoxon,
    required_sample_size,
    self_convolution,
    simulate_power,
    theoretical_sample_size,
)

# 1. closed forms vs direct values
nd = normal_density()
v0 = self_convolution(nd, 0.0)
print("normal conv(0)", v0, "expected", 1 / (2 * math.sqrt(math.pi)))
assert abs(v0 - 1 / (2 * math.sqrt(math.pi))) < 1e-12

ld = laplace_density()
v1 = self_convolution(ld, 1.0)
print("laplace conv(1)", v1, "expected", (1 + 1) * math.exp(-1) / 4)
assert abs(v1 - 2 * math.exp(-1) / 4) < 1e-12

# 2. quadrature fallback agrees with closed forms
nd_q = custom_density("normal-noclosed", norm(0, 1).pdf, norm(0, 1).cdf,
                      lambda size, rng: rng.normal(size=size))
ld_q = custom_density("laplace-noclosed", laplace(0, 1).pdf, laplace(0, 1).cdf,
                      lambda size, rng: rng.laplace(size=size))
for x in (0.0, 0.5, 1.0, 2.3, -1.7, 6.0):
    qn = self_convolution(nd_q, x)
    ql = self_convolution(ld_q, x)
    assert abs(qn - self_convolution(nd, x)) < 1e-8, (x, qn)
    assert abs(ql - self_convolution(ld, x)) < 1e-8, (x, ql)
    assert abs(self_convolution(nd_q, x) - self_convolution(nd_q, -x)) < 1e-10
print("quadrature fallback OK")

# 3. equal-means reductions
for dens in (nd, ld):
    for (ic, ia) in [(0.5, 0.25), (0.3, 0.0), (0.8, 0.1), (1.0, 0.0)]:
        mix = ComplianceMix(ic, ia, 1 - ic - ia, 0.7, 0.7, 0.7, error_density=dens)
        pw = psi_wilcoxon(mix)
        assert abs(pw.value - 2 * self_convolution(dens, 0.0) * ic) < 1e-10, pw.value
        ps = psi_sign(mix)
        assert abs(ps - ic * float(dens.pdf(0.0))) < 1e-12
print("equal-means reductions OK")

# psi_sign plug-in example
mix_half = ComplianceMix(0.5, 0.25, 0.25, 0, 0, 0, error_density=nd)
print("psi_sign(0.5 equal means)", psi_sign(mix_half), "expected", 0.5 / math.sqrt(2 * math.pi))

# 4. ARE examples (equal means => ratio of squared complier shares)
pairs = [((0.5, 0.6), 1.44), ((0.4, 0.7), 3.0625), ((0.3, 0.8), 64 / 9)]
for (i1, i2), expect in pairs:
    m1 = ComplianceMix(i1, (1 - i1) / 2, (1 - i1) / 2, error_density=nd)
    m2 = ComplianceMix(i2, (1 - i2) / 2, (1 - i2) / 2, error_density=nd)
    got = are(m1, m2)
    print(f"are({i1},{i2}) = {got:.6f} expected {expect:.6f}")
    assert abs(got - expect) < 1e-10
    # nuisance-independence: shuffle iota_a at fixed iota_c
    m1b = ComplianceMix(i1, 1 - i1, 0.0, error_density=nd)
    assert abs(are(m1b, m2) - got) < 1e-10
    assert abs(are(m1, m2, test="sign") - expect) < 1e-10
print("ARE examples OK")

# 5. finite-difference oracle for the general case, normal + laplace errors
CLASSES = [(0, 1, 1), (1, 1, 1), (2, 0, 1)]  # (code, d_enc ... ) placeholder


def oracle_slopes(mix, h=1e-5):
    dens = mix.error_density
    iotas = {"C": mix.iota_c, "A": mix.iota_a, "N": mix.iota_n}
    mus = {"C": mix.mu_c, "A": mix.mu_a, "N": mix.mu_n}
    d_enc = {"C": 1, "A": 1, "N": 0}
    d_ctl = {"C": 0, "A": 1, "N": 0}
    combos = []
    for k1 in "CAN":
        for k2 in "CAN":
            w = iotas[k1] * iotas[k2]
            if w > 0:
                combos.append((w, mus[k1] - mus[k2], d_enc[k1] - d_ctl[k2]))

    if dens.name.startswith("normal"):
        conv_sf = lambda t: norm(0, math.sqrt(2) * dens.sd).sf(t)
    else:
        b = dens.sd / math.sqrt(2)

        def conv_sf(t, _b=b):
            a = abs(t) / _b
            tail = (2 + a) * math.exp(-a) / 4
            return tail if t >= 0 else 1 - tail

    def phi(beta):
        tot = 0.0
        for w1, m1, s1 in combos:
            for w2, m2, s2 in combos:
                shift = m1 + m2 + beta * (s1 + s2)
                tot += w1 * w2 * conv_sf(-shift)
        return tot

    def mu_fn(beta):
        return sum(w * (1 - float(dens.cdf(-(m + beta * s)))) for w, m, s in combos)

    wilc = (phi(h) - phi(-h)) / (2 * h)
    # the density may have a kink at 0 (Laplace), making the central
    # difference of mu only first-order accurate there; use a smaller step
    hs = 1e-6
    sign = (mu_fn(hs) - mu_fn(-hs)) / (2 * hs)
    return wilc, sign


for dens in (nd, ld):
    for mix in (
        ComplianceMix(0.5, 0.25, 0.25, 0.0, 1.0, -1.0, error_density=dens),
        ComplianceMix(0.4, 0.35, 0.25, 0.3, -0.6, 1.2, error_density=dens),
        ComplianceMix(0.7, 0.0, 0.3, -0.5, 0.0, 0.9, error_density=dens),
    ):
        fd_w, fd_s = oracle_slopes(mix)
        got_w = psi_wilcoxon(mix).value
        got_s = psi_sign(mix)
        print(f"{dens.name} mix({mix.iota_c},{mix.iota_a},{mix.iota_n}) "
              f"wilc {got_w:.8f} fd {fd_w:.8f} sign {got_s:.8f} fd {fd_s:.8f}")
        assert abs(got_w - fd_w) < 1e-7, (got_w, fd_w)
        assert abs(got_s - fd_s) < 1e-6, (got_s, fd_s)
print("finite-difference oracles OK")

# 6. theoretical sample size
mix_t2 = ComplianceMix(0.5, 0.25, 0.25, error_density=nd)
print("theoretical n:", theoretical_sample_size(mix_t2, 0.1))

# 7. power timing
for n in (2590, 16):
    t0 = time.time()
    pe = simulate_power(mix_t2, n, 0.1, reps=2000, seed=7)
    print(f"power at {n}: {pe.power:.4f} (se {pe.se:.4f}) in {time.time()-t0:.2f}s")

t0 = time.time()
rep = required_sample_size(mix_t2, 0.1, reps=2000, seed=11)
print("search(2000 reps):", rep.n_pairs, "power", rep.power, "theo", rep.theoretical,
      f"in {time.time()-t0:.1f}s", "evals", len(rep.evaluations))

print("effective:", effective_sample_size(14000, 0.51), effective_sample_size(28000, 0.27))
