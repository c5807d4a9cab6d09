"""Debias module check battery: oracle equality, sweeps, two-step fixture.

Run sections via argv: oracle | counting | hand | sweep | twostep | all.
"""

import sys
import time

import numpy as np
from scipy.special import expit

from dosematch.cohort import Cohort, Provenance, Subject
from dosematch.debias import (
    DebiasConfig,
    build_mip,
    certify_design,
    constraint_residuals,
    design_tolerances,
    mean_dose_gap,
    phi_sweep,
    solve_mip,
    two_step_debias,
)
from dosematch.matching import DistanceSpec, strengthen


def _tol(rhs):
    return 1e-9 * (1.0 + abs(rhs))


def oracle_best(z, x, deltas, phi):
    """Exhaustive search over all partial pairings (independent oracle)."""
    n = len(z)
    p = x.shape[1]
    best = [(0, 0.0)]
    matched = np.zeros(n, dtype=bool)

    def ok(m, gap, bal):
        rhs = phi * m
        if gap < rhs - _tol(rhs):
            return False
        for i in range(p):
            if deltas[i] == np.inf:
                continue
            rhs = deltas[i] * m
            if abs(bal[i]) > rhs + _tol(rhs):
                return False
        return True

    def rec(i, count, gap, bal):
        if i == n:
            if ok(count, gap, bal):
                key = (count, round(gap, 9))
                if key > best[0]:
                    best[0] = key
            return
        if matched[i]:
            rec(i + 1, count, gap, bal)
            return
        rec(i + 1, count, gap, bal)  # leave i unmatched
        for j in range(i + 1, n):
            if matched[j]:
                continue
            matched[j] = True
            near, far = (i, j) if z[i] <= z[j] else (j, i)
            rec(
                i + 1,
                count + 1,
                gap + (z[far] - z[near]),
                bal + (x[near] - x[far]),
            )
            matched[j] = False

    rec(0, 0, 0.0, np.zeros(p))
    return best[0]


def make_cohort(z, x, treat=None, ids=None):
    n = len(z)
    if treat is None:
        treat = np.zeros(n, dtype=int)
    if ids is None:
        ids = [f"s{i:04d}" for i in range(n)]
    subs = tuple(
        Subject(
            id=ids[i],
            dose=float(z[i]),
            treatment=int(treat[i]),
            outcome=0.0,
            covariates=tuple(float(v) for v in x[i]),
        )
        for i in range(n)
    )
    names = tuple(f"x_{j + 1}" for j in range(x.shape[1]))
    return Cohort(subjects=subs, covariate_names=names,
                  provenance=Provenance(kind="generated", seed=0))


def run_oracle(trials=100):
    rng = np.random.default_rng(20250811)
    t0 = time.time()
    bad = 0
    for t in range(trials):
        n = int(rng.choice([4, 5, 6, 7, 8, 9, 10, 11, 12]))
        p = int(rng.choice([1, 2, 3]))
        z = rng.normal(size=n)
        x = rng.normal(size=(n, p))
        mean_gap = np.mean(np.abs(z[:, None] - z[None, :]))
        if rng.random() < 0.3:
            phi = 0.0
        else:
            phi = float(rng.uniform(0.0, 2.0) * mean_gap)
        deltas = np.where(
            rng.random(p) < 0.3,
            np.inf,
            np.abs(rng.normal(0.0, 0.6, p)) + 0.02,
        )
        cohort = make_cohort(z, x)
        inst = build_mip(cohort, deltas, phi)
        sol = solve_mip(inst, DebiasConfig(phi=phi, time_budget=120.0))
        oc, og = oracle_best(z, x, deltas, phi)
        if sol.objective != oc or abs(sol.total_dose_gap - og) > 1e-6:
            bad += 1
            print(
                f"  MISMATCH t={t} n={n} p={p} phi={phi:.3f}: "
                f"solver=({sol.objective}, {sol.total_dose_gap:.6f}) "
                f"oracle=({oc}, {og:.6f})"
            )
        if sol.objective:
            probs = certify_design(inst, sol.design.pairs)
            if probs:
                bad += 1
                print(f"  CERTIFY FAIL t={t}: {probs}")
    print(f"oracle: {trials - bad}/{trials} agree, {time.time() - t0:.1f}s")


def run_counting():
    rng = np.random.default_rng(7)
    z = rng.normal(size=4)
    x = rng.normal(size=(4, 2))
    inst = build_mip(make_cohort(z, x), [0.5, 0.5], 0.1)
    a, b = inst.constraint_matrix()
    assert inst.n_variables == 6, inst.n_variables
    assert inst.n_degree_rows == 4
    assert inst.n_balance_rows == 4
    assert inst.n_separation_rows == 1
    assert a.shape == (9, 6) and b.shape == (9,)
    # unconstrained: phi=0, infinite tolerances -> perfect pairing retained
    inst0 = build_mip(make_cohort(z, x), [np.inf, np.inf], 0.0)
    sol0 = solve_mip(inst0, DebiasConfig(phi=0.0))
    assert sol0.objective == 2, sol0.objective
    print("counting: ok (6 vars, 4+4+1 rows; phi=0/inf-delta keeps L/2)")


def run_hand():
    # six subjects, doses 1..6, one covariate equal to the dose rank parity
    z = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    x = np.array([[0.0], [1.0], [0.0], [1.0], [0.0], [1.0]])
    cohort = make_cohort(z, x)
    inst = build_mip(cohort, [0.5], 2.0)
    # assignment: (s0, s3), (s1, s4), (s2, s5) -> edges with those ids
    want = {("s0000", "s0003"), ("s0001", "s0004"), ("s0002", "s0005")}
    sel = [
        k
        for k in range(inst.n_variables)
        if (inst.subject_ids[inst.edges[k, 0]], inst.subject_ids[inst.edges[k, 1]]) in want
    ]
    r = constraint_residuals(inst, sel)
    # hand arithmetic: every gap is 3 -> sum 9; separation rhs 2*3=6, slack 3
    assert r.n_pairs == 3
    assert abs(r.separation_lhs - 9.0) < 1e-12
    assert abs(r.separation_rhs - 6.0) < 1e-12
    assert abs(r.separation_slack - 3.0) < 1e-12
    # covariate gaps: (0-1) + (1-0) + (0-1) = -1 -> |.|=1; rhs 0.5*3=1.5
    assert abs(r.balance_lhs[0] - 1.0) < 1e-12
    assert abs(r.balance_rhs[0] - 1.5) < 1e-12
    assert abs(r.balance_slack[0] - 0.5) < 1e-12
    assert r.degree_counts.max() == 1
    print("hand: ok (slacks match hand arithmetic)")


def make_fixture(n=200, seed=20250812):
    """Dose correlated with covariates so separation fights balance."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    z = 0.8 * x[:, 0] - 0.5 * x[:, 1] + rng.normal(size=n)
    treat = (rng.random(n) < expit(1.2 * z)).astype(int)
    return make_cohort(z, x, treat=treat)


def run_sweep():
    cohort = make_fixture()
    deltas = design_tolerances(strengthen(cohort, DistanceSpec()), cohort)
    inst = build_mip(cohort, deltas, 0.0)
    t0 = time.time()
    phis = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]
    rows = phi_sweep(
        inst, phis, DebiasConfig(phi=0.0, time_budget=20.0, restarts=3)
    )
    ok = True
    for a, b in zip(rows, rows[1:]):
        if b.n_pairs > a.n_pairs:
            ok = False
        if (
            np.isfinite(a.mean_dose_gap)
            and np.isfinite(b.mean_dose_gap)
            and b.mean_dose_gap < a.mean_dose_gap - 1e-9
        ):
            ok = False
    for r in rows:
        print(
            f"  phi={r.phi:4.1f}  pairs={r.n_pairs:3d}  "
            f"mean_gap={r.mean_dose_gap:6.3f}"
        )
    print(f"sweep: monotone={ok}, {time.time() - t0:.1f}s")


def run_twostep(k=2.0):
    cohort = make_fixture()
    t0 = time.time()
    res = two_step_debias(
        cohort,
        DistanceSpec(),
        DebiasConfig(k=k, time_budget=45.0, restarts=3),
        sink_spec=DistanceSpec(caliper_lambda=1.5, sinks=100),
    )
    dt = time.time() - t0
    probs = certify_design(res.instance, res.stage2.pairs)
    comp = res.comparison
    print(f"  columns: {comp.columns}")
    for row in comp.rows():
        print(
            "  " + row[0].ljust(16)
            + "  ".join(f"{v:8.4f}" if isinstance(v, float) else f"{v:8d}" for v in row[1:])
        )
    s1, s2 = res.stage1, res.stage2
    mid = res.sink_design
    checks = {
        "zero violations": not probs,
        "compliance up": s2.compliance_hat > s1.compliance_hat,
        "pairs between": mid.n_pairs < s2.n_pairs < s1.n_pairs,
        "balance no worse": bool(
            np.all(design_tolerances(s2, cohort) <= res.deltas + 1e-9)
        ),
        "gap floor": mean_dose_gap(s2, cohort) >= res.phi - 1e-9,
    }
    print(f"  k={k} phi={res.phi:.3f} solver={res.solution.solver} "
          f"gap_to_bound={res.solution.optimality_gap} t={dt:.1f}s")
    print(f"twostep: {checks}")


def run_determinism():
    cohort = make_fixture(n=60, seed=3)
    spec = DistanceSpec()
    cfg = DebiasConfig(k=1.6, time_budget=30.0)
    a = two_step_debias(cohort, spec, cfg)
    b = two_step_debias(cohort, spec, cfg)
    assert a.stage2.pairs == b.stage2.pairs
    assert a.solution.objective == b.solution.objective
    print(f"determinism: ok (exact={a.solution.exact}, "
          f"pairs={a.solution.objective}, nodes={a.solution.nodes_explored})")


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("counting", "all"):
        run_counting()
    if which in ("hand", "all"):
        run_hand()
    if which in ("oracle", "all"):
        run_oracle()
    if which in ("determinism", "all"):
        run_determinism()
    if which in ("sweep", "all"):
        run_sweep()
    if which in ("twostep", "all"):
        run_twostep(float(sys.argv[2]) if len(sys.argv) > 2 else 2.0)
