"""Two-step debiased matching: balance-no-worse, separation-no-less.

Stage one is an ordinary matched design whose per-covariate mean gaps
define tolerances. Stage two re-pairs the cohort by an integer program
that maximizes the number of retained pairs subject to (a) every
covariate mean gap staying within its stage-one tolerance and (b) the
mean dose gap reaching a floor phi, so the rebuilt design is at least
as balanced and at least as separated as the original. The solver is
self-contained: exact depth-first branch-and-bound (with a
matching-based upper bound) up to a size ceiling, and greedy
construction plus 2-swap/3-swap local search with feasibility repair
beyond it. Every returned design is certified post hoc against the
constraint rows recomputed from raw data; zero violations tolerated.
"""

from __future__ import annotations

import csv
import sys
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .blossom import min_weight_perfect_matching
from .cohort import Cohort
from .matching import (
    DistanceSpec,
    MatchedDesign,
    balance_report,
    strengthen,
)

__all__ = [
    "MipInstance",
    "DebiasConfig",
    "MipSolution",
    "ConstraintResiduals",
    "TwoStepResult",
    "StageComparison",
    "PhiSweepRow",
    "MipInfeasibleError",
    "TimeBudgetError",
    "stage1_tolerances",
    "design_tolerances",
    "mean_dose_gap",
    "build_mip",
    "solve_mip",
    "constraint_residuals",
    "certify_design",
    "two_step_debias",
    "phi_sweep",
    "save_comparison_csv",
]

_SOLVERS = ("exact_bnb", "local_search")
_REL_TOL = 1e-9


class MipInfeasibleError(RuntimeError):
    """No assignment satisfying the constraints reaches the pair floor.

    The empty assignment violates nothing, so infeasibility can only
    mean the ``min_pairs`` floor is unreachable.
    """


class TimeBudgetError(RuntimeError):
    """The time budget ran out before any assignment reached the floor."""


# ---------------------------------------------------------------------------
# instance


@dataclass(frozen=True)
class MipInstance:
    """The stage-two integer program in explicit array form.

    One binary variable per unordered subject pair (l, m), l < m,
    oriented so the lower-dose member is the encouraged ("near") one.
    Rows: each subject in at most one pair; for every covariate the
    absolute retained-pair gap sum stays within ``deltas[i]`` times the
    pair count (two one-sided rows); the dose gap sum reaches ``phi``
    times the pair count. All rows are recomputable from
    (``doses``, ``covariates``, ``deltas``, ``phi``) alone.
    """

    subject_ids: tuple
    doses: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    deltas: np.ndarray
    phi: float
    edges: np.ndarray  # (E, 2) subject indices, near first
    dose_gaps: np.ndarray  # (E,) far dose - near dose, >= 0
    cov_gaps: np.ndarray  # (E, p) near covariates - far covariates

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def n_variables(self) -> int:
        return int(self.edges.shape[0])

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def n_degree_rows(self) -> int:
        return self.n

    @property
    def n_balance_rows(self) -> int:
        return 2 * self.n_covariates

    @property
    def n_separation_rows(self) -> int:
        return 1

    def constraint_matrix(self) -> tuple:
        """Dense (A, b) with every row in A @ a <= b form.

        Row order: degree rows (one per subject), balance rows (the
        +gap and -gap side for each covariate, interleaved), then the
        separation row. Infinite tolerances produce ``-inf``
        coefficients; evaluate those rows with
        :func:`constraint_residuals`, which sums selected entries only.
        """
        e = self.n_variables
        p = self.n_covariates
        a = np.zeros((self.n + 2 * p + 1, e))
        b = np.zeros(self.n + 2 * p + 1)
        for k in range(e):
            a[self.edges[k, 0], k] = 1.0
            a[self.edges[k, 1], k] = 1.0
        b[: self.n] = 1.0
        for i in range(p):
            a[self.n + 2 * i] = self.cov_gaps[:, i] - self.deltas[i]
            a[self.n + 2 * i + 1] = -self.cov_gaps[:, i] - self.deltas[i]
        a[-1] = self.phi - self.dose_gaps
        return a, b


@dataclass(frozen=True)
class DebiasConfig:
    """Stage-two solve configuration.

    Exactly one of ``phi`` (the dose-gap floor itself) and ``k`` (a
    multiplier on the stage-one mean dose gap) may be given; with
    neither, ``k = 1`` keeps stage-one separation as the floor. The
    exact solver is honored up to ``exact_ceiling`` subjects and
    degrades to local search (with a warning) beyond it. ``workers``
    splits branch-and-bound subtrees, or local-search restarts, across
    threads sharing one incumbent; results are deterministic only in
    single-worker mode, and a wall-clock truncation can further depend
    on machine speed, so ``node_budget`` (a per-worker cap on search
    nodes) is the reproducible way to bound exact-solver work.
    """

    phi: Optional[float] = None
    k: Optional[float] = None
    solver: str = "exact_bnb"
    time_budget: float = 60.0
    min_pairs: int = 0
    exact_ceiling: int = 60
    restarts: int = 8
    seed: int = 0
    workers: int = 1
    node_budget: Optional[int] = None

    def __post_init__(self) -> None:
        if self.phi is not None and self.k is not None:
            raise ValueError("give phi or k, not both")
        if self.phi is not None and self.phi < 0:
            raise ValueError("phi must be nonnegative")
        if self.k is not None and self.k < 0:
            raise ValueError("k must be nonnegative")
        if self.solver not in _SOLVERS:
            raise ValueError(f"solver must be one of {_SOLVERS}")
        if self.time_budget <= 0:
            raise ValueError("time_budget must be positive")
        if self.min_pairs < 0:
            raise ValueError("min_pairs must be nonnegative")
        if self.exact_ceiling < 2:
            raise ValueError("exact_ceiling must be at least 2")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.node_budget is not None and self.node_budget < 1:
            raise ValueError("node_budget must be positive")

    def resolve_phi(self, stage1_gap: float) -> float:
        """The dose-gap floor, resolving ``k`` against stage one."""
        if self.phi is not None:
            return float(self.phi)
        k = 1.0 if self.k is None else self.k
        return float(k * stage1_gap)


@dataclass(frozen=True)
class MipSolution:
    """A certified stage-two design plus solve telemetry.

    ``design`` carries the retained pairs (encouraged member first);
    ``optimality_gap`` is best bound minus pairs found, ``None`` when
    no bound is available.
    """

    design: MatchedDesign
    objective: int
    total_dose_gap: float
    best_bound: Optional[int]
    optimality_gap: Optional[int]
    nodes_explored: int
    solver: str
    exact: bool

    @property
    def mean_dose_gap(self) -> float:
        if self.objective == 0:
            return float("nan")
        return self.total_dose_gap / self.objective


@dataclass(frozen=True)
class ConstraintResiduals:
    """Evaluated constraint rows for one assignment.

    Slacks are nonnegative iff the row holds; balance rows report the
    worse (absolute-value) side per covariate.
    """

    n_pairs: int
    degree_counts: np.ndarray  # per-subject pair membership
    balance_lhs: np.ndarray  # |sum of signed covariate gaps| per covariate
    balance_rhs: np.ndarray  # deltas * n_pairs
    balance_slack: np.ndarray  # rhs - lhs
    separation_lhs: float  # sum of dose gaps
    separation_rhs: float  # phi * n_pairs
    separation_slack: float  # lhs - rhs


# ---------------------------------------------------------------------------
# stage one


def design_tolerances(design: MatchedDesign, cohort: Cohort) -> np.ndarray:
    """Per-covariate absolute near/far mean gap of an existing design."""
    if not design.pairs:
        raise ValueError("design has no pairs")
    idx = {s.id: k for k, s in enumerate(cohort.subjects)}
    near = np.array([idx[a] for a, _ in design.pairs])
    far = np.array([idx[b] for _, b in design.pairs])
    x = cohort.covariate_matrix
    return np.abs(x[near].mean(axis=0) - x[far].mean(axis=0))


def stage1_tolerances(cohort: Cohort, spec: DistanceSpec) -> np.ndarray:
    """Match the cohort and return its covariate mean-gap tolerances."""
    return design_tolerances(strengthen(cohort, spec), cohort)


def mean_dose_gap(design: MatchedDesign, cohort: Cohort) -> float:
    """Mean within-pair dose gap (far minus near, positive)."""
    if not design.pairs:
        raise ValueError("design has no pairs")
    dose = {s.id: s.dose for s in cohort.subjects}
    return float(np.mean([abs(dose[b] - dose[a]) for a, b in design.pairs]))


# ---------------------------------------------------------------------------
# instance construction


def build_mip(cohort: Cohort, deltas: Sequence[float], phi: float) -> MipInstance:
    """All-pairs stage-two instance for a cohort.

    ``deltas`` may contain ``inf`` to leave a covariate unconstrained.
    Pairs are oriented with the lower-dose member first; tied doses
    fall back to index order (their gap contributes zero).
    """
    if phi < 0:
        raise ValueError("phi must be nonnegative")
    deltas = np.asarray(deltas, dtype=float)
    p = cohort.covariate_matrix.shape[1]
    if deltas.shape != (p,):
        raise ValueError(f"expected {p} tolerances, got shape {deltas.shape}")
    if not np.all(deltas >= 0):
        raise ValueError("tolerances must be nonnegative")
    n = len(cohort)
    z = cohort.doses
    x = cohort.covariate_matrix
    iu, ju = np.triu_indices(n, k=1)
    swap = z[ju] < z[iu]
    near = np.where(swap, ju, iu)
    far = np.where(swap, iu, ju)
    return MipInstance(
        subject_ids=tuple(s.id for s in cohort.subjects),
        doses=z.copy(),
        covariates=x.copy(),
        covariate_names=tuple(cohort.covariate_names),
        deltas=deltas.copy(),
        phi=float(phi),
        edges=np.column_stack([near, far]).astype(np.int64),
        dose_gaps=(z[far] - z[near]).astype(float),
        cov_gaps=(x[near] - x[far]).astype(float),
    )


# ---------------------------------------------------------------------------
# constraint evaluation and certification


def _row_tol(rhs: float) -> float:
    return _REL_TOL * (1.0 + abs(rhs))


def constraint_residuals(
    instance: MipInstance, edge_indices: Sequence[int]
) -> ConstraintResiduals:
    """Evaluate every constraint row on a set of instance edges."""
    sel = np.asarray(list(edge_indices), dtype=np.int64)
    m = len(sel)
    degree = np.zeros(instance.n, dtype=np.int64)
    if m:
        np.add.at(degree, instance.edges[sel].ravel(), 1)
    bal = instance.cov_gaps[sel].sum(axis=0) if m else np.zeros(instance.n_covariates)
    bal_rhs = instance.deltas * m if m else np.zeros(instance.n_covariates)
    gap = float(instance.dose_gaps[sel].sum()) if m else 0.0
    return ConstraintResiduals(
        n_pairs=m,
        degree_counts=degree,
        balance_lhs=np.abs(bal),
        balance_rhs=bal_rhs,
        balance_slack=bal_rhs - np.abs(bal),
        separation_lhs=gap,
        separation_rhs=instance.phi * m,
        separation_slack=gap - instance.phi * m,
    )


def certify_design(instance: MipInstance, pairs: Sequence[tuple]) -> tuple:
    """Independent constraint check of a design against raw data.

    Recomputes every row from subject doses and covariates (not from
    the instance's precomputed gap arrays) and returns one message per
    violated row; an empty tuple certifies the design.
    """
    idx = {sid: k for k, sid in enumerate(instance.subject_ids)}
    problems = []
    seen: dict = {}
    near_idx, far_idx = [], []
    for a, b in pairs:
        if a not in idx or b not in idx:
            problems.append(f"pair ({a}, {b}): unknown subject id")
            continue
        for s in (a, b):
            if s in seen:
                problems.append(f"degree: subject {s} appears in more than one pair")
            seen[s] = True
        if instance.doses[idx[a]] > instance.doses[idx[b]]:
            problems.append(
                f"orientation: pair ({a}, {b}) lists the higher dose first"
            )
        near_idx.append(idx[a])
        far_idx.append(idx[b])
    if problems:
        return tuple(problems)
    m = len(near_idx)
    if m == 0:
        return ()
    near = np.array(near_idx)
    far = np.array(far_idx)
    x = instance.covariates
    bal = (x[near] - x[far]).sum(axis=0)
    for i in range(instance.n_covariates):
        rhs = instance.deltas[i] * m
        if abs(bal[i]) > rhs + _row_tol(rhs):
            problems.append(
                f"balance[{instance.covariate_names[i]}]: |{bal[i]:.6g}| > "
                f"{instance.deltas[i]:.6g} * {m}"
            )
    gap = float((instance.doses[far] - instance.doses[near]).sum())
    rhs = instance.phi * m
    if gap < rhs - _row_tol(rhs):
        problems.append(f"separation: {gap:.6g} < {instance.phi:.6g} * {m}")
    return tuple(problems)


def _feasible(
    instance: MipInstance, m: int, gap_sum: float, bal: np.ndarray
) -> bool:
    """Feasibility of a partial assignment summarized by its sums."""
    rhs = instance.phi * m
    if gap_sum < rhs - _row_tol(rhs):
        return False
    for i in range(instance.n_covariates):
        d = instance.deltas[i]
        if d == np.inf:
            continue
        rhs = d * m
        if abs(bal[i]) > rhs + _row_tol(rhs):
            return False
    return True


# ---------------------------------------------------------------------------
# matching-based upper bound


def _max_matching_bound(n_free: int, free_edges: np.ndarray) -> int:
    """Exact maximum-cardinality matching among free subjects.

    Reduction to minimum-weight perfect matching: each free subject may
    pair with another (cost 0 if the edge is still available) or retire
    to one of ``n_free`` sinks (cost 1); sinks pair among themselves at
    cost 0. The optimum cost counts unmatched subjects, so the matching
    number is (n_free - cost) / 2.
    """
    if n_free < 2 or len(free_edges) == 0:
        return 0
    verts = np.unique(free_edges)
    f = len(verts)
    pos = {v: i for i, v in enumerate(verts)}
    size = 2 * f
    cost = np.full((size, size), np.inf)
    cost[f:, f:] = 0.0
    cost[:f, f:] = 1.0
    cost[f:, :f] = 1.0
    for a, b in free_edges:
        cost[pos[a], pos[b]] = 0.0
        cost[pos[b], pos[a]] = 0.0
    np.fill_diagonal(cost, 0.0)
    _, total = min_weight_perfect_matching(cost)
    return int(round((f - total) / 2.0))


# ---------------------------------------------------------------------------
# exact branch-and-bound


class _Incumbent:
    """Best assignment so far, shared across branch-and-bound workers.

    Preference order: more pairs, then larger total dose gap, then
    lexicographically smaller id pairs. Updates are serialized; the
    count/gap reads used for pruning are monotone, so stale reads only
    delay pruning, never break exactness.
    """

    def __init__(self, instance: MipInstance):
        self.instance = instance
        self.count = 0
        self.gap = 0.0
        self.edges: tuple = ()
        self._key: Optional[tuple] = None
        self._lock = threading.Lock()

    def _lex_key(self, edge_idx: Sequence[int]) -> tuple:
        ids = self.instance.subject_ids
        e = self.instance.edges
        return tuple(
            sorted((ids[e[k, 0]], ids[e[k, 1]]) for k in edge_idx)
        )

    def offer(self, edge_idx: Sequence[int], gap_sum: float) -> None:
        m = len(edge_idx)
        if m < self.count:
            return
        with self._lock:
            if m > self.count or gap_sum > self.gap + 1e-12:
                self.count, self.gap = m, gap_sum
                self.edges = tuple(edge_idx)
                self._key = None
                return
            if m == self.count and abs(gap_sum - self.gap) <= 1e-12:
                key = self._lex_key(edge_idx)
                if self._key is None:
                    self._key = self._lex_key(self.edges)
                if key < self._key:
                    self.edges, self._key = tuple(edge_idx), key


class _Budget:
    """Deadline and node cap, plus a flag set when any subtree is cut."""

    def __init__(self, seconds: float, node_cap: Optional[int] = None):
        self.deadline = time.monotonic() + seconds
        self.node_cap = node_cap
        self.exhausted = False

    def cut(self, nodes: int) -> bool:
        """Stop this subtree? Node cap exact, wall clock amortized."""
        if self.node_cap is not None and nodes > self.node_cap:
            self.exhausted = True
            return True
        if nodes % 256 == 0 and time.monotonic() > self.deadline:
            self.exhausted = True
            return True
        return False


def _search(
    instance: MipInstance,
    order: np.ndarray,
    start_pos: int,
    chosen: list,
    matched: np.ndarray,
    gap_sum: float,
    bal: np.ndarray,
    best: _Incumbent,
    budget: _Budget,
    counter: list,
    check_entry: bool = True,
) -> None:
    """Depth-first include/exclude search over edges in ``order``.

    ``chosen`` holds positions into ``order``; ``matched``/``bal``/
    ``gap_sum`` summarize the current assignment. Edges are visited in
    decreasing dose-gap order so the include branch drives separation
    feasibility early. The recursion is bounded by the edge count, and
    the caller raises the interpreter recursion limit accordingly.
    """
    counter[0] += 1
    if budget.cut(counter[0]):
        return
    edges = instance.edges
    gaps = instance.dose_gaps
    if (
        check_entry
        and len(chosen) >= best.count
        and _feasible(instance, len(chosen), gap_sum, bal)
    ):
        best.offer([order[k] for k in chosen], gap_sum)
    pos = start_pos
    ecount = len(order)
    while pos < ecount:
        e = order[pos]
        if not (matched[edges[e, 0]] or matched[edges[e, 1]]):
            break
        pos += 1
    if pos == ecount:
        return
    m = len(chosen)
    free = instance.n - 2 * m
    ub = m + free // 2
    if ub < best.count:
        return
    tight = ub == best.count
    remaining = ecount - pos
    if remaining < free * (free - 1) // 2:
        # edges no longer cover the free subjects completely; an exact
        # matching bound can prune where the free-count bound cannot
        live = [
            order[q]
            for q in range(pos, ecount)
            if not (matched[edges[order[q], 0]] or matched[edges[order[q], 1]])
        ]
        mb = m + _max_matching_bound(free, edges[live])
        if mb < best.count:
            return
        tight = mb == best.count
    if tight:
        # same pair count at best: worth continuing only for a larger
        # total gap; top up with the largest remaining gap values
        need = best.count - m
        ub_gap = gap_sum + float(gaps[order[pos : pos + need]].sum())
        if ub_gap < best.gap - 1e-12:
            return
    e = order[pos]
    a, b = edges[e, 0], edges[e, 1]
    # include
    matched[a] = matched[b] = True
    chosen.append(pos)
    bal += instance.cov_gaps[e]
    _search(
        instance, order, pos + 1, chosen, matched, gap_sum + gaps[e], bal,
        best, budget, counter, check_entry=True,
    )
    bal -= instance.cov_gaps[e]
    chosen.pop()
    matched[a] = matched[b] = False
    if budget.exhausted:
        return
    # exclude (the assignment is unchanged, so skip the entry re-check)
    _search(
        instance, order, pos + 1, chosen, matched, gap_sum, bal,
        best, budget, counter, check_entry=False,
    )


def _frontier(
    instance: MipInstance,
    order: np.ndarray,
    best: _Incumbent,
    target: int,
) -> list:
    """Breadth-first expansion of the search root into subtree seeds."""
    nodes = [(0, ())]
    edges = instance.edges
    while len(nodes) < target:
        grown = []
        expanded = False
        for pos, chosen in nodes:
            p = pos
            while p < len(order):
                e = order[p]
                a, b = edges[e, 0], edges[e, 1]
                used = set()
                for q in chosen:
                    used.update(edges[order[q]])
                if a not in used and b not in used:
                    break
                p += 1
            if p == len(order):
                grown.append((pos, chosen))
                continue
            expanded = True
            grown.append((p + 1, chosen + (p,)))
            grown.append((p + 1, chosen))
        nodes = grown
        if not expanded:
            break
    # score each seed's entry assignment so workers start from a real incumbent
    for pos, chosen in nodes:
        sel = [order[q] for q in chosen]
        gap = float(instance.dose_gaps[sel].sum()) if sel else 0.0
        bal = (
            instance.cov_gaps[sel].sum(axis=0)
            if sel
            else np.zeros(instance.n_covariates)
        )
        if _feasible(instance, len(sel), gap, bal):
            best.offer(sel, gap)
    return nodes


def _solve_exact(
    instance: MipInstance, config: DebiasConfig
) -> tuple:
    """Branch-and-bound; returns (incumbent, nodes, completed)."""
    order = _edge_order(instance)
    best = _Incumbent(instance)
    budget = _Budget(config.time_budget, config.node_budget)
    # Primal heuristic: a short local-search pass seeds the incumbent,
    # so bound pruning bites from the first node. The search still
    # explores everything the seeded incumbent does not dominate, so
    # exactness is unaffected.
    _solve_local(
        instance,
        config,
        best=best,
        deadline=time.monotonic() + 0.25 * config.time_budget,
        restarts=min(2, config.restarts),
    )
    counter = [0]
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, len(order) + 200))
    try:
        if config.workers == 1:
            chosen: list = []
            matched = np.zeros(instance.n, dtype=bool)
            bal = np.zeros(instance.n_covariates)
            _search(
                instance, order, 0, chosen, matched, 0.0, bal, best,
                budget, counter,
            )
        else:
            seeds = _frontier(instance, order, best, 8 * config.workers)

            def run(seed):
                pos, chosen_pos = seed
                matched = np.zeros(instance.n, dtype=bool)
                bal = np.zeros(instance.n_covariates)
                gap = 0.0
                for q in chosen_pos:
                    e = order[q]
                    matched[instance.edges[e, 0]] = True
                    matched[instance.edges[e, 1]] = True
                    bal += instance.cov_gaps[e]
                    gap += float(instance.dose_gaps[e])
                local = [0]
                _search(
                    instance, order, pos, list(chosen_pos), matched, gap,
                    bal, best, budget, local, check_entry=False,
                )
                return local[0]

            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                counter[0] += sum(pool.map(run, seeds))
    finally:
        sys.setrecursionlimit(limit)
    return best, counter[0], not budget.exhausted


def _edge_order(instance: MipInstance) -> np.ndarray:
    """Dose gap descending; id pairs break ties for determinism."""
    return np.lexsort(
        (instance.edges[:, 1], instance.edges[:, 0], -instance.dose_gaps)
    )


# ---------------------------------------------------------------------------
# local search


class _LocalState:
    """Mutable assignment with incremental constraint sums."""

    def __init__(self, instance: MipInstance):
        self.inst = instance
        self.chosen: set = set()
        self.matched = np.zeros(instance.n, dtype=bool)
        self.gap = 0.0
        self.bal = np.zeros(instance.n_covariates)

    def add(self, e: int) -> None:
        self.chosen.add(e)
        self.matched[self.inst.edges[e, 0]] = True
        self.matched[self.inst.edges[e, 1]] = True
        self.gap += float(self.inst.dose_gaps[e])
        self.bal += self.inst.cov_gaps[e]

    def remove(self, e: int) -> None:
        self.chosen.discard(e)
        self.matched[self.inst.edges[e, 0]] = False
        self.matched[self.inst.edges[e, 1]] = False
        self.gap -= float(self.inst.dose_gaps[e])
        self.bal -= self.inst.cov_gaps[e]

    def feasible(self) -> bool:
        return _feasible(self.inst, len(self.chosen), self.gap, self.bal)

    def violation(self) -> float:
        """Scaled total constraint excess; zero iff feasible."""
        m = len(self.chosen)
        v = max(0.0, self.inst.phi * m - self.gap) / (1.0 + abs(self.inst.phi))
        for i in range(self.inst.n_covariates):
            d = self.inst.deltas[i]
            if d == np.inf:
                continue
            v += max(0.0, abs(self.bal[i]) - d * m) / (1.0 + d)
        return v


def _greedy_build(state: _LocalState, order: np.ndarray) -> None:
    """Maximum matching by scanning edges in (jittered) gap order."""
    edges = state.inst.edges
    for e in order:
        a, b = edges[e, 0], edges[e, 1]
        if not (state.matched[a] or state.matched[b]):
            state.add(e)


def _repair(state: _LocalState, deadline: float) -> None:
    """Drop or rewire pairs until every constraint row holds.

    Each round tries the single change with the largest violation
    decrease: re-pairing the members of two chosen pairs, or dropping
    one pair. Dropping everything is feasible, so this terminates.
    """
    inst = state.inst
    edge_of = {}
    for e in range(inst.n_variables):
        a, b = inst.edges[e, 0], inst.edges[e, 1]
        edge_of[(int(a), int(b))] = e
        edge_of[(int(b), int(a))] = e
    while not state.feasible():
        if time.monotonic() > deadline:
            while not state.feasible():
                worst = _worst_pair(state)
                state.remove(worst)
            return
        base = state.violation()
        # require strictly positive gain so zero-gain swaps cannot cycle;
        # the fallback drop below always makes progress toward empty
        best_move, best_score = None, 1e-12
        chosen = sorted(state.chosen)
        for ci in range(len(chosen)):
            e1 = chosen[ci]
            state.remove(e1)
            gain = base - state.violation()
            if gain > best_score:
                best_move, best_score = ("drop", e1), gain
            # rewire with a later pair: members can swap partners
            for e2 in chosen[ci + 1 :]:
                state.remove(e2)
                quad = [
                    int(inst.edges[e1, 0]), int(inst.edges[e1, 1]),
                    int(inst.edges[e2, 0]), int(inst.edges[e2, 1]),
                ]
                for w, x, y, z in (
                    (0, 2, 1, 3), (0, 3, 1, 2),
                ):
                    f1 = edge_of[(quad[w], quad[x])]
                    f2 = edge_of[(quad[y], quad[z])]
                    state.add(f1)
                    state.add(f2)
                    gain = base - state.violation()
                    if gain > best_score:
                        best_move, best_score = ("swap", e1, e2, f1, f2), gain
                    state.remove(f1)
                    state.remove(f2)
                state.add(e2)
            state.add(e1)
        if best_move is None:
            state.remove(_worst_pair(state))
            continue
        if best_move[0] == "drop":
            state.remove(best_move[1])
        else:
            _, e1, e2, f1, f2 = best_move
            state.remove(e1)
            state.remove(e2)
            state.add(f1)
            state.add(f2)


def _worst_pair(state: _LocalState) -> int:
    """The chosen pair whose removal lowers the violation most."""
    best_e, best_v = None, np.inf
    for e in sorted(state.chosen):
        state.remove(e)
        v = state.violation()
        state.add(e)
        if v < best_v:
            best_e, best_v = e, v
    return best_e


def _improve(state: _LocalState, order: np.ndarray, deadline: float) -> None:
    """Feasibility-preserving adds and pair-count-raising swaps."""
    inst = state.inst
    edges = inst.edges
    by_pair = {}
    for e in range(inst.n_variables):
        a, b = int(edges[e, 0]), int(edges[e, 1])
        by_pair[(a, b)] = e
        by_pair[(b, a)] = e
    improved = True
    while improved and time.monotonic() <= deadline:
        improved = False
        # feasible single adds, largest gap first
        for e in order:
            a, b = edges[e, 0], edges[e, 1]
            if state.matched[a] or state.matched[b]:
                continue
            state.add(e)
            if state.feasible():
                improved = True
            else:
                state.remove(e)
        if improved:
            continue
        # 2-swap: break one pair, pair both members with free subjects
        free = [i for i in range(inst.n) if not state.matched[i]]
        if len(free) < 2:
            break
        for e1 in sorted(state.chosen):
            a, b = int(edges[e1, 0]), int(edges[e1, 1])
            state.remove(e1)
            done = False
            for i, c in enumerate(free):
                for d in free[i + 1 :]:
                    for f1, f2 in (
                        (by_pair[(a, c)], by_pair[(b, d)]),
                        (by_pair[(a, d)], by_pair[(b, c)]),
                    ):
                        state.add(f1)
                        state.add(f2)
                        if state.feasible():
                            done = True
                            break
                        state.remove(f1)
                        state.remove(f2)
                    if done:
                        break
                if done:
                    break
            if done:
                improved = True
                break
            state.add(e1)
            if time.monotonic() > deadline:
                return
        if improved:
            continue
        # 3-swap: break two pairs, rebuild three from their members
        # plus two free subjects
        done = False
        chosen = sorted(state.chosen)
        for ci in range(len(chosen)):
            e1 = chosen[ci]
            for e2 in chosen[ci + 1 :]:
                quad = [
                    int(edges[e1, 0]), int(edges[e1, 1]),
                    int(edges[e2, 0]), int(edges[e2, 1]),
                ]
                state.remove(e1)
                state.remove(e2)
                for i, c in enumerate(free):
                    for d in free[i + 1 :]:
                        six = quad + [c, d]
                        for pat in _THREE_WAY:
                            f = [
                                by_pair[(six[pat[0]], six[pat[1]])],
                                by_pair[(six[pat[2]], six[pat[3]])],
                                by_pair[(six[pat[4]], six[pat[5]])],
                            ]
                            if len(set(f)) < 3:
                                continue
                            for fe in f:
                                state.add(fe)
                            if state.feasible():
                                done = True
                                break
                            for fe in f:
                                state.remove(fe)
                        if done:
                            break
                    if done or time.monotonic() > deadline:
                        break
                if done:
                    break
                state.add(e1)
                state.add(e2)
                if time.monotonic() > deadline:
                    return
            if done:
                break
        improved = done


def _six_pairings() -> tuple:
    """The 15 ways to pair six labeled positions, as index six-tuples."""
    out = []
    for a in range(1, 6):
        rest = [x for x in range(1, 6) if x != a]
        for b2 in rest[1:]:
            others = [x for x in rest[1:] if x != b2]
            out.append((0, a, rest[0], b2, others[0], others[1]))
    return tuple(out)


_THREE_WAY = _six_pairings()


def _solve_local(
    instance: MipInstance,
    config: DebiasConfig,
    best: Optional[_Incumbent] = None,
    deadline: Optional[float] = None,
    restarts: Optional[int] = None,
) -> tuple:
    """Greedy + repair + swap improvement; returns (incumbent, restarts).

    ``best``/``deadline``/``restarts`` let the exact solver reuse this
    as its seeding heuristic on a shared incumbent and budget slice.
    """
    if best is None:
        best = _Incumbent(instance)
    if deadline is None:
        deadline = time.monotonic() + config.time_budget
    if restarts is None:
        restarts = config.restarts
    base_order = _edge_order(instance)

    def one_restart(r: int) -> None:
        if time.monotonic() > deadline:
            return
        if r == 0:
            order = base_order
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, r))
            )
            noise = rng.normal(
                0.0, 0.25 * (instance.dose_gaps.std() + 1e-12),
                instance.n_variables,
            )
            order = np.lexsort(
                (
                    instance.edges[:, 1],
                    instance.edges[:, 0],
                    -(instance.dose_gaps + noise),
                )
            )
        state = _LocalState(instance)
        _greedy_build(state, order)
        _repair(state, deadline)
        _improve(state, base_order, deadline)
        if state.feasible():
            best.offer(sorted(state.chosen), state.gap)

    if config.workers == 1:
        for r in range(restarts):
            one_restart(r)
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            list(pool.map(one_restart, range(restarts)))
    return best, restarts


# ---------------------------------------------------------------------------
# public solve


def _design_from_edges(
    instance: MipInstance, edge_idx: Sequence[int]
) -> MatchedDesign:
    """Encoded design (near member first) from instance edge indices."""
    ids = instance.subject_ids
    pairs = sorted(
        ((ids[instance.edges[k, 0]], ids[instance.edges[k, 1]]) for k in edge_idx),
    )
    used = {s for p in pairs for s in p}
    dropped = frozenset(s for s in ids if s not in used)
    return MatchedDesign(
        pairs=tuple(pairs),
        encouraged_first=tuple(True for _ in pairs),
        dropped=dropped,
        total_distance=0.0,
        compliance_hat=None,
    )


def _fill_compliance(
    design: MatchedDesign, cohort: Cohort
) -> MatchedDesign:
    treat = {s.id: s.treatment for s in cohort.subjects}
    if design.pairs:
        s_vals = [treat[a] - treat[b] for a, b in design.pairs]
        comp = float(abs(np.mean(s_vals)))
    else:
        comp = 0.0
    return MatchedDesign(
        pairs=design.pairs,
        encouraged_first=design.encouraged_first,
        dropped=design.dropped,
        total_distance=design.total_distance,
        compliance_hat=comp,
    )


def solve_mip(instance: MipInstance, config: DebiasConfig) -> MipSolution:
    """Maximize retained pairs subject to the instance's rows.

    Exact branch-and-bound up to ``config.exact_ceiling`` subjects
    (requests beyond it degrade to local search with a warning). Ties
    in pair count prefer larger total dose gap, then lexicographic
    ids. The returned design is certified against an independent
    recomputation of every constraint row; a certification failure is
    a solver bug and raises ``RuntimeError``.
    """
    use_exact = config.solver == "exact_bnb"
    if use_exact and instance.n > config.exact_ceiling:
        warnings.warn(
            f"{instance.n} subjects exceed the exact-solver ceiling "
            f"{config.exact_ceiling}; using local search",
            stacklevel=2,
        )
        use_exact = False
    if use_exact:
        best, nodes, completed = _solve_exact(instance, config)
        # a truncated search still has the root matching bound
        bound = best.count if completed else instance.n // 2
        label = "exact_bnb"
        exact = completed
    else:
        best, nodes = _solve_local(instance, config)
        bound = instance.n // 2
        label = "local_search"
        exact = False
    if best.count < config.min_pairs:
        detail = (
            f"best assignment keeps {best.count} pairs, below the "
            f"floor of {config.min_pairs}"
        )
        if exact:
            raise MipInfeasibleError(detail + " (search exhausted)")
        raise TimeBudgetError(detail + " (search truncated)")
    design = _design_from_edges(instance, best.edges)
    problems = certify_design(instance, design.pairs)
    if problems:
        raise RuntimeError(
            "solver returned an uncertifiable design: " + "; ".join(problems)
        )
    gap = None if bound is None else bound - best.count
    return MipSolution(
        design=design,
        objective=best.count,
        total_dose_gap=best.gap,
        best_bound=bound,
        optimality_gap=gap,
        nodes_explored=nodes,
        solver=label,
        exact=exact,
    )


# ---------------------------------------------------------------------------
# the two-step pipeline


@dataclass(frozen=True)
class StageComparison:
    """Std-diff and compliance columns for each design, table style."""

    columns: tuple  # design labels
    n_pairs: tuple
    compliance: tuple
    mean_dose_gaps: tuple
    covariate_names: tuple
    std_diffs: tuple  # one tuple per design, aligned with covariate_names

    def rows(self) -> list:
        out = []
        for i, name in enumerate(self.covariate_names):
            out.append(
                (f"std_diff[{name}]",)
                + tuple(sd[i] for sd in self.std_diffs)
            )
        out.append(("compliance",) + self.compliance)
        out.append(("mean_dose_gap",) + self.mean_dose_gaps)
        out.append(("pairs",) + self.n_pairs)
        return out


@dataclass(frozen=True)
class TwoStepResult:
    """Stage-one and stage-two designs plus the comparison table."""

    stage1: MatchedDesign
    stage2: MatchedDesign
    solution: MipSolution
    instance: MipInstance
    deltas: np.ndarray
    phi: float
    comparison: StageComparison
    sink_design: Optional[MatchedDesign] = None


def _comparison(
    cohort: Cohort,
    labeled: Sequence[tuple],
) -> StageComparison:
    reports: list = []
    gaps = []
    for _, design in labeled:
        reports.append(balance_report(design, cohort))
        gaps.append(mean_dose_gap(design, cohort))
    return StageComparison(
        columns=tuple(lbl for lbl, _ in labeled),
        n_pairs=tuple(d.n_pairs for _, d in labeled),
        compliance=tuple(r.compliance_hat for r in reports),
        mean_dose_gaps=tuple(gaps),
        covariate_names=reports[0].covariate_names,
        std_diffs=tuple(r.std_diff for r in reports),
    )


def two_step_debias(
    cohort: Cohort,
    spec: DistanceSpec,
    config: DebiasConfig,
    sink_spec: Optional[DistanceSpec] = None,
) -> TwoStepResult:
    """Stage-one match, tolerance extraction, stage-two re-solve.

    The stage-two design keeps every covariate mean gap within the
    stage-one gaps while pushing the mean dose gap to at least the
    resolved floor. ``sink_spec`` adds an optional middle column (a
    sink-strengthened design) to the comparison table.
    """
    stage1 = strengthen(cohort, spec)
    deltas = design_tolerances(stage1, cohort)
    phi = config.resolve_phi(mean_dose_gap(stage1, cohort))
    instance = build_mip(cohort, deltas, phi)
    solution = solve_mip(instance, config)
    stage2 = _fill_compliance(solution.design, cohort)
    labeled = [("stage_one", stage1)]
    sink_design = None
    if sink_spec is not None:
        sink_design = strengthen(cohort, sink_spec)
        labeled.append(("sink", sink_design))
    labeled.append(("two_stage", stage2))
    comparison = _comparison(cohort, labeled)
    return TwoStepResult(
        stage1=stage1,
        stage2=stage2,
        solution=MipSolution(
            design=stage2,
            objective=solution.objective,
            total_dose_gap=solution.total_dose_gap,
            best_bound=solution.best_bound,
            optimality_gap=solution.optimality_gap,
            nodes_explored=solution.nodes_explored,
            solver=solution.solver,
            exact=solution.exact,
        ),
        instance=instance,
        deltas=deltas,
        phi=phi,
        comparison=comparison,
        sink_design=sink_design,
    )


# ---------------------------------------------------------------------------
# the phi trade-off sweep


@dataclass(frozen=True)
class PhiSweepRow:
    """One point on the separation/sample-size trade-off curve."""

    phi: float
    n_pairs: int
    mean_dose_gap: float
    total_dose_gap: float


def phi_sweep(
    instance: MipInstance, phis: Sequence[float], config: DebiasConfig
) -> list:
    """Best-known solutions across a grid of separation floors.

    Each floor is solved on its own instance; every solution found
    anywhere on the grid is then offered to every floor it satisfies,
    and each row reports the best candidate (more pairs, then more
    total gap). Solutions feasible at a high floor remain feasible at
    lower ones, so the reported curve is weakly monotone: pair count
    non-increasing and mean gap non-decreasing in phi. Rows whose best
    candidate is empty report a ``nan`` mean gap.
    """
    solutions = []
    for phi in phis:
        inst = MipInstance(
            subject_ids=instance.subject_ids,
            doses=instance.doses,
            covariates=instance.covariates,
            covariate_names=instance.covariate_names,
            deltas=instance.deltas,
            phi=float(phi),
            edges=instance.edges,
            dose_gaps=instance.dose_gaps,
            cov_gaps=instance.cov_gaps,
        )
        sol = solve_mip(inst, config)
        solutions.append(sol)
    rows = []
    for phi in phis:
        cand = []
        for sol in solutions:
            m = sol.objective
            rhs = float(phi) * m
            if sol.total_dose_gap >= rhs - _row_tol(rhs):
                cand.append((m, sol.total_dose_gap))
        m, total = max(cand) if cand else (0, 0.0)
        rows.append(
            PhiSweepRow(
                phi=float(phi),
                n_pairs=m,
                mean_dose_gap=total / m if m else float("nan"),
                total_dose_gap=total,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# serialization


def save_comparison_csv(comparison: StageComparison, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity"] + list(comparison.columns))
        for row in comparison.rows():
            w.writerow(list(row))
