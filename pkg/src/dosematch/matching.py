"""Near/far matched designs via optimal non-bipartite matching.

Builds covariate distance matrices with dose-separation penalties,
appends sinks that absorb hard-to-separate subjects, solves the
minimum-weight perfect matching, and orients each pair so that the
lower-dose (encouraged) member comes first. Balance diagnostics follow
the usual matched-study table layout: near/far group means plus
absolute standardized differences against the pre-matching spread.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy.stats import rankdata

from .blossom import MatchingInfeasibleError, min_weight_perfect_matching
from .cohort import Cohort

__all__ = [
    "DistanceSpec",
    "DistanceMatrix",
    "MatchedDesign",
    "BalanceReport",
    "DoseTieError",
    "MatchingInfeasibleError",
    "build_distance_matrix",
    "solve_nonbipartite",
    "encode_encouragement",
    "balance_report",
    "strengthen",
    "design_from_pairs",
    "save_design_csv",
    "load_design_csv",
    "save_balance_csv",
]

_METRICS = ("rank_mahalanobis", "mahalanobis", "euclidean")
_PENALTY_MODES = ("threshold", "shortfall")


class DoseTieError(ValueError):
    """A matched pair has identical doses and ties are forbidden."""


@dataclass(frozen=True)
class DistanceSpec:
    """Configuration for distance construction and strengthening.

    Parameters
    ----------
    covariate_metric:
        One of ``rank_mahalanobis`` (robust default), ``mahalanobis``,
        or ``euclidean``. The Mahalanobis variants return quadratic-form
        distances.
    caliper_lambda:
        Dose caliper Λ: candidate pairs whose doses differ by at most Λ
        (non-strict) are penalized.
    penalty:
        Penalty added to within-caliper pairs. ``None`` picks
        1000 x (max finite covariate distance + 1), which guarantees
        penalized edges are never chosen when avoidable.
    sinks:
        Number of sinks e. Sinks are at distance 0 from every subject
        and infinity from each other, so an optimal solution uses them
        to delete exactly e subjects.
    forbid_dose_ties:
        If set, a within-pair dose tie raises instead of dropping the
        pair.
    penalty_mode:
        ``threshold`` applies the full penalty inside the caliper;
        ``shortfall`` scales it by (Λ - |ΔZ|)/Λ so nearly-separated
        pairs are penalized less. Requires Λ > 0.
    block_size:
        If set, matching is solved exactly within blocks of roughly
        this many subjects (grouped along the leading principal
        component of the covariates, sinks apportioned per block)
        instead of globally. A speed/optimality trade for simulation
        work; leave ``None`` for the exact global solution.
    """

    covariate_metric: str = "rank_mahalanobis"
    caliper_lambda: float = 0.0
    penalty: Optional[float] = None
    sinks: int = 0
    forbid_dose_ties: bool = False
    penalty_mode: str = "threshold"
    block_size: Optional[int] = None

    def __post_init__(self) -> None:
        if self.covariate_metric not in _METRICS:
            raise ValueError(
                f"covariate_metric must be one of {_METRICS}, "
                f"got {self.covariate_metric!r}"
            )
        if self.penalty_mode not in _PENALTY_MODES:
            raise ValueError(
                f"penalty_mode must be one of {_PENALTY_MODES}, "
                f"got {self.penalty_mode!r}"
            )
        if self.caliper_lambda < 0:
            raise ValueError("caliper_lambda must be nonnegative")
        if self.penalty is not None and self.penalty <= 0:
            raise ValueError("penalty must be positive")
        if self.sinks < 0:
            raise ValueError("sinks must be nonnegative")
        if self.penalty_mode == "shortfall" and self.caliper_lambda <= 0:
            raise ValueError("shortfall penalties need caliper_lambda > 0")
        if self.block_size is not None and self.block_size < 4:
            raise ValueError("block_size must be at least 4")


@dataclass(eq=False)
class DistanceMatrix:
    """A (2I + e)-square distance matrix with sinks appended last."""

    values: np.ndarray
    sink_indices: tuple
    subject_ids: tuple
    doses: np.ndarray

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)


@dataclass(frozen=True)
class MatchedDesign:
    """Pairs of subject ids plus bookkeeping from the solve.

    ``pairs`` lists retained pairs; after encouragement encoding the
    first member of each pair is the one with the smaller dose and
    ``encouraged_first`` is all-True. ``dropped`` holds ids matched to
    sinks (or removed as dose ties). ``total_distance`` sums matched
    subject-subject distances only. ``compliance_hat`` is the absolute
    mean of (D_encouraged - D_control) over pairs, available once
    encouragement is encoded.
    """

    pairs: tuple
    encouraged_first: Optional[tuple]
    dropped: frozenset
    total_distance: float
    compliance_hat: Optional[float] = None

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def is_encoded(self) -> bool:
        return self.encouraged_first is not None


@dataclass(frozen=True)
class BalanceReport:
    """Near/far group means and absolute standardized differences."""

    dose_near: float
    dose_far: float
    covariate_names: tuple
    mean_near: tuple
    mean_far: tuple
    std_diff: tuple
    compliance_hat: float
    zero_sd_flags: tuple = field(default_factory=tuple)

    def rows(self) -> list:
        """Table rows, dose first, then one row per covariate."""
        out = [("dose", self.dose_near, self.dose_far, float("nan"))]
        for i, name in enumerate(self.covariate_names):
            out.append((name, self.mean_near[i], self.mean_far[i], self.std_diff[i]))
        return out


# ---------------------------------------------------------------------------
# distance construction


def _rank_transform(x: np.ndarray) -> np.ndarray:
    """Column-wise average ranks (ties averaged)."""
    return np.column_stack([rankdata(x[:, j], method="average") for j in range(x.shape[1])])


def _vc_inverse(x: np.ndarray, metric: str) -> np.ndarray:
    """Inverse dispersion matrix for the quadratic-form distance."""
    n, p = x.shape
    if metric == "rank_mahalanobis":
        vc = np.cov(x, rowvar=False).reshape(p, p)
        # rescale variances to the untied-uniform rank variance so a
        # heavily tied column does not get extra leverage
        target = n * (n + 1) / 12.0  # variance of 1..n with ddof=1
        sd = np.sqrt(np.diag(vc))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = vc / np.outer(sd, sd)
        corr[~np.isfinite(corr)] = 0.0
        np.fill_diagonal(corr, 1.0)
        vc = corr * target
    else:
        vc = np.cov(x, rowvar=False).reshape(p, p)
    if not np.all(np.isfinite(vc)):
        raise ValueError("covariance of covariates is not finite")
    try:
        cond_bad = np.linalg.cond(vc) > 1e12
    except np.linalg.LinAlgError:
        cond_bad = True
    if cond_bad:
        vc = vc + np.eye(p) * (1e-8 * np.trace(vc) / p + 1e-12)
    return np.linalg.inv(vc)


def _pairwise_quadratic(x: np.ndarray, vc_inv: np.ndarray) -> np.ndarray:
    """d(i,j) = (x_i - x_j)' VC^{-1} (x_i - x_j) for all pairs."""
    m = x @ vc_inv @ x.T
    diag = np.diag(m)
    d = diag[:, None] + diag[None, :] - 2.0 * m
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _covariate_distances(cohort: Cohort, metric: str) -> np.ndarray:
    x = cohort.covariate_matrix
    n, p = x.shape
    if n < 2:
        raise ValueError("need at least 2 subjects")
    if metric == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))
    if n <= p:
        raise ValueError(
            f"covariance not estimable: {n} subjects for {p} covariates"
        )
    xt = _rank_transform(x) if metric == "rank_mahalanobis" else x
    return _pairwise_quadratic(xt, _vc_inverse(xt, metric))


def _dose_penalties(
    doses: np.ndarray, spec: DistanceSpec, penalty: float
) -> np.ndarray:
    gap = np.abs(doses[:, None] - doses[None, :])
    if spec.penalty_mode == "threshold":
        pen = penalty * (gap <= spec.caliper_lambda)
    else:
        pen = penalty * np.clip(1.0 - gap / spec.caliper_lambda, 0.0, 1.0)
    np.fill_diagonal(pen, 0.0)
    return pen


def _resolve_sinks(n: int, sinks: int) -> int:
    """Actual sink count, adding one if needed to make the order even."""
    e = sinks
    if (n + e) % 2 == 1:
        warnings.warn(
            f"odd node count ({n} subjects + {e} sinks); adding one extra sink",
            stacklevel=3,
        )
        e += 1
    return e


def build_distance_matrix(cohort: Cohort, spec: DistanceSpec) -> DistanceMatrix:
    """Covariate distances plus caliper penalties, sinks appended.

    Entry (l, m) for subjects is the covariate distance plus the
    penalty whenever |Z_l - Z_m| falls inside the caliper. Sinks sit at
    distance 0 from every subject and infinity from one another.
    """
    cov = _covariate_distances(cohort, spec.covariate_metric)
    n = cov.shape[0]
    max_fin = float(cov.max())
    penalty = spec.penalty if spec.penalty is not None else 1000.0 * (max_fin + 1.0)
    if penalty <= max_fin:
        raise ValueError(
            f"penalty {penalty} does not exceed the maximum covariate "
            f"distance {max_fin}"
        )
    dist = cov + _dose_penalties(cohort.doses, spec, penalty)
    e = _resolve_sinks(n, spec.sinks)
    size = n + e
    values = np.zeros((size, size))
    values[:n, :n] = dist
    if e > 0:
        values[n:, n:] = np.inf
        np.fill_diagonal(values[n:, n:], 0.0)
    ids = tuple(s.id for s in cohort.subjects)
    return DistanceMatrix(
        values=values,
        sink_indices=tuple(range(n, size)),
        subject_ids=ids,
        doses=cohort.doses.copy(),
    )


# ---------------------------------------------------------------------------
# solving


@njit(cache=True)
def _lex_polish(mate, dm):  # pragma: no cover - exercised via solve
    """Canonicalize ties: 2-swaps that keep total weight exactly equal.

    Repeatedly gives the smallest-index subject the smallest partner
    reachable without changing the total, so equal-weight optima come
    out in a deterministic, lexicographically reduced order.
    """
    n = mate.shape[0]
    for a in range(n):
        b = mate[a]
        if b <= a:
            continue
        c = a + 1
        while c < b:
            d = mate[c]
            # only touch indices above a, so finished positions stay
            # fixed and each swap strictly shrinks mate[a]
            if d > a and d != b:
                base = dm[a, b] + dm[c, d]
                alt = dm[a, c] + dm[b, d]
                if np.isfinite(alt) and alt == base:
                    mate[a] = c
                    mate[c] = a
                    mate[b] = d
                    mate[d] = b
                    b = c
                    c = a + 1
                    continue
            c += 1


def solve_nonbipartite(matrix: DistanceMatrix) -> MatchedDesign:
    """Minimum-weight perfect matching of the full node set.

    Subjects matched to sinks appear in ``dropped``; sink edges (zero
    weight) are excluded from ``total_distance``. Raises
    :class:`MatchingInfeasibleError` when the node count is odd or no
    finite-weight perfect matching exists.
    """
    mate, _ = min_weight_perfect_matching(matrix.values)
    _lex_polish(mate, matrix.values)
    n = matrix.n_subjects
    pairs = []
    dropped = []
    total = 0.0
    for i in range(n):
        j = int(mate[i])
        if j >= n:
            dropped.append(matrix.subject_ids[i])
        elif j > i:
            pairs.append((matrix.subject_ids[i], matrix.subject_ids[j]))
            total += float(matrix.values[i, j])
    pairs.sort(key=lambda p: (_sort_key(p[0]), _sort_key(p[1])))
    return MatchedDesign(
        pairs=tuple(pairs),
        encouraged_first=None,
        dropped=frozenset(dropped),
        total_distance=total,
    )


def _sort_key(sid):
    # stable ordering across int and str ids
    return (0, sid) if isinstance(sid, (int, np.integer)) else (1, str(sid))


# ---------------------------------------------------------------------------
# encouragement and balance


def encode_encouragement(
    design: MatchedDesign, cohort: Cohort, forbid_dose_ties: bool = False
) -> MatchedDesign:
    """Order each pair so the smaller-dose (encouraged) member is first.

    Pairs with tied doses raise :class:`DoseTieError` when
    ``forbid_dose_ties`` is set; by default they are dropped with a
    warning. Idempotent. Also fills ``compliance_hat``.
    """
    dose = {s.id: s.dose for s in cohort.subjects}
    treat = {s.id: s.treatment for s in cohort.subjects}
    pairs = []
    dropped = set(design.dropped)
    s_vals = []
    for a, b in design.pairs:
        if dose[a] > dose[b]:
            a, b = b, a
        elif dose[a] == dose[b]:
            if forbid_dose_ties:
                raise DoseTieError(
                    f"pair ({a}, {b}) has identical doses {dose[a]}"
                )
            warnings.warn(
                f"dropping pair ({a}, {b}) with tied doses", stacklevel=2
            )
            dropped.update((a, b))
            continue
        pairs.append((a, b))
        s_vals.append(treat[a] - treat[b])
    pairs_sorted = sorted(
        range(len(pairs)), key=lambda k: (_sort_key(pairs[k][0]), _sort_key(pairs[k][1]))
    )
    pairs = [pairs[k] for k in pairs_sorted]
    compliance = float(abs(np.mean(s_vals))) if s_vals else 0.0
    return MatchedDesign(
        pairs=tuple(pairs),
        encouraged_first=tuple(True for _ in pairs),
        dropped=frozenset(dropped),
        total_distance=design.total_distance,
        compliance_hat=compliance,
    )


def balance_report(design: MatchedDesign, cohort: Cohort) -> BalanceReport:
    """Near/far covariate balance in the familiar table layout.

    The standardized difference divides the absolute near/far mean gap
    by the pre-matching standard deviation of the covariate over the
    whole cohort; constant covariates get std_diff 0 and a flag.
    """
    if not design.pairs:
        raise ValueError("design has no pairs")
    if not design.is_encoded:
        raise ValueError("encode encouragement before computing balance")
    idx = {s.id: k for k, s in enumerate(cohort.subjects)}
    near = np.array([idx[a] for a, _ in design.pairs])
    far = np.array([idx[b] for _, b in design.pairs])
    x = cohort.covariate_matrix
    doses = cohort.doses
    treats = cohort.treatments
    pre_sd = x.std(axis=0, ddof=1)
    mean_near = x[near].mean(axis=0)
    mean_far = x[far].mean(axis=0)
    flags = []
    std_diff = np.zeros(x.shape[1])
    for j in range(x.shape[1]):
        if pre_sd[j] == 0:
            flags.append(cohort.covariate_names[j])
        else:
            std_diff[j] = abs(mean_near[j] - mean_far[j]) / pre_sd[j]
    compliance = float(abs(np.mean(treats[near] - treats[far])))
    return BalanceReport(
        dose_near=float(doses[near].mean()),
        dose_far=float(doses[far].mean()),
        covariate_names=tuple(cohort.covariate_names),
        mean_near=tuple(float(v) for v in mean_near),
        mean_far=tuple(float(v) for v in mean_far),
        std_diff=tuple(float(v) for v in std_diff),
        compliance_hat=compliance,
        zero_sd_flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# strengthening (the full pipeline)


def _block_partition(cohort: Cohort, spec: DistanceSpec) -> list:
    """Even-size index blocks along the leading principal direction."""
    x = cohort.covariate_matrix
    xc = x - x.mean(axis=0)
    sd = xc.std(axis=0)
    sd[sd == 0] = 1.0
    xc = xc / sd
    # leading right-singular vector gives the principal axis
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    order = np.argsort(xc @ vt[0], kind="stable")
    n = len(order)
    k = max(1, round(n / spec.block_size))
    bounds = np.linspace(0, n, k + 1).astype(int)
    # even block sizes so sinks can be apportioned in pairs; an odd
    # cohort leaves its odd remainder in the final block
    bounds = [2 * (b // 2) for b in bounds[:-1]] + [n]
    return [
        order[bounds[i] : bounds[i + 1]]
        for i in range(k)
        if bounds[i + 1] > bounds[i]
    ]


def _apportion_sinks(block_sizes: Sequence[int], e: int) -> list:
    """Spread e sinks over blocks, keeping every block's order even.

    Blocks have even size except possibly the last, so sinks move in
    pairs; an odd sink (odd cohort) lands on the odd block.
    """
    n = sum(block_sizes)
    h = e // 2
    quota = [h * b / n for b in block_sizes]
    alloc = [int(q) for q in quota]
    rem = h - sum(alloc)
    order = np.argsort([a - q for a, q in zip(alloc, quota)])
    for i in range(rem):
        alloc[order[i]] += 1
    alloc = [2 * a for a in alloc]
    if e % 2 == 1:
        odd_blocks = [i for i, b in enumerate(block_sizes) if b % 2 == 1]
        alloc[odd_blocks[0]] += 1
    return alloc


def _subcohort_design(
    cohort: Cohort,
    indices: np.ndarray,
    cov: np.ndarray,
    penalties: np.ndarray,
    sinks: int,
) -> MatchedDesign:
    """Solve one block against globally computed distances."""
    sub = cov[np.ix_(indices, indices)] + penalties[np.ix_(indices, indices)]
    n = len(indices)
    size = n + sinks
    values = np.zeros((size, size))
    values[:n, :n] = sub
    if sinks > 0:
        values[n:, n:] = np.inf
        np.fill_diagonal(values[n:, n:], 0.0)
    ids = tuple(cohort.subjects[i].id for i in indices)
    dm = DistanceMatrix(
        values=values,
        sink_indices=tuple(range(n, size)),
        subject_ids=ids,
        doses=cohort.doses[indices].copy(),
    )
    return solve_nonbipartite(dm)


def strengthen(cohort: Cohort, spec: DistanceSpec) -> MatchedDesign:
    """Match a cohort, absorbing ``spec.sinks`` subjects into sinks.

    Composition of distance construction, the non-bipartite solve, and
    encouragement encoding; with ``sinks=0`` this is plain optimal
    pair matching. Retains (N - e) / 2 pairs.
    """
    n = len(cohort)
    if spec.block_size is None or n + spec.sinks <= spec.block_size:
        matrix = build_distance_matrix(cohort, spec)
        design = solve_nonbipartite(matrix)
    else:
        cov = _covariate_distances(cohort, spec.covariate_metric)
        max_fin = float(cov.max())
        penalty = (
            spec.penalty if spec.penalty is not None else 1000.0 * (max_fin + 1.0)
        )
        penalties = _dose_penalties(cohort.doses, spec, penalty)
        e = _resolve_sinks(n, spec.sinks)
        blocks = _block_partition(cohort, spec)
        alloc = _apportion_sinks([len(b) for b in blocks], e)
        pairs: list = []
        dropped: set = set()
        total = 0.0
        for idx, nsink in zip(blocks, alloc):
            d = _subcohort_design(cohort, idx, cov, penalties, nsink)
            pairs.extend(d.pairs)
            dropped.update(d.dropped)
            total += d.total_distance
        design = MatchedDesign(
            pairs=tuple(pairs),
            encouraged_first=None,
            dropped=frozenset(dropped),
            total_distance=total,
        )
    return encode_encouragement(design, cohort, spec.forbid_dose_ties)


def design_from_pairs(
    cohort: Cohort,
    pairs: Sequence,
    total_distance: float = float("nan"),
    forbid_dose_ties: bool = False,
) -> MatchedDesign:
    """Rebuild an encoded design from explicit id pairs (e.g. a saved CSV).

    Every id must belong to the cohort and appear in at most one pair;
    unmatched subjects land in ``dropped``. The stored covariate
    distances are not recoverable from id pairs, so ``total_distance``
    defaults to NaN unless the caller knows it.
    """
    ids = {s.id for s in cohort.subjects}
    seen: set = set()
    clean = []
    for pair in pairs:
        a, b = pair
        for x in (a, b):
            if x not in ids:
                raise ValueError(f"pair id {x!r} is not in the cohort")
            if x in seen:
                raise ValueError(f"subject {x!r} appears in more than one pair")
            seen.add(x)
        clean.append((a, b))
    raw = MatchedDesign(
        pairs=tuple(clean),
        encouraged_first=None,
        dropped=frozenset(ids - seen),
        total_distance=float(total_distance),
    )
    return encode_encouragement(raw, cohort, forbid_dose_ties)


# ---------------------------------------------------------------------------
# serialization


def save_design_csv(design: MatchedDesign, cohort: Cohort, path) -> None:
    """Write one row per pair: ids, doses, treatments, outcomes."""
    if not design.is_encoded:
        raise ValueError("encode encouragement before saving")
    by_id = {s.id: s for s in cohort.subjects}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "pair_id",
                "encouraged_id",
                "control_id",
                "z_near",
                "z_far",
                "d_near",
                "d_far",
                "r_near",
                "r_far",
            ]
        )
        for k, (a, b) in enumerate(design.pairs):
            sa, sb = by_id[a], by_id[b]
            w.writerow(
                [
                    k,
                    a,
                    b,
                    repr(sa.dose),
                    repr(sb.dose),
                    sa.treatment,
                    sb.treatment,
                    repr(sa.outcome),
                    repr(sb.outcome),
                ]
            )


def load_design_csv(path) -> dict:
    """Read a pairs file back into column arrays keyed by header name."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no pairs")
    out = {
        "encouraged_id": [r["encouraged_id"] for r in rows],
        "control_id": [r["control_id"] for r in rows],
    }
    for colname in ("z_near", "z_far", "d_near", "d_far", "r_near", "r_far"):
        out[colname] = np.array([float(r[colname]) for r in rows])
    return out


def save_balance_csv(report: BalanceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "mean_near", "mean_far", "std_diff"])
        for name, mn, mf, sd in report.rows():
            w.writerow([name, mn, mf, "" if np.isnan(sd) else sd])
        w.writerow(["compliance_hat", report.compliance_hat, "", ""])
