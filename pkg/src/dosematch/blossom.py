"""Exact minimum-weight perfect matching on dense general graphs.

Primal-dual blossom algorithm, O(n^3), on an integer cost matrix.
Minimization is reduced to maximum-weight matching with transformed
weights w = offset - cost, where the offset is large enough that any
higher-cardinality matching beats any lower-cardinality one. Forbidden
edges are kept in the graph with weight 1, which the same offset
argument makes strictly worse than any matching that avoids them, so
feasibility can be checked on the returned matching.

The solver keeps an alternating forest over shrunken blossoms with
per-structure slack caching and grouped dual adjustments. Structure
ids above n denote blossoms; `st` maps every structure to its
top-level representative, `flower` stores blossom members in cyclic
order, and blossom-level edges remember their original endpoints in
`gu`/`gv`. All recursion of the textbook formulation is replaced by
explicit stacks so the whole solver compiles under numba. Correctness
is pinned by enumeration oracles in the test suite.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["min_weight_perfect_matching", "MatchingInfeasibleError"]

_INF = np.int64(2**62)


class MatchingInfeasibleError(ValueError):
    """No perfect matching of finite weight exists."""


@njit(cache=True, inline="always")
def _e_delta(x, y, lab, gu, gv, gw):
    """Slack of the edge stored between structures x and y.

    Weights enter doubled so that all dual adjustments stay integral.
    """
    return lab[gu[x, y]] + lab[gv[x, y]] - 2 * gw[x, y]


@njit(cache=True)
def _q_push(x, n, flower, flower_len, queue, state, stack):
    """Append every vertex contained in structure x to the BFS queue."""
    sp = 0
    stack[sp] = x
    sp += 1
    while sp > 0:
        sp -= 1
        y = stack[sp]
        if y <= n:
            queue[state[1]] = y
            state[1] += 1
        else:
            for i in range(flower_len[y]):
                stack[sp] = flower[y, i]
                sp += 1


@njit(cache=True)
def _set_st(x, b, n, flower, flower_len, st, stack):
    """Point every structure inside x at top-level representative b."""
    sp = 0
    stack[sp] = x
    sp += 1
    while sp > 0:
        sp -= 1
        y = stack[sp]
        st[y] = b
        if y > n:
            for i in range(flower_len[y]):
                stack[sp] = flower[y, i]
                sp += 1


@njit(cache=True)
def _get_pr(b, xr, flower, flower_len):
    """Position of sub-blossom xr inside b, rotated to even parity.

    Blossom members alternate matched/unmatched around the cycle, so a
    path from the base to xr of odd length is rewritten by reversing
    the cyclic order (keeping the base fixed).
    """
    ln = flower_len[b]
    pr = 0
    for i in range(ln):
        if flower[b, i] == xr:
            pr = i
            break
    if pr % 2 == 1:
        lo = 1
        hi = ln - 1
        while lo < hi:
            t = flower[b, lo]
            flower[b, lo] = flower[b, hi]
            flower[b, hi] = t
            lo += 1
            hi -= 1
        return ln - pr
    return pr


@njit(cache=True)
def _set_match(u0, v0, n, gu, gv, match, flower, flower_len, flower_from, mstack):
    """Match structure u0 across the edge stored toward structure v0.

    Drills down through nested blossoms: the sub-blossom containing the
    edge endpoint is matched outward and the remaining members are
    re-matched pairwise around the cycle, which is then rotated so the
    newly matched sub-blossom becomes the base.
    """
    sp = 0
    mstack[sp, 0] = u0
    mstack[sp, 1] = v0
    sp += 1
    while sp > 0:
        sp -= 1
        u = mstack[sp, 0]
        v = mstack[sp, 1]
        eu = gu[u, v]
        ev = gv[u, v]
        match[u] = ev
        if u > n:
            xr = flower_from[u, eu]
            pr = _get_pr(u, xr, flower, flower_len)
            for i in range(pr):
                mstack[sp, 0] = flower[u, i]
                mstack[sp, 1] = flower[u, i ^ 1]
                sp += 1
            mstack[sp, 0] = xr
            mstack[sp, 1] = v
            sp += 1
            ln = flower_len[u]
            if pr > 0:
                buf = np.empty(ln, dtype=np.int32)
                for i in range(ln):
                    buf[i] = flower[u, (i + pr) % ln]
                for i in range(ln):
                    flower[u, i] = buf[i]


@njit(cache=True)
def _augment(u, v, n, gu, gv, match, flower, flower_len, flower_from, mstack, st, pa):
    """Flip matched status along the alternating path from structure u."""
    while True:
        xnv = st[match[u]]
        _set_match(u, v, n, gu, gv, match, flower, flower_len, flower_from, mstack)
        if xnv == 0:
            return
        _set_match(
            xnv, st[pa[xnv]], n, gu, gv, match, flower, flower_len, flower_from, mstack
        )
        v = xnv
        u = st[pa[xnv]]


@njit(cache=True)
def _get_lca(u, v, st, match, pa, vis, state):
    """Common ancestor of structures u, v in the alternating forest."""
    state[2] += 1
    t = state[2]
    while u != 0 or v != 0:
        if u != 0:
            if vis[u] == t:
                return u
            vis[u] = t
            u = st[match[u]]
            if u != 0:
                u = st[pa[u]]
        tmp = u
        u = v
        v = tmp
    return 0


@njit(cache=True)
def _update_slack(u, x, lab, gu, gv, gw, slack):
    if slack[x] == 0 or _e_delta(u, x, lab, gu, gv, gw) < _e_delta(
        slack[x], x, lab, gu, gv, gw
    ):
        slack[x] = u


@njit(cache=True)
def _set_slack(x, n, lab, gu, gv, gw, slack, st, S):
    """Recompute the best S-vertex slack edge pointing at structure x."""
    slack[x] = 0
    for u in range(1, n + 1):
        if gw[u, x] > 0 and st[u] != x and S[st[u]] == 0:
            _update_slack(u, x, lab, gu, gv, gw, slack)


@njit(cache=True)
def _add_blossom(
    u,
    lca,
    v,
    n,
    lab,
    S,
    match,
    pa,
    st,
    slack,
    gu,
    gv,
    gw,
    flower,
    flower_len,
    flower_from,
    queue,
    state,
    stack,
):
    """Shrink the odd cycle through structures u, lca, v into one blossom."""
    b = n + 1
    while b <= state[3] and st[b] != 0:
        b += 1
    if b > state[3]:
        state[3] = b
    lab[b] = 0
    S[b] = 0
    match[b] = match[lca]
    fl = 0
    flower[b, fl] = lca
    fl += 1
    x = u
    while x != lca:
        flower[b, fl] = x
        fl += 1
        y = st[match[x]]
        flower[b, fl] = y
        fl += 1
        _q_push(y, n, flower, flower_len, queue, state, stack)
        x = st[pa[y]]
    lo = 1
    hi = fl - 1
    while lo < hi:
        t = flower[b, lo]
        flower[b, lo] = flower[b, hi]
        flower[b, hi] = t
        lo += 1
        hi -= 1
    x = v
    while x != lca:
        flower[b, fl] = x
        fl += 1
        y = st[match[x]]
        flower[b, fl] = y
        fl += 1
        _q_push(y, n, flower, flower_len, queue, state, stack)
        x = st[pa[y]]
    flower_len[b] = fl
    _set_st(b, b, n, flower, flower_len, st, stack)
    for x in range(1, state[3] + 1):
        gw[b, x] = 0
        gw[x, b] = 0
    for x in range(1, n + 1):
        flower_from[b, x] = 0
    for i in range(fl):
        xs = flower[b, i]
        for x in range(1, state[3] + 1):
            if gw[b, x] == 0 or _e_delta(xs, x, lab, gu, gv, gw) < _e_delta(
                b, x, lab, gu, gv, gw
            ):
                gu[b, x] = gu[xs, x]
                gv[b, x] = gv[xs, x]
                gw[b, x] = gw[xs, x]
                gu[x, b] = gu[x, xs]
                gv[x, b] = gv[x, xs]
                gw[x, b] = gw[x, xs]
        for x in range(1, n + 1):
            if flower_from[xs, x] != 0:
                flower_from[b, x] = xs
    _set_slack(b, n, lab, gu, gv, gw, slack, st, S)


@njit(cache=True)
def _expand_blossom(
    b,
    n,
    lab,
    S,
    match,
    pa,
    st,
    slack,
    gu,
    gv,
    gw,
    flower,
    flower_len,
    flower_from,
    queue,
    state,
    stack,
):
    """Undo a zero-dual T-blossom, relabeling members along its path."""
    for i in range(flower_len[b]):
        _set_st(flower[b, i], flower[b, i], n, flower, flower_len, st, stack)
    xr = flower_from[b, gu[b, pa[b]]]
    pr = _get_pr(b, xr, flower, flower_len)
    i = 0
    while i < pr:
        xs = flower[b, i]
        xns = flower[b, i + 1]
        pa[xs] = gu[xns, xs]
        S[xs] = 1
        S[xns] = 0
        slack[xs] = 0
        _set_slack(xns, n, lab, gu, gv, gw, slack, st, S)
        _q_push(xns, n, flower, flower_len, queue, state, stack)
        i += 2
    S[xr] = 1
    pa[xr] = pa[b]
    for i in range(pr + 1, flower_len[b]):
        xs = flower[b, i]
        S[xs] = -1
        _set_slack(xs, n, lab, gu, gv, gw, slack, st, S)
    st[b] = 0


@njit(cache=True)
def _on_found_edge(
    eu,
    ev,
    n,
    lab,
    S,
    match,
    pa,
    st,
    slack,
    gu,
    gv,
    gw,
    flower,
    flower_len,
    flower_from,
    queue,
    state,
    stack,
    mstack,
    vis,
):
    """Process a tight edge (eu, ev); returns 1 if the phase augmented."""
    u = st[eu]
    v = st[ev]
    if S[v] == -1:
        pa[v] = eu
        S[v] = 1
        nu = st[match[v]]
        slack[v] = 0
        slack[nu] = 0
        S[nu] = 0
        _q_push(nu, n, flower, flower_len, queue, state, stack)
    elif S[v] == 0:
        lca = _get_lca(u, v, st, match, pa, vis, state)
        if lca == 0:
            _augment(
                u, v, n, gu, gv, match, flower, flower_len, flower_from, mstack, st, pa
            )
            _augment(
                v, u, n, gu, gv, match, flower, flower_len, flower_from, mstack, st, pa
            )
            return 1
        else:
            _add_blossom(
                u,
                lca,
                v,
                n,
                lab,
                S,
                match,
                pa,
                st,
                slack,
                gu,
                gv,
                gw,
                flower,
                flower_len,
                flower_from,
                queue,
                state,
                stack,
            )
    return 0


@njit(cache=True)
def _solve(w):
    """Maximum-weight matching for positive weights w (n x n, int64).

    Zero entries are treated as absent edges; callers pass a complete
    graph so every phase ends in an augmentation. Returns the mate
    array for vertices 1..n (0 = unmatched).
    """
    n = w.shape[0]
    # 1-indexed contiguous copy of the vertex-vertex weights. The edge
    # stored between two top-level vertices never changes (gu[u,v] == u,
    # gv[u,v] == v, gw[u,v] == w1[u,v] for all u, v <= n), so the hot
    # scans below read this small matrix instead of chasing gu/gv/gw,
    # which also keeps the working set cache-resident.
    w1 = np.zeros((n + 1, n + 1), dtype=np.int64)
    for u in range(n):
        for v in range(n):
            w1[u + 1, v + 1] = w[u, v]
    size = n + n // 2 + 8
    lab = np.zeros(size, dtype=np.int64)
    match = np.zeros(size, dtype=np.int32)
    slack = np.zeros(size, dtype=np.int32)
    st = np.zeros(size, dtype=np.int32)
    pa = np.zeros(size, dtype=np.int32)
    S = np.full(size, -1, dtype=np.int32)
    vis = np.zeros(size, dtype=np.int32)
    gu = np.zeros((size, size), dtype=np.int32)
    gv = np.zeros((size, size), dtype=np.int32)
    gw = np.zeros((size, size), dtype=np.int64)
    flower = np.zeros((size, n + 2), dtype=np.int32)
    flower_len = np.zeros(size, dtype=np.int32)
    flower_from = np.zeros((size, n + 1), dtype=np.int32)
    queue = np.zeros(16 * size, dtype=np.int32)
    stack = np.zeros(4 * size, dtype=np.int32)
    mstack = np.zeros((4 * size, 2), dtype=np.int32)
    # state = [q_head, q_tail, lca timer, n_x]
    state = np.zeros(4, dtype=np.int64)
    state[3] = n

    w_max = np.int64(0)
    for u in range(1, n + 1):
        st[u] = u
        for v in range(1, n + 1):
            gu[u, v] = u
            gv[u, v] = v
            gw[u, v] = w[u - 1, v - 1]
            flower_from[u, v] = u if u == v else 0
            if gw[u, v] > w_max:
                w_max = gw[u, v]
    for u in range(1, n + 1):
        lab[u] = w_max

    while True:
        # start a phase: alternating forest rooted at every free structure
        n_x = state[3]
        for x in range(1, n_x + 1):
            S[x] = -1
            slack[x] = 0
        state[0] = 0
        state[1] = 0
        free_found = False
        for x in range(1, n_x + 1):
            if st[x] == x and match[x] == 0:
                pa[x] = 0
                S[x] = 0
                free_found = True
                _q_push(x, n, flower, flower_len, queue, state, stack)
        if not free_found:
            break

        augmented = 0
        while augmented == 0:
            while state[0] < state[1] and augmented == 0:
                u = queue[state[0]]
                state[0] += 1
                if S[st[u]] == 1:
                    continue
                su = st[u]
                lab_u = lab[u]
                for v in range(1, n + 1):
                    wv = w1[u, v]
                    if wv <= 0:
                        continue
                    sv = st[v]
                    if su == sv:
                        continue
                    dlt = lab_u + lab[v] - 2 * wv  # _e_delta for vertex pairs
                    if dlt == 0:
                        augmented = _on_found_edge(
                            u,
                            v,
                            n,
                            lab,
                            S,
                            match,
                            pa,
                            st,
                            slack,
                            gu,
                            gv,
                            gw,
                            flower,
                            flower_len,
                            flower_from,
                            queue,
                            state,
                            stack,
                            mstack,
                            vis,
                        )
                        if augmented != 0:
                            break
                        su = st[u]  # a new blossom may have swallowed u
                    elif sv <= n:
                        # structure edge (u, sv) is the vertex edge itself
                        sx = slack[sv]
                        if sx == 0 or dlt < lab[sx] + lab[sv] - 2 * w1[sx, sv]:
                            slack[sv] = u
                    else:
                        _update_slack(u, sv, lab, gu, gv, gw, slack)
            if augmented != 0:
                break

            # dual adjustment
            n_x = state[3]
            d = _INF
            for b in range(n + 1, n_x + 1):
                if st[b] == b and S[b] == 1:
                    t = lab[b] // 2
                    if t < d:
                        d = t
            for x in range(1, n_x + 1):
                if st[x] == x and slack[x] != 0:
                    if S[x] == -1:
                        t = _e_delta(slack[x], x, lab, gu, gv, gw)
                        if t < d:
                            d = t
                    elif S[x] == 0:
                        t = _e_delta(slack[x], x, lab, gu, gv, gw) // 2
                        if t < d:
                            d = t
            if d >= _INF:
                # no augmenting path exists; report via unmatched vertices
                return match[1 : n + 1]
            for u in range(1, n + 1):
                s = S[st[u]]
                if s == 0:
                    lab[u] -= d
                elif s == 1:
                    lab[u] += d
            for b in range(n + 1, n_x + 1):
                if st[b] == b:
                    if S[b] == 0:
                        lab[b] += 2 * d
                    elif S[b] == 1:
                        lab[b] -= 2 * d

            state[0] = 0
            state[1] = 0
            for x in range(1, n_x + 1):
                if (
                    st[x] == x
                    and slack[x] != 0
                    and st[slack[x]] != x
                    and _e_delta(slack[x], x, lab, gu, gv, gw) == 0
                ):
                    augmented = _on_found_edge(
                        gu[slack[x], x],
                        gv[slack[x], x],
                        n,
                        lab,
                        S,
                        match,
                        pa,
                        st,
                        slack,
                        gu,
                        gv,
                        gw,
                        flower,
                        flower_len,
                        flower_from,
                        queue,
                        state,
                        stack,
                        mstack,
                        vis,
                    )
                    if augmented != 0:
                        break
            if augmented != 0:
                break
            n_x = state[3]
            for b in range(n + 1, n_x + 1):
                if st[b] == b and S[b] == 1 and lab[b] == 0:
                    _expand_blossom(
                        b,
                        n,
                        lab,
                        S,
                        match,
                        pa,
                        st,
                        slack,
                        gu,
                        gv,
                        gw,
                        flower,
                        flower_len,
                        flower_from,
                        queue,
                        state,
                        stack,
                    )
    return match[1 : n + 1]


# resolution of the integer grid costs are quantized onto
_QUANT = 2**32


def min_weight_perfect_matching(
    cost: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Minimum-weight perfect matching of a symmetric cost matrix.

    Parameters
    ----------
    cost:
        Square symmetric float array. ``np.inf`` marks forbidden edges;
        the diagonal is ignored. Finite costs must be nonnegative.

    Returns
    -------
    (mate, total):
        ``mate[i]`` is the partner of vertex ``i`` and ``total`` the sum
        of the matched edge costs (each edge counted once), evaluated on
        the original float matrix.

    Raises
    ------
    MatchingInfeasibleError
        If the vertex count is odd or every perfect matching uses a
        forbidden edge.

    Notes
    -----
    Costs are quantized onto an integer grid with about 2e-10 relative
    resolution before solving; ties on that grid are broken
    deterministically by the solver's scan order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost must be a square matrix")
    n = cost.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), 0.0
    if n % 2 == 1:
        raise MatchingInfeasibleError(
            f"perfect matching needs an even vertex count, got {n}"
        )
    off_diag = ~np.eye(n, dtype=bool)
    finite = np.isfinite(cost) & off_diag
    if np.any(cost[finite] < 0):
        raise ValueError("finite costs must be nonnegative")
    cmax = float(cost[finite].max()) if finite.any() else 0.0
    scale = _QUANT / cmax if cmax > 0 else 1.0
    q = np.zeros((n, n), dtype=np.int64)
    q[finite] = np.round(cost[finite] * scale).astype(np.int64)
    qmax = int(q.max())
    offset = np.int64((n + 2) * (qmax + 2))
    w = np.where(finite, offset - q, np.int64(1))
    np.fill_diagonal(w, 1)

    mate1 = _solve(np.ascontiguousarray(w))
    mate = np.asarray(mate1, dtype=np.int64) - 1
    if np.any(mate < 0):
        raise MatchingInfeasibleError("graph admits no perfect matching")
    if np.any(mate[mate] != np.arange(n)):
        raise AssertionError("solver returned an inconsistent matching")
    rows = np.arange(n)
    used = cost[rows, mate]
    if np.any(~np.isfinite(used)):
        raise MatchingInfeasibleError(
            "every perfect matching uses a forbidden edge"
        )
    total = float(used.sum() / 2.0)
    return mate, total
