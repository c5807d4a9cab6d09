"""Mid-size cross-check vs networkx and timing at simulation scale."""

import time

import networkx as nx
import numpy as np

from dosematch.blossom import min_weight_perfect_matching


def nx_min_perfect(cost):
    n = cost.shape[0]
    g = nx.Graph()
    big = np.nanmax(np.where(np.isfinite(cost), cost, np.nan)) + 1.0
    for i in range(n):
        for j in range(i + 1, n):
            if np.isfinite(cost[i, j]):
                g.add_edge(i, j, weight=big - cost[i, j])
    m = nx.max_weight_matching(g, maxcardinality=True)
    if 2 * len(m) != n:
        return np.inf
    return sum(cost[i, j] for i, j in m)


rng = np.random.default_rng(11)
for trial in range(12):
    n = int(rng.integers(20, 61)) * 2
    x = rng.normal(size=(n, 3))
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    cost = (d + d.T) / 2
    np.fill_diagonal(cost, 0.0)
    if trial % 2 == 0:
        # near/far texture: heavy penalties on close-dose pairs
        z = rng.normal(size=n)
        pen = 50.0 * (np.abs(z[:, None] - z[None, :]) <= 0.5)
        cost = cost + pen
        np.fill_diagonal(cost, 0.0)
    t0 = time.time()
    mate, total = min_weight_perfect_matching(cost)
    t1 = time.time()
    ref = nx_min_perfect(cost)
    t2 = time.time()
    flag = "OK " if abs(total - ref) < 1e-6 * max(1.0, ref) else "BAD"
    print(
        f"{flag} n={n:4d} solver={total:12.6f} nx={ref:12.6f} "
        f"t_solver={t1 - t0:6.3f}s t_nx={t2 - t1:6.2f}s"
    )

for n in (250, 500, 1000, 1500, 2000):
    x = rng.normal(size=(n, 3))
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    z = rng.normal(size=n)
    pen = 50.0 * (np.abs(z[:, None] - z[None, :]) <= 1.0)
    cost = d + pen
    cost = (cost + cost.T) / 2
    np.fill_diagonal(cost, 0.0)
    t0 = time.time()
    mate, total = min_weight_perfect_matching(cost)
    print(f"n={n:5d}  total={total:14.4f}  t={time.time() - t0:7.3f}s")
