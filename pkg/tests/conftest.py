"""Shared test helpers: brute-force oracles and small builders."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from clipsbr.graph import Graph


@lru_cache(maxsize=None)
def all_partitions(n: int) -> np.ndarray:
    """Every partition of n items as restricted-growth strings, shape (B_n, n).

    Row semantics: item i belongs to block rgs[i]; blocks are numbered by
    first appearance, so each distinct set partition appears exactly once.
    """
    rows = []
    rgs = [0] * n

    def grow(i: int, max_used: int) -> None:
        if i == n:
            rows.append(list(rgs))
            return
        for label in range(max_used + 2):
            rgs[i] = label
            grow(i + 1, max(max_used, label))

    if n == 0:
        return np.zeros((1, 0), dtype=np.int8)
    rgs[0] = 0
    grow(1, 0)
    return np.array(rows, dtype=np.int8)


def modularity_all_partitions(graph: Graph, resolution: float) -> np.ndarray:
    """Vectorized modularity of every partition of the graph's nodes."""
    n = graph.num_nodes
    parts = all_partitions(n)
    m = graph.total_weight()
    if m <= 0:
        return np.zeros(len(parts))
    us, vs, ws = [], [], []
    for u, v, w in graph.edges():
        us.append(u)
        vs.append(v)
        ws.append(w)
    us, vs, ws = np.array(us), np.array(vs), np.array(ws, dtype=np.float64)
    intra = ((parts[:, us] == parts[:, vs]) * ws).sum(axis=1)
    k = np.array([graph.strength(i) for i in range(n)])
    onehot = parts[:, :, None] == np.arange(n, dtype=np.int8)[None, None, :]
    deg = (onehot * k[None, :, None]).sum(axis=1)
    return intra / m - resolution * (deg ** 2).sum(axis=1) / (4.0 * m * m)


def brute_force_best(graph: Graph, resolution: float) -> tuple[float, list[int]]:
    qs = modularity_all_partitions(graph, resolution)
    best = int(np.argmax(qs))
    return float(qs[best]), [int(x) for x in all_partitions(graph.num_nodes)[best]]


def is_local_optimum(graph: Graph, assignment: list[int], resolution: float,
                     tol: float = 1e-9) -> bool:
    """No single-node move (to any community, or a fresh one) raises quality."""
    from clipsbr.community import modularity

    base = modularity(graph, assignment, resolution)
    targets = sorted(set(assignment)) + [max(assignment) + 1]
    for v in range(graph.num_nodes):
        original = assignment[v]
        for c in targets:
            if c == original:
                continue
            assignment[v] = c
            moved = modularity(graph, assignment, resolution)
            assignment[v] = original
            if moved > base + tol:
                return False
    return True


def random_graph(seed: int, n: int | None = None, p: float = 0.45,
                 max_weight: int = 3) -> Graph:
    """Small random weighted graph; guaranteed to hold at least one edge."""
    rng = np.random.default_rng(seed)
    if n is None:
        n = int(rng.integers(4, 11))
    g = Graph(n)
    for u in range(n):
        for v in range(u, n):
            if u == v:
                if rng.random() < 0.1:
                    g.add_edge(u, u, int(rng.integers(1, max_weight + 1)))
            elif rng.random() < p:
                g.add_edge(u, v, int(rng.integers(1, max_weight + 1)))
    if g.num_edges() == 0:
        g.add_edge(0, min(1, n - 1) if n > 1 else 0, 1.0)
    return g


def fd_gradients(loss_fn, params: dict[str, np.ndarray], h: float = 1e-4
                 ) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar loss over every tensor entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p, dtype=np.float64)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            up = loss_fn()
            flat_p[j] = orig - h
            down = loss_fn()
            flat_p[j] = orig
            flat_g[j] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def max_rel_err(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]
                ) -> float:
    worst = 0.0
    for name in analytic:
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        b = np.asarray(numeric[name], dtype=np.float64).reshape(-1)
        denom = np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


@pytest.fixture
def two_triangles_bridge() -> Graph:
    g = Graph(6)
    for a, b in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]:
        g.add_edge(a, b)
    return g
