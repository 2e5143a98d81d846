"""Community detection on the item graph.

Quality function is modularity with a resolution knob:

    Q = sum_c [ e_c / m  -  resolution * (d_c / 2m)^2 ]

where e_c is the intra-community edge mass (each edge once, loops once),
d_c the summed node strengths (loops count twice), and m the total edge
mass.  Communities are mined with a three-phase scheme: queue-driven
local moving, a refinement step that rebuilds each community from
singletons so only well-connected merges survive, and aggregation of the
refined parts.  Passes repeat until no node move improves quality, so
the result is node-level locally optimal and every community is
internally connected.
"""

from __future__ import annotations

import heapq
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import UsageError, check_positive
from .graph import Graph
from .utils import read_json, write_json

_EPS = 1e-12


def modularity(graph: Graph, assignment: list[int], resolution: float = 1.0) -> float:
    """Resolution-scaled modularity of a node -> community labeling."""
    if len(assignment) != graph.num_nodes:
        raise ValueError("assignment length does not match graph size")
    m = graph.total_weight()
    if m <= 0:
        return 0.0
    intra: dict[int, float] = {}
    degree: dict[int, float] = {}
    for u in range(graph.num_nodes):
        cu = assignment[u]
        degree[cu] = degree.get(cu, 0.0) + graph.strength(u)
        for v, w in graph.adj[u].items():
            if v > u or (v == u):
                if assignment[v] == cu:
                    intra[cu] = intra.get(cu, 0.0) + w
    q = 0.0
    for c, d in degree.items():
        q += intra.get(c, 0.0) / m - resolution * (d / (2.0 * m)) ** 2
    return q


@dataclass
class LeidenResult:
    assignment: list[int]
    num_clusters: int
    quality: float
    resolution: float
    seed: int
    trace: list[float] = field(default_factory=list)


def _local_move(graph: Graph, assignment: list[int], resolution: float, m: float,
                strengths: list[float], rng: np.random.Generator) -> int:
    """Queue-driven greedy node moves; mutates ``assignment``, returns move count.

    Move gain for taking v from community A to B:
        (w_v->B - w_v->(A-v)) / m - resolution * k_v * (d_B - d_{A-v}) / (2 m^2)
    An empty community is always a candidate; ties go to the lowest label.
    """
    n = graph.num_nodes
    # compact labels so arrays of size n are enough
    seen: dict[int, int] = {}
    for v in range(n):
        assignment[v] = seen.setdefault(assignment[v], len(seen))
    comm_deg = [0.0] * n
    comm_size = [0] * n
    for v in range(n):
        comm_deg[assignment[v]] += strengths[v]
        comm_size[assignment[v]] += 1
    free = [c for c in range(n) if comm_size[c] == 0]
    heapq.heapify(free)

    def peek_free() -> int | None:
        while free and comm_size[free[0]] > 0:
            heapq.heappop(free)
        return free[0] if free else None

    order = np.arange(n)
    rng.shuffle(order)
    queue = deque(int(v) for v in order)
    queued = [True] * n
    moves = 0
    two_m_sq = 2.0 * m * m
    while queue:
        v = queue.popleft()
        queued[v] = False
        a = assignment[v]
        k_v = strengths[v]
        w_to: dict[int, float] = {}
        for u, w in graph.adj[v].items():
            if u != v:
                c = assignment[u]
                w_to[c] = w_to.get(c, 0.0) + w
        w_stay = w_to.get(a, 0.0)
        d_rest = comm_deg[a] - k_v
        best_gain = 0.0
        best = a
        candidates = sorted(c for c in w_to if c != a)
        if comm_size[a] > 1:
            empty = peek_free()
            if empty is not None:
                candidates.append(empty)
        for b in candidates:
            gain = (w_to.get(b, 0.0) - w_stay) / m \
                - resolution * k_v * (comm_deg[b] - d_rest) / two_m_sq
            if gain > best_gain + _EPS or (gain > best_gain - _EPS and b < best):
                if gain > _EPS:
                    best_gain = max(best_gain, gain)
                    best = b
        if best == a:
            continue
        assignment[v] = best
        comm_deg[a] -= k_v
        comm_size[a] -= 1
        comm_deg[best] += k_v
        comm_size[best] += 1
        if comm_size[a] == 0:
            heapq.heappush(free, a)
        moves += 1
        for u in graph.adj[v]:
            if u != v and assignment[u] != best and not queued[u]:
                queue.append(u)
                queued[u] = True
    return moves


def _refine(graph: Graph, assignment: list[int], resolution: float, m: float,
            strengths: list[float], theta: float, rng: np.random.Generator) -> list[int]:
    """Rebuild each community from singletons by randomized well-connected merges.

    A node (or part) x inside community C qualifies when its edge mass to
    the rest of C reaches resolution * K_x * (K_C - K_x) / (2m).  Singleton
    nodes join a qualifying part with probability proportional to
    exp(gain / theta), among parts whose merge gain is nonnegative.
    """
    n = graph.num_nodes
    refined = list(range(n))
    members: dict[int, list[int]] = {}
    for v in range(n):
        members.setdefault(assignment[v], []).append(v)
    two_m_sq = 2.0 * m * m

    for comm in sorted(members):
        nodes = members[comm]
        if len(nodes) < 2:
            continue
        in_comm = set(nodes)
        k_total = sum(strengths[v] for v in nodes)
        # per-node edge mass into the rest of the community
        ext: dict[int, float] = {}
        for v in nodes:
            ext[v] = sum(w for u, w in graph.adj[v].items() if u != v and u in in_comm)
        part_k = {v: strengths[v] for v in nodes}     # refined-part strength sums
        part_ext = dict(ext)                          # refined-part mass to rest of C
        part_size = {v: 1 for v in nodes}

        order = np.array(nodes)
        rng.shuffle(order)
        for v in (int(x) for x in order):
            if part_size[refined[v]] != 1:
                continue
            k_v = strengths[v]
            if ext[v] + _EPS < resolution * k_v * (k_total - k_v) / (2.0 * m):
                continue
            w_to: dict[int, float] = {}
            for u, w in graph.adj[v].items():
                if u != v and u in in_comm and refined[u] != refined[v]:
                    w_to[refined[u]] = w_to.get(refined[u], 0.0) + w
            options: list[int | None] = [None]        # staying put is always allowed
            gains = [0.0]
            for part in sorted(w_to):
                kp = part_k[part]
                if part_ext[part] + _EPS < resolution * kp * (k_total - kp) / (2.0 * m):
                    continue
                gain = w_to[part] / m - resolution * k_v * kp / two_m_sq
                if gain >= -_EPS:
                    options.append(part)
                    gains.append(gain)
            if len(options) == 1:
                continue
            shifted = np.array(gains) / theta
            weights = np.exp(shifted - shifted.max())
            choice = options[int(rng.choice(len(options), p=weights / weights.sum()))]
            if choice is None:
                continue
            old = refined[v]
            refined[v] = choice
            part_size[choice] += part_size.pop(old)
            part_k[choice] += part_k.pop(old)
            part_ext[choice] += part_ext.pop(old) - 2.0 * w_to[choice]
    return refined


def _aggregate(graph: Graph, refined: list[int], assignment: list[int]
               ) -> tuple[Graph, list[int], list[int]]:
    """Collapse refined parts to super-nodes; initial labels come from the
    coarse partition each part sits inside."""
    ids: dict[int, int] = {}
    for v in range(graph.num_nodes):
        ids.setdefault(refined[v], len(ids))
    comp = [ids[refined[v]] for v in range(graph.num_nodes)]
    agg = Graph(len(ids))
    for u, v, w in graph.edges():
        agg.add_edge(comp[u], comp[v], w)
    init = [0] * len(ids)
    for v in range(graph.num_nodes):
        init[comp[v]] = assignment[v]
    return agg, init, comp


def _one_pass(graph: Graph, assignment: list[int], resolution: float, theta: float,
              m: float, strengths: list[float], rng: np.random.Generator
              ) -> tuple[list[int], int]:
    g = graph
    k = strengths
    node_map = list(range(graph.num_nodes))
    labels = list(assignment)
    total_moves = _local_move(g, labels, resolution, m, k, rng)
    while len(set(labels)) < g.num_nodes:
        refined = _refine(g, labels, resolution, m, k, theta, rng)
        if len(set(refined)) == g.num_nodes:
            break
        g, labels, comp = _aggregate(g, refined, labels)
        node_map = [comp[c] for c in node_map]
        k = [g.strength(v) for v in range(g.num_nodes)]
        total_moves += _local_move(g, labels, resolution, m, k, rng)
    return [labels[node_map[v]] for v in range(graph.num_nodes)], total_moves


def _split_disconnected(graph: Graph, assignment: list[int]) -> int:
    """Give each connected component of a community its own label.

    Splitting a disconnected community never lowers quality (the intra
    mass is unchanged and the squared-degree penalty only shrinks).
    """
    members: dict[int, list[int]] = {}
    for v, c in enumerate(assignment):
        members.setdefault(c, []).append(v)
    next_label = max(members) + 1 if members else 0
    splits = 0
    for c in sorted(members):
        nodes = members[c]
        node_set = set(nodes)
        unvisited = set(nodes)
        first = True
        while unvisited:
            start = min(unvisited)
            comp = {start}
            stack = [start]
            while stack:
                u = stack.pop()
                for nb in graph.adj[u]:
                    if nb in node_set and nb not in comp:
                        comp.add(nb)
                        stack.append(nb)
            unvisited -= comp
            if not first:
                for v in comp:
                    assignment[v] = next_label
                next_label += 1
                splits += 1
            first = False
    return splits


def renumber(assignment: list[int]) -> list[int]:
    """Relabel communities 0..K-1 in order of first appearance by node index."""
    ids: dict[int, int] = {}
    return [ids.setdefault(c, len(ids)) for c in assignment]


def leiden(graph: Graph, resolution: float = 1.0, seed: int = 0, theta: float = 0.01,
           max_passes: int = 20, initial: list[int] | None = None) -> LeidenResult:
    """Mine communities; deterministic for a fixed (graph, resolution, seed)."""
    check_positive("resolution", resolution)
    check_positive("theta", theta)
    check_positive("max_passes", max_passes)
    n = graph.num_nodes
    if n == 0:
        return LeidenResult([], 0, 0.0, resolution, seed)
    if initial is not None and len(initial) != n:
        raise ValueError("initial assignment length does not match graph size")
    assignment = list(initial) if initial is not None else list(range(n))
    m = graph.total_weight()
    if m <= 0:
        assignment = renumber(assignment)
        return LeidenResult(assignment, max(assignment) + 1, 0.0, resolution, seed,
                            [0.0])
    strengths = [graph.strength(v) for v in range(n)]
    rng = np.random.Generator(np.random.PCG64(seed))
    trace: list[float] = []
    for _ in range(max_passes):
        assignment, moves = _one_pass(graph, assignment, resolution, theta, m,
                                      strengths, rng)
        splits = _split_disconnected(graph, assignment)
        trace.append(modularity(graph, assignment, resolution))
        if moves == 0 and splits == 0:
            break
    assignment = renumber(assignment)
    quality = modularity(graph, assignment, resolution)
    return LeidenResult(assignment, max(assignment) + 1, quality, resolution, seed,
                        trace)


def most_frequent_cluster(assignment: list[int]) -> int:
    """Largest cluster's label; ties resolved toward the lowest label."""
    if not assignment:
        raise ValueError("empty assignment")
    counts = Counter(assignment)
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


def weighted_majority(graph: Graph, node: int, labels: list[int]) -> int | None:
    """Cluster whose members carry the most edge weight to ``node``.

    Labels below zero mean "unknown" and are skipped.  Returns None when no
    labeled neighbor exists; ties resolve toward the lowest label.
    """
    scores: dict[int, float] = {}
    for u, w in graph.adj[node].items():
        if u == node or u >= len(labels):
            continue
        c = labels[u]
        if c < 0:
            continue
        scores[c] = scores.get(c, 0.0) + w
    if not scores:
        return None
    return max(scores.items(), key=lambda kv: (kv[1], -kv[0]))[0]


# ---------------------------------------------------------------------------
# Partition artifact: a single JSON document.

def write_partition(path: str | Path, result: LeidenResult, config_hash: str = "",
                    extra: dict | None = None) -> dict:
    doc = {
        "resolution": result.resolution,
        "seed": result.seed,
        "num_clusters": result.num_clusters,
        "assignment": list(result.assignment),
        "quality": result.quality,
        "config_hash": config_hash,
    }
    if extra:
        doc.update(extra)
    write_json(path, doc)
    return doc


def read_partition(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"partition file not found: {path}")
    doc = read_json(path)
    for key in ("resolution", "seed", "num_clusters", "assignment", "quality"):
        if key not in doc:
            raise UsageError(f"partition file {path} is missing {key!r}")
    assignment = doc["assignment"]
    if not isinstance(assignment, list) or not assignment:
        raise UsageError(f"partition file {path} has an empty assignment")
    labels = set(assignment)
    if labels != set(range(doc["num_clusters"])):
        raise UsageError(
            f"partition file {path}: labels must cover 0..{doc['num_clusters'] - 1}"
        )
    return doc
