"""Weighted undirected item graph built from session transitions.

Every adjacent pair (a, b) inside a session adds 1 to the weight of the
undirected edge {a, b}.  A repeated item (a, a) becomes a self-loop.
The graph is the substrate for community mining and also supports the
evaluation-time trick of wiring unseen items into an existing partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ._validation import UsageError, check_at_least
from .dataset import Session


@dataclass
class Graph:
    """Undirected weighted graph on nodes 0..num_nodes-1.

    ``adj[u]`` maps neighbor -> weight; self-loops are stored once as
    ``adj[u][u]``.  ``strength(u)`` follows the convention that a loop of
    weight w contributes 2w to the node's degree, so the total degree mass
    equals twice the total edge mass.
    """

    num_nodes: int
    adj: list[dict[int, float]] = field(default_factory=list)

    def __post_init__(self):
        check_at_least("num_nodes", self.num_nodes, 0)
        if not self.adj:
            self.adj = [dict() for _ in range(self.num_nodes)]
        elif len(self.adj) != self.num_nodes:
            raise ValueError("adjacency size does not match num_nodes")

    def add_edge(self, u: int, v: int, weight: float = 1.0) -> None:
        if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
            raise ValueError(f"edge ({u}, {v}) out of range for {self.num_nodes} nodes")
        if weight <= 0:
            raise ValueError("edge weight must be positive")
        self.adj[u][v] = self.adj[u].get(v, 0.0) + weight
        if u != v:
            self.adj[v][u] = self.adj[v].get(u, 0.0) + weight

    def weight(self, u: int, v: int) -> float:
        return self.adj[u].get(v, 0.0)

    def neighbors(self, u: int) -> dict[int, float]:
        return self.adj[u]

    def strength(self, u: int) -> float:
        s = 0.0
        for v, w in self.adj[u].items():
            s += 2.0 * w if v == u else w
        return s

    def total_weight(self) -> float:
        """Sum of edge weights, loops counted once."""
        total = 0.0
        for u in range(self.num_nodes):
            for v, w in self.adj[u].items():
                if v >= u:
                    total += w
        return total

    def num_edges(self) -> int:
        return sum(1 for u in range(self.num_nodes) for v in self.adj[u] if v >= u)

    def degree_sum(self) -> float:
        return sum(self.strength(u) for u in range(self.num_nodes))

    def edges(self) -> Iterable[tuple[int, int, float]]:
        for u in range(self.num_nodes):
            for v, w in sorted(self.adj[u].items()):
                if v >= u:
                    yield u, v, w

    def copy(self) -> "Graph":
        return Graph(self.num_nodes, [dict(nbrs) for nbrs in self.adj])

    def connected_within(self, nodes: Sequence[int]) -> bool:
        """True when ``nodes`` induce a connected subgraph (singletons count)."""
        if not nodes:
            return True
        node_set = set(nodes)
        seen = {nodes[0]}
        stack = [nodes[0]]
        while stack:
            u = stack.pop()
            for v in self.adj[u]:
                if v in node_set and v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == len(node_set)


def build_graph(sessions: Iterable[Session], num_items: int) -> Graph:
    """Accumulate adjacent-pair co-occurrence counts over all sessions."""
    g = Graph(num_items)
    for s in sessions:
        for a, b in zip(s.items, s.items[1:]):
            g.add_edge(a, b, 1.0)
    return g


def integrate_item(graph: Graph, item: int, context: Sequence[int]) -> bool:
    """Wire one node into the graph using the items around it in a session.

    Adds an edge of weight 1 from ``item`` to each distinct in-range
    context item other than itself.  Returns True when at least one edge
    was added; the caller decides which context items qualify.
    """
    added = False
    for other in dict.fromkeys(context):
        if other == item or not (0 <= other < graph.num_nodes):
            continue
        graph.add_edge(item, other, 1.0)
        added = True
    return added


# ---------------------------------------------------------------------------
# Edge-list file format: "#nodes N" comment line then "u v w" rows.

def write_edgelist(graph: Graph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#nodes {graph.num_nodes}\n")
        for u, v, w in graph.edges():
            text = f"{w:.10g}"
            fh.write(f"{u} {v} {text}\n")


def read_edgelist(path: str | Path) -> Graph:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"edge list not found: {path}")
    num_nodes = None
    edges: list[tuple[int, int, float]] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "nodes":
                    num_nodes = int(parts[1])
                continue
            parts = line.split()
            if len(parts) != 3:
                raise UsageError(f"{path}, line {line_no}: expected 'u v w'")
            try:
                u, v, w = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise UsageError(f"{path}, line {line_no}: expected 'u v w'") from None
            edges.append((u, v, w))
    if num_nodes is None:
        num_nodes = 1 + max((max(u, v) for u, v, _ in edges), default=-1)
    g = Graph(num_nodes)
    for u, v, w in edges:
        g.add_edge(u, v, w)
    return g
