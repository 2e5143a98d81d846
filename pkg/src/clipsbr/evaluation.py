"""Full-catalog ranking metrics and the test-time unseen-item protocol.

Ranks are pessimistic about ties: every item scoring equal to the label
counts as ranked above it, so rank = #{strictly greater} + #{equal}.

Items that never occurred in training have no mined cluster.  During one
evaluation they are resolved progressively, per session, on a throwaway
copy of the item graph: when an unresolved item has appeared together
with cluster-labeled items in the current session, overlay edges are
added toward those items and the weighted majority of its overlay
neighborhood becomes its cluster (cached for the rest of the
evaluation).  An item that never meets a labeled companion, e.g. in an
all-unseen session, keeps the most frequent training cluster.  The
persisted graph and partition are never touched, so evaluations are
repeatable.
"""

from __future__ import annotations

import numpy as np

from ._validation import UsageError
from .community import most_frequent_cluster, weighted_majority
from .dataset import SessionDataset, sequence_split
from .graph import Graph
from .model import encode, pad_batch, score_table
from .prompt import SessionPromptIndex, fuse_items, variant_uses

_FLUSH_LIMIT = 1024


def rank_of_label(scores: np.ndarray, label: int) -> int:
    z = scores[label]
    return int(np.sum(scores > z) + np.sum(scores == z))


def ranks_of_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits[np.arange(len(labels)), labels][:, None]
    return (np.sum(logits > z, axis=1) + np.sum(logits == z, axis=1)).astype(np.int64)


def mrr_at_k(ranks: list[int] | np.ndarray, k: int) -> float:
    if len(ranks) == 0:
        raise ValueError("no ranks to aggregate")
    r = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(np.where(r <= k, 1.0 / r, 0.0)))


def recall_at_k(ranks: list[int] | np.ndarray, k: int) -> float:
    if len(ranks) == 0:
        raise ValueError("no ranks to aggregate")
    r = np.asarray(ranks)
    return float(np.mean(r <= k))


class _UnseenResolver:
    """Per-evaluation overlay state for cluster-less items."""

    def __init__(self, graph: Graph | None, num_items: int, assignment: list[int],
                 default: int):
        self.default = default
        self.labels = np.full(num_items, -1, dtype=np.int64)
        self.labels[: len(assignment)] = assignment
        self.overlay: Graph | None = None
        if graph is not None:
            adj = [dict(nbrs) for nbrs in graph.adj]
            adj.extend(dict() for _ in range(num_items - graph.num_nodes))
            self.overlay = Graph(num_items, adj)
        self.linked: dict[int, set[int]] = {}
        self.changed: list[int] = []

    def cluster_of(self, item: int) -> int:
        c = int(self.labels[item])
        return c if c >= 0 else self.default

    def cluster_array(self) -> np.ndarray:
        return np.where(self.labels >= 0, self.labels, self.default)

    def observe(self, revealed: list[int]) -> None:
        """Try to resolve every unlabeled revealed item against the labeled
        ones revealed so far; newly resolved items unlock further passes."""
        if self.overlay is None:
            return
        pending = [i for i in dict.fromkeys(revealed) if self.labels[i] < 0]
        if not pending:
            return
        progress = True
        while progress and pending:
            progress = False
            still = []
            for item in pending:
                links = self.linked.setdefault(item, set())
                for other in revealed:
                    if other != item and other not in links and self.labels[other] >= 0:
                        self.overlay.add_edge(item, other, 1.0)
                        links.add(other)
                if links:
                    vote = weighted_majority(self.overlay, item, self.labels)
                    if vote is not None:
                        self.labels[item] = vote
                        self.changed.append(item)
                        progress = True
                        continue
                still.append(item)
            pending = still

    def has_unresolved(self, items) -> bool:
        return bool(np.any(self.labels[list(items)] < 0))

    def take_changes(self) -> list[int]:
        out = self.changed
        self.changed = []
        return out


def _fuse_catalog(params, variant, resolver, u_slot, s_slot) -> np.ndarray:
    table, _ = fuse_items(params["item_emb"], params, variant,
                          resolver.cluster_array(), u_slot, s_slot)
    return table


def _refresh_rows(table, params, variant, resolver, items, u_slot, s_slot) -> None:
    for item in items:
        row, _ = fuse_items(params["item_emb"][item : item + 1], params, variant,
                            np.array([resolver.cluster_of(item)]), u_slot, s_slot)
        table[item] = row[0]


def evaluate(
    params: dict[str, np.ndarray],
    encoder: str,
    variant: str,
    dataset: SessionDataset,
    split: str,
    assignment: list[int],
    graph: Graph | None = None,
    ks: list[int] | None = None,
    session_index: SessionPromptIndex | None = None,
    config_hash: str = "",
) -> dict:
    """Rank every prefix instance of a split against the full catalog.

    Returns {"split", "ks", "metrics": {str(k): {"mrr", "recall"}},
    "n_instances", "config_hash", "ranks"}.
    """
    ks = sorted(ks) if ks else [5, 10]
    if any(k < 1 for k in ks):
        raise UsageError("k must be >= 1")
    sessions = dataset.split(split)
    if not sessions:
        raise UsageError(f"split {split!r} is empty")

    num_items = dataset.num_items
    default = most_frequent_cluster(assignment) if assignment else 0
    resolver = _UnseenResolver(graph, num_items, assignment, default)
    per_context = variant_uses(variant, "U") or variant_uses(variant, "S")

    shared_table = None
    if not per_context:
        shared_table = _fuse_catalog(params, variant, resolver, None, None)

    ranks: list[int] = []
    buffer: list[tuple[tuple[int, ...], int]] = []

    def score_batch(table: np.ndarray, prefixes: list[tuple[int, ...]],
                    labels: list[int]) -> None:
        idx, mask = pad_batch(prefixes)
        s, _ = encode(params, encoder, table[idx], mask)
        logits = score_table(s, table)
        ranks.extend(int(r) for r in
                     ranks_of_labels(logits, np.array(labels, dtype=np.int64)))

    def flush() -> None:
        if buffer:
            score_batch(shared_table, [p for p, _ in buffer], [l for _, l in buffer])
            buffer.clear()

    for session in sessions:
        has_unresolved = resolver.has_unresolved(session.items)
        u_slot = session.user if variant_uses(variant, "U") else None
        s_slot = None
        if variant_uses(variant, "S"):
            if session_index is None:
                raise UsageError(f"variant {variant!r} needs a session prompt index")
            s_slot = session_index.slot(session.user, session.ordinal)

        instances = sequence_split(session)
        if not per_context and not has_unresolved:
            # common fast path: context-free table, nothing to resolve
            for inst in instances:
                buffer.append((inst.prefix, inst.label))
                if len(buffer) >= _FLUSH_LIMIT:
                    flush()
            continue

        if not per_context:
            flush()
            table = shared_table
        else:
            table = _fuse_catalog(params, variant, resolver, u_slot, s_slot)

        if not has_unresolved:
            score_batch(table, [i.prefix for i in instances],
                        [i.label for i in instances])
            continue
        for inst in instances:
            resolver.observe(list(inst.prefix))
            changed = resolver.take_changes()
            if changed:
                _refresh_rows(table, params, variant, resolver, changed, u_slot, s_slot)
            idx, mask = pad_batch([inst.prefix])
            s, _ = encode(params, encoder, table[idx], mask)
            logits = score_table(s, table)
            ranks.append(int(ranks_of_labels(logits, np.array([inst.label]))[0]))
    flush()

    metrics = {str(k): {"mrr": mrr_at_k(ranks, k), "recall": recall_at_k(ranks, k)}
               for k in ks}
    return {
        "split": split,
        "ks": ks,
        "metrics": metrics,
        "n_instances": len(ranks),
        "config_hash": config_hash,
        "ranks": ranks,
    }
