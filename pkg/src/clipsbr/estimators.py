"""Scikit-learn style wrappers around the clustering and recommendation
pipeline.  These are conveniences for notebook use; the CLI drives the
file-based pipeline directly.

``LeidenCommunities`` clusters a weighted adjacency matrix.
``SessionPromptRecommender`` trains the prompt-fused next-item model on
raw sessions and predicts the next item for prefixes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import UsageError
from .community import leiden, most_frequent_cluster
from .dataset import Session, split_dataset
from .evaluation import evaluate, mrr_at_k, ranks_of_labels
from .graph import Graph, build_graph
from .model import score_instances
from .prompt import fuse_items
from .training import TrainConfig, fit as fit_model


def _graph_from_adjacency(X) -> Graph:
    A = check_array(X, dtype=np.float64, ensure_2d=True)
    n, m = A.shape
    if n != m:
        raise ValueError(f"adjacency matrix must be square, got {A.shape}")
    if not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("adjacency matrix must be symmetric")
    if np.any(A < 0):
        raise ValueError("edge weights must be non-negative")
    g = Graph(n)
    for i in range(n):
        if A[i, i] > 0:
            g.add_edge(i, i, float(A[i, i]))
        for j in range(i + 1, n):
            if A[i, j] > 0:
                g.add_edge(i, j, float(A[i, j]))
    return g


class LeidenCommunities(ClusterMixin, BaseEstimator):
    """Community detection over a weighted undirected adjacency matrix.

    Parameters mirror :func:`clipsbr.community.leiden`; ``fit`` exposes the
    result through ``labels_``, ``n_clusters_`` and ``quality_``.
    """

    def __init__(self, resolution: float = 1.0, seed: int = 0,
                 theta: float = 0.01, max_passes: int = 20):
        self.resolution = resolution
        self.seed = seed
        self.theta = theta
        self.max_passes = max_passes

    def fit(self, X, y=None):
        g = X if isinstance(X, Graph) else _graph_from_adjacency(X)
        result = leiden(g, resolution=self.resolution, seed=self.seed,
                        theta=self.theta, max_passes=self.max_passes)
        self.labels_ = np.asarray(result.assignment, dtype=np.int64)
        self.n_clusters_ = result.num_clusters
        self.quality_ = result.quality
        self.trace_ = list(result.trace)
        return self


def _as_sessions(X) -> list[tuple[object, list]]:
    """Accept [(user, items), ...] or bare [[items], ...] (one user per row)."""
    out = []
    for i, row in enumerate(X):
        if (isinstance(row, tuple) and len(row) == 2
                and isinstance(row[1], (list, tuple))):
            user, items = row
        else:
            user, items = i, row
        items = list(items)
        if len(items) < 2:
            raise ValueError(f"session {i} has fewer than 2 items")
        out.append((user, items))
    if not out:
        raise ValueError("no sessions supplied")
    return out


class SessionPromptRecommender(BaseEstimator):
    """Next-item recommender with cluster-prompt-fused item embeddings.

    ``fit`` takes sessions as item-id sequences, or (user, sequence)
    pairs when user or session prompts are wanted.  Item ids may be any
    hashable; they are densely indexed internally.  The last
    ``valid_fraction`` of each user's sessions drives early stopping
    (users with a single session contribute it to training; if nothing is
    left over, training sessions double as the validation set).
    """

    def __init__(self, encoder: str = "gru", prompt_variant: str = "C",
                 d: int = 64, resolution: float = 1.0, batch_size: int = 128,
                 learning_rate: float = 0.001, max_epochs: int = 20,
                 patience: int = 5, seed: int = 0, valid_fraction: float = 0.1):
        self.encoder = encoder
        self.prompt_variant = prompt_variant
        self.d = d
        self.resolution = resolution
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.valid_fraction = valid_fraction

    def fit(self, X, y=None):
        pairs = _as_sessions(X)
        user_ids: dict = {}
        item_ids: dict = {}
        sessions = []
        per_user_count: dict[int, int] = {}
        for user, items in pairs:
            u = user_ids.setdefault(user, len(user_ids))
            ordinal = per_user_count.get(u, 0)
            per_user_count[u] = ordinal + 1
            dense = tuple(item_ids.setdefault(it, len(item_ids)) for it in items)
            sessions.append(Session(user=u, items=dense, ordinal=ordinal))

        # split_dataset re-indexes items train-first; its item_ids output maps
        # each final dense index back to whatever we pass here
        dataset = split_dataset(
            sessions, valid_frac=self.valid_fraction, test_frac=0.0,
            item_ids=list(item_ids), user_ids=list(user_ids))
        if not dataset.valid:
            dataset.valid = list(dataset.train)
        self._item_of_dense_ = list(dataset.item_ids)
        self._dense_of_item_ = {it: d for d, it in enumerate(self._item_of_dense_)}

        graph = build_graph(dataset.train, dataset.num_train_items)
        mined = leiden(graph, resolution=self.resolution, seed=self.seed)
        config = TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
            encoder=self.encoder, prompt_variant=self.prompt_variant,
            resolution=self.resolution, d=self.d)
        result = fit_model(dataset, config, mined.assignment, graph=graph)

        self.labels_ = np.asarray(mined.assignment, dtype=np.int64)
        self.n_clusters_ = mined.num_clusters
        self.dataset_ = dataset
        self.graph_ = graph
        self.params_ = result.params
        self.config_ = config
        self.best_epoch_ = result.epoch
        self.valid_mrr5_ = result.metrics["valid_mrr5"]
        cluster_of = np.full(dataset.num_items,
                             most_frequent_cluster(mined.assignment), dtype=np.int64)
        cluster_of[: dataset.num_train_items] = mined.assignment
        self._cluster_of_ = cluster_of
        return self

    def _table(self) -> np.ndarray:
        table, _ = fuse_items(self.params_["item_emb"], self.params_,
                              self.prompt_variant, self._cluster_of_)
        return table

    def _encode_prefixes(self, X) -> list[tuple[int, ...]]:
        prefixes = []
        for i, row in enumerate(X):
            items = list(row)
            if not items:
                raise ValueError(f"prefix {i} is empty")
            try:
                prefixes.append(tuple(self._dense_of_item_[it] for it in items))
            except KeyError as missing:
                raise ValueError(f"unknown item {missing.args[0]!r} in prefix {i}") from None
        return prefixes

    def predict(self, X):
        """Most likely next item (original id) for each prefix in X."""
        check_is_fitted(self, "params_")
        if self.prompt_variant not in ("none", "C"):
            raise UsageError(
                f"predict() supports variants 'none' and 'C', not {self.prompt_variant!r}")
        prefixes = self._encode_prefixes(X)
        logits = score_instances(self.params_, self.encoder, self._table(), prefixes)
        picks = logits.argmax(axis=1)
        return np.array([self._item_of_dense_[int(p)] for p in picks], dtype=object)

    def score(self, X, y, k: int = 5) -> float:
        """MRR@k of the true next items ``y`` given prefixes ``X``."""
        check_is_fitted(self, "params_")
        prefixes = self._encode_prefixes(X)
        labels = np.array([self._dense_of_item_[it] for it in y], dtype=np.int64)
        logits = score_instances(self.params_, self.encoder, self._table(), prefixes)
        return mrr_at_k(ranks_of_labels(logits, labels), k)

    def evaluate_split(self, split: str = "valid", ks=(5, 10)) -> dict:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, self.encoder, self.prompt_variant,
                        self.dataset_, split, list(self.labels_), self.graph_,
                        ks=list(ks))
