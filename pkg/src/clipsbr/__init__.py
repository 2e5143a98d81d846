"""Session-based recommendation with graph-mined item clusters and
learnable prompt fusion.

Pipeline: interaction log -> sessions -> item co-occurrence graph ->
community mining -> prompt-fused embeddings -> sequence encoder ->
full-catalog next-item ranking.
"""

from .community import LeidenResult, leiden, modularity, most_frequent_cluster
from .dataset import (Session, SessionDataset, build_dataset, filter_sessions,
                      load_interactions, sequence_split, sessionize,
                      split_dataset)
from .estimators import LeidenCommunities, SessionPromptRecommender
from .evaluation import evaluate, mrr_at_k, rank_of_label, recall_at_k
from .graph import Graph, build_graph
from .model import init_model
from .prompt import VARIANTS, SessionPromptIndex, fuse_items
from .synth import generate as generate_synth
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "LeidenCommunities",
    "LeidenResult",
    "Session",
    "SessionDataset",
    "SessionPromptIndex",
    "SessionPromptRecommender",
    "TrainConfig",
    "VARIANTS",
    "build_dataset",
    "build_graph",
    "evaluate",
    "filter_sessions",
    "fit",
    "fuse_items",
    "generate_synth",
    "init_model",
    "leiden",
    "load_checkpoint",
    "load_interactions",
    "modularity",
    "most_frequent_cluster",
    "mrr_at_k",
    "rank_of_label",
    "recall_at_k",
    "save_checkpoint",
    "sequence_split",
    "sessionize",
    "split_dataset",
    "__version__",
]
