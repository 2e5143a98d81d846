"""Optimization loop: Adam, mini-batching, early stopping, checkpoints.

Model selection watches MRR@5 on the validation split.  Gradients are
averaged over the batch so the learning rate transfers across batch
sizes.  The checkpoint container is binary: magic ``CLIPSBR1``, a
length-prefixed JSON header declaring tensor names and shapes, then raw
little-endian float32 payloads (parameters, then Adam first and second
moments) in the declared order.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import UsageError, check_at_least, check_choice, check_positive
from .community import most_frequent_cluster
from .dataset import SessionDataset, instances_of
from .evaluation import evaluate
from .graph import Graph
from .model import ENCODERS, batch_loss_and_grads, init_model, zero_grads
from .prompt import VARIANTS, SessionPromptIndex, variant_uses
from .utils import canonical_json

CHECKPOINT_MAGIC = b"CLIPSBR1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# paper-tuned search grids; other values are accepted but these are the menu
BATCH_SIZES = (64, 128, 256, 512, 1024)
LEARNING_RATES = (0.001, 0.005, 0.01, 0.05)


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.001
    max_epochs: int = 100
    patience: int = 50
    seed: int = 0
    encoder: str = "gru"
    prompt_variant: str = "C"
    resolution: float = 1.0
    d: int = 64

    def validate(self) -> "TrainConfig":
        check_at_least("batch_size", self.batch_size, 1)
        check_positive("learning_rate", self.learning_rate)
        check_at_least("max_epochs", self.max_epochs, 1)
        check_at_least("patience", self.patience, 1)
        check_at_least("d", self.d, 1)
        check_positive("resolution", self.resolution)
        check_choice("encoder", self.encoder, ENCODERS)
        check_choice("prompt_variant", self.prompt_variant, VARIANTS)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class FitResult:
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    metrics: dict[str, float]
    history: list[dict]
    stopped: str  # "max_epochs" | "patience" | "nan"


def _snapshot(params: dict[str, np.ndarray], state: AdamState
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    return ({k: p.copy() for k, p in params.items()},
            AdamState(state.step,
                      {k: a.copy() for k, a in state.m.items()},
                      {k: a.copy() for k, a in state.v.items()}))


def fit(
    dataset: SessionDataset,
    config: TrainConfig,
    assignment: list[int],
    graph: Graph | None = None,
    log_path: str | Path | None = None,
    dtype=np.float32,
) -> FitResult:
    """Train one model; returns the best checkpoint by validation MRR@5.

    Clustering happens strictly before this call: ``assignment`` is the
    frozen partition of the training-item graph.  Validation MRR gains
    under 1e-6 do not reset the patience counter, but any strict gain
    still updates the retained best parameters.  A non-finite loss aborts
    the run and the best (or initial) parameters survive.
    """
    config.validate()
    if not dataset.train:
        raise UsageError("training split is empty")
    if len(assignment) != dataset.num_train_items:
        raise ValueError("partition does not cover the training items")

    instances = instances_of(dataset.train)
    if not instances:
        raise UsageError("no training instances after sequence splitting")
    num_clusters = max(assignment) + 1 if assignment else 1

    # unseen rows default to the most frequent cluster at training time
    cluster_of = np.full(dataset.num_items, most_frequent_cluster(assignment),
                         dtype=np.int64)
    cluster_of[: dataset.num_train_items] = assignment

    session_index = SessionPromptIndex(dataset.train)
    params = init_model(
        num_items=dataset.num_items,
        dim=config.d,
        encoder=config.encoder,
        variant=config.prompt_variant,
        num_clusters=num_clusters,
        num_users=dataset.num_users,
        num_session_slots=session_index.num_slots,
        seed=config.seed,
        dtype=dtype,
    )
    state = AdamState.for_params(params)
    shuffle_rng = np.random.Generator(np.random.PCG64(config.seed + 1))

    best_params, best_state = _snapshot(params, state)
    best_mrr = -np.inf
    best_epoch = 0
    best_metrics = {"valid_mrr5": 0.0, "valid_recall5": 0.0}
    since_improvement = 0
    history: list[dict] = []
    stopped = "max_epochs"
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    try:
        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            order = shuffle_rng.permutation(len(instances))
            loss_sum = 0.0
            diverged = False
            for lo in range(0, len(order), config.batch_size):
                batch = [instances[i] for i in order[lo : lo + config.batch_size]]
                loss, grads = batch_loss_and_grads(
                    params, config.encoder, config.prompt_variant, batch,
                    cluster_of, session_index)
                if not np.isfinite(loss):
                    diverged = True
                    break
                adam_step(params, grads, state, config.learning_rate)
                loss_sum += loss * len(batch)
            if diverged:
                stopped = "nan"
                break

            report = evaluate(
                params, config.encoder, config.prompt_variant, dataset, "valid",
                assignment, graph, ks=[5], session_index=session_index)
            mrr5 = report["metrics"]["5"]["mrr"]
            recall5 = report["metrics"]["5"]["recall"]
            record = {
                "epoch": epoch,
                "train_loss": loss_sum / len(instances),
                "valid_mrr5": mrr5,
                "valid_recall5": recall5,
                "elapsed_s": time.perf_counter() - started,
            }
            history.append(record)
            if log_fh:
                log_fh.write(canonical_json(record) + "\n")
                log_fh.flush()

            # any strict gain updates the retained best; only gains above the
            # 1e-6 guard reset the patience window
            resets_patience = mrr5 > best_mrr + 1e-6
            if mrr5 > best_mrr:
                best_params, best_state = _snapshot(params, state)
                best_epoch = epoch
                best_metrics = {"valid_mrr5": mrr5, "valid_recall5": recall5}
                best_mrr = mrr5
            since_improvement = 0 if resets_patience else since_improvement + 1
            if since_improvement >= config.patience:
                stopped = "patience"
                break
    finally:
        if log_fh:
            log_fh.close()

    return FitResult(params=best_params, adam=best_state, epoch=best_epoch,
                     metrics=best_metrics, history=history, stopped=stopped)


# ---------------------------------------------------------------------------
# Checkpoint container

def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    adam: AdamState, meta: dict) -> None:
    """meta carries config/epoch/metrics/dims plus provenance hashes."""
    names = sorted(params)
    header = dict(meta)
    header["tensors"] = [[n, list(params[n].shape)] for n in names]
    header["adam_step"] = adam.step
    blob = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for group in (params, adam.m, adam.v):
            for n in names:
                fh.write(np.ascontiguousarray(group[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], AdamState, dict]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except ValueError:
            raise UsageError(f"{path} has a corrupt header") from None
        tensors: dict[str, np.ndarray] = {}
        moments_m: dict[str, np.ndarray] = {}
        moments_v: dict[str, np.ndarray] = {}
        for group in (tensors, moments_m, moments_v):
            for name, shape in header["tensors"]:
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(4 * count)
                if len(buf) != 4 * count:
                    raise UsageError(f"{path} is truncated")
                group[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    adam = AdamState(step=header.get("adam_step", 0), m=moments_m, v=moments_v)
    return tensors, adam, header
