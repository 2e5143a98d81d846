"""Learnable prompt tables and their fusion into item embeddings.

A prompt is a trainable vector attached to a context: the item's mined
cluster, the acting user, or the specific session.  Active prompt rows
are length-normalized, summed, normalized again, and blended with the
normalized item embedding through a learned scalar gate per item:

    fused = gate * item_hat + (1 - gate) * prompt_hat
    gate  = sigmoid(w . [item_hat ; prompt_hat] + b)

Variant "none" bypasses all of this and uses raw embeddings.  All
backward passes are written out by hand against these exact equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import UsageError, check_choice
from .dataset import Session

VARIANTS = ("none", "C", "U", "S", "CU", "CS", "US", "CUS")

_NORM_FLOOR = 1e-12


def variant_uses(variant: str, tag: str) -> bool:
    check_choice("variant", variant, VARIANTS)
    return variant != "none" and tag in variant


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit normalization; returns (x_hat, clamped row norms)."""
    r = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), _NORM_FLOOR)
    return x / r, r


def normalize_rows_backward(x_hat: np.ndarray, r: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    """Gradient through row normalization: (g - x_hat (x_hat . g)) / r."""
    dot = np.sum(x_hat * d_hat, axis=-1, keepdims=True)
    return (d_hat - x_hat * dot) / r


@dataclass
class PromptShapes:
    variant: str
    num_clusters: int
    num_users: int
    num_session_slots: int
    dim: int

    def __post_init__(self):
        check_choice("variant", self.variant, VARIANTS)


def init_prompts(shapes: PromptShapes, rng: np.random.Generator,
                 dtype=np.float32) -> dict[str, np.ndarray]:
    """Allocate the tables a variant needs.

    Prompt rows start uniform in [-a, a] with a = sqrt(6 / (rows + dim));
    the gate starts at zero so fusion begins as an even 50/50 blend.
    """
    d = shapes.dim
    params: dict[str, np.ndarray] = {}

    def xavier(rows: int) -> np.ndarray:
        a = np.sqrt(6.0 / (rows + d))
        return rng.uniform(-a, a, size=(rows, d)).astype(dtype)

    if variant_uses(shapes.variant, "C"):
        params["cluster_prompts"] = xavier(shapes.num_clusters)
    if variant_uses(shapes.variant, "U"):
        params["user_prompts"] = xavier(shapes.num_users)
    if variant_uses(shapes.variant, "S"):
        params["session_prompts"] = xavier(shapes.num_session_slots)
    if shapes.variant != "none":
        params["gate_w"] = np.zeros(2 * d, dtype=dtype)
        params["gate_b"] = np.zeros(1, dtype=dtype)
    return params


def fuse_items(
    item_emb: np.ndarray,
    params: dict[str, np.ndarray],
    variant: str,
    cluster_of: np.ndarray | None = None,
    user_slot: int | None = None,
    session_slot: int | None = None,
) -> tuple[np.ndarray, dict]:
    """Build the prompt-injected item table for one context.

    ``cluster_of`` maps each item row to its cluster; ``user_slot`` and
    ``session_slot`` select single prompt rows shared by every item in the
    context.  Returns (table, cache-for-backward).
    """
    if variant == "none":
        return item_emb, {"variant": variant}
    n, d = item_emb.shape

    v_hat, r_v = normalize_rows(item_emb)
    p_sum = np.zeros_like(item_emb)
    cache: dict = {"variant": variant, "n": n}

    if variant_uses(variant, "C"):
        if cluster_of is None:
            raise UsageError(f"variant {variant!r} needs a cluster assignment")
        c_hat, r_c = normalize_rows(params["cluster_prompts"])
        p_sum = p_sum + c_hat[cluster_of]
        cache.update(c_hat=c_hat, r_c=r_c, cluster_of=cluster_of)
    if variant_uses(variant, "U"):
        if user_slot is None:
            raise UsageError(f"variant {variant!r} needs a user slot")
        u_hat, r_u = normalize_rows(params["user_prompts"][user_slot : user_slot + 1])
        p_sum = p_sum + u_hat
        cache.update(u_hat=u_hat, r_u=r_u, user_slot=user_slot)
    if variant_uses(variant, "S"):
        if session_slot is None:
            raise UsageError(f"variant {variant!r} needs a session slot")
        s_hat, r_s = normalize_rows(params["session_prompts"][session_slot : session_slot + 1])
        p_sum = p_sum + s_hat
        cache.update(s_hat=s_hat, r_s=r_s, session_slot=session_slot)

    p_hat, r_p = normalize_rows(p_sum)
    gate_in = np.concatenate([v_hat, p_hat], axis=1)
    z = gate_in @ params["gate_w"] + params["gate_b"][0]
    g = sigmoid(z)
    table = g[:, None] * v_hat + (1.0 - g)[:, None] * p_hat
    cache.update(v_hat=v_hat, r_v=r_v, p_hat=p_hat, r_p=r_p, g=g, gate_in=gate_in,
                 gate_w=params["gate_w"])
    return table, cache


def fuse_items_backward(
    d_table: np.ndarray, cache: dict, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Backprop through :func:`fuse_items`; accumulates prompt and gate
    gradients into ``grads`` and returns the item-embedding gradient."""
    if cache["variant"] == "none":
        return d_table
    variant = cache["variant"]
    v_hat, p_hat, g = cache["v_hat"], cache["p_hat"], cache["g"]

    d_g = np.sum(d_table * (v_hat - p_hat), axis=1)
    d_v_hat = g[:, None] * d_table
    d_p_hat = (1.0 - g)[:, None] * d_table

    d_z = d_g * g * (1.0 - g)
    grads["gate_w"] += cache["gate_in"].T @ d_z
    grads["gate_b"] += np.array([d_z.sum()])
    d_gate_in = d_z[:, None] * cache["gate_w"][None, :]
    d = v_hat.shape[1]
    d_v_hat = d_v_hat + d_gate_in[:, :d]
    d_p_hat = d_p_hat + d_gate_in[:, d:]

    d_p_sum = normalize_rows_backward(p_hat, cache["r_p"], d_p_hat)
    if variant_uses(variant, "C"):
        d_c_hat = np.zeros_like(cache["c_hat"])
        np.add.at(d_c_hat, cache["cluster_of"], d_p_sum)
        grads["cluster_prompts"] += normalize_rows_backward(cache["c_hat"], cache["r_c"], d_c_hat)
    if variant_uses(variant, "U"):
        d_u_hat = d_p_sum.sum(axis=0, keepdims=True)
        slot = cache["user_slot"]
        grads["user_prompts"][slot : slot + 1] += normalize_rows_backward(
            cache["u_hat"], cache["r_u"], d_u_hat)
    if variant_uses(variant, "S"):
        d_s_hat = d_p_sum.sum(axis=0, keepdims=True)
        slot = cache["session_slot"]
        grads["session_prompts"][slot : slot + 1] += normalize_rows_backward(
            cache["s_hat"], cache["r_s"], d_s_hat)

    return normalize_rows_backward(v_hat, cache["r_v"], d_v_hat)


class SessionPromptIndex:
    """Maps (user, session ordinal) to a session-prompt slot.

    Slots are allocated from the training sessions; an ordinal beyond the
    user's training history falls back to that user's last training slot,
    so evaluation sessions reuse the most recent learned prompt.
    """

    def __init__(self, train_sessions: list[Session]):
        self._slot: dict[tuple[int, int], int] = {}
        self._last: dict[int, int] = {}
        ordered = sorted(train_sessions, key=lambda s: (s.user, s.ordinal))
        for s in ordered:
            key = (s.user, s.ordinal)
            if key not in self._slot:
                self._slot[key] = len(self._slot)
                self._last[s.user] = self._slot[key]

    @property
    def num_slots(self) -> int:
        return len(self._slot)

    def slot(self, user: int, ordinal: int) -> int:
        hit = self._slot.get((user, ordinal))
        if hit is not None:
            return hit
        if user not in self._last:
            raise KeyError(f"user {user} has no training sessions")
        return self._last[user]
