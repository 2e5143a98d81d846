"""Sequence encoders, full-catalog scoring, and hand-written gradients.

Two session encoders over prompt-fused item vectors:

* ``gru``: gated recurrent unit, gates z/r and candidate n with the
  reset gate applied to the hidden state before its matrix:
      z = sig(x Wz + h Uz + bz)
      r = sig(x Wr + h Ur + br)
      n = tanh(x Wn + (r * h) Un + bn)
      h' = (1 - z) * n + z * h
* ``attn``: additive attention pooling,
      u = tanh(X P^T),  e = u . q,  a = softmax(e),  s = sum_t a_t x_t

Scores are inner products of the session vector against every row of the
fused item table; training loss is softmax cross-entropy on the next
item.  Every backward pass here is derived by hand from these equations
and checked against finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from ._validation import UsageError, check_choice
from .dataset import Instance
from .prompt import (PromptShapes, SessionPromptIndex, fuse_items,
                     fuse_items_backward, init_prompts, sigmoid, variant_uses)
from .utils import spawn_rngs

ENCODERS = ("gru", "attn")

_GRU_MATS = ("gru_wz", "gru_wr", "gru_wn", "gru_uz", "gru_ur", "gru_un")
_GRU_BIASES = ("gru_bz", "gru_br", "gru_bn")


def _xavier(rng: np.random.Generator, rows: int, cols: int, dtype) -> np.ndarray:
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols)).astype(dtype)


def init_model(num_items: int, dim: int, encoder: str, variant: str,
               num_clusters: int, num_users: int, num_session_slots: int,
               seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Create all learnable tensors for one model configuration."""
    check_choice("encoder", encoder, ENCODERS)
    rng_model, rng_prompt = spawn_rngs(seed, 2)
    params: dict[str, np.ndarray] = {}
    params["item_emb"] = _xavier(rng_model, num_items, dim, dtype)
    if encoder == "gru":
        for name in _GRU_MATS:
            params[name] = _xavier(rng_model, dim, dim, dtype)
        for name in _GRU_BIASES:
            params[name] = np.zeros(dim, dtype=dtype)
    else:
        params["attn_proj"] = _xavier(rng_model, dim, dim, dtype)
        params["attn_query"] = _xavier(rng_model, 1, dim, dtype)[0]
    shapes = PromptShapes(variant, num_clusters, num_users, num_session_slots, dim)
    params.update(init_prompts(shapes, rng_prompt, dtype))
    return params


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in params.items()}


def pad_batch(prefixes: list[tuple[int, ...]]) -> tuple[np.ndarray, np.ndarray]:
    """Left-aligned padding; returns (index matrix, boolean mask)."""
    if not prefixes:
        raise ValueError("empty batch")
    longest = max(len(p) for p in prefixes)
    idx = np.zeros((len(prefixes), longest), dtype=np.int64)
    mask = np.zeros((len(prefixes), longest), dtype=bool)
    for i, p in enumerate(prefixes):
        if not p:
            raise ValueError("empty prefix")
        idx[i, : len(p)] = p
        mask[i, : len(p)] = True
    return idx, mask


# ---------------------------------------------------------------------------
# GRU

def gru_forward(params: dict, x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, dict]:
    """x: (B, L, d) fused vectors; mask freezes the hidden state on padding.

    Returns the final hidden state (B, d) and a cache for the backward pass.
    """
    b, length, d = x.shape
    h = np.zeros((b, d), dtype=x.dtype)
    steps = []
    for t in range(length):
        xt = x[:, t, :]
        z = sigmoid(xt @ params["gru_wz"] + h @ params["gru_uz"] + params["gru_bz"])
        r = sigmoid(xt @ params["gru_wr"] + h @ params["gru_ur"] + params["gru_br"])
        hr = r * h
        n = np.tanh(xt @ params["gru_wn"] + hr @ params["gru_un"] + params["gru_bn"])
        h_new = (1.0 - z) * n + z * h
        m = mask[:, t : t + 1]
        steps.append({"x": xt, "h_prev": h, "z": z, "r": r, "n": n, "hr": hr})
        h = np.where(m, h_new, h)
    return h, {"steps": steps, "mask": mask}


def gru_backward(params: dict, d_h: np.ndarray, cache: dict,
                 grads: dict) -> np.ndarray:
    """Backprop through time; returns gradient w.r.t. the input tensor."""
    steps, mask = cache["steps"], cache["mask"]
    length = len(steps)
    d_x = np.zeros((d_h.shape[0], length, d_h.shape[1]), dtype=d_h.dtype)
    for t in range(length - 1, -1, -1):
        st = steps[t]
        m = mask[:, t : t + 1]
        d_active = d_h * m                       # frozen rows pass straight through
        d_carry = d_h * (~m)
        z, r, n, hr, h_prev, xt = st["z"], st["r"], st["n"], st["hr"], st["h_prev"], st["x"]

        d_z = d_active * (h_prev - n)
        d_n = d_active * (1.0 - z)
        d_h_prev = d_active * z

        d_n_pre = d_n * (1.0 - n * n)
        grads["gru_wn"] += xt.T @ d_n_pre
        grads["gru_un"] += hr.T @ d_n_pre
        grads["gru_bn"] += d_n_pre.sum(axis=0)
        d_x[:, t, :] += d_n_pre @ params["gru_wn"].T
        d_hr = d_n_pre @ params["gru_un"].T
        d_r = d_hr * h_prev
        d_h_prev += d_hr * r

        d_r_pre = d_r * r * (1.0 - r)
        grads["gru_wr"] += xt.T @ d_r_pre
        grads["gru_ur"] += h_prev.T @ d_r_pre
        grads["gru_br"] += d_r_pre.sum(axis=0)
        d_x[:, t, :] += d_r_pre @ params["gru_wr"].T
        d_h_prev += d_r_pre @ params["gru_ur"].T

        d_z_pre = d_z * z * (1.0 - z)
        grads["gru_wz"] += xt.T @ d_z_pre
        grads["gru_uz"] += h_prev.T @ d_z_pre
        grads["gru_bz"] += d_z_pre.sum(axis=0)
        d_x[:, t, :] += d_z_pre @ params["gru_wz"].T
        d_h_prev += d_z_pre @ params["gru_uz"].T

        d_h = d_carry + d_h_prev
    return d_x


# ---------------------------------------------------------------------------
# Attention pooling

def attn_forward(params: dict, x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, dict]:
    u = np.tanh(x @ params["attn_proj"].T)            # (B, L, d)
    e = u @ params["attn_query"]                      # (B, L)
    e = np.where(mask, e, -np.inf)
    e_shift = e - e.max(axis=1, keepdims=True)
    w = np.exp(e_shift)
    alpha = w / w.sum(axis=1, keepdims=True)
    s = np.einsum("bl,bld->bd", alpha, x)
    return s, {"u": u, "alpha": alpha, "x": x, "mask": mask}


def attn_backward(params: dict, d_s: np.ndarray, cache: dict,
                  grads: dict) -> np.ndarray:
    u, alpha, x = cache["u"], cache["alpha"], cache["x"]
    d_alpha = np.einsum("bd,bld->bl", d_s, x)
    d_x = alpha[:, :, None] * d_s[:, None, :]
    # softmax jacobian: de = a * (da - sum(a * da)); masked slots have a = 0
    inner = (alpha * d_alpha).sum(axis=1, keepdims=True)
    d_e = alpha * (d_alpha - inner)
    d_u = d_e[:, :, None] * params["attn_query"][None, None, :]
    grads["attn_query"] += np.einsum("bl,bla->a", d_e, u)
    d_u_pre = d_u * (1.0 - u * u)
    grads["attn_proj"] += np.einsum("bla,bld->ad", d_u_pre, x)
    d_x += d_u_pre @ params["attn_proj"]
    return d_x


def encode(params: dict, encoder: str, x: np.ndarray, mask: np.ndarray):
    if encoder == "gru":
        return gru_forward(params, x, mask)
    if encoder == "attn":
        return attn_forward(params, x, mask)
    raise UsageError(f"unknown encoder {encoder!r}")


def encode_backward(params: dict, encoder: str, d_s: np.ndarray, cache: dict,
                    grads: dict) -> np.ndarray:
    if encoder == "gru":
        return gru_backward(params, d_s, cache, grads)
    return attn_backward(params, d_s, cache, grads)


# ---------------------------------------------------------------------------
# Scoring and loss

def score_table(s: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Inner-product scores of each session vector against every item row."""
    return s @ table.T


def xent_forward(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed cross-entropy and the softmax probabilities (for the backward)."""
    shift = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shift)
    denom = ex.sum(axis=1, keepdims=True)
    probs = ex / denom
    rows = np.arange(logits.shape[0])
    log_probs = shift[rows, labels] - np.log(denom[:, 0])
    return float(-log_probs.sum()), probs


def xent_backward(probs: np.ndarray, labels: np.ndarray, scale: float) -> np.ndarray:
    d_logits = probs.copy()
    d_logits[np.arange(len(labels)), labels] -= 1.0
    return d_logits * scale


def group_by_context(instances: list[Instance], variant: str,
                     session_index: SessionPromptIndex | None
                     ) -> list[tuple[tuple[int | None, int | None], list[Instance]]]:
    """Bucket instances whose prompt context (user slot, session slot) agrees.

    Variants without user or session prompts collapse to one bucket, so a
    batch shares a single fused table.
    """
    use_u = variant_uses(variant, "U")
    use_s = variant_uses(variant, "S")
    if not use_u and not use_s:
        return [((None, None), list(instances))]
    if use_s and session_index is None:
        raise UsageError(f"variant {variant!r} needs a session prompt index")
    buckets: dict[tuple[int | None, int | None], list[Instance]] = {}
    order: list[tuple[int | None, int | None]] = []
    for inst in instances:
        u_slot = inst.user if use_u else None
        s_slot = session_index.slot(inst.user, inst.session_ordinal) if use_s else None
        key = (u_slot, s_slot)
        if key not in buckets:
            buckets[key] = []
            order.append(key)
        buckets[key].append(inst)
    return [(key, buckets[key]) for key in order]


def batch_loss_and_grads(
    params: dict[str, np.ndarray],
    encoder: str,
    variant: str,
    instances: list[Instance],
    cluster_of: np.ndarray | None,
    session_index: SessionPromptIndex | None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch plus gradients for every tensor.

    The fused table serves twice per context group: rows are gathered as
    encoder inputs and the whole table is the scoring target, so its
    gradient collects both the scatter from the prefix positions and the
    scoring term before flowing back into prompts and embeddings.
    """
    grads = zero_grads(params)
    batch_size = len(instances)
    total = 0.0
    for (u_slot, s_slot), group in group_by_context(instances, variant, session_index):
        table, fcache = fuse_items(params["item_emb"], params, variant,
                                   cluster_of, u_slot, s_slot)
        idx, mask = pad_batch([inst.prefix for inst in group])
        x = table[idx]
        s, ecache = encode(params, encoder, x, mask)
        logits = score_table(s, table)
        labels = np.array([inst.label for inst in group], dtype=np.int64)
        loss_sum, probs = xent_forward(logits, labels)
        total += loss_sum

        d_logits = xent_backward(probs, labels, 1.0 / batch_size)
        d_s = d_logits @ table
        d_table = d_logits.T @ s
        d_x = encode_backward(params, encoder, d_s, ecache, grads)
        np.add.at(d_table, idx[mask], d_x[mask])
        grads["item_emb"] += fuse_items_backward(d_table, fcache, grads)
    return total / batch_size, grads


def score_instances(params: dict[str, np.ndarray], encoder: str,
                    table: np.ndarray, prefixes: list[tuple[int, ...]]) -> np.ndarray:
    """Forward-only scores (B, num_items) for prefixes under one fused table."""
    idx, mask = pad_batch(prefixes)
    s, _ = encode(params, encoder, table[idx], mask)
    return score_table(s, table)
