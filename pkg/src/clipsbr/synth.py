"""Synthetic interaction logs with planted item clusters.

Items split into equal-size blocks, one per planted cluster.  Every
session draws one cluster and samples its items from that block without
replacement; each emitted item is then flipped, with the given noise
probability, to a uniform random catalog item.  Timestamps step 10 s
inside a session and one day between sessions, so re-sessionizing with
the default one-hour gap reconstructs the generated sessions exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ._validation import UsageError, check_at_least, check_positive
from .utils import write_json

_BASE_TIME = 1_600_000_000
_SESSION_STEP = 86_400
_ITEM_STEP = 10
_MIN_LEN, _MAX_LEN = 4, 8


def generate(
    num_items: int,
    num_clusters: int,
    num_users: int,
    sessions_per_user: int,
    noise: float,
    seed: int = 0,
) -> tuple[list[tuple[str, str, int]], dict]:
    """Returns (rows, truth): TSV rows (user, item, ts) and the planted map."""
    check_positive("num_items", num_items)
    check_positive("num_clusters", num_clusters)
    check_positive("num_users", num_users)
    check_at_least("sessions_per_user", sessions_per_user, 1)
    if num_items % num_clusters != 0:
        raise UsageError("num_items must be divisible by num_clusters")
    if not (0.0 <= noise < 1.0):
        raise UsageError("noise must be in [0, 1)")

    block = num_items // num_clusters
    if block < _MAX_LEN:
        raise UsageError(f"planted clusters need at least {_MAX_LEN} items each")
    rng = np.random.Generator(np.random.PCG64(seed))

    def item_id(i: int) -> str:
        return f"i{i:05d}"

    rows: list[tuple[str, str, int]] = []
    for u in range(num_users):
        user = f"u{u:04d}"
        t0 = _BASE_TIME + u
        for s in range(sessions_per_user):
            cluster = int(rng.integers(num_clusters))
            length = int(rng.integers(_MIN_LEN, _MAX_LEN + 1))
            picks = rng.choice(block, size=length, replace=False) + cluster * block
            flips = rng.random(length) < noise
            noise_items = rng.integers(num_items, size=length)
            items = np.where(flips, noise_items, picks)
            start = t0 + s * _SESSION_STEP
            for j, it in enumerate(items):
                rows.append((user, item_id(int(it)), start + j * _ITEM_STEP))

    truth = {
        "num_items": num_items,
        "num_clusters": num_clusters,
        "noise": noise,
        "seed": seed,
        "clusters": {item_id(i): i // block for i in range(num_items)},
    }
    return rows, truth


def write_synth(out_dir: str | Path, rows: list[tuple[str, str, int]],
                truth: dict) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "data.tsv"
    with open(data_path, "w", encoding="utf-8") as fh:
        for user, item, ts in rows:
            fh.write(f"{user}\t{item}\t{ts}\n")
    truth_path = out / "truth.json"
    write_json(truth_path, truth)
    return data_path, truth_path
