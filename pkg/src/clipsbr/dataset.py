"""Interaction-log ingestion, sessionization, filtering, splitting.

The pipeline is: load a TSV of (user, item, timestamp) interactions,
group them into sessions (by inactivity gap, or by an explicit session
column when present), drop short sessions and low-activity users, then
split each user's sessions chronologically into train/valid/test and
re-index items densely.  Items are numbered so that everything that
occurs in the train split comes first: an item index ``>= num_train_items``
marks an item never seen during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Callable, Iterable, Sequence

from ._validation import UsageError, check_at_least, check_fraction, check_positive
from .utils import file_sha256, read_json, write_json


class ParseError(UsageError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyDatasetError(UsageError):
    pass


@dataclass(frozen=True)
class Record:
    user: int
    item: int
    time: int
    session_id: str | None = None


@dataclass
class InteractionLog:
    """Interactions sorted by (user, time); ties keep input order."""

    records: list[Record]
    item_ids: list[str]          # dense index -> original id
    user_ids: list[str]
    has_session_ids: bool = False

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)


@dataclass(frozen=True)
class Session:
    """One user's consecutive interactions; ``ordinal`` is its chronological
    position among that user's sessions."""

    user: int
    items: tuple[int, ...]
    ordinal: int
    times: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Instance:
    prefix: tuple[int, ...]
    label: int
    user: int
    session_ordinal: int


@dataclass
class SessionDataset:
    train: list[Session]
    valid: list[Session]
    test: list[Session]
    num_items: int
    num_users: int
    num_train_items: int
    item_ids: list[str] = field(default_factory=list)
    user_ids: list[str] = field(default_factory=list)

    def is_unseen(self, item: int) -> bool:
        return item >= self.num_train_items

    def split(self, name: str) -> list[Session]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise UsageError(f"unknown split {name!r}") from None


def load_interactions(path: str | Path, fmt: str = "tsv") -> InteractionLog:
    """Read a UTF-8 TSV of interactions.

    Accepted layouts: ``user<TAB>item<TAB>timestamp`` or
    ``user<TAB>session_id<TAB>item<TAB>timestamp``.  A header row is
    detected by a non-numeric timestamp field and skipped.
    """
    if fmt != "tsv":
        raise UsageError(f"unsupported format {fmt!r}")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input file not found: {path}")

    raw: list[tuple[str, str, int, str | None]] = []
    ncols: int | None = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 3:
                user, item, ts_text = parts
                session_id = None
            elif len(parts) == 4:
                user, session_id, item, ts_text = parts
            else:
                raise ParseError(line_no, f"expected 3 or 4 tab-separated fields, got {len(parts)}")
            if ncols is None:
                ncols = len(parts)
                try:
                    int(ts_text)
                except ValueError:
                    continue  # header row
            elif len(parts) != ncols:
                raise ParseError(line_no, f"expected {ncols} fields, got {len(parts)}")
            try:
                ts = int(ts_text)
            except ValueError:
                raise ParseError(line_no, f"timestamp {ts_text!r} is not an integer") from None
            raw.append((user, item, ts, session_id))

    if not raw:
        raise EmptyDatasetError(f"no interaction rows in {path}")

    # Stable sort: equal timestamps within a user keep input order.
    raw.sort(key=lambda r: (r[0], r[2]))

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    records = []
    for user, item, ts, session_id in raw:
        u = user_index.setdefault(user, len(user_index))
        i = item_index.setdefault(item, len(item_index))
        records.append(Record(u, i, ts, session_id))
    return InteractionLog(
        records=records,
        item_ids=list(item_index),
        user_ids=list(user_index),
        has_session_ids=raw[0][3] is not None,
    )


def sessionize(log: InteractionLog, gap_seconds: int) -> list[Session]:
    """Cut each user's record stream into sessions.

    With an explicit session column the grouping is taken as-is; otherwise
    a new session starts whenever the inter-record gap exceeds
    ``gap_seconds``.  Ordinals count sessions chronologically per user.
    """
    check_positive("gap_seconds", gap_seconds)
    sessions: list[Session] = []
    per_user: dict[int, list[Record]] = {}
    for rec in log.records:
        per_user.setdefault(rec.user, []).append(rec)

    for user in sorted(per_user):
        recs = per_user[user]
        groups: list[list[Record]] = []
        if log.has_session_ids:
            current_key: str | None = None
            for rec in recs:
                if not groups or rec.session_id != current_key:
                    groups.append([])
                    current_key = rec.session_id
                groups[-1].append(rec)
        else:
            for rec in recs:
                if not groups or rec.time - groups[-1][-1].time > gap_seconds:
                    groups.append([])
                groups[-1].append(rec)
        for ordinal, group in enumerate(groups):
            sessions.append(
                Session(
                    user=user,
                    items=tuple(r.item for r in group),
                    ordinal=ordinal,
                    times=tuple(r.time for r in group),
                )
            )
    return sessions


def filter_sessions(
    sessions: Sequence[Session], min_session_len: int = 3, min_user_sessions: int = 5
) -> list[Session]:
    """Drop sessions shorter than ``min_session_len``, then users left with
    fewer than ``min_user_sessions`` sessions.  Ordinals are renumbered
    contiguously per surviving user."""
    check_at_least("min_session_len", min_session_len, 1)
    check_at_least("min_user_sessions", min_user_sessions, 1)

    long_enough = [s for s in sessions if len(s) >= min_session_len]
    per_user: dict[int, list[Session]] = {}
    for s in long_enough:
        per_user.setdefault(s.user, []).append(s)

    kept: list[Session] = []
    for user in sorted(per_user):
        user_sessions = sorted(per_user[user], key=lambda s: s.ordinal)
        if len(user_sessions) < min_user_sessions:
            continue
        for new_ordinal, s in enumerate(user_sessions):
            kept.append(Session(user=s.user, items=s.items, ordinal=new_ordinal, times=s.times))
    if sessions and not kept:
        raise EmptyDatasetError(
            f"filtering (min_session_len={min_session_len}, "
            f"min_user_sessions={min_user_sessions}) removed every session"
        )
    return kept


def _split_counts(n: int, valid_frac: float, test_frac: float) -> tuple[int, int, int]:
    """Per-user allocation: ceil fractions, but never let train drop below 1.
    The valid share shrinks before the test share, the test share before train."""
    n_test = ceil(test_frac * n)
    n_valid = ceil(valid_frac * n)
    while n - n_test - n_valid < 1 and n_valid > 0:
        n_valid -= 1
    while n - n_test - n_valid < 1 and n_test > 0:
        n_test -= 1
    return n - n_valid - n_test, n_valid, n_test


def split_dataset(
    sessions: Sequence[Session],
    valid_frac: float = 0.1,
    test_frac: float = 0.1,
    item_ids: Sequence[str] | None = None,
    user_ids: Sequence[str] | None = None,
) -> SessionDataset:
    """Chronological per-user split into train/valid/test.

    The last ``ceil(test_frac * n)`` sessions of each user go to test, the
    preceding ``ceil(valid_frac * n)`` to valid, the rest to train.  Items
    and users are re-indexed densely, train items first, so unseen-at-test
    items are exactly those with index >= ``num_train_items``.
    """
    check_fraction("valid_frac", valid_frac, allow_zero=True)
    check_fraction("test_frac", test_frac, allow_zero=True)
    if valid_frac + test_frac >= 1.0:
        raise UsageError("valid_frac + test_frac must be < 1")
    if not sessions:
        raise EmptyDatasetError("no sessions to split")

    per_user: dict[int, list[Session]] = {}
    for s in sessions:
        per_user.setdefault(s.user, []).append(s)

    train_raw: list[Session] = []
    valid_raw: list[Session] = []
    test_raw: list[Session] = []
    for user in sorted(per_user):
        ordered = sorted(per_user[user], key=lambda s: s.ordinal)
        n_train, n_valid, n_test = _split_counts(len(ordered), valid_frac, test_frac)
        train_raw.extend(ordered[:n_train])
        valid_raw.extend(ordered[n_train : n_train + n_valid])
        test_raw.extend(ordered[n_train + n_valid :])

    # Dense re-indexing: users by first appearance; items train-first.
    user_map: dict[int, int] = {}
    for s in train_raw + valid_raw + test_raw:
        user_map.setdefault(s.user, len(user_map))
    item_map: dict[int, int] = {}
    for s in train_raw:
        for item in s.items:
            item_map.setdefault(item, len(item_map))
    num_train_items = len(item_map)
    for s in valid_raw + test_raw:
        for item in s.items:
            item_map.setdefault(item, len(item_map))

    def remap(batch: list[Session]) -> list[Session]:
        return [
            Session(
                user=user_map[s.user],
                items=tuple(item_map[i] for i in s.items),
                ordinal=s.ordinal,
                times=s.times,
            )
            for s in batch
        ]

    old_item_ids = list(item_ids) if item_ids is not None else None
    old_user_ids = list(user_ids) if user_ids is not None else None
    inv_items = sorted(item_map, key=item_map.get)
    inv_users = sorted(user_map, key=user_map.get)
    return SessionDataset(
        train=remap(train_raw),
        valid=remap(valid_raw),
        test=remap(test_raw),
        num_items=len(item_map),
        num_users=len(user_map),
        num_train_items=num_train_items,
        item_ids=[old_item_ids[i] if old_item_ids else str(i) for i in inv_items],
        user_ids=[old_user_ids[u] if old_user_ids else str(u) for u in inv_users],
    )


def sequence_split(session: Session) -> list[Instance]:
    """Expand a length-L session into its L-1 (prefix, next-item) instances."""
    out = []
    for end in range(1, len(session.items)):
        out.append(
            Instance(
                prefix=session.items[:end],
                label=session.items[end],
                user=session.user,
                session_ordinal=session.ordinal,
            )
        )
    return out


def instances_of(sessions: Iterable[Session]) -> list[Instance]:
    out: list[Instance] = []
    for s in sessions:
        out.extend(sequence_split(s))
    return out


def build_dataset(
    path: str | Path,
    gap_seconds: int = 3600,
    min_session_len: int = 3,
    min_user_sessions: int = 5,
    valid_frac: float = 0.1,
    test_frac: float = 0.1,
) -> SessionDataset:
    """Full ingestion pipeline: load -> sessionize -> filter -> split."""
    log = load_interactions(path)
    sessions = sessionize(log, gap_seconds)
    kept = filter_sessions(sessions, min_session_len, min_user_sessions)
    return split_dataset(kept, valid_frac, test_frac, item_ids=log.item_ids, user_ids=log.user_ids)


# ---------------------------------------------------------------------------
# Split artifacts on disk: three TSVs plus a JSON manifest.

_SPLIT_FILES = {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv"}


def _write_split_file(path: Path, sessions: Sequence[Session]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            times = s.times if len(s.times) == len(s.items) else tuple(range(len(s.items)))
            for item, ts in zip(s.items, times):
                fh.write(f"{s.user}\t{s.ordinal}\t{item}\t{ts}\n")


def write_splits(dataset: SessionDataset, out_dir: str | Path, config_hash: str = "") -> dict:
    """Persist the dataset; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, filename in _SPLIT_FILES.items():
        _write_split_file(out / filename, dataset.split(name))
    with open(out / "items.tsv", "w", encoding="utf-8") as fh:
        for idx, item_id in enumerate(dataset.item_ids):
            fh.write(f"{idx}\t{item_id}\n")
    with open(out / "users.tsv", "w", encoding="utf-8") as fh:
        for idx, user_id in enumerate(dataset.user_ids):
            fh.write(f"{idx}\t{user_id}\n")
    manifest = {
        "num_items": dataset.num_items,
        "num_users": dataset.num_users,
        "num_train_items": dataset.num_train_items,
        "counts": {
            name: {
                "sessions": len(dataset.split(name)),
                "instances": len(instances_of(dataset.split(name))),
            }
            for name in _SPLIT_FILES
        },
        "files": {name: file_sha256(out / filename) for name, filename in _SPLIT_FILES.items()},
        "config_hash": config_hash,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def read_splits(data_dir: str | Path) -> SessionDataset:
    data = Path(data_dir)
    manifest_path = data / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"no manifest.json in {data} (run preprocess first)")
    manifest = read_json(manifest_path)
    for name, filename in _SPLIT_FILES.items():
        actual = file_sha256(data / filename)
        if actual != manifest["files"][name]:
            raise UsageError(f"{filename} does not match the manifest hash (stale or edited artifact)")

    def read_ids(path: Path) -> list[str]:
        return [line.split("\t", 1)[1].rstrip("\n") for line in open(path, encoding="utf-8")]

    splits: dict[str, list[Session]] = {}
    for name, filename in _SPLIT_FILES.items():
        rows: dict[tuple[int, int], list[tuple[int, int]]] = {}
        order: list[tuple[int, int]] = []
        with open(data / filename, encoding="utf-8") as fh:
            for line in fh:
                user, ordinal, item, ts = line.rstrip("\n").split("\t")
                key = (int(user), int(ordinal))
                if key not in rows:
                    rows[key] = []
                    order.append(key)
                rows[key].append((int(item), int(ts)))
        splits[name] = [
            Session(
                user=user,
                items=tuple(i for i, _ in rows[(user, ordinal)]),
                ordinal=ordinal,
                times=tuple(t for _, t in rows[(user, ordinal)]),
            )
            for user, ordinal in order
        ]
    return SessionDataset(
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        num_items=manifest["num_items"],
        num_users=manifest["num_users"],
        num_train_items=manifest["num_train_items"],
        item_ids=read_ids(data / "items.tsv"),
        user_ids=read_ids(data / "users.tsv"),
    )


def manifest_hash(data_dir: str | Path) -> str:
    return file_sha256(Path(data_dir) / "manifest.json")
