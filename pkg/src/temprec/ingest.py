"""Loading, filtering, ordering and temporal splitting of interaction logs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

INTERACTION_FIELDS = ("user_id", "item_id", "timestamp")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
DEFAULT_MIN_EVENTS = 5
DEFAULT_MIN_DESC_CHARS = 500
DEFAULT_ASCII_RATIO = 0.9
DEFAULT_SHORT_FRACTION = 0.3


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self) -> None:
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    description: str

    @property
    def text(self) -> str:
        return f"{self.title}. {self.description}"


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    events: tuple[Interaction, ...]

    def __len__(self) -> int:
        return len(self.events)

    @property
    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.events]


@dataclass
class SplitDataset:
    """Per-user chronological train/validation/test segments plus the catalog."""

    train: dict[str, tuple[Interaction, ...]]
    validation: dict[str, tuple[Interaction, ...]]
    test: dict[str, tuple[Interaction, ...]]
    catalog: dict[str, ItemRecord]
    rejected_users: list[str] = field(default_factory=list)

    @property
    def users(self) -> list[str]:
        return sorted(self.train)

    @property
    def item_ids(self) -> list[str]:
        return sorted(self.catalog)

    def segment(self, name: str) -> dict[str, tuple[Interaction, ...]]:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown segment {name!r}")
        return getattr(self, name)

    def history(self, user_id: str, train_only: bool = True) -> UserHistory:
        events = self.train[user_id]
        if not train_only:
            events = events + self.validation[user_id] + self.test[user_id]
        return UserHistory(user_id, events)

    def train_positives(self, user_id: str) -> set[str]:
        return {e.item_id for e in self.train[user_id]}

    def train_interactions(self) -> list[Interaction]:
        return [e for u in self.users for e in self.train[u]]

    def to_dict(self) -> dict:
        def seg(d: Mapping[str, Sequence[Interaction]]) -> dict:
            return {u: [[e.item_id, e.timestamp] for e in d[u]] for u in sorted(d)}

        return {
            "train": seg(self.train),
            "validation": seg(self.validation),
            "test": seg(self.test),
            "catalog": [
                {"item_id": r.item_id, "title": r.title, "description": r.description}
                for r in (self.catalog[i] for i in sorted(self.catalog))
            ],
            "rejected_users": list(self.rejected_users),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SplitDataset":
        def seg(d: Mapping[str, list]) -> dict[str, tuple[Interaction, ...]]:
            return {u: tuple(Interaction(u, i, int(t)) for i, t in rows) for u, rows in d.items()}

        catalog = {r["item_id"]: ItemRecord(r["item_id"], r["title"], r["description"]) for r in data["catalog"]}
        return cls(
            seg(data["train"]),
            seg(data["validation"]),
            seg(data["test"]),
            catalog,
            list(data.get("rejected_users", [])),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitDataset":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _parse_row(row: Mapping[str, object]) -> Interaction | None:
    try:
        user = str(row["user_id"]).strip()
        item = str(row["item_id"]).strip()
        raw_ts = row["timestamp"]
        if isinstance(raw_ts, bool):
            return None
        if isinstance(raw_ts, float):
            if not raw_ts.is_integer():
                return None
            raw_ts = int(raw_ts)
        ts = int(str(raw_ts).strip())
        return Interaction(user, item, ts)
    except (KeyError, TypeError, ValueError):
        return None


def load_interactions(path: str | Path, format: str | None = None) -> tuple[list[Interaction], int]:
    """Read an interaction log.

    Returns the well-formed interactions in file order and the number of
    malformed rows that were skipped.
    """
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unsupported format {fmt!r}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read interactions file {path}: {exc}") from exc

    rows: Iterable[Mapping[str, object] | None]
    if fmt == "csv":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        reader = csv.reader(lines)
        parsed: list[Mapping[str, object] | None] = []
        for i, rec in enumerate(reader):
            if i == 0 and [c.strip() for c in rec] == list(INTERACTION_FIELDS):
                continue
            parsed.append(dict(zip(INTERACTION_FIELDS, rec)) if len(rec) == 3 else None)
        rows = parsed
    else:
        parsed = []
        for ln in text.splitlines():
            if not ln.strip():
                continue
            try:
                obj = json.loads(ln)
            except json.JSONDecodeError:
                obj = None
            parsed.append(obj if isinstance(obj, dict) else None)
        rows = parsed

    out: list[Interaction] = []
    skipped = 0
    for row in rows:
        inter = _parse_row(row) if row is not None else None
        if inter is None:
            skipped += 1
        else:
            out.append(inter)
    if skipped:
        logger.warning("skipped %d malformed rows in %s", skipped, path)
    return out, skipped


def load_catalog(path: str | Path) -> dict[str, ItemRecord]:
    catalog: dict[str, ItemRecord] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestError(f"cannot read catalog {path}: {exc}") from exc
    for ln in lines:
        if not ln.strip():
            continue
        obj = json.loads(ln)
        item_id = str(obj["item_id"])
        if item_id in catalog:
            raise IngestError(f"duplicate item_id {item_id!r} in catalog")
        catalog[item_id] = ItemRecord(item_id, str(obj.get("title", "")), str(obj.get("description", "")))
    return catalog


def write_interactions(interactions: Iterable[Interaction], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(INTERACTION_FIELDS)
        for e in interactions:
            writer.writerow([e.user_id, e.item_id, e.timestamp])


def write_catalog(catalog: Iterable[ItemRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in catalog:
            fh.write(json.dumps({"item_id": r.item_id, "title": r.title, "description": r.description}, ensure_ascii=False))
            fh.write("\n")


def latin_ratio(text: str) -> float:
    if not text:
        return 0.0
    return sum(1 for ch in text if ord(ch) < 0x80) / len(text)


def filter_catalog(
    catalog: Mapping[str, ItemRecord],
    min_desc_chars: int = DEFAULT_MIN_DESC_CHARS,
    ascii_ratio_min: float = DEFAULT_ASCII_RATIO,
) -> dict[str, ItemRecord]:
    """Keep items with long enough, mostly basic-Latin descriptions."""
    if min_desc_chars < 0 or not 0.0 <= ascii_ratio_min <= 1.0:
        raise ValueError("invalid filter thresholds")
    kept = {}
    for item_id, rec in catalog.items():
        if len(rec.description) < min_desc_chars:
            continue
        if ascii_ratio_min > 0 and latin_ratio(rec.description) < ascii_ratio_min:
            continue
        kept[item_id] = rec
    return kept


def build_histories(
    interactions: Iterable[Interaction], catalog: Mapping[str, ItemRecord]
) -> dict[str, UserHistory]:
    by_user: dict[str, list[Interaction]] = {}
    for e in interactions:
        if e.item_id in catalog:
            by_user.setdefault(e.user_id, []).append(e)
    return {
        u: UserHistory(u, tuple(sorted(events, key=lambda e: (e.timestamp, e.item_id))))
        for u, events in sorted(by_user.items())
    }


def min_activity_filter(histories: Mapping[str, UserHistory], min_events: int = DEFAULT_MIN_EVENTS) -> dict[str, UserHistory]:
    if min_events < 1:
        raise ValueError("min_events must be >= 1")
    return {u: h for u, h in histories.items() if len(h) >= min_events}


def recent_count(n: int, fraction: float = DEFAULT_SHORT_FRACTION) -> int:
    """Number of most recent events in the short-term window: ceil(n * fraction), at least 1."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    # round first: 0.3 * 10 == 3.0000000000000004
    return max(1, math.ceil(round(n * fraction, 9)))


def split_sizes(n: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    if n < 3:
        raise IngestError(f"history of length {n} is too short to split")
    b1 = math.floor(n * ratios[0] + 1e-9)
    b2 = math.floor(n * (ratios[0] + ratios[1]) + 1e-9)
    sizes = [b1, b2 - b1, n - b2]
    # shortfall: borrow one event from the larger neighbouring segment
    while 0 in sizes:
        empty = sizes.index(0)
        neighbours = [j for j in (empty - 1, empty + 1) if 0 <= j < 3]
        donor = max(neighbours, key=lambda j: (sizes[j], -j))
        if sizes[donor] <= 1:
            donor = max(range(3), key=lambda j: sizes[j])
        sizes[donor] -= 1
        sizes[empty] += 1
    return sizes[0], sizes[1], sizes[2]


def temporal_split(
    history: UserHistory | Sequence[Interaction], ratios: Sequence[float] = DEFAULT_RATIOS
) -> tuple[tuple[Interaction, ...], tuple[Interaction, ...], tuple[Interaction, ...]]:
    events = tuple(history.events if isinstance(history, UserHistory) else history)
    n_train, n_val, _ = split_sizes(len(events), ratios)
    return events[:n_train], events[n_train : n_train + n_val], events[n_train + n_val :]


def split_dataset(
    histories: Mapping[str, UserHistory],
    catalog: Mapping[str, ItemRecord],
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> SplitDataset:
    train, val, test = {}, {}, {}
    rejected = []
    for u in sorted(histories):
        try:
            tr, va, te = temporal_split(histories[u], ratios)
        except IngestError:
            rejected.append(u)
            continue
        train[u], val[u], test[u] = tr, va, te
    if rejected:
        logger.warning("rejected %d users with fewer than 3 events", len(rejected))
    return SplitDataset(train, val, test, dict(catalog), rejected)


def prepare_dataset(
    interactions: Iterable[Interaction],
    catalog: Mapping[str, ItemRecord],
    *,
    min_desc_chars: int = DEFAULT_MIN_DESC_CHARS,
    ascii_ratio_min: float = DEFAULT_ASCII_RATIO,
    min_events: int = DEFAULT_MIN_EVENTS,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> SplitDataset:
    """Catalog filter, history build, activity filter and split in one go."""
    kept = filter_catalog(catalog, min_desc_chars, ascii_ratio_min)
    histories = min_activity_filter(build_histories(interactions, kept), min_events)
    return split_dataset(histories, kept, ratios)
