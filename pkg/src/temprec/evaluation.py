"""Full-catalog ranking, Recall@K / NDCG@K and paired significance tests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Mapping, Protocol, Sequence

import numpy as np
from scipy import stats

from .ingest import SplitDataset

DEFAULT_KS = (10, 20)


class EvaluationError(RuntimeError):
    pass


class Scorer(Protocol):
    """Anything that scores every catalog item for a set of users.

    ``item_ids`` must be sorted ascending; ``score_users`` returns an array of
    shape (len(user_ids), len(item_ids)).
    """

    item_ids: Sequence[str]

    def score_users(self, user_ids: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True)
class RankedList:
    user_id: str
    item_ids: tuple[str, ...]
    scores: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.item_ids)


def _top(ranked: RankedList | Sequence[str], k: int) -> Sequence[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    items = ranked.item_ids if isinstance(ranked, RankedList) else ranked
    return items[:k]


def recall_at_k(ranked: RankedList | Sequence[str], relevant: Collection[str], k: int) -> float:
    top = _top(ranked, k)
    if not relevant:
        raise ValueError("relevant set is empty")
    rel = set(relevant)
    return len(rel.intersection(top)) / len(rel)


def ndcg_at_k(ranked: RankedList | Sequence[str], relevant: Collection[str], k: int) -> float:
    top = _top(ranked, k)
    if not relevant:
        raise ValueError("relevant set is empty")
    rel = set(relevant)
    dcg = sum(1.0 / math.log2(p + 1) for p, item in enumerate(top, start=1) if item in rel)
    idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(len(rel), k) + 1))
    return dcg / idcg


def _order(scores: np.ndarray) -> np.ndarray:
    # stable sort on negated scores keeps ascending item-id order among ties
    return np.argsort(-scores, kind="stable")


def rank_candidates(scorer: Scorer, user_id: str, train_positives: Collection[str]) -> RankedList:
    scores = np.asarray(scorer.score_users([user_id])[0], dtype=np.float64)
    keep = np.array([i not in train_positives for i in scorer.item_ids], dtype=bool)
    if not keep.any():
        raise EvaluationError(f"no candidate items left for user {user_id}")
    idx = np.flatnonzero(keep)
    order = idx[_order(scores[idx])]
    return RankedList(user_id, tuple(scorer.item_ids[i] for i in order), tuple(float(scores[i]) for i in order))


def metric_names(ks: Sequence[int]) -> list[str]:
    return [f"{m}@{k}" for m in ("recall", "ndcg") for k in ks]


@dataclass
class MetricReport:
    system: str
    ks: tuple[int, ...]
    per_user: dict[str, dict[str, float]]
    skipped_users: int = 0
    segment: str = "test"
    extra: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.per_user)

    @property
    def aggregate(self) -> dict[str, float]:
        users = sorted(self.per_user)
        return {m: float(np.mean([self.per_user[u][m] for u in users])) for m in metric_names(self.ks)}

    def vector(self, metric: str, users: Sequence[str] | None = None) -> np.ndarray:
        users = sorted(self.per_user) if users is None else users
        return np.array([self.per_user[u][metric] for u in users])

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "segment": self.segment,
            "ks": list(self.ks),
            "n_users": self.n_users,
            "skipped_users": self.skipped_users,
            "aggregate": self.aggregate,
            "per_user": {u: self.per_user[u] for u in sorted(self.per_user)},
            **self.extra,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        known = {"system", "segment", "ks", "n_users", "skipped_users", "aggregate", "per_user"}
        return cls(
            data["system"],
            tuple(data["ks"]),
            {u: dict(v) for u, v in data["per_user"].items()},
            data.get("skipped_users", 0),
            data.get("segment", "test"),
            {k: v for k, v in data.items() if k not in known},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_per_user_csv(self, path: str | Path) -> None:
        names = metric_names(self.ks)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", *names])
            for u in sorted(self.per_user):
                w.writerow([u, *(repr(self.per_user[u][m]) for m in names)])


def evaluate(
    scorer: Scorer,
    dataset: SplitDataset,
    segment: str = "test",
    ks: Sequence[int] = DEFAULT_KS,
    *,
    system: str = "system",
    n_candidates: int | None = None,
    seed: int = 0,
    chunk: int = 256,
) -> MetricReport:
    """Rank the catalog minus training positives for every user with held-out events.

    With ``n_candidates`` set, each user is ranked among their relevant
    items plus that many sampled non-interacted items instead.
    """
    if any(k < 1 for k in ks):
        raise ValueError("k must be >= 1")
    seg = dataset.segment(segment)
    item_ids = list(scorer.item_ids)
    if item_ids != sorted(item_ids):
        raise ValueError("scorer.item_ids must be sorted")
    index = {i: n for n, i in enumerate(item_ids)}
    users = [u for u in dataset.users if seg.get(u)]
    skipped = len(dataset.users) - len(users)
    if not users:
        raise EvaluationError(f"no users with a non-empty {segment} segment")
    rng = np.random.default_rng(seed)
    kmax = max(ks)
    per_user: dict[str, dict[str, float]] = {}
    for start in range(0, len(users), chunk):
        batch = users[start : start + chunk]
        scores = np.asarray(scorer.score_users(batch), dtype=np.float64)
        for row, u in enumerate(batch):
            s = scores[row].copy()
            positives = [index[i] for i in dataset.train_positives(u) if i in index]
            relevant = {e.item_id for e in seg[u]} - dataset.train_positives(u)
            if not relevant:
                skipped += 1
                continue
            valid = np.ones(len(item_ids), dtype=bool)
            valid[positives] = False
            if n_candidates is not None:
                pool = np.flatnonzero(valid & ~np.isin(np.arange(len(item_ids)), [index[i] for i in relevant]))
                pick = rng.choice(pool, size=min(n_candidates, pool.size), replace=False)
                valid[:] = False
                valid[pick] = True
                valid[[index[i] for i in relevant]] = True
            idx = np.flatnonzero(valid)
            top = idx[_order(s[idx])][:kmax]
            ranked = [item_ids[i] for i in top]
            vals = {}
            for k in ks:
                vals[f"recall@{k}"] = recall_at_k(ranked, relevant, k)
            for k in ks:
                vals[f"ndcg@{k}"] = ndcg_at_k(ranked, relevant, k)
            per_user[u] = vals
    if not per_user:
        raise EvaluationError("no evaluable users")
    return MetricReport(system, tuple(ks), per_user, skipped, segment)


def paired_significance(per_user_a: Sequence[float], per_user_b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value; identical vectors give 1.0."""
    a = np.asarray(per_user_a, dtype=np.float64)
    b = np.asarray(per_user_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("per-user vectors must be 1-D and paired")
    if a.size < 2:
        raise ValueError("need at least two paired observations")
    diff = a - b
    if np.all(diff == diff[0]):
        return 1.0 if diff[0] == 0 else 0.0
    return float(stats.ttest_rel(a, b).pvalue)
