"""Comparison systems: Centric, Temp-Fusion, Popularity and implicit-feedback MF."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import DEFAULT_SHORT_FRACTION, Interaction, SplitDataset, recent_count
from .model import read_container, sigmoid, write_container
from .trainer import (
    AdamState,
    TrainConfig,
    TrainingError,
    UserVectors,
    adam_step,
    bce_loss,
    epoch_triples,
    fit_loop,
    has_validation,
    training_pairs,
    validation_metric,
)

MF_FACTORS = 64
MF_WEIGHT_DECAY = 1e-5


def centric_profile(train_items: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Plain mean of the interacted items' embeddings (not re-normalised)."""
    arr = np.asarray(train_items, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("centric profile needs at least one item embedding")
    return arr.mean(axis=0)


def tempfusion_profiles(
    history: Sequence[Interaction],
    item_embeds: Mapping[str, np.ndarray],
    short_fraction: float = DEFAULT_SHORT_FRACTION,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean embedding of the most recent events and of the whole training segment."""
    if not history:
        raise ValueError("empty history")
    vecs = np.stack([np.asarray(item_embeds[e.item_id], dtype=np.float64) for e in history])
    n_recent = recent_count(len(history), short_fraction)
    return vecs[-n_recent:].mean(axis=0), vecs.mean(axis=0)


def centric_vectors(dataset: SplitDataset, item_ids: Sequence[str], item_matrix: np.ndarray) -> UserVectors:
    index = {i: n for n, i in enumerate(item_ids)}
    users = dataset.users
    short = np.stack([centric_profile(item_matrix[[index[e.item_id] for e in dataset.train[u]]]) for u in users])
    return UserVectors(users, short)


def tempfusion_vectors(
    dataset: SplitDataset, item_ids: Sequence[str], item_matrix: np.ndarray, short_fraction: float = DEFAULT_SHORT_FRACTION
) -> UserVectors:
    table = dict(zip(item_ids, item_matrix))
    pairs = [tempfusion_profiles(dataset.train[u], table, short_fraction) for u in dataset.users]
    return UserVectors(dataset.users, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


def popularity_rank(train_interactions: Iterable[Interaction]) -> list[str]:
    counts = Counter(e.item_id for e in train_interactions)
    return sorted(counts, key=lambda i: (-counts[i], i))


class PopularityScorer:
    """Serves the same count-based scores to every user."""

    def __init__(self, train_interactions: Iterable[Interaction], item_ids: Sequence[str]) -> None:
        events = list(train_interactions)
        counts = Counter(e.item_id for e in events)
        self.item_ids = sorted(item_ids)
        self.ranking = popularity_rank(events)
        self._scores = np.array([float(counts.get(i, 0)) for i in self.item_ids])

    def score_users(self, user_ids: Sequence[str]) -> np.ndarray:
        return np.broadcast_to(self._scores, (len(user_ids), len(self.item_ids))).copy()


@dataclass
class MfParams:
    user_ids: list[str]
    item_ids: list[str]
    P: np.ndarray
    Q: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: float = 0.0

    def __post_init__(self) -> None:
        self.user_index = {u: n for n, u in enumerate(self.user_ids)}
        self.item_index = {i: n for n, i in enumerate(self.item_ids)}

    @property
    def tensors(self) -> dict[str, np.ndarray]:
        return {"P": self.P, "Q": self.Q, "user_bias": self.user_bias, "item_bias": self.item_bias}

    def copy(self) -> "MfParams":
        return MfParams(
            list(self.user_ids), list(self.item_ids), self.P.copy(), self.Q.copy(),
            self.user_bias.copy(), self.item_bias.copy(), float(self.global_bias),
        )

    def save(self, path: str | Path, **extra) -> None:
        header = {"format": "temprec-checkpoint", "kind": "mf", "user_ids": self.user_ids, "item_ids": self.item_ids, **extra}
        write_container(path, header, {**self.tensors, "global_bias": np.array([self.global_bias])})

    @classmethod
    def load(cls, path: str | Path) -> "MfParams":
        header, t = read_container(path)
        if header.get("kind") != "mf":
            raise TrainingError(f"{path} is not an MF checkpoint")
        return cls(header["user_ids"], header["item_ids"], t["P"], t["Q"], t["user_bias"], t["item_bias"], float(t["global_bias"][0]))


def mf_logit(params: MfParams, user_id: str, item_id: str) -> float:
    u = params.user_index.get(user_id)
    i = params.item_index.get(item_id)
    z = params.global_bias
    if u is not None:
        z += params.user_bias[u]
    if i is not None:
        z += params.item_bias[i]
    if u is not None and i is not None:
        z += float(params.P[u] @ params.Q[i])
    return float(z)


def mf_score(params: MfParams, user_id: str, item_id: str) -> float:
    """Probability of interaction; unknown ids fall back to the bias terms that exist."""
    return float(sigmoid(np.array(mf_logit(params, user_id, item_id))))


class MfScorer:
    def __init__(self, params: MfParams, item_ids: Sequence[str]) -> None:
        self.params = params
        self.item_ids = sorted(item_ids)
        self._cols = np.array([params.item_index.get(i, -1) for i in self.item_ids])

    def score_users(self, user_ids: Sequence[str]) -> np.ndarray:
        p = self.params
        known_i = self._cols >= 0
        cols = np.where(known_i, self._cols, 0)
        ib = np.where(known_i, p.item_bias[cols], 0.0)
        out = np.empty((len(user_ids), len(self.item_ids)))
        for r, u in enumerate(user_ids):
            row = p.user_index.get(u)
            z = p.global_bias + ib
            if row is not None:
                z = z + p.user_bias[row] + np.where(known_i, p.Q[cols] @ p.P[row], 0.0)
            out[r] = sigmoid(z)
        return out


def mf_train(
    dataset: SplitDataset,
    config: TrainConfig = TrainConfig(),
    factors: int = MF_FACTORS,
    weight_decay: float = MF_WEIGHT_DECAY,
    item_ids: Sequence[str] | None = None,
) -> tuple[MfParams, "object"]:
    """Pointwise BCE matrix factorisation sharing the main model's training loop."""
    users = dataset.users
    items = sorted(item_ids) if item_ids is not None else dataset.item_ids
    user_index = {u: n for n, u in enumerate(users)}
    item_index = {i: n for n, i in enumerate(items)}
    positives, mask = training_pairs(dataset, user_index, item_index)
    if positives.shape[0] == 0:
        raise TrainingError("empty training set")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, shuffle_rng, neg_rng = (np.random.default_rng(s) for s in seeds)
    params = MfParams(
        users, items,
        init_rng.normal(0.0, 0.1, size=(len(users), factors)),
        init_rng.normal(0.0, 0.1, size=(len(items), factors)),
        np.zeros(len(users)), np.zeros(len(items)), 0.0,
    )
    tensors = {**params.tensors, "global_bias": np.array([0.0])}
    state = AdamState.for_tensors(tensors)
    cfg = TrainConfig(**{**config.__dict__, "weight_decay": weight_decay})

    def sync() -> None:
        params.P, params.Q = tensors["P"], tensors["Q"]
        params.user_bias, params.item_bias = tensors["user_bias"], tensors["item_bias"]
        params.global_bias = float(tensors["global_bias"][0])

    def run_epoch(epoch: int) -> float:
        us, its, labels = epoch_triples(positives, mask, config.negatives_per_positive, shuffle_rng, neg_rng)
        total = 0.0
        for start in range(0, labels.shape[0], config.batch_size):
            u, i, y = us[start : start + config.batch_size], its[start : start + config.batch_size], labels[start : start + config.batch_size]
            P, Q = tensors["P"], tensors["Q"]
            z = np.sum(P[u] * Q[i], axis=1) + tensors["user_bias"][u] + tensors["item_bias"][i] + tensors["global_bias"][0]
            prob = sigmoid(z)
            total += bce_loss(prob, y) * y.shape[0]
            dz = (prob - y) / y.shape[0]
            grads = {k: np.zeros_like(v) for k, v in tensors.items()}
            np.add.at(grads["P"], u, dz[:, None] * Q[i])
            np.add.at(grads["Q"], i, dz[:, None] * P[u])
            np.add.at(grads["user_bias"], u, dz)
            np.add.at(grads["item_bias"], i, dz)
            grads["global_bias"][0] = dz.sum()
            adam_step(tensors, grads, state, cfg)
        sync()
        return total / labels.shape[0]

    validate = None
    if has_validation(dataset):
        scorer = MfScorer(params, items)
        validate = lambda: validation_metric(scorer, dataset)  # noqa: E731
    best, report = fit_loop(run_epoch, validate, params.copy, config)
    return best, report
