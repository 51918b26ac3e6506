"""BCE training with uniform negative sampling, Adam and early stopping on validation NDCG@10."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as M
from .evaluation import EvaluationError, evaluate
from .ingest import SplitDataset

logger = logging.getLogger(__name__)

EARLY_STOP_METRIC = "ndcg@10"
MIN_IMPROVEMENT = 1e-6
PROB_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 100
    patience: int = 5
    negatives_per_positive: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "negatives_per_positive", "epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(t) for k, t in tensors.items()}, {k: np.zeros_like(t) for k, t in tensors.items()})


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """Bias-corrected Adam, updating ``tensors`` and ``state`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for k, g in grads.items():
        if config.weight_decay:
            g = g + config.weight_decay * tensors[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        tensors[k] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)


def adam_step_params(params: M.ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    adam_step(params.tensors, grads, state, config)
    params.version += 1


def bce_loss(predictions: Sequence[float] | np.ndarray, labels: Sequence[float] | np.ndarray) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty batch")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    return M.bce_from_probs(p, y, PROB_CLAMP)


def sample_negatives(
    user_id: str,
    k: int,
    catalog: Sequence[str],
    train_positives: set[str],
    rng: np.random.Generator,
) -> list[str]:
    eligible = [i for i in sorted(catalog) if i not in train_positives]
    if len(eligible) < k:
        warnings.warn(f"user {user_id}: only {len(eligible)} eligible negatives for k={k}", stacklevel=2)
        k = len(eligible)
    picks = rng.choice(len(eligible), size=k, replace=False)
    return [eligible[i] for i in picks]


def sample_negative_matrix(
    users: np.ndarray, k: int, positive_mask: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """k distinct non-positive item indices per row of ``users``; -1 pads users short of eligible items."""
    keys = rng.random((users.shape[0], positive_mask.shape[1]))
    keys[positive_mask[users]] = np.inf
    k_eff = min(k, positive_mask.shape[1])
    picks = np.argpartition(keys, k_eff - 1, axis=1)[:, :k_eff] if k_eff < keys.shape[1] else np.argsort(keys, axis=1)
    picked_keys = np.take_along_axis(keys, picks, axis=1)
    order = np.argsort(picked_keys, axis=1, kind="stable")
    picks = np.take_along_axis(picks, order, axis=1)
    invalid = ~np.isfinite(np.take_along_axis(keys, picks, axis=1))
    if invalid.any():
        warnings.warn("some users have fewer eligible negatives than requested", stacklevel=2)
        picks = np.where(invalid, -1, picks)
    if k_eff < k:
        picks = np.concatenate([picks, -np.ones((picks.shape[0], k - k_eff), dtype=picks.dtype)], axis=1)
    return picks


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    initial_val_metric: float | None = None
    best_epoch: int = 0
    epochs_run: int = 0
    stop_reason: str = ""
    metric_name: str = EARLY_STOP_METRIC

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class UserVectors:
    """Row-aligned user representations; ``long`` is None for single-profile models."""

    user_ids: list[str]
    short: np.ndarray
    long: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.index = {u: n for n, u in enumerate(self.user_ids)}

    def rows(self, user_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index[u] for u in user_ids], dtype=np.int64)


class ModelScorer:
    def __init__(self, params: M.ModelParams, users: UserVectors, item_ids: Sequence[str], item_matrix: np.ndarray) -> None:
        self.params = params
        self.users = users
        self.item_ids = list(item_ids)
        self.item_matrix = item_matrix

    def score_users(self, user_ids: Sequence[str]) -> np.ndarray:
        rows = self.users.rows(user_ids)
        long = self.users.long[rows] if self.users.long is not None else None
        return M.score_matrix(self.params, self.users.short[rows], long, self.item_matrix)


def training_pairs(dataset: SplitDataset, user_index: Mapping[str, int], item_index: Mapping[str, int]) -> tuple[np.ndarray, np.ndarray]:
    """Positive (user row, item column) pairs and the (U, I) training-positive mask."""
    pairs = []
    mask = np.zeros((len(user_index), len(item_index)), dtype=bool)
    for u in dataset.users:
        if u not in user_index:
            continue
        for e in dataset.train[u]:
            if e.item_id in item_index:
                pairs.append((user_index[u], item_index[e.item_id]))
                mask[user_index[u], item_index[e.item_id]] = True
    return np.array(pairs, dtype=np.int64).reshape(-1, 2), mask


def epoch_triples(
    positives: np.ndarray, mask: np.ndarray, k: int, shuffle_rng: np.random.Generator, neg_rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled positives, each followed by k fresh negatives: (users, items, labels)."""
    pos = positives[shuffle_rng.permutation(positives.shape[0])]
    negs = sample_negative_matrix(pos[:, 0], k, mask, neg_rng)
    users = np.repeat(pos[:, 0], k + 1)
    items = np.concatenate([pos[:, 1:2], negs], axis=1).reshape(-1)
    labels = np.tile(np.r_[1.0, np.zeros(k)], pos.shape[0])
    keep = items >= 0
    return users[keep], items[keep], labels[keep]


def has_validation(dataset: SplitDataset) -> bool:
    return any(dataset.validation.get(u) for u in dataset.users)


def fit_loop(
    run_epoch: Callable[[int], float],
    validate: Callable[[], float] | None,
    snapshot: Callable[[], object],
    config: TrainConfig,
) -> tuple[object, TrainReport]:
    """Epoch loop with patience-based early stopping; returns the best snapshot."""
    report = TrainReport()
    best_value = -math.inf
    best = snapshot()
    bad = 0
    if validate is not None:
        report.initial_val_metric = validate()
    for epoch in range(1, config.max_epochs + 1):
        try:
            loss = run_epoch(epoch)
        except NonFiniteGradient as exc:
            report.stop_reason = f"aborted: {exc}"
            logger.error("epoch %d aborted: %s", epoch, exc)
            break
        report.train_loss.append(loss)
        report.epochs_run = epoch
        if validate is None:
            best, report.best_epoch = snapshot(), epoch
            continue
        value = validate()
        report.val_metric.append(value)
        logger.info("epoch %d loss %.5f val %s %.5f", epoch, loss, EARLY_STOP_METRIC, value)
        if value > best_value + MIN_IMPROVEMENT:
            best_value, best, report.best_epoch, bad = value, snapshot(), epoch, 0
        else:
            bad += 1
            if bad >= config.patience:
                report.stop_reason = f"no improvement for {config.patience} epochs"
                break
    if not report.stop_reason:
        report.stop_reason = "max_epochs"
    return best, report


def validation_metric(scorer, dataset: SplitDataset) -> float:
    try:
        rep = evaluate(scorer, dataset, "validation", (10,), system="validation")
    except EvaluationError:
        return 0.0
    return rep.aggregate[EARLY_STOP_METRIC]


def train(
    dataset: SplitDataset,
    user_reprs: UserVectors,
    item_ids: Sequence[str],
    item_embeds: np.ndarray,
    scorer_kind: str = "mlp",
    config: TrainConfig = TrainConfig(),
    *,
    hidden: tuple[int, ...] = M.DEFAULT_HIDDEN,
    dropout_rate: float = M.DEFAULT_DROPOUT,
    validate_fn: Callable[[M.ModelParams], float] | None = None,
) -> tuple[M.ModelParams, TrainReport]:
    """Fit attention and scorer weights; user and item vectors stay fixed."""
    item_index = {i: n for n, i in enumerate(item_ids)}
    positives, mask = training_pairs(dataset, user_reprs.index, item_index)
    if positives.shape[0] == 0:
        raise TrainingError("empty training set")
    fusion = user_reprs.long is not None
    if scorer_kind == "dot" and not fusion:
        raise TrainingError("the dot scorer is only defined on fused short/long representations")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, shuffle_rng, neg_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    params = M.init_params(
        item_embeds.shape[1], hidden, fusion=fusion, scorer=scorer_kind, dropout_rate=dropout_rate, rng=init_rng
    )
    state = AdamState.for_tensors(params.tensors)
    items = np.asarray(item_embeds, dtype=np.float64)
    short = np.asarray(user_reprs.short, dtype=np.float64)
    long = np.asarray(user_reprs.long, dtype=np.float64) if fusion else None

    def run_epoch(epoch: int) -> float:
        users, its, labels = epoch_triples(positives, mask, config.negatives_per_positive, shuffle_rng, neg_rng)
        total = 0.0
        for start in range(0, labels.shape[0], config.batch_size):
            sl = slice(start, start + config.batch_size)
            prob, tape = M.forward_indexed(short, long, items, users[sl], its[sl], params, "train", drop_rng)
            total += bce_loss(prob, labels[sl]) * prob.shape[0]
            adam_step_params(params, M.backward_indexed(tape, params, labels[sl]), state, config)
        return total / labels.shape[0]

    if validate_fn is not None:
        validate = lambda: validate_fn(params)  # noqa: E731
    elif has_validation(dataset):
        scorer = ModelScorer(params, user_reprs, item_ids, items)
        validate = lambda: validation_metric(scorer, dataset)  # noqa: E731
    else:
        validate = None
    best, report = fit_loop(run_epoch, validate, params.copy, config)
    return best, report
