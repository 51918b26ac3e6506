"""Deterministic synthetic catalogs and interaction logs with topic drift."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import Interaction, ItemRecord, write_catalog, write_interactions

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_DAY = 86_400
_START = 1_500_000_000


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 500
    n_items: int = 200
    n_topics: int = 4
    events_min: int = 10
    events_max: int = 30
    drift_probability: float = 0.8
    # fraction of a drifting user's events that precede the topic switch
    drift_point: float = 0.45
    # post-switch chance of drawing from the new topic; the rest stays on the original one
    post_drift_share: float = 0.7
    # chance of any event coming from a uniformly random topic
    noise: float = 0.0
    vocab_per_topic: int = 40
    shared_vocab: int = 400
    topic_word_share: float = 0.6
    desc_words: int = 90
    popularity_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_topics < 2:
            raise ValueError("n_topics must be >= 2")
        if not 0.0 <= self.drift_probability <= 1.0:
            raise ValueError("drift_probability must be in [0, 1]")
        if not 0.0 < self.drift_point < 1.0:
            raise ValueError("drift_point must be in (0, 1)")
        if not (0.0 <= self.noise <= 1.0 and 0.0 <= self.post_drift_share <= 1.0):
            raise ValueError("probabilities must be in [0, 1]")
        if not 1 <= self.events_min <= self.events_max:
            raise ValueError("invalid events_per_user range")
        if self.n_items < self.n_topics:
            raise ValueError("need at least one item per topic")
        if self.events_max > self.n_items:
            raise ValueError("events_max exceeds n_items; users never repeat items")


@dataclass
class GroundTruth:
    item_topic: dict[str, int]
    base_topic: dict[str, int]
    drifted: dict[str, bool]
    new_topic: dict[str, int]
    switch_index: dict[str, int]
    event_topic: dict[str, list[int]] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True) + "\n", encoding="utf-8")


def _words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syl = rng.integers(2, 4)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate(config: SynthConfig = SynthConfig()) -> tuple[list[Interaction], list[ItemRecord], GroundTruth]:
    """Items carry topic-specific vocabulary; users draw from a dominant topic and may switch once."""
    rng = np.random.default_rng(config.seed)
    taken: set[str] = set()
    topic_vocab = [_words(rng, config.vocab_per_topic, taken) for _ in range(config.n_topics)]
    shared = _words(rng, config.shared_vocab, taken)
    vocab_weights = _zipf(config.vocab_per_topic, 1.0)

    item_ids = [f"i{j:04d}" for j in range(config.n_items)]
    topics = np.arange(config.n_items) % config.n_topics
    rng.shuffle(topics)
    catalog: list[ItemRecord] = []
    for item_id, t in zip(item_ids, topics):
        vocab = topic_vocab[t]
        title_words = [vocab[k] for k in rng.choice(config.vocab_per_topic, size=2, replace=False, p=vocab_weights)]
        title = " ".join(w.capitalize() for w in [*title_words, shared[rng.integers(len(shared))]])
        words: list[str] = []
        while len(words) < config.desc_words or len(" ".join(words)) < 520:
            if rng.random() < config.topic_word_share:
                words.append(vocab[rng.choice(config.vocab_per_topic, p=vocab_weights)])
            else:
                words.append(shared[rng.integers(len(shared))])
        sentences = [" ".join(words[k : k + 12]) for k in range(0, len(words), 12)]
        description = ". ".join(s.capitalize() for s in sentences) + "."
        catalog.append(ItemRecord(item_id, title, description))

    by_topic = [np.flatnonzero(topics == t) for t in range(config.n_topics)]
    popularity = []
    for members in by_topic:
        w = _zipf(len(members), config.popularity_exponent)
        popularity.append(w[rng.permutation(len(members))])

    interactions: list[Interaction] = []
    truth = GroundTruth({i: int(t) for i, t in zip(item_ids, topics)}, {}, {}, {}, {})
    for n in range(config.n_users):
        user = f"u{n:04d}"
        base = int(rng.integers(config.n_topics))
        drifted = bool(rng.random() < config.drift_probability)
        new = int((base + rng.integers(1, config.n_topics)) % config.n_topics)
        length = int(rng.integers(config.events_min, config.events_max + 1))
        switch = int(round(config.drift_point * length)) if drifted else length
        seen: set[int] = set()
        ts = _START + int(rng.integers(0, 30 * _DAY))
        ev_topics = []
        for k in range(length):
            if config.noise and rng.random() < config.noise:
                t = int(rng.integers(config.n_topics))
            elif k >= switch and rng.random() < config.post_drift_share:
                t = new
            else:
                t = base
            members, w = by_topic[t], popularity[t].copy()
            w[[j for j, m in enumerate(members) if m in seen]] = 0.0
            if w.sum() == 0:
                # topic exhausted for this user: fall back to any unseen item
                members = np.array([m for m in range(config.n_items) if m not in seen])
                w = np.ones(len(members))
            choice = int(members[rng.choice(len(members), p=w / w.sum())])
            seen.add(choice)
            ev_topics.append(int(topics[choice]))
            ts += int(rng.integers(3600, 10 * _DAY))
            interactions.append(Interaction(user, item_ids[choice], ts))
        truth.base_topic[user] = base
        truth.drifted[user] = drifted
        truth.new_topic[user] = new if drifted else base
        truth.switch_index[user] = switch
        truth.event_topic[user] = ev_topics
    return interactions, catalog, truth


def write_dataset(config: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    interactions, catalog, truth = generate(config)
    paths = {
        "interactions": out / "interactions.csv",
        "catalog": out / "catalog.jsonl",
        "ground_truth": out / "ground_truth.json",
        "config": out / "synth_config.json",
    }
    write_interactions(interactions, paths["interactions"])
    write_catalog(catalog, paths["catalog"])
    truth.save(paths["ground_truth"])
    paths["config"].write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
