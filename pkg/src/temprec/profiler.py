"""Short-term / long-term textual preference profiles, from an LLM or an offline summarizer."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .encoder import tokenize
from .ingest import DEFAULT_SHORT_FRACTION, Interaction, ItemRecord, SplitDataset, UserHistory, recent_count, temporal_split
from .remote import RemoteConfigError, RemoteUnavailableError, ServiceConfig, endpoint, post_json

logger = logging.getLogger(__name__)

HORIZONS = ("short", "long", "general")
PLACEHOLDER = "{history}"
OFFLINE_VERSION = "offline-v1"
DESC_CHARS = 200
TOP_TOKENS = 3
RECENT_TITLES = 3


class ProfileError(RuntimeError):
    """A single user's profile could not be produced; the run may continue."""


@dataclass(frozen=True)
class TextProfile:
    user_id: str
    horizon: str
    text: str
    source: str
    prompt_fingerprint: str

    def __post_init__(self) -> None:
        if self.horizon not in HORIZONS:
            raise ValueError(f"unknown horizon {self.horizon!r}")
        if not self.text:
            raise ValueError("profile text must be non-empty")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TextProfile":
        return cls(**json.loads(line))


@dataclass(frozen=True)
class PromptSpec:
    horizon: str
    template: str
    max_history_items: int = 50
    max_output_tokens: int = 256

    def __post_init__(self) -> None:
        if self.template.count(PLACEHOLDER) != 1:
            raise ValueError(f"prompt template must contain exactly one {PLACEHOLDER} placeholder")

    def render(self, history_text: str) -> str:
        return self.template.replace(PLACEHOLDER, history_text)


def _read_prompt(name: str) -> str:
    return resources.files("temprec").joinpath("prompts", name).read_text(encoding="utf-8")


def default_prompt(horizon: str, prompt_dir: str | Path | None = None) -> PromptSpec:
    if horizon not in HORIZONS:
        raise ValueError(f"unknown horizon {horizon!r}")
    if prompt_dir is not None:
        text = (Path(prompt_dir) / f"{horizon}.txt").read_text(encoding="utf-8")
    else:
        text = _read_prompt(f"{horizon}.txt")
    return PromptSpec(horizon, text)


def _one_line(text: str) -> str:
    return " ".join(text.replace("\r", " ").replace("\n", " ").split())


def _iso(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def training_events(history: UserHistory | Sequence[Interaction]) -> tuple[Interaction, ...]:
    events = tuple(history.events if isinstance(history, UserHistory) else history)
    return temporal_split(events)[0] if len(events) >= 3 else events


def render_history(
    history: UserHistory | Sequence[Interaction],
    catalog: Mapping[str, ItemRecord],
    train_only: bool = True,
    max_items: int | None = None,
    desc_chars: int = DESC_CHARS,
) -> str:
    """One ``timestamp | title | description`` line per event, oldest first.

    With ``train_only`` the full history is split first and only the
    training segment is rendered.
    """
    events = training_events(history) if train_only else tuple(history.events if isinstance(history, UserHistory) else history)
    if not events:
        raise ValueError("history is empty")
    if max_items is not None:
        events = events[-max_items:]
    lines = []
    for e in events:
        rec = catalog[e.item_id]
        desc = _one_line(rec.description)
        if len(desc) > desc_chars:
            desc = desc[:desc_chars].rstrip() + "..."
        lines.append(f"{_iso(e.timestamp)} | {_one_line(rec.title)} | {desc}")
    return "\n".join(lines)


def _fingerprint(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:24]


def _top_tokens(events: Sequence[Interaction], catalog: Mapping[str, ItemRecord], n: int = TOP_TOKENS) -> list[str]:
    counts: Counter[str] = Counter()
    for e in events:
        rec = catalog[e.item_id]
        counts.update(tokenize(f"{rec.title} {rec.description}"))
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return ranked[:n]


def _join(words: Sequence[str]) -> str:
    if not words:
        return "varied content"
    if len(words) == 1:
        return words[0]
    return ", ".join(words[:-1]) + " and " + words[-1]


def offline_summary(events: Sequence[Interaction], horizon: str, catalog: Mapping[str, ItemRecord]) -> str:
    if not events:
        raise ValueError("history is empty")
    recent_titles = [_one_line(catalog[e.item_id].title) for e in reversed(events[-RECENT_TITLES:])]
    recency = f"Most recent titles: {'; '.join(recent_titles)}."
    if horizon == "short":
        window = events[-recent_count(len(events), DEFAULT_SHORT_FRACTION) :]
        return f"Short-term interests: recently focused on {_join(_top_tokens(window, catalog))}. {recency}"
    if horizon == "long":
        return f"Long-term interests: consistently drawn to {_join(_top_tokens(events, catalog))}. {recency}"
    if horizon == "general":
        return f"General interests: drawn to {_join(_top_tokens(events, catalog))}."
    raise ValueError(f"unknown horizon {horizon!r}")


def generate_profile_offline(
    history: UserHistory | Sequence[Interaction],
    horizon: str,
    catalog: Mapping[str, ItemRecord],
    user_id: str | None = None,
    history_text: str | None = None,
) -> TextProfile:
    """Deterministic template summary over the events given (callers pass the training segment)."""
    events = tuple(history.events if isinstance(history, UserHistory) else history)
    uid = user_id or (history.user_id if isinstance(history, UserHistory) else events[0].user_id)
    text = offline_summary(events, horizon, catalog)
    rendered = history_text if history_text is not None else render_history(events, catalog, train_only=False)
    return TextProfile(uid, horizon, text, "offline", _fingerprint("offline", OFFLINE_VERSION, horizon, rendered))


class LLMClient:
    """Chat-completions client (``{"model", "messages", "temperature", "max_tokens"}``)."""

    def __init__(
        self,
        config: ServiceConfig,
        client: httpx.Client | None = None,
        temperature: float = 0.0,
        system_prompt: str | None = None,
        sleep: Callable[[float], None] | None = None,
    ) -> None:
        self.config = config
        self.client = client or httpx.Client()
        self.temperature = temperature
        self.system_prompt = system_prompt if system_prompt is not None else _read_prompt("system.txt").strip()
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kwargs) -> "LLMClient":
        return cls(ServiceConfig.from_env("TEMPREC_LLM"), **kwargs)

    def fingerprint(self, spec: PromptSpec) -> str:
        return _fingerprint("llm", self.config.model, str(self.temperature), self.system_prompt, spec.template)

    def complete(self, prompt: str, max_tokens: int) -> str:
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.temperature,
            "max_tokens": max_tokens,
        }
        kwargs = {"sleep": self._sleep} if self._sleep else {}
        data = post_json(self.client, endpoint(self.config.base_url, "/chat/completions"), payload, self.config, **kwargs)
        try:
            return (data["choices"][0]["message"]["content"] or "").strip()
        except (KeyError, IndexError, TypeError) as exc:
            raise ProfileError(f"malformed completion response: {exc}") from exc


def generate_profile_llm(user_id: str, history_text: str, spec: PromptSpec, client: LLMClient) -> TextProfile:
    """One LLM pass; 4xx errors propagate as RemoteConfigError, anything per-user as ProfileError."""
    if not history_text:
        raise ValueError("history text is empty")
    try:
        text = client.complete(spec.render(history_text), spec.max_output_tokens)
    except RemoteUnavailableError as exc:
        raise ProfileError(f"user {user_id}: {exc}") from exc
    if not text:
        raise ProfileError(f"user {user_id}: empty completion")
    fp = _fingerprint(client.fingerprint(spec), history_text)
    return TextProfile(user_id, spec.horizon, text, "llm", fp)


class ProfileCache:
    """JSONL-backed profile store keyed by (user, horizon, prompt fingerprint)."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path else None
        self._store: dict[tuple[str, str, str], TextProfile] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    p = TextProfile.from_json(line)
                    self._store[(p.user_id, p.horizon, p.prompt_fingerprint)] = p

    def __len__(self) -> int:
        return len(self._store)

    def lookup(self, user_id: str, horizon: str, fingerprint: str) -> TextProfile | None:
        return self._store.get((user_id, horizon, fingerprint))

    def store(self, profile: TextProfile) -> None:
        with self._lock:
            key = (profile.user_id, profile.horizon, profile.prompt_fingerprint)
            if key in self._store:
                return
            self._store[key] = profile
            if self.path is not None:
                try:
                    with self.path.open("a", encoding="utf-8") as fh:
                        fh.write(profile.to_json() + "\n")
                except OSError as exc:
                    raise RuntimeError(f"cannot write profile cache {self.path}: {exc}") from exc

    def profiles(self) -> list[TextProfile]:
        return list(self._store.values())


@dataclass
class ProfileSet:
    profiles: dict[tuple[str, str], TextProfile] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def text(self, user_id: str, horizon: str) -> str:
        return self.profiles[(user_id, horizon)].text


def expected_fingerprint(history_text: str, horizon: str, mode: str, spec: PromptSpec | None = None, client: LLMClient | None = None) -> str:
    if mode == "offline":
        return _fingerprint("offline", OFFLINE_VERSION, horizon, history_text)
    if mode == "llm":
        if client is None or spec is None:
            raise ValueError("llm mode needs a client and prompt spec")
        return _fingerprint(client.fingerprint(spec), history_text)
    raise ValueError(f"unknown profile mode {mode!r}")


def get_or_generate(
    user_id: str,
    events: Sequence[Interaction],
    horizon: str,
    mode: str,
    cache: ProfileCache,
    catalog: Mapping[str, ItemRecord],
    *,
    client: LLMClient | None = None,
    spec: PromptSpec | None = None,
    history_text: str | None = None,
) -> TextProfile:
    """Return the cached profile for this exact history and prompt, generating it on a miss.

    ``events`` is the (training) history the profile summarises.
    """
    spec = spec or (default_prompt(horizon) if mode == "llm" else None)
    if history_text is None:
        limit = spec.max_history_items if spec else None
        history_text = render_history(events, catalog, train_only=False, max_items=limit)
    fp = expected_fingerprint(history_text, horizon, mode, spec, client)
    hit = cache.lookup(user_id, horizon, fp)
    if hit is not None:
        cache.hits += 1
        return hit
    cache.misses += 1
    if mode == "offline":
        profile = generate_profile_offline(events, horizon, catalog, user_id, history_text)
    else:
        profile = generate_profile_llm(user_id, history_text, spec, client)
    cache.store(profile)
    return profile


def build_profiles(
    dataset: SplitDataset,
    horizons: Iterable[str],
    mode: str = "offline",
    cache: ProfileCache | None = None,
    *,
    client: LLMClient | None = None,
    prompts: Mapping[str, PromptSpec] | None = None,
    concurrency: int = 4,
    users: Sequence[str] | None = None,
) -> ProfileSet:
    """Profiles for every user from their training segment.

    Each user's history is rendered once and the same text feeds every
    horizon. Remote failures for a user are recorded and skipped.
    """
    cache = cache or ProfileCache()
    horizons = list(horizons)
    users = list(users) if users is not None else dataset.users
    if mode == "llm":
        if client is None:
            raise RemoteConfigError("llm profile mode needs TEMPREC_LLM_* configuration")
        prompts = dict(prompts or {h: default_prompt(h) for h in horizons})
    elif mode != "offline":
        raise ValueError(f"unknown profile mode {mode!r}")
    result = ProfileSet()

    def one(user_id: str) -> list[TextProfile]:
        events = dataset.train[user_id]
        limit = prompts[horizons[0]].max_history_items if mode == "llm" else None
        text = render_history(events, dataset.catalog, train_only=False, max_items=limit)
        return [
            get_or_generate(
                user_id, events, h, mode, cache, dataset.catalog,
                client=client, spec=prompts[h] if mode == "llm" else None, history_text=text,
            )
            for h in horizons
        ]

    if mode == "offline" or concurrency <= 1:
        outcomes = []
        for u in users:
            try:
                outcomes.append((u, one(u), None))
            except ProfileError as exc:
                outcomes.append((u, None, str(exc)))
    else:
        def safe(u: str):
            try:
                return u, one(u), None
            except ProfileError as exc:
                return u, None, str(exc)

        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(pool.map(safe, users))
    for u, profiles, err in outcomes:
        if err is not None:
            logger.warning("profile generation failed for %s: %s", u, err)
            result.failures[u] = err
            continue
        for p in profiles:
            result.profiles[(u, p.horizon)] = p
    return result
