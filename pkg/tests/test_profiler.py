from __future__ import annotations

import json

import httpx
import pytest

from temprec.ingest import Interaction, ItemRecord, SplitDataset
from temprec.profiler import (
    LLMClient,
    ProfileCache,
    ProfileError,
    PromptSpec,
    TextProfile,
    build_profiles,
    default_prompt,
    generate_profile_llm,
    generate_profile_offline,
    get_or_generate,
    offline_summary,
    render_history,
)
from temprec.remote import RemoteConfigError, RemoteUnavailableError, ServiceConfig, endpoint, post_json

from conftest import make_item


def events(user: str, items: str, start: int = 0) -> list[Interaction]:
    return [Interaction(user, i, start + 60 * k) for k, i in enumerate(items)]


def test_render_history_lines_in_order(toy_catalog):
    text = render_history(events("u", "ba"), toy_catalog, train_only=False)
    lines = text.split("\n")
    assert len(lines) == 2
    assert lines[0].startswith("1970-01-01T00:00:00Z | Galaxy Nebula Comet | ")
    assert " | Galaxy Starship Orbit | " in lines[1]
    assert lines[0].endswith("...")


def test_render_history_flattens_newlines():
    cat = {"x": ItemRecord("x", "Two\nLines", "desc\nhere")}
    assert render_history(events("u", "x"), cat, train_only=False) == "1970-01-01T00:00:00Z | Two Lines | desc here"


def test_render_history_train_only(toy_catalog):
    cat = dict(toy_catalog)
    for k in "ghij":
        cat[k] = make_item(k, "filler words")
    hist = events("u", "abcdefghij")
    assert len(render_history(hist, cat, train_only=True).split("\n")) == 6
    assert len(render_history(hist, cat, train_only=False).split("\n")) == 10


def test_offline_single_event_mentions_title(toy_catalog):
    for horizon in ("short", "long"):
        assert "Violin Sonata Concerto" in offline_summary(events("u", "e"), horizon, toy_catalog)


def test_offline_short_follows_recent_topic():
    cat = {f"b{k}": make_item(f"b{k}", "pasta basil tomato") for k in range(7)}
    cat.update({f"a{k}": make_item(f"a{k}", "galaxy orbit comet") for k in range(3)})
    hist = [Interaction("u", f"b{k}", k) for k in range(7)] + [Interaction("u", f"a{k}", 10 + k) for k in range(3)]
    short = offline_summary(hist, "short", cat)
    long = offline_summary(hist, "long", cat)
    head = short.split(".")[0]
    assert all(w in head for w in ("galaxy", "orbit", "comet"))
    assert "pasta" in long.split(".")[0]
    general = offline_summary(hist, "general", cat)
    assert "recent" not in general.lower()
    tokens = long.split("consistently drawn to ")[1].split(".")[0]
    assert general == f"General interests: drawn to {tokens}."


def test_offline_is_deterministic(toy_catalog):
    hist = events("u", "abcd")
    a = generate_profile_offline(hist, "short", toy_catalog)
    b = generate_profile_offline(hist, "short", toy_catalog)
    assert a == b
    assert a.source == "offline" and a.user_id == "u"


def test_prompt_spec_needs_one_placeholder():
    with pytest.raises(ValueError):
        PromptSpec("short", "no placeholder")
    with pytest.raises(ValueError):
        PromptSpec("short", "{history} twice {history}")
    for h in ("short", "long", "general"):
        assert default_prompt(h).template.count("{history}") == 1


def test_profile_json_roundtrip_non_ascii():
    p = TextProfile("ü", "long", "Liebt Käse · 日本", "llm", "abc")
    assert TextProfile.from_json(p.to_json()) == p


def test_cache_hit_miss_and_regeneration(toy_catalog, tmp_path):
    cache = ProfileCache(tmp_path / "p.jsonl")
    h = events("u", "abc")
    first = get_or_generate("u", h, "short", "offline", cache, toy_catalog)
    second = get_or_generate("u", h, "short", "offline", cache, toy_catalog)
    assert first == second
    assert (cache.hits, cache.misses) == (1, 1)
    get_or_generate("u", events("u", "abd"), "short", "offline", cache, toy_catalog)
    assert cache.misses == 2
    reopened = ProfileCache(tmp_path / "p.jsonl")
    assert len(reopened) == 2
    assert reopened.lookup("u", "short", first.prompt_fingerprint) == first


def test_cache_write_failure_is_fatal(tmp_path, toy_catalog):
    cache = ProfileCache(tmp_path / "missing-dir" / "p.jsonl")
    with pytest.raises(RuntimeError):
        get_or_generate("u", events("u", "a"), "long", "offline", cache, toy_catalog)


# --- remote behaviour ---------------------------------------------------------

def config() -> ServiceConfig:
    return ServiceConfig("http://llm/v1", "secret", "tiny", backoff=0.0)


def llm(handler, **kw) -> LLMClient:
    return LLMClient(config(), client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=lambda s: None, **kw)


def reply(text: str):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})

    return handler


def test_endpoint_joining():
    assert endpoint("http://x/v1/", "/embeddings") == "http://x/v1/embeddings"
    assert endpoint("http://x/v1/embeddings", "/embeddings") == "http://x/v1/embeddings"


def test_llm_request_body_and_profile():
    seen = []

    def handler(request):
        seen.append((request.url, request.headers["authorization"], json.loads(request.content)))
        return httpx.Response(200, json={"choices": [{"message": {"content": " Likes space. "}}]})

    spec = PromptSpec("short", "Summarise:\n{history}", max_output_tokens=64)
    prof = generate_profile_llm("u", "line one", spec, llm(handler, system_prompt="sys"))
    assert prof.text == "Likes space." and prof.source == "llm" and prof.horizon == "short"
    url, auth, body = seen[0]
    assert str(url) == "http://llm/v1/chat/completions"
    assert auth == "Bearer secret"
    assert body == {
        "model": "tiny",
        "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "Summarise:\nline one"}],
        "temperature": 0.0,
        "max_tokens": 64,
    }


def test_http_401_is_fatal():
    with pytest.raises(RemoteConfigError):
        generate_profile_llm("u", "h", default_prompt("short"), llm(lambda r: httpx.Response(401, text="bad key")))


def test_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503) if len(calls) < 3 else httpx.Response(200, json={"ok": True})

    sleeps = []
    assert post_json(httpx.Client(transport=httpx.MockTransport(handler)), "http://x", {}, config(), sleep=sleeps.append) == {"ok": True}
    assert len(calls) == 3
    assert len(sleeps) == 2


def test_backoff_is_exponential():
    sleeps = []
    cfg = ServiceConfig("http://x", "", "m", backoff=0.5)
    with pytest.raises(RemoteUnavailableError):
        post_json(httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500))), "http://x", {}, cfg, sleep=sleeps.append)
    assert sleeps == [0.5, 1.0]


def test_empty_completion_fails_the_user():
    with pytest.raises(ProfileError):
        generate_profile_llm("u", "h", default_prompt("long"), llm(reply("   ")))


def two_user_dataset(catalog) -> SplitDataset:
    train = {"u1": tuple(events("u1", "abc")), "u2": tuple(events("u2", "def"))}
    held = {"u1": tuple(events("u1", "d", 999)), "u2": tuple(events("u2", "a", 999))}
    return SplitDataset(train, held, held, catalog)


def test_timeouts_mark_user_failed_and_run_continues(toy_catalog):
    calls = {"u1": 0}

    def handler(request):
        prompt = json.loads(request.content)["messages"][1]["content"]
        if "Galaxy Starship Orbit" in prompt:
            calls["u1"] += 1
            raise httpx.ReadTimeout("slow", request=request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "profile"}}]})

    ds = two_user_dataset(toy_catalog)
    result = build_profiles(ds, ["short", "long"], "llm", ProfileCache(), client=llm(handler), concurrency=1)
    assert set(result.failures) == {"u1"}
    assert calls["u1"] == 3
    assert result.text("u2", "short") == "profile"


def test_short_and_long_see_identical_history(toy_catalog):
    prompts: list[tuple[str, str]] = []

    def handler(request):
        prompts.append(json.loads(request.content)["messages"][1]["content"])
        return httpx.Response(200, json={"choices": [{"message": {"content": "p"}}]})

    specs = {"short": PromptSpec("short", "SHORT\n{history}"), "long": PromptSpec("long", "LONG\n{history}")}
    ds = two_user_dataset(toy_catalog)
    build_profiles(ds, ["short", "long"], "llm", ProfileCache(), client=llm(handler), prompts=specs, users=["u1"], concurrency=1)
    short = [p for p in prompts if p.startswith("SHORT")]
    long = [p for p in prompts if p.startswith("LONG")]
    assert len(short) == len(long) == 1
    assert short[0].split("\n", 1)[1] == long[0].split("\n", 1)[1]
    # held-out items never reach the prompt
    assert "Pasta Garlic Oven" not in short[0]


def test_mode_switch_uses_separate_cache_entries(toy_catalog):
    cache = ProfileCache()
    hist = events("u", "abc")
    off = get_or_generate("u", hist, "short", "offline", cache, toy_catalog)
    on = get_or_generate("u", hist, "short", "llm", cache, toy_catalog, client=llm(reply("remote text")))
    assert off.prompt_fingerprint != on.prompt_fingerprint
    assert len(cache) == 2 and cache.misses == 2


def test_concurrent_build_matches_sequential(toy_catalog):
    ds = two_user_dataset(toy_catalog)
    a = build_profiles(ds, ["short"], "llm", ProfileCache(), client=llm(reply("x")), concurrency=4)
    b = build_profiles(ds, ["short"], "llm", ProfileCache(), client=llm(reply("x")), concurrency=1)
    assert a.profiles == b.profiles


def test_llm_mode_without_client_is_config_error(toy_catalog):
    with pytest.raises(RemoteConfigError):
        build_profiles(two_user_dataset(toy_catalog), ["short"], "llm", ProfileCache())


def test_service_config_from_env(monkeypatch):
    monkeypatch.delenv("TEMPREC_LLM_BASE", raising=False)
    with pytest.raises(RemoteConfigError):
        ServiceConfig.from_env("TEMPREC_LLM")
    monkeypatch.setenv("TEMPREC_LLM_BASE", "http://h")
    monkeypatch.setenv("TEMPREC_LLM_MODEL", "m")
    monkeypatch.setenv("TEMPREC_LLM_KEY", "k")
    assert ServiceConfig.from_env("TEMPREC_LLM") == ServiceConfig("http://h", "k", "m")
