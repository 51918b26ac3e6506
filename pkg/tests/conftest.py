from __future__ import annotations

import pytest

from temprec.ingest import Interaction, ItemRecord, SplitDataset, build_histories, split_dataset
from temprec.pipeline import EncoderConfig, ExperimentConfig, ModelConfig
from temprec.synth import SynthConfig
from temprec.trainer import TrainConfig


_criteria: dict[int, tuple[str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, (title, []))
    entry[1].append("pass" if rep.passed else "fail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        status = "PASS" if outcomes and all(o == "pass" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}")


def make_item(item_id: str, words: str, desc_len: int = 520) -> ItemRecord:
    desc = (words + " ") * (desc_len // (len(words) + 1) + 1)
    return ItemRecord(item_id, words.title(), desc[:desc_len])


@pytest.fixture
def toy_catalog() -> dict[str, ItemRecord]:
    topics = {
        "a": "galaxy starship orbit",
        "b": "galaxy nebula comet",
        "c": "pasta basil tomato",
        "d": "pasta garlic oven",
        "e": "violin sonata concerto",
        "f": "violin cello quartet",
    }
    return {k: make_item(k, v) for k, v in topics.items()}


@pytest.fixture
def toy_dataset(toy_catalog) -> SplitDataset:
    events = []
    for u, items in {"u1": "abcdefab", "u2": "cdefcdab", "u3": "efabcdef"}.items():
        seen = []
        for t, i in enumerate(items):
            if i in seen:
                continue
            seen.append(i)
            events.append(Interaction(u, i, 1000 + 10 * t))
    return split_dataset(build_histories(events, toy_catalog), toy_catalog)


@pytest.fixture
def small_config() -> ExperimentConfig:
    """A quick synthetic experiment: few users, small vectors, few epochs."""
    return ExperimentConfig(
        synth=SynthConfig(n_users=40, n_items=30, n_topics=3, events_min=8, events_max=14, desc_words=90),
        encoder=EncoderConfig(dim=32),
        model=ModelConfig(hidden=[16]),
        train=TrainConfig(max_epochs=4, batch_size=256, patience=2),
        variants=["proposed", "centric", "popularity", "st_only"],
    )
