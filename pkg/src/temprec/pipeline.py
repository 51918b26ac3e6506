"""Experiment wiring: data preparation, the nine variants, matrices and explanations."""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from . import model as M
from .baselines import (
    MfParams,
    MfScorer,
    PopularityScorer,
    centric_vectors,
    mf_train,
    tempfusion_vectors,
)
from .encoder import DEFAULT_DIM, EmbeddingCache, HashEncoder, RemoteEncoder, TextEncoder, encode_catalog
from .evaluation import DEFAULT_KS, MetricReport, evaluate, paired_significance, rank_candidates
from .ingest import (
    DEFAULT_ASCII_RATIO,
    DEFAULT_MIN_DESC_CHARS,
    DEFAULT_MIN_EVENTS,
    DEFAULT_SHORT_FRACTION,
    SplitDataset,
    load_catalog,
    load_interactions,
    prepare_dataset,
)
from .profiler import LLMClient, ProfileCache, ProfileSet, build_profiles
from .synth import SynthConfig, generate
from .trainer import ModelScorer, TrainConfig, TrainReport, UserVectors, train

logger = logging.getLogger(__name__)

VARIANTS = ("proposed", "centric", "tempfusion", "popularity", "mf", "st_only", "lt_only", "nots", "dot")
ATTENTION_VARIANTS = ("proposed", "tempfusion", "dot")
PROFILE_HORIZONS = {"proposed": ("short", "long"), "dot": ("short", "long"), "st_only": ("short",), "lt_only": ("long",), "nots": ("general",)}
BASELINE = "centric"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    interactions: str | None = None
    catalog: str | None = None
    format: str | None = None
    min_desc_chars: int = DEFAULT_MIN_DESC_CHARS
    ascii_ratio_min: float = DEFAULT_ASCII_RATIO
    min_events: int = DEFAULT_MIN_EVENTS


@dataclass
class EncoderConfig:
    kind: str = "hash"
    dim: int = DEFAULT_DIM
    seed: int = 0
    normalize: bool = True


@dataclass
class ProfileConfig:
    mode: str = "offline"
    prompt_dir: str | None = None
    concurrency: int = 4


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [128])
    dropout: float = M.DEFAULT_DROPOUT
    short_fraction: float = DEFAULT_SHORT_FRACTION
    mf_factors: int = 64
    mf_weight_decay: float = 1e-5


@dataclass
class ExperimentConfig:
    variant: str = "proposed"
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    seed: int = 0
    out: str = "runs/default"
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_KS))
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    profiles: ProfileConfig = field(default_factory=ProfileConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        for v in [self.variant, *self.variants]:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")

    def with_variant(self, variant: str) -> "ExperimentConfig":
        return dataclasses.replace(self, variant=variant)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        synth = dataclasses.replace(self.synth, seed=seed) if self.synth is not None else None
        return dataclasses.replace(self, seed=seed, synth=synth, train=dataclasses.replace(self.train, seed=seed))

    def to_dict(self) -> dict[str, Any]:
        def clean(obj):
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items() if v is not None}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            return obj

        return clean(asdict(self))

    def dump(self, path: str | Path) -> None:
        Path(path).write_bytes(tomli_w.dumps(self.to_dict()).encode("utf-8"))

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        raw = dict(raw)
        sections = {
            "data": DataConfig, "encoder": EncoderConfig, "profiles": ProfileConfig,
            "model": ModelConfig, "train": TrainConfig, "synth": SynthConfig,
        }
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            if key in sections:
                typ = sections[key]
                known = {f.name for f in dataclasses.fields(typ)}
                unknown = set(value) - known
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {', '.join(sorted(unknown))}")
                try:
                    kwargs[key] = typ(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{key}]: {exc}") from None
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**kwargs)
        if "train" not in raw or "seed" not in raw.get("train", {}):
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=cfg.seed))
        if cfg.synth is not None and "seed" not in raw.get("synth", {}):
            cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, seed=cfg.seed))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


@dataclass
class Prepared:
    """Everything variants share: split, item table, encoder and profile embeddings."""

    dataset: SplitDataset
    item_ids: list[str]
    item_matrix: np.ndarray
    encoder: TextEncoder
    profiles: ProfileSet
    profile_vectors: dict[str, np.ndarray]

    @property
    def fingerprint(self) -> str:
        return f"{self.dataset.fingerprint()}:{self.encoder.fingerprint}"

    def vectors(self, horizon: str) -> np.ndarray:
        return self.profile_vectors[horizon]


def make_encoder(cfg: EncoderConfig) -> TextEncoder:
    if cfg.kind == "hash":
        return HashEncoder(cfg.dim, cfg.seed, cfg.normalize)
    if cfg.kind == "remote":
        return RemoteEncoder.from_env(dim=cfg.dim, normalize=cfg.normalize)
    raise ConfigError(f"unknown encoder kind {cfg.kind!r}")


def load_dataset(config: ExperimentConfig) -> SplitDataset:
    d = config.data
    if config.synth is not None:
        interactions, catalog, _ = generate(config.synth)
        catalog_map = {r.item_id: r for r in catalog}
    else:
        if not d.interactions or not d.catalog:
            raise ConfigError("set [data] interactions and catalog paths, or a [synth] section")
        for p in (d.interactions, d.catalog):
            if not Path(p).exists():
                raise ConfigError(f"missing input file {p}")
        interactions, _ = load_interactions(d.interactions, d.format)
        catalog_map = load_catalog(d.catalog)
    return prepare_dataset(
        interactions, catalog_map,
        min_desc_chars=d.min_desc_chars, ascii_ratio_min=d.ascii_ratio_min, min_events=d.min_events,
    )


def prepare(
    config: ExperimentConfig,
    horizons: Sequence[str] = ("short", "long", "general"),
    dataset: SplitDataset | None = None,
    work_dir: str | Path | None = None,
) -> Prepared:
    """Split the data, embed the catalog and build + embed the requested profiles.

    With ``work_dir`` set, profile and embedding caches persist there.
    """
    dataset = dataset or load_dataset(config)
    encoder = make_encoder(config.encoder)
    work = Path(work_dir) if work_dir else None
    if work:
        work.mkdir(parents=True, exist_ok=True)
    emb_cache = EmbeddingCache(encoder.dim, work / "embeddings.bin" if work else None)
    prof_cache = ProfileCache(work / "profiles.jsonl" if work else None)
    item_ids, item_matrix = encode_catalog(dataset.catalog, encoder, emb_cache)

    client = LLMClient.from_env() if config.profiles.mode == "llm" and horizons else None
    prompts = None
    if config.profiles.mode == "llm" and horizons:
        from .profiler import default_prompt

        prompts = {h: default_prompt(h, config.profiles.prompt_dir) for h in horizons}
    profiles = build_profiles(
        dataset, horizons, config.profiles.mode, prof_cache,
        client=client, prompts=prompts, concurrency=config.profiles.concurrency,
    )
    if profiles.failures:
        # users without profiles cannot be scored by profile-based variants
        keep = [u for u in dataset.users if u not in profiles.failures]
        logger.warning("dropping %d users whose profiles failed", len(profiles.failures))
        dataset = SplitDataset(
            {u: dataset.train[u] for u in keep}, {u: dataset.validation[u] for u in keep},
            {u: dataset.test[u] for u in keep}, dataset.catalog, dataset.rejected_users + sorted(profiles.failures),
        )
    vectors = {}
    for h in horizons:
        keys = [f"profile:{u}:{h}:{profiles.profiles[(u, h)].prompt_fingerprint}" for u in dataset.users]
        texts = [profiles.text(u, h) for u in dataset.users]
        vectors[h] = emb_cache.get_or_encode(keys, texts, encoder).astype(np.float64)
    if work:
        emb_cache.save()
    return Prepared(dataset, item_ids, item_matrix, encoder, profiles, vectors)


def user_vectors(variant: str, prep: Prepared, short_fraction: float = DEFAULT_SHORT_FRACTION) -> UserVectors:
    users = prep.dataset.users
    if variant in ("proposed", "dot"):
        return UserVectors(users, prep.vectors("short"), prep.vectors("long"))
    if variant == "st_only":
        return UserVectors(users, prep.vectors("short"))
    if variant == "lt_only":
        return UserVectors(users, prep.vectors("long"))
    if variant == "nots":
        return UserVectors(users, prep.vectors("general"))
    if variant == "centric":
        return centric_vectors(prep.dataset, prep.item_ids, prep.item_matrix)
    if variant == "tempfusion":
        return tempfusion_vectors(prep.dataset, prep.item_ids, prep.item_matrix, short_fraction)
    raise ConfigError(f"variant {variant!r} has no user vectors")


@dataclass
class VariantResult:
    variant: str
    metrics: MetricReport
    train_report: TrainReport | None
    params: M.ModelParams | MfParams | None
    out_dir: Path | None = None


def run_variant(config: ExperimentConfig, prep: Prepared | None = None, out_dir: str | Path | None = None) -> VariantResult:
    """Train (where applicable) and evaluate one variant on the test segment."""
    variant = config.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    prep = prep or prepare(config, PROFILE_HORIZONS.get(variant, ()))
    ds = prep.dataset
    report: TrainReport | None = None
    params: M.ModelParams | MfParams | None = None
    if variant == "popularity":
        scorer = PopularityScorer(ds.train_interactions(), prep.item_ids)
    elif variant == "mf":
        params, report = mf_train(ds, config.train, config.model.mf_factors, config.model.mf_weight_decay, prep.item_ids)
        scorer = MfScorer(params, prep.item_ids)
    else:
        reprs = user_vectors(variant, prep, config.model.short_fraction)
        params, report = train(
            ds, reprs, prep.item_ids, prep.item_matrix, "dot" if variant == "dot" else "mlp", config.train,
            hidden=tuple(config.model.hidden), dropout_rate=config.model.dropout,
        )
        scorer = ModelScorer(params, reprs, prep.item_ids, prep.item_matrix)
    metrics = evaluate(scorer, ds, "test", tuple(config.ks), system=variant)
    metrics.extra["dataset_fingerprint"] = prep.fingerprint
    result = VariantResult(variant, metrics, report, params)
    if out_dir is not None:
        write_variant(result, config, prep, Path(out_dir))
    return result


def write_variant(result: VariantResult, config: ExperimentConfig, prep: Prepared, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    config.with_variant(result.variant).dump(out / "config.snapshot")
    result.metrics.save(out / "metrics.json")
    result.metrics.write_per_user_csv(out / "per_user.csv")
    if result.train_report is not None:
        result.train_report.save(out / "train_report.json")
    if isinstance(result.params, M.ModelParams):
        M.save_checkpoint(
            out / "checkpoint.bin", result.params, prep.encoder.fingerprint,
            variant=result.variant, item_encoder_fingerprint=prep.encoder.fingerprint,
            dataset_fingerprint=prep.fingerprint,
        )
    elif isinstance(result.params, MfParams):
        result.params.save(out / "checkpoint.bin", variant="mf", dataset_fingerprint=prep.fingerprint)
    result.out_dir = out


def evaluate_checkpoint(
    checkpoint: str | Path, prep: Prepared, config: ExperimentConfig, segment: str = "test"
) -> MetricReport:
    """Re-score a saved model on one segment of the prepared data."""
    header, _ = M.read_container(checkpoint)
    variant = header.get("variant")
    if header.get("dataset_fingerprint") not in (None, prep.fingerprint):
        raise ConfigError("checkpoint was trained on a different dataset or encoder")
    if header.get("kind") == "mf":
        scorer = MfScorer(MfParams.load(checkpoint), prep.item_ids)
    else:
        params, _ = M.load_checkpoint(checkpoint)
        reprs = user_vectors(variant or "proposed", prep, config.model.short_fraction)
        scorer = ModelScorer(params, reprs, prep.item_ids, prep.item_matrix)
    metrics = evaluate(scorer, prep.dataset, segment, tuple(config.ks), system=variant or "model")
    metrics.extra["dataset_fingerprint"] = prep.fingerprint
    return metrics


@dataclass
class MatrixResult:
    reports: dict[str, MetricReport]
    gains: dict[str, dict[str, float]]
    pvalues: dict[str, dict[str, float]]
    baseline: str = BASELINE

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "aggregate": {v: r.aggregate for v, r in self.reports.items()},
            "n_users": {v: r.n_users for v, r in self.reports.items()},
            "gain_vs_baseline": self.gains,
            "pvalue_vs_baseline": self.pvalues,
        }


def relative_gain(new: float, base: float) -> float:
    return (new - base) / base if base else float("nan")


def compare(reports: Mapping[str, MetricReport], baseline: str = BASELINE) -> MatrixResult:
    """Each variant against the baseline: relative gain and paired p-value per metric."""
    if baseline not in reports:
        raise ConfigError(f"matrix needs the {baseline!r} variant as comparison baseline")
    prints = {r.extra.get("dataset_fingerprint") for r in reports.values()}
    if len(prints) > 1:
        raise ConfigError("variants were evaluated on different datasets or encoders")
    base = reports[baseline]
    gains: dict[str, dict[str, float]] = {}
    pvalues: dict[str, dict[str, float]] = {}
    users = sorted(base.per_user)
    for v, rep in reports.items():
        if v == baseline:
            continue
        if sorted(rep.per_user) != users:
            raise ConfigError(f"variant {v} was evaluated on a different user set")
        gains[v] = {m: relative_gain(rep.aggregate[m], base.aggregate[m]) for m in base.aggregate}
        pvalues[v] = {m: paired_significance(rep.vector(m, users), base.vector(m, users)) for m in base.aggregate}
    return MatrixResult(dict(reports), gains, pvalues, baseline)


def run_matrix(
    config: ExperimentConfig,
    variants: Sequence[str] | None = None,
    out_dir: str | Path | None = None,
    prep: Prepared | None = None,
) -> MatrixResult:
    variants = list(variants or config.variants)
    if len(variants) < 2:
        raise ConfigError("a matrix needs at least two variants")
    horizons = sorted({h for v in variants for h in PROFILE_HORIZONS.get(v, ())})
    out = Path(out_dir) if out_dir else None
    prep = prep or prepare(config, horizons, work_dir=out / "work" if out else None)
    reports = {}
    for v in variants:
        logger.info("running variant %s", v)
        res = run_variant(config.with_variant(v), prep, out / v if out else None)
        reports[v] = res.metrics
    result = compare(reports) if BASELINE in reports else MatrixResult(reports, {}, {})
    if out:
        config.dump(out / "config.snapshot")
        data = result.to_dict()
        data["runs"] = {v: [f"{v}/metrics.json"] for v in variants}
        (out / "matrix.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


@dataclass
class SeedMatrix:
    """A matrix repeated over seeds: per-seed means are averaged, p-values pool (seed, user) pairs."""

    seeds: list[int]
    per_seed: dict[int, MatrixResult]
    baseline: str = BASELINE

    @property
    def variants(self) -> list[str]:
        return list(self.per_seed[self.seeds[0]].reports)

    def _values(self, variant: str, metric: str) -> list[float]:
        return [self.per_seed[s].reports[variant].aggregate[metric] for s in self.seeds]

    def mean(self, variant: str, metric: str) -> float:
        return float(np.mean(self._values(variant, metric)))

    def median(self, variant: str, metric: str) -> float:
        return float(np.median(self._values(variant, metric)))

    def pooled(self, variant: str) -> MetricReport:
        per_user = {
            f"{s}:{u}": vals
            for s in self.seeds
            for u, vals in self.per_seed[s].reports[variant].per_user.items()
        }
        rep = self.per_seed[self.seeds[0]].reports[variant]
        return MetricReport(variant, rep.ks, per_user, segment=rep.segment)

    def to_dict(self) -> dict:
        metrics = list(self.per_seed[self.seeds[0]].reports[self.variants[0]].aggregate)
        out: dict[str, Any] = {
            "baseline": self.baseline,
            "seeds": self.seeds,
            "aggregate": {v: {m: self.mean(v, m) for m in metrics} for v in self.variants},
            "median": {v: {m: self.median(v, m) for m in metrics} for v in self.variants},
            "per_seed": {str(s): {v: r.aggregate for v, r in self.per_seed[s].reports.items()} for s in self.seeds},
        }
        if self.baseline in self.variants:
            base = self.pooled(self.baseline)
            users = sorted(base.per_user)
            out["gain_vs_baseline"] = {
                v: {m: relative_gain(self.mean(v, m), self.mean(self.baseline, m)) for m in metrics}
                for v in self.variants if v != self.baseline
            }
            out["pvalue_vs_baseline"] = {
                v: {m: paired_significance(self.pooled(v).vector(m, users), base.vector(m, users)) for m in metrics}
                for v in self.variants if v != self.baseline
            }
        return out


def run_seeds(
    config: ExperimentConfig,
    seeds: Sequence[int],
    variants: Sequence[str] | None = None,
    out_dir: str | Path | None = None,
) -> SeedMatrix:
    """One matrix per seed (``seed-<n>/`` subdirectories) plus a combined ``matrix.json``."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    out = Path(out_dir) if out_dir else None
    per_seed = {}
    for s in seeds:
        per_seed[s] = run_matrix(config.with_seed(s), variants, out / f"seed-{s}" if out else None)
    result = SeedMatrix(seeds, per_seed)
    if out:
        config.dump(out / "config.snapshot")
        data = result.to_dict()
        data["runs"] = {
            v: [f"seed-{s}/{v}/metrics.json" for s in seeds] for v in result.variants
        }
        (out / "matrix.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


@dataclass
class ExplanationRecord:
    user_id: str
    short_profile: str
    long_profile: str
    alpha_short: float
    alpha_long: float
    top_items: list[dict[str, Any]]
    summary: str

    def to_dict(self) -> dict:
        return asdict(self)


def ratio_summary(alpha_short: float, alpha_long: float) -> str:
    recent = int(round(100 * alpha_short))
    return f"{recent}% recent tastes, {100 - recent}% long-standing preferences"


def explain(
    checkpoint: str | Path,
    prep: Prepared,
    user_id: str,
    k: int = 10,
    short_fraction: float = DEFAULT_SHORT_FRACTION,
) -> ExplanationRecord:
    """Attention split, both profile texts and the top-k items for one user."""
    params, header = M.load_checkpoint(checkpoint)
    variant = header.get("variant", "proposed")
    if not params.fusion:
        raise ConfigError(
            f"checkpoint variant {variant!r} has no attention weights; "
            f"explanations need one of: {', '.join(ATTENTION_VARIANTS)}"
        )
    if header.get("encoder_fingerprint") != prep.encoder.fingerprint:
        raise ConfigError("checkpoint was trained with a different encoder")
    if user_id not in prep.dataset.train:
        raise ConfigError(f"unknown or filtered user {user_id!r}")
    reprs = user_vectors(variant, prep, short_fraction)
    row = reprs.rows([user_id])
    alphas = M.attention_weights(reprs.short[row], reprs.long[row], params.W_a)
    a_s, a_l = float(alphas.alpha_short[0]), float(alphas.alpha_long[0])
    ranked = rank_candidates(ModelScorer(params, reprs, prep.item_ids, prep.item_matrix), user_id, prep.dataset.train_positives(user_id))
    top = [
        {"item_id": i, "title": prep.dataset.catalog[i].title, "score": s}
        for i, s in zip(ranked.item_ids[:k], ranked.scores[:k])
    ]
    if variant == "tempfusion":
        short_text = "(item-embedding average of the most recent events)"
        long_text = "(item-embedding average of all training events)"
    else:
        short_text = prep.profiles.text(user_id, "short")
        long_text = prep.profiles.text(user_id, "long")
    return ExplanationRecord(user_id, short_text, long_text, a_s, a_l, top, ratio_summary(a_s, a_l))


def clean_dir(path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
