"""Command-line entry point: ``temprec <command> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import model as M
from .ingest import IngestError, SplitDataset
from .pipeline import (
    ATTENTION_VARIANTS,
    PROFILE_HORIZONS,
    VARIANTS,
    ConfigError,
    DataConfig,
    ExperimentConfig,
    evaluate_checkpoint,
    explain,
    load_dataset,
    prepare,
    run_matrix,
    run_seeds,
    run_variant,
)
from .profiler import HORIZONS, ProfileError
from .remote import RemoteConfigError
from .report import ReportError, write_report
from .synth import SynthConfig, write_dataset

logger = logging.getLogger("temprec")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=default, help="overrides the config seed")
    parser.add_argument("--out", type=Path, default=default, help="output directory")


def _data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, help="directory holding interactions.csv and catalog.jsonl")
    parser.add_argument("--split", type=Path, help="split.json written by the ingest command")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="temprec", description=__doc__)
    _global_flags(parser, suppress=False)
    parser.add_argument("-q", "--quiet", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic drift dataset")
    for f in dataclasses.fields(SynthConfig):
        if f.name != "seed":
            p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), dest=f"synth_{f.name}")

    p = sub.add_parser("ingest", parents=[common], help="filter and split raw logs into split.json")
    p.add_argument("--interactions", type=Path)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--format", choices=["csv", "jsonl"])
    _data_flags(p)

    for name, text in (("profile", "build textual user profiles"), ("encode", "embed the catalog and profiles")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--horizons", type=_csv_list, default=list(HORIZONS))
        _data_flags(p)

    p = sub.add_parser("train", parents=[common], help="train one variant and evaluate it on the test segment")
    p.add_argument("--variant", choices=VARIANTS)
    _data_flags(p)

    p = sub.add_parser("eval", parents=[common], help="re-evaluate a saved checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--segment", choices=["validation", "test"], default="test")
    _data_flags(p)

    p = sub.add_parser("matrix", parents=[common], help="run several variants on shared data, then report")
    p.add_argument("--variants", type=_csv_list)
    p.add_argument("--seeds", type=_int_list, help="repeat the matrix per seed, e.g. 0,1,2")
    p.add_argument("--no-plot", action="store_true")
    _data_flags(p)

    p = sub.add_parser("explain", parents=[common], help="attention split and top items for users")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--user", action="append", required=True, dest="users")
    p.add_argument("-k", type=int, default=10)
    _data_flags(p)

    p = sub.add_parser("report", parents=[common], help="tables and gains chart for a finished run")
    p.add_argument("run_dir", type=Path, nargs="?")
    p.add_argument("--no-plot", action="store_true")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=str(args.out))
    data = getattr(args, "data", None)
    if data is not None:
        cfg = dataclasses.replace(
            cfg, synth=None,
            data=dataclasses.replace(cfg.data, interactions=str(data / "interactions.csv"), catalog=str(data / "catalog.jsonl")),
        )
    return cfg


def _dataset(args: argparse.Namespace, cfg: ExperimentConfig) -> SplitDataset:
    split = getattr(args, "split", None)
    if split is not None:
        return SplitDataset.load(split)
    if cfg.synth is None and not (cfg.data.interactions and cfg.data.catalog):
        raise ConfigError("no data: pass --data DIR, --split FILE, or a config with [data] paths or a [synth] section")
    return load_dataset(cfg)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))


def cmd_synth(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    base = cfg.synth or SynthConfig(seed=cfg.seed)
    overrides = {k[6:]: v for k, v in vars(args).items() if k.startswith("synth_") and v is not None}
    try:
        synth = dataclasses.replace(base, **overrides)
    except ValueError as exc:
        raise ConfigError(f"invalid synth settings: {exc}") from None
    paths = write_dataset(synth, Path(cfg.out))
    _print({k: str(v) for k, v in paths.items()})


def cmd_ingest(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    if args.interactions or args.catalog:
        if not (args.interactions and args.catalog):
            raise ConfigError("--interactions and --catalog go together")
        cfg = dataclasses.replace(
            cfg, synth=None,
            data=DataConfig(str(args.interactions), str(args.catalog), args.format, cfg.data.min_desc_chars,
                            cfg.data.ascii_ratio_min, cfg.data.min_events),
        )
    ds = _dataset(args, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "split.json")
    _print({
        "split": str(out / "split.json"),
        "users": len(ds.users),
        "items": len(ds.catalog),
        "rejected_users": len(ds.rejected_users),
        "events": {s: sum(len(ds.segment(s)[u]) for u in ds.users) for s in ("train", "validation", "test")},
        "fingerprint": ds.fingerprint(),
    })


def cmd_profile(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    out = Path(cfg.out)
    prep = prepare(cfg, args.horizons, _dataset(args, cfg), work_dir=out / "work")
    with open(out / "profiles.jsonl", "w", encoding="utf-8") as fh:
        for (_, _), prof in sorted(prep.profiles.profiles.items()):
            fh.write(prof.to_json() + "\n")
    _print({"profiles": len(prep.profiles.profiles), "failed_users": sorted(prep.profiles.failures), "path": str(out / "profiles.jsonl")})


def cmd_encode(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    out = Path(cfg.out)
    prep = prepare(cfg, args.horizons, _dataset(args, cfg), work_dir=out / "work")
    _print({
        "encoder": prep.encoder.fingerprint,
        "items": list(prep.item_matrix.shape),
        "profiles": {h: list(v.shape) for h, v in prep.profile_vectors.items()},
        "cache": str(out / "work" / "embeddings.bin"),
    })


def cmd_train(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    if args.variant:
        cfg = cfg.with_variant(args.variant)
    out = Path(cfg.out)
    prep = prepare(cfg, PROFILE_HORIZONS.get(cfg.variant, ()), _dataset(args, cfg), work_dir=out / "work")
    res = run_variant(cfg, prep, out)
    summary = {"variant": cfg.variant, "test": res.metrics.aggregate, "out": str(out)}
    if res.train_report is not None:
        summary["best_epoch"] = res.train_report.best_epoch
        summary["stop_reason"] = res.train_report.stop_reason
    _print(summary)


def _checkpoint_header(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    return M.read_container(path)[0]


def cmd_eval(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    out = Path(cfg.out)
    ckpt = args.checkpoint or out / "checkpoint.bin"
    variant = _checkpoint_header(ckpt).get("variant", cfg.variant)
    prep = prepare(cfg, PROFILE_HORIZONS.get(variant, ()), _dataset(args, cfg), work_dir=out / "work")
    metrics = evaluate_checkpoint(ckpt, prep, cfg, args.segment)
    out.mkdir(parents=True, exist_ok=True)
    target = out / ("metrics.json" if args.segment == "test" else f"metrics-{args.segment}.json")
    metrics.save(target)
    _print({"variant": variant, "segment": args.segment, "metrics": metrics.aggregate, "path": str(target)})


def cmd_matrix(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    out = Path(cfg.out)
    variants = args.variants or cfg.variants
    if args.seeds and len(args.seeds) > 1:
        if args.split:
            raise ConfigError("--seeds regenerates data per seed; it cannot be combined with --split")
        run_seeds(cfg, args.seeds, variants, out)
    else:
        if args.seeds:
            cfg = cfg.with_seed(args.seeds[0])
        horizons = sorted({h for v in variants for h in PROFILE_HORIZONS.get(v, ())})
        prep = prepare(cfg, horizons, _dataset(args, cfg), work_dir=out / "work")
        run_matrix(cfg, variants, out, prep)
    paths = write_report(out, plot=not args.no_plot)
    sys.stdout.write((out / "report.txt").read_text(encoding="utf-8"))
    _print({k: str(v) for k, v in paths.items()})


def cmd_explain(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    out = Path(cfg.out)
    ckpt = args.checkpoint or out / "checkpoint.bin"
    variant = _checkpoint_header(ckpt).get("variant", "proposed")
    if variant not in ATTENTION_VARIANTS:
        raise ConfigError(f"variant {variant!r} has no attention; explanations need one of: {', '.join(ATTENTION_VARIANTS)}")
    prep = prepare(cfg, PROFILE_HORIZONS.get(variant, ()), _dataset(args, cfg), work_dir=out / "work")
    target = out / "explanations"
    target.mkdir(parents=True, exist_ok=True)
    for user in args.users:
        rec = explain(ckpt, prep, user, args.k, cfg.model.short_fraction)
        path = target / f"{user}.json"
        path.write_text(json.dumps(rec.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        print(f"{user}: {rec.summary} -> {path}")


def cmd_report(args: argparse.Namespace) -> None:
    run_dir = args.run_dir or args.out
    if run_dir is None:
        raise ConfigError("report needs a run directory")
    paths = write_report(run_dir, args.out if args.run_dir and args.out else None, plot=not args.no_plot)
    sys.stdout.write(paths["text"].read_text(encoding="utf-8"))


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "profile": cmd_profile, "encode": cmd_encode,
    "train": cmd_train, "eval": cmd_eval, "matrix": cmd_matrix, "explain": cmd_explain, "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, ReportError, IngestError, ProfileError, RemoteConfigError, M.ModelError) as exc:
        print(f"temprec: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
