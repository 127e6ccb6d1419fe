"""Command-line entry point.

Each stage reads and writes a run directory (``--out``).  The first stage stores the
resolved configuration as ``config.json`` there; later stages reload it, apply any
``--config`` / ``--set`` overrides, and write it back.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import keywords as kw, mahalanobis, pipeline
from .data import generate_synthetic, synth_config_from_dict, write_jsonl
from .errors import ConfigError, NumericError
from .pipeline import ExperimentConfig

logger = logging.getLogger("poore")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, pairs: list[str]) -> dict:
    """Apply ``key=value`` pairs; ``synth.key`` addresses the synthetic-data config."""
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        value = _parse_value(raw)
        if key.startswith("synth."):
            if d.get("synth") is None:
                d["synth"] = {}
            d["synth"][key[len("synth."):]] = value
        else:
            d[key] = value
    return d


def resolve_config(args, fresh: bool = False) -> ExperimentConfig:
    """Defaults < run_dir/config.json < --config < --synth-config/--data/--seed < --set."""
    d = ExperimentConfig().to_dict()
    saved = Path(args.out) / "config.json"
    if not fresh and saved.exists():
        d.update(_read_json(str(saved)))
    if args.config:
        d.update(_read_json(args.config))
    if args.synth_config:
        d["synth"] = _read_json(args.synth_config)
        d["data_path"] = None
    if args.data:
        d["data_path"] = args.data
        d["synth"] = None
    if args.seed is not None:
        d["seed"] = args.seed
    apply_overrides(d, args.set or [])
    d["out_dir"] = args.out
    try:
        cfg = ExperimentConfig.from_dict(d)
    except TypeError as err:
        raise ConfigError(str(err)) from None
    cfg.validate()
    return cfg


def _prepare(args, fresh: bool = False) -> ExperimentConfig:
    cfg = resolve_config(args, fresh)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_config(cfg, out)
    return cfg


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path} not found; run `poore {stage}` first")
    return path


def cmd_gen_data(args) -> None:
    d = _read_json(args.synth_config) if args.synth_config else {}
    apply_overrides(d, [s[len("synth."):] if s.startswith("synth.") else s for s in args.set or []])
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = synth_config_from_dict(d)
    corpus = generate_synthetic(cfg)
    write_jsonl(corpus, args.out)
    print(f"wrote {len(corpus)} examples to {args.out}")


def cmd_train(args) -> None:
    cfg = _prepare(args, fresh=True)
    corpus = pipeline.load_corpus(cfg)
    model = pipeline.run_base_training(cfg, corpus)
    print(f"base checkpoint: {Path(cfg.out_dir) / 'base.pt'} "
          f"(val acc {pipeline.accuracy(model, corpus.split('val')):.4f})")


def cmd_keywords(args) -> None:
    if args.criterion is not None:
        args.set = (args.set or []) + [f"criterion={json.dumps(args.criterion)}"]
    if args.top_m is not None:
        args.set = (args.set or []) + [f"top_m={args.top_m}"]
    cfg = _prepare(args)
    out = Path(cfg.out_dir)
    base = pipeline.load_model(_require(out / "base.pt", "train"))
    corpus = pipeline.load_corpus(cfg)
    with corpus.ood_locked():
        ks, maha_pre = pipeline.select_stage_keywords(cfg, base, corpus.split("train"))
    kw.write_keywords(ks, out / "keywords.tsv")
    mahalanobis.save(maha_pre, out / "maha_pre.params")
    print(f"{len(ks)} keywords ({ks.criterion}) -> {out / 'keywords.tsv'}")


def cmd_poore(args) -> None:
    cfg = _prepare(args)
    out = Path(cfg.out_dir)
    base = pipeline.load_model(_require(out / "base.pt", "train"))
    result = pipeline.run_poore(cfg, base, pipeline.load_corpus(cfg))
    print(f"pseudo-OOD distance {result.distance_before:.4f} -> {result.distance_after:.4f}")


def cmd_eval(args) -> None:
    cfg = _prepare(args)
    out = Path(cfg.out_dir)
    corpus = pipeline.load_corpus(cfg)
    if args.model == "base":
        model = pipeline.load_model(_require(out / "base.pt", "train"))
        maha = None
    else:
        model = pipeline.load_model(_require(out / "poore.pt", "poore"))
        maha = mahalanobis.load(_require(out / "maha.params", "poore"))
    fitted = pipeline.fit_for_eval(cfg, model, corpus, maha)
    report = pipeline.run_eval(cfg, model, corpus, fitted, out / f"eval_{args.model}", not args.no_plots)
    print(pipeline.comparison_table({args.model: report.summary}), end="")


def cmd_report(args) -> None:
    out = Path(args.out)
    reports = {}
    for name in ("base", "poore"):
        path = out / f"eval_{name}" / "report.json"
        if path.exists():
            reports[name] = _read_json(str(path))
    if not reports:
        raise ConfigError(f"no eval_*/report.json under {out}; run `poore eval` first")
    table = pipeline.comparison_table(reports)
    (out / "report.md").write_text(table, encoding="utf-8")
    print(table, end="")


def cmd_run(args) -> None:
    cfg = _prepare(args, fresh=True)
    summary = pipeline.run_experiment(cfg, plots=not args.no_plots)
    print(pipeline.comparison_table({"base": summary["base"], "poore": summary["poore"]}), end="")
    print(f"pseudo-OOD distance {summary['distance_before']:.4f} -> {summary['distance_after']:.4f}")


def cmd_ablation(args) -> None:
    cfg = _prepare(args, fresh=True)
    summary = pipeline.run_ablation(cfg, plots=not args.no_plots)
    print(pipeline.comparison_table(summary["reports"]), end="")
    print(f"keyword overlap: {summary['keyword_overlap']}")


def cmd_sweep(args) -> None:
    cfg = _prepare(args, fresh=True)
    grid = [float(x) for x in args.grid.split(",")] if args.grid else None
    reports = pipeline.run_sweep(cfg, grid, plots=not args.no_plots)
    print(pipeline.comparison_table(reports), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs/default", help="run directory")
    common.add_argument("--config", help="JSON file with ExperimentConfig fields")
    common.add_argument("--synth-config", help="JSON file with synthetic-data fields")
    common.add_argument("--data", help="JSONL corpus instead of synthetic data")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field (value parsed as JSON); repeatable")
    common.add_argument("--no-plots", action="store_true", help="skip SVG histograms")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="poore", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus as JSONL")
    p.set_defaults(func=cmd_gen_data, out="data.jsonl")
    sub.add_parser("train", parents=[common], help="CE-only base training").set_defaults(func=cmd_train)
    p = sub.add_parser("keywords", parents=[common], help="select keywords from the base model")
    p.add_argument("--criterion", choices=kw.CRITERIA)
    p.add_argument("--top-m", type=int)
    p.set_defaults(func=cmd_keywords)
    sub.add_parser("poore", parents=[common], help="post-hoc fine-tuning").set_defaults(func=cmd_poore)
    p = sub.add_parser("eval", parents=[common], help="score the test split with every estimator")
    p.add_argument("--model", choices=("base", "poore"), default="poore")
    p.set_defaults(func=cmd_eval)
    sub.add_parser("report", parents=[common], help="compare eval reports").set_defaults(func=cmd_report)
    sub.add_parser("run", parents=[common], help="train, eval, poore, eval").set_defaults(func=cmd_run)
    sub.add_parser("ablation", parents=[common], help="compare keyword criteria").set_defaults(func=cmd_ablation)
    p = sub.add_parser("sweep", parents=[common], help="grid over lambda_por")
    p.add_argument("--grid", help="comma-separated lambda_por values (default 1e-5..1e2)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
