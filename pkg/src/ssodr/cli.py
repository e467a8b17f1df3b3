"""Command line entry point: ``ssodr <subcommand> [options]``.

Every pipeline stage is its own subcommand operating on an output directory,
and ``run`` chains them. Exit codes: 0 success, 2 config error, 3 data or
format error, 4 numerical error, 5 stage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from ssodr import pipeline
from ssodr.config import parse_config
from ssodr.core import read_groundtruth, write_dataset, write_groundtruth
from ssodr.errors import ConfigError, SSODRError
from ssodr.evaluation import EvalReport, mean_ap
from ssodr.synth import SynthConfig, generate

log = logging.getLogger("ssodr")

EXIT_IO = 3


def _synth_config(overrides: list[str], seed: int | None) -> SynthConfig:
    kinds = {f.name: f.type for f in fields(SynthConfig)}
    values = {}
    env_seed = os.environ.get("SSODR_SEED")
    if env_seed:
        values["seed"] = env_seed
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override: expected key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"unknown key {key}")
        values[key] = raw
    if seed is not None:
        values["seed"] = str(seed)
    parsed = {}
    for key, raw in values.items():
        kind = kinds[key]
        try:
            parsed[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        except ValueError:
            raise ConfigError(f"key {key}: cannot parse {raw!r} as {kind}") from None
    cfg = replace(SynthConfig(), **parsed)
    cfg.validate()
    return cfg


def cmd_gen_synth(args) -> int:
    cfg = _synth_config(args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, gt, plant = generate(cfg)
    write_dataset(dataset, out / "dataset.jsonl")
    write_groundtruth(gt, out / "gt.jsonl")
    plant.write(out / "plant.json")
    print(f"wrote {dataset.n_regions} regions in {len(dataset.frames)} frames to {out}")
    return 0


def _setup(args, need_gt: bool = False):
    cfg = parse_config(args.config, args.set, args.seed)
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    if need_gt and args.gt is None:
        raise ConfigError("--gt is required")
    ws = pipeline.Workspace(args.out, cfg, args.force)
    ctx = pipeline.load_context(cfg, args.dataset)
    return ctx, ws


def cmd_cluster(args) -> int:
    ctx, ws = _setup(args)
    with pipeline.stage("cluster"):
        state = pipeline.run_cluster(ctx, ws)
    print(f"cycle {state.cycle}: {state.K} clusters, {len(state.empty_clusters())} empty")
    return 0


def cmd_score(args) -> int:
    ctx, ws = _setup(args)
    with pipeline.stage("score"):
        card = pipeline.run_score(ctx, ws)
    for rec in card.records()[: ctx.cfg.top_m]:
        print(json.dumps(rec))
    return 0


def cmd_mine(args) -> int:
    ctx, ws = _setup(args)
    with pipeline.stage("mine"):
        mined = pipeline.run_mine(ctx, ws)
    print(f"{len(mined.positives)} positives, {len(mined.hard_negatives)} hard negatives")
    return 0


def cmd_train(args) -> int:
    ctx, ws = _setup(args)
    with pipeline.stage("train"):
        params = pipeline.run_train(ctx, ws)
    print(f"trained through cycle {params.cycle}, epoch {params.epoch}")
    return 0


def cmd_detect(args) -> int:
    ctx, ws = _setup(args)
    with pipeline.stage("detect"):
        dets = pipeline.run_detect(ctx, ws)
    print(f"{len(dets)} detections")
    return 0


def cmd_eval(args) -> int:
    ctx, ws = _setup(args, need_gt=True)
    with pipeline.stage("eval"):
        report = pipeline.run_eval(ctx, ws, read_groundtruth(args.gt))
    print(json.dumps(report.ap_by_threshold, sort_keys=True))
    return 0


def cmd_retrieve(args) -> int:
    ctx, ws = _setup(args)
    with pipeline.stage("retrieve"):
        hits = pipeline.run_retrieve(ctx, ws)
    for h in hits:
        print(json.dumps(h.__dict__))
    return 0


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.set, args.seed)
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    result = pipeline.run_pipeline(cfg, args.dataset, args.gt, args.out, args.force)
    if result.report is not None:
        print(json.dumps(result.report.ap_by_threshold, sort_keys=True))
    elif result.mean_ap_by_threshold is not None:
        print(json.dumps(result.mean_ap_by_threshold, sort_keys=True))
    return 0


def cmd_map(args) -> int:
    reports = [EvalReport.load(p) for p in args.reports]
    print(json.dumps(mean_ap(reports), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssodr", description="Self-supervised object detection from weakly labeled region proposals.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="overrides the config seed and SSODR_SEED")

    stage_opts = argparse.ArgumentParser(add_help=False, parents=[common])
    stage_opts.add_argument("--dataset", type=Path, help="dataset metadata file (.jsonl)")
    stage_opts.add_argument("--gt", type=Path, help="ground-truth file (.jsonl)")
    stage_opts.add_argument("--out", type=Path, required=True, help="working / output directory")
    stage_opts.add_argument("--force", action="store_true", help="reuse an output directory written under another config")

    gen = sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset, ground truth and plant report")
    gen.add_argument("--out", type=Path, required=True)
    gen.set_defaults(func=cmd_gen_synth)

    for name, func, text in [
        ("cluster", cmd_cluster, "initialize (first call) and refine the clusters for one cycle"),
        ("score", cmd_score, "rank clusters by potential score"),
        ("mine", cmd_mine, "densest-subgraph mining of positives and hard negatives"),
        ("train", cmd_train, "train the detector for one cycle, warm-started"),
        ("detect", cmd_detect, "run the detector on the evaluation frames"),
        ("eval", cmd_eval, "score saved detections against ground truth"),
        ("retrieve", cmd_retrieve, "regions nearest the top cluster centroid"),
        ("run", cmd_run, "full loop: all cycles, then detect, eval and retrieve"),
    ]:
        sub.add_parser(name, parents=[stage_opts], help=text).set_defaults(func=func)

    mp = sub.add_parser("map", help="mean AP over per-class report files")
    mp.add_argument("reports", nargs="+", type=Path)
    mp.set_defaults(func=cmd_map)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SSODRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
