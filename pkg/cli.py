#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py generate --preset desk32 --out runs/data
    python cli.py train    --preset desk32 --dataset runs/data/train.pdy --out runs/model
    python cli.py eval     --task interpolate --checkpoint runs/model/model.pdyc \
                           --dataset runs/data/test.pdy --out runs/eval
    python cli.py baseline --preset desk32 --dataset runs/data/train.pdy \
                           --test-dataset runs/data/test.pdy --out runs/edlstm
    python cli.py report   runs/eval/report_interpolate.jsonl

Settings come from the defaults, then a preset, then a TOML file with
[dataset], [train], [baseline] and [eval] tables, then flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path

from baseline_edlstm import EdLstmCheckpoint, EdLstmConfig, generation_report, train_edlstm
from dataset import DatasetConfig, generate_corpus, read_dataset, write_dataset
from errors import ConfigError, PixelDynError
from evaluation import (
    TASKS,
    EvalConfig,
    format_summary,
    loss_figure,
    position_inference_task,
    read_report,
    run_task,
    summarize_report,
    trajectory_figure,
    write_figure,
    write_report,
    write_trajectory_svg,
)
from trainer import ModelCheckpoint, TrainConfig, train, write_loss_log

logger = logging.getLogger(__name__)

OUT_ENV = "PIXELDYN_OUT"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

PRESETS = {
    "paper48": {
        "dataset": {"height": 48, "width": 48, "steps": 30, "object_counts": (1, 2, 3)},
        "train": {"state_size": 1024, "canvas_size": 1024, "iterations": 200_000,
                  "freeze_iterations": 10_000, "anneal_start": 10_000, "anneal_end": 50_000},
        "baseline": {"state_size": 2048, "iterations": 200_000},
    },
    "desk32": {
        "dataset": {"height": 32, "width": 32, "steps": 30, "object_counts": (1, 2),
                    "train_per_count": 2000, "test_per_count": 100},
        "train": {"state_size": 256, "canvas_size": 256, "iterations": 20_000,
                  "freeze_iterations": 2000, "anneal_start": 2000, "anneal_end": 10_000,
                  "checkpoint_interval": 2000},
        "baseline": {"state_size": 512, "encoder_sizes": (256,), "iterations": 20_000,
                     "checkpoint_interval": 2000},
        "eval": {"max_sequences": 200},
    },
}


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: EdLstmConfig = field(default_factory=EdLstmConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: Path = Path("runs")
    seed: int = 0
    threads: int = 1

    SECTIONS = ("dataset", "train", "baseline", "eval")

    def snapshot(self):
        data = dataclasses.asdict(self)
        data["out"] = str(self.out)
        return data


def apply_section(config, section, values):
    """Overwrite dataclass fields from a mapping; unknown keys are errors"""
    names = {f.name: f for f in dataclasses.fields(config)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if isinstance(getattr(config, key), tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(config, key, value)
    return config


def apply_overrides(run: RunConfig, overrides, source):
    for section, values in overrides.items():
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {source}")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] in {source} must be a table")
        apply_section(getattr(run, section), section, values)
    return run


def load_config_file(path):
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def default_out(command):
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def build_config(args) -> RunConfig:
    run = RunConfig()
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}, expected one of {sorted(PRESETS)}")
        apply_overrides(run, PRESETS[args.preset], f"preset {args.preset}")
    if args.config is not None:
        apply_overrides(run, load_config_file(args.config), args.config)

    if args.seed is not None:
        run.dataset.seed = run.train.seed = run.baseline.seed = args.seed
    run.seed = run.dataset.seed
    if args.iterations is not None:
        run.train.iterations = run.baseline.iterations = args.iterations
    if args.batch is not None:
        run.train.batch_size = run.baseline.batch_size = args.batch
    run.threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    run.eval.threads = run.threads
    run.out = Path(args.out) if args.out is not None else default_out(args.command)

    run.dataset.validate()
    run.train.validate()
    run.baseline.validate()
    run.eval.validate()
    return run


def code_version():
    """Digest of the source files next to this one"""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).resolve().parent.glob("*.py")):
        if not path.name.startswith("test_"):
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()[:12]


def write_manifest(run: RunConfig, command, argv):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": run.snapshot(),
        "code_version": code_version(),
        "seed": run.seed,
        "threads": run.threads,
    }
    path = run.out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def configure_logging(verbose, run_dir=None):
    """Console handler plus run.log in the run directory; replaces handlers added earlier"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "pixeldyn", False):
            root.removeHandler(handler)
            handler.close()
    handlers = [logging.StreamHandler()]
    if run_dir is not None:
        handlers.append(logging.FileHandler(Path(run_dir) / "run.log", mode="w"))
    for handler in handlers:
        handler.pixeldyn = True
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def banner(title):
    print("=" * 60)
    print(title)
    print("=" * 60)


def cmd_generate(args, run: RunConfig):
    corpora = generate_corpus(run.dataset, threads=run.threads)
    paths = {}
    for split, corpus in corpora.items():
        paths[split] = run.out / f"{split}.pdy"
        write_dataset(paths[split], corpus)
    banner("Dataset generated")
    for split, corpus in corpora.items():
        print(f"{split:<6} {len(corpus):>6d} sequences  {corpus.steps} steps  "
              f"{corpus.height}x{corpus.width}  -> {paths[split]}")
    return 0


def _snapshot_callback(run: RunConfig, corpus):
    figures = run.out / "snapshots"

    def save(snapshot: ModelCheckpoint):
        snapshot.save(run.out / f"checkpoint_{snapshot.iteration:07d}.pdyc")
        sequence = corpus.sequences[0]
        means, alignment = position_inference_task(snapshot.params, sequence, corpus.transform)
        fig = trajectory_figure(corpus.transform.apply(sequence.positions),
                                f"iteration {snapshot.iteration}", inferred=alignment.apply(means))
        write_trajectory_svg(fig, figures / f"inferred_{snapshot.iteration:07d}.svg")
        logger.info("snapshot at iteration %d: aligned error %.3f px", snapshot.iteration, alignment.error)

    return save


def cmd_train(args, run: RunConfig):
    corpus = read_dataset(args.dataset)
    initial = None
    if args.checkpoint is not None:
        initial = ModelCheckpoint.load(args.checkpoint)
        if initial.params.renderer.pixels != corpus.height * corpus.width:
            raise ConfigError(f"checkpoint renders {initial.params.renderer.pixels} pixels, "
                              f"dataset frames have {corpus.height * corpus.width}")
    result = train(run.train, corpus, initial=initial, callback=_snapshot_callback(run, corpus))
    result.save(run.out / "model.pdyc")
    write_loss_log(result.history, run.out / "loss.csv")
    if result.history:
        write_figure(loss_figure(result.loss_frame()), run.out / "loss.html")
    banner("Training finished")
    print(f"iterations: {result.iteration}")
    if result.history:
        _, bound, recon, kl, beta = result.history[-1]
        print(f"final elbo {bound:.3f}  recon {recon:.3f}  kl {kl:.3f}  beta {beta:.3f}")
    print(f"model: {run.out / 'model.pdyc'}")
    return 0


def cmd_eval(args, run: RunConfig):
    model = ModelCheckpoint.load(args.checkpoint).params
    corpus = read_dataset(args.dataset)
    records = run_task(args.task, model, corpus, run.eval, out_dir=run.out / "figures")
    path = write_report(records, run.out / f"report_{args.task}.jsonl")
    banner(f"Evaluation: {args.task}")
    print(format_summary(summarize_report(read_report(path))))
    print(f"report: {path}")
    return 0


def cmd_baseline(args, run: RunConfig):
    corpus = read_dataset(args.dataset)
    initial = EdLstmCheckpoint.load(args.checkpoint) if args.checkpoint is not None else None

    def save(snapshot):
        snapshot.save(run.out / f"edlstm_{snapshot.iteration:07d}.pdyc")

    result = train_edlstm(run.baseline, corpus, initial=initial, callback=save)
    result.save(run.out / "edlstm.pdyc")
    result.loss_frame().to_csv(run.out / "edlstm_loss.csv", index=False, float_format="%.17g")
    banner("ED-LSTM baseline")
    print(f"iterations: {result.iteration}")
    if args.test_dataset is not None:
        test = read_dataset(args.test_dataset)
        records = generation_report(result.params, test, run.baseline)
        path = write_report(records, run.out / "report_edlstm.jsonl")
        print(format_summary(summarize_report(read_report(path))))
        print(f"report: {path}")
    return 0


def cmd_report(args, run: RunConfig):
    for path in args.reports:
        banner(f"Report: {path}")
        summary = summarize_report(read_report(path))
        print(format_summary(summary))
        if args.json:
            print(json.dumps(summary, indent=2))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [dataset], [train], [baseline], [eval] tables")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--threads", type=int, help="worker threads (default: number of cores)")
    common.add_argument("--iterations", type=int)
    common.add_argument("--batch", type=int, help="mini-batch size")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="pixeldyn", description="Object dynamics from pixels")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="simulate the cannonball dataset")

    train_parser = sub.add_parser("train", parents=[common], help="train the model")
    train_parser.add_argument("--dataset", required=True, help="training dataset file")
    train_parser.add_argument("--checkpoint", help="checkpoint to continue from")

    eval_parser = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    eval_parser.add_argument("--task", choices=TASKS, required=True)
    eval_parser.add_argument("--checkpoint", required=True)
    eval_parser.add_argument("--dataset", required=True, help="test dataset file")

    baseline_parser = sub.add_parser("baseline", parents=[common], help="train and score the ED-LSTM")
    baseline_parser.add_argument("--dataset", required=True, help="training dataset file")
    baseline_parser.add_argument("--test-dataset", help="test dataset for the generation report")
    baseline_parser.add_argument("--checkpoint", help="baseline checkpoint to continue from")

    report_parser = sub.add_parser("report", parents=[common], help="summarize JSON-lines reports")
    report_parser.add_argument("reports", nargs="+")
    report_parser.add_argument("--json", action="store_true", help="also print the summary as JSON")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        run = build_config(args)
        if args.command != "report":
            run.out.mkdir(parents=True, exist_ok=True)
            configure_logging(args.verbose, run.out)
            write_manifest(run, args.command, argv)
        else:
            configure_logging(args.verbose)
        logger.debug("configuration: %s", run.snapshot())
        return COMMANDS[args.command](args, run)
    except (PixelDynError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
