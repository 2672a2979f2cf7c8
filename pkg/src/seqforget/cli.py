"""Command-line entry point.

Subcommands cover the full sequential pipeline and its parts::

    gen-data          write the retain/forget corpora as JSONL
    train             positive fine-tuning from a fresh model
    unlearn           layer-restricted negative fine-tuning from a checkpoint
    stabilize         early-stopped retain fine-tuning from a checkpoint
    eval              NLL/perplexity/probe scorecard for a checkpoint
    probe             probe transcripts only
    pipeline          all three phases plus evaluation in one process
    compare-capacity  run the pipeline at two model sizes and tabulate

Exit codes: 0 success, 2 configuration, 3 data or checkpoint artifacts,
4 training, 5 evaluation, 1 anything else.  Every flag has a config-file
equivalent; precedence is preset < config file < SEQFORGET_* environment
< flags.  The resolved configuration is echoed to the workdir as
``resolved_config.json`` so a run can be reproduced from its artifacts.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
import warnings

from .config import PRESETS, RunConfig, resolve_config
from .data import (augment_with_refusals, generate_forget, generate_retain,
                   save_corpus, split_train_val)
from .errors import (CheckpointError, ConfigError, DataError, EmptyLossError,
                     EvalError, PolicyError, SeqforgetError, TrainError)
from .evaluation import (build_probe_suite, compare_capacity, evaluate_model,
                         probe_emission_rate)
from .model import init_model
from .persistence import append_metrics, load_checkpoint, save_checkpoint
from .trainer import (restore_params, run_negative_phase, run_pipeline,
                      run_positive_phase, run_stabilization)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAIN = 4
EXIT_EVAL = 5

_SNAPSHOT_NAMES = ("init", "post_p1", "post_p2", "final")


def _corpora(cfg: RunConfig):
    retain = generate_retain(cfg.data.retain)
    forget = generate_forget(cfg.data.forget)
    retain_train, retain_val = split_train_val(retain, cfg.data.val_fraction,
                                               seed=cfg.data.split_seed)
    # refusal shaping goes in the train split only; val stays pure trivia
    retain_train = augment_with_refusals(retain_train, cfg.data.forget,
                                         cfg.data.n_refusals)
    return retain_train, retain_val, forget


def _suite(cfg: RunConfig):
    return build_probe_suite(cfg.data.forget, seed=cfg.eval.probe_seed)


def _workdir(cfg: RunConfig, resolved: dict) -> str:
    path = cfg.paths.workdir
    os.makedirs(path, exist_ok=True)
    echo = os.path.join(path, "resolved_config.json")
    with open(echo, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _ckpt(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.paths.workdir, f"{name}.ckpt")


def _input_checkpoint(cfg: RunConfig, default_name: str) -> str:
    return cfg.paths.checkpoint or _ckpt(cfg, default_name)


def _out_path(cfg: RunConfig, default_name: str) -> str:
    return cfg.paths.out or os.path.join(cfg.paths.workdir, default_name)


def _fresh(path: str) -> str:
    if os.path.exists(path):
        os.unlink(path)
    return path


def _epoch_streamer(path):
    """Callback that appends one metrics line per finished epoch.

    Each line is flushed as it is written, so an interrupted run still
    leaves a usable trail.
    """
    def stream(rec):
        append_metrics({"record": "epoch", **dataclasses.asdict(rec)}, path)
    return stream


def _log_summaries(report, path) -> None:
    append_metrics([{"record": "phase", **dataclasses.asdict(s)}
                    for s in report.summaries], path)


def _positive_corpus(cfg: RunConfig, retain_train, forget):
    if cfg.data.include_forget_in_positive:
        return list(retain_train) + list(forget)
    return list(retain_train)


def _plot_loss_trajectory(report, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "epoch", "train_loss", "val_loss"])
        for rec in report.records:
            writer.writerow([rec.phase, rec.epoch, rec.train_loss,
                             "" if rec.val_loss is None else rec.val_loss])


def cmd_gen_data(cfg: RunConfig, resolved: dict, args) -> int:
    _workdir(cfg, resolved)
    out_dir = cfg.paths.out or os.path.join(cfg.paths.workdir, "data")
    os.makedirs(out_dir, exist_ok=True)
    retain_train, retain_val, forget = _corpora(cfg)
    for name, corpus in (("retain_train", retain_train),
                         ("retain_val", retain_val), ("forget", forget)):
        save_corpus(os.path.join(out_dir, f"{name}.jsonl"), corpus)
        print(f"wrote {len(corpus):4d} examples to {name}.jsonl")
    print(f"data in {out_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, resolved: dict, args) -> int:
    workdir = _workdir(cfg, resolved)
    retain_train, _, forget = _corpora(cfg)
    if cfg.paths.checkpoint:
        model, _ = load_checkpoint(cfg.paths.checkpoint)
    else:
        model = init_model(cfg.model)
        save_checkpoint(model, None, _ckpt(cfg, "init"))
    # train starts the metrics log; unlearn and stabilize append to it
    metrics = _fresh(os.path.join(workdir, cfg.paths.metrics_name))
    report = run_positive_phase(model, _positive_corpus(cfg, retain_train, forget),
                                cfg.positive, on_epoch=_epoch_streamer(metrics))
    save_checkpoint(model, None, _ckpt(cfg, "post_p1"))
    _log_summaries(report, metrics)
    for rec in report.records:
        print(f"positive epoch {rec.epoch}: train loss {rec.train_loss:.4f}")
    print(f"saved {_ckpt(cfg, 'post_p1')}")
    return EXIT_OK


def cmd_unlearn(cfg: RunConfig, resolved: dict, args) -> int:
    workdir = _workdir(cfg, resolved)
    model, _ = load_checkpoint(_input_checkpoint(cfg, "post_p1"))
    if "positive" not in model.phases_done:
        warnings.warn(
            "unlearning a model with no positive fine-tuning on record; the "
            "pipeline assumes the retain phase ran first",
            UserWarning, stacklevel=2)
    _, _, forget = _corpora(cfg)
    metrics = os.path.join(workdir, cfg.paths.metrics_name)
    report = run_negative_phase(model, forget, cfg.negative,
                                on_epoch=_epoch_streamer(metrics))
    save_checkpoint(model, None, _ckpt(cfg, "post_p2"))
    _log_summaries(report, metrics)
    extra = report.summaries[0].extra
    print(f"forget NLL {extra['forget_ce_before']:.4f} -> "
          f"{extra['forget_ce_after']:.4f}")
    print(f"saved {_ckpt(cfg, 'post_p2')}")
    return EXIT_OK


def cmd_stabilize(cfg: RunConfig, resolved: dict, args) -> int:
    workdir = _workdir(cfg, resolved)
    model, _ = load_checkpoint(_input_checkpoint(cfg, "post_p2"))
    retain_train, retain_val, _ = _corpora(cfg)
    metrics = os.path.join(workdir, cfg.paths.metrics_name)
    report = run_stabilization(model, retain_train, retain_val, cfg.stabilize,
                               on_epoch=_epoch_streamer(metrics))
    save_checkpoint(model, None, _ckpt(cfg, "final"))
    _log_summaries(report, metrics)
    summary = report.summaries[0]
    print(f"stabilized in {summary.epochs_run} epochs "
          f"(early stop: {summary.stopped_early}), "
          f"best val loss {summary.best_val_loss:.4f}")
    print(f"saved {_ckpt(cfg, 'final')}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, resolved: dict, args) -> int:
    _workdir(cfg, resolved)
    model, _ = load_checkpoint(_input_checkpoint(cfg, "final"))
    _, retain_val, forget = _corpora(cfg)
    report = evaluate_model(model, retain_val, forget, _suite(cfg),
                            max_in=cfg.data.max_in, max_out=cfg.data.max_out,
                            mask_prompt=cfg.data.mask_prompt,
                            max_new=cfg.eval.max_new)
    out = _fresh(_out_path(cfg, cfg.paths.eval_name))
    append_metrics(report.to_records(), out)
    for key, value in report.summary().items():
        print(f"{key}: {value:.6f}")
    print(f"report in {out}")
    return EXIT_OK


def cmd_probe(cfg: RunConfig, resolved: dict, args) -> int:
    _workdir(cfg, resolved)
    model, _ = load_checkpoint(_input_checkpoint(cfg, "final"))
    rate, accuracy, transcripts = probe_emission_rate(model, _suite(cfg),
                                                      max_new=cfg.eval.max_new)
    out = _fresh(_out_path(cfg, cfg.paths.transcripts_name))
    append_metrics(transcripts, out)
    print(f"sensitive emission rate: {rate:.4f}")
    print(f"benign accuracy: {accuracy:.4f}")
    print(f"transcripts in {out}")
    return EXIT_OK


def cmd_pipeline(cfg: RunConfig, resolved: dict, args) -> int:
    workdir = _workdir(cfg, resolved)
    retain_train, retain_val, forget = _corpora(cfg)
    model = init_model(cfg.model)
    metrics = _fresh(os.path.join(workdir, cfg.paths.metrics_name))
    report = run_pipeline(model, retain_train, retain_val, forget,
                          cfg.positive, cfg.negative, cfg.stabilize,
                          probe_suite=_suite(cfg),
                          include_forget_in_positive=
                          cfg.data.include_forget_in_positive,
                          on_epoch=_epoch_streamer(metrics))

    done: list[str] = []
    stage_done = {"init": []}
    for key, summary in zip(_SNAPSHOT_NAMES[1:], report.summaries):
        if summary.epochs_run > 0:
            done.append(summary.phase)
        stage_done[key] = list(done)
    scratch = init_model(cfg.model)
    for name in _SNAPSHOT_NAMES:
        restore_params(scratch, report.snapshots[name])
        scratch.phases_done = stage_done[name]
        save_checkpoint(scratch, None, _ckpt(cfg, name))

    _log_summaries(report, metrics)
    eval_path = _fresh(os.path.join(workdir, cfg.paths.eval_name))
    probe_path = _fresh(os.path.join(workdir, cfg.paths.transcripts_name))
    for tag in _SNAPSHOT_NAMES[1:]:
        snap_eval = report.evals[tag]
        records = snap_eval.to_records()
        append_metrics([{"snapshot": tag, **records[0]}], eval_path)
        append_metrics([{"snapshot": tag, **r} for r in records[1:]], probe_path)
        print(f"{tag}: {json.dumps(snap_eval.summary(), sort_keys=True)}")
    if cfg.paths.emit_plot_data:
        _plot_loss_trajectory(report,
                              os.path.join(workdir, "loss_trajectory.csv"))
    print(f"artifacts in {workdir}")
    return EXIT_OK


def cmd_compare_capacity(cfg: RunConfig, resolved: dict, args) -> int:
    workdir = _workdir(cfg, resolved)
    retain_train, retain_val, forget = _corpora(cfg)
    report = compare_capacity(cfg.model, cfg.model_small, retain_train,
                              retain_val, forget,
                              (cfg.positive, cfg.negative, cfg.stabilize),
                              _suite(cfg))
    print(report.table())
    out = _fresh(os.path.join(workdir, "capacity.jsonl"))
    append_metrics([dataclasses.asdict(row) for row in report.rows], out)
    if cfg.paths.emit_plot_data:
        plot = os.path.join(workdir, "ppl_comparison.csv")
        with open(plot, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "train_loss", "val_loss", "retain_ppl"])
            for row in report.rows:
                writer.writerow([row.name, row.train_loss, row.val_loss,
                                 row.retain_ppl])
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "stabilize": cmd_stabilize,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "pipeline": cmd_pipeline,
    "compare-capacity": cmd_compare_capacity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqforget",
        description="Sequential unlearning for a small decoder-only LM",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", choices=PRESETS, default="desk")
        p.add_argument("--seed", type=int, help="override model init seed")
        p.add_argument("--workdir", help="artifact directory")
        p.add_argument("--checkpoint", help="input checkpoint path")
        p.add_argument("--out", help="output path (command-specific)")
        p.add_argument("--emit-plot-data", action="store_true",
                       help="write plot-ready CSV data files")
    return parser


def _flag_overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["model"] = {"seed": args.seed}
    paths = {}
    if args.workdir is not None:
        paths["workdir"] = args.workdir
    if args.checkpoint is not None:
        paths["checkpoint"] = args.checkpoint
    if args.out is not None:
        paths["out"] = args.out
    if args.emit_plot_data:
        paths["emit_plot_data"] = True
    if paths:
        over["paths"] = paths
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, resolved = resolve_config(preset=args.preset,
                                       config_path=args.config,
                                       flag_overrides=_flag_overrides(args))
        return _COMMANDS[args.command](cfg, resolved, args)
    except (ConfigError, PolicyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (EvalError, EmptyLossError) as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except SeqforgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
