"""Command-line front end: preprocess, synth, train, evaluate, rollout,
heatmap, quantize.

Usage: recflow <subcommand> [--config cfg.json] [--dataset DIR] [--out DIR]
       [--checkpoint FILE] [--block.field value ...]

Dot-path flags override config fields (e.g. --model.flow_depth 4,
--eval.samples 30).  Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric divergence.  Set RECFLOW_LOG=debug|info|quiet for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evalsuite, geodata, synthgen
from .geodata import DataError, SchemaError
from .models import (
    ModelConfig,
    SequenceModel,
    TrainOptions,
    rollout as run_rollout,
    train as run_train,
)
from .rng import generator
from .runconfig import ConfigError, RunConfig, apply_override, config_to_dict, load_config

log = logging.getLogger("recflow")

SUBCOMMANDS = ("preprocess", "synth", "train", "evaluate", "rollout",
               "heatmap", "quantize")


class UsageError(ValueError):
    pass


def _setup_logging():
    level_name = os.environ.get("RECFLOW_LOG", "info").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level_name, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _collect_overrides(extra: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{key} needs a value")
            value = extra[i + 1]
            i += 1
        overrides.append((key, value))
        i += 1
    return overrides


def _derived_seed(config: RunConfig, label: str) -> int:
    return int(generator(config.seed, label).integers(2 ** 31))


def _model_config(config: RunConfig) -> ModelConfig:
    cfg = ModelConfig.from_dict(config.model.to_dict())
    cfg.seed = _derived_seed(config, "model-init")
    return cfg


def _require_dataset(path: str | None) -> geodata.Dataset:
    if not path:
        raise DataError("--dataset is required")
    return geodata.load_dataset(path)


def _require_model(path: str | None) -> SequenceModel:
    if not path:
        raise DataError("--checkpoint is required")
    if not Path(path).exists():
        raise DataError(f"no checkpoint at {path}")
    model, _ = SequenceModel.from_checkpoint(path)
    return model


def _eval_options(config: RunConfig) -> evalsuite.EvalOptions:
    e = config.eval
    return evalsuite.EvalOptions(samples=e.samples, repetitions=e.repetitions,
                                 horizons=tuple(e.horizons),
                                 quant_grid=e.quant_grid,
                                 points_per_step=e.points_per_step,
                                 seed=_derived_seed(config, "evaluate"))


def cmd_preprocess(config: RunConfig, args) -> int:
    d = config.data
    if not d.input_path:
        raise DataError("data.input_path is required for preprocess")
    if len(d.bbox) != 4:
        raise DataError("data.bbox [lon_min, lon_max, lat_min, lat_max] is required")
    box = geodata.BoundingBox(*d.bbox)
    schema = geodata.ColumnSchema(
        time=d.time_column, longitude=d.longitude_column,
        latitude=d.latitude_column,
        duration=d.duration_column or None, user=d.user_column or None)
    records, parse_report = geodata.parse_trips(d.input_path, schema,
                                                delimiter=d.delimiter)
    log.info("parsed %d records (%d malformed)", parse_report.parsed,
             parse_report.malformed)
    kept, filter_report = geodata.filter_records(
        records, box,
        min_duration=d.min_duration if d.duration_column else None,
        max_duration=d.max_duration if d.duration_column else None,
        dedup_window=d.dedup_window or None)
    log.info("filtered to %d records (%d removed)", filter_report.kept,
             filter_report.removed)
    sequence = geodata.bin_and_normalize(kept, box, d.bin_width_seconds, d.k)
    split = geodata.SplitConfig(d.train_fraction, d.val_fraction, d.test_fraction)
    counts = {"parsed": parse_report.parsed, "malformed": parse_report.malformed,
              "outside_box": filter_report.outside_box,
              "duration_filtered": filter_report.duration,
              "deduplicated": filter_report.deduplicated,
              "kept": filter_report.kept}
    geodata.save_dataset(args.out, sequence, split, box, d.bin_width_seconds,
                         counts=counts)
    log.info("dataset written to %s (%d bins)", args.out, len(sequence))
    return 0


def cmd_synth(config: RunConfig, args) -> int:
    s = config.synth
    process = synthgen.make_process(s.process, points_mean=s.points_mean)
    result = synthgen.generate(process, s.bins,
                               seed=_derived_seed(config, "synth"))
    split = geodata.SplitConfig(s.train_fraction, s.val_fraction, s.test_fraction)
    synthgen.write_dataset(result, args.out, k=s.k, split=split)
    log.info("synthetic dataset (%s) written to %s (%d bins)",
             s.process, args.out, s.bins)
    return 0


def cmd_train(config: RunConfig, args) -> int:
    dataset = _require_dataset(args.dataset)
    out = args.out or "run"
    t = config.train
    options = TrainOptions(lr=t.lr, max_epochs=t.max_epochs,
                           kl_anneal_epochs=t.kl_anneal_epochs,
                           plateau_patience=t.plateau_patience,
                           plateau_factor=t.plateau_factor,
                           early_stop_patience=t.early_stop_patience,
                           window=t.window, grad_clip=t.grad_clip,
                           seed=_derived_seed(config, "train"), out_dir=out)
    result = run_train(dataset, _model_config(config), options)
    Path(out, "config.json").write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True))
    if result.diverged:
        log.error("training diverged; last finite checkpoint kept at %s",
                  result.checkpoint_path)
        return 3
    log.info("trained %s for %d epochs; best val %.4f (epoch %d); checkpoint %s",
             result.model.model_id, result.epochs_run, result.best_val,
             result.best_epoch, result.checkpoint_path)
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    dataset = _require_dataset(args.dataset)
    model = _require_model(args.checkpoint)
    report = evalsuite.evaluate_suite(model, dataset, _eval_options(config))
    out = Path(args.out or "run") / "metrics.jsonl"
    report.write(out)
    for record in report.records:
        log.info("%s %s = %.4f (+/- %.4f)", record.split, record.metric,
                 record.value, record.stddev)
    log.info("metrics written to %s", out)
    return 0


def cmd_rollout(config: RunConfig, args) -> int:
    dataset = _require_dataset(args.dataset)
    model = _require_model(args.checkpoint)
    e = config.eval
    trace = run_rollout(model, dataset, horizon=e.rollout_horizon,
                        points_per_step=e.points_per_step,
                        seed=_derived_seed(config, "rollout"),
                        start_bin=None if e.at_bin < 0 else e.at_bin)
    out = args.out or "run"
    trace.save(out)
    log.info("rollout of %d steps from bin %d written to %s",
             trace.horizon, trace.start_bin, out)
    return 0


def cmd_heatmap(config: RunConfig, args) -> int:
    dataset = _require_dataset(args.dataset)
    model = _require_model(args.checkpoint)
    e = config.eval
    grid = evalsuite.grid_heatmap(model, dataset, m=e.grid, samples=e.samples,
                                  seed=_derived_seed(config, "heatmap"),
                                  at_bin=None if e.at_bin < 0 else e.at_bin)
    paths = evalsuite.save_grid(grid, Path(args.out or "run") / "heatmap")
    log.info("heatmap (%dx%d) written: %s", e.grid, e.grid, paths["txt"])
    return 0


def cmd_quantize(config: RunConfig, args) -> int:
    dataset = _require_dataset(args.dataset)
    model = _require_model(args.checkpoint)
    e = config.eval
    grid = evalsuite.quantize(model, dataset, grid_side=e.quant_grid,
                              samples=e.samples,
                              seed=_derived_seed(config, "quantize"),
                              at_bin=None if e.at_bin < 0 else e.at_bin)
    out = Path(args.out or "run")
    paths = evalsuite.save_grid(grid, out / "quantized")
    t = grid.conditioning["predict_bin"]
    counts = evalsuite.counts_grid(dataset.points[t], e.quant_grid)
    score = evalsuite.categorical_log_likelihood(grid, counts)
    (out / "quantize_score.json").write_text(json.dumps({
        "bin": t, "log_likelihood": score.value, "degenerate": score.degenerate,
        "points": int(counts.sum()), "grid": e.quant_grid}, sort_keys=True))
    log.info("quantized grid written: %s; categorical score %.4f",
             paths["txt"], score.value)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rollout": cmd_rollout,
    "heatmap": cmd_heatmap,
    "quantize": cmd_quantize,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="recflow", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--dataset", default=None, help="dataset directory")
    parser.add_argument("--checkpoint", default=None, help="model checkpoint")
    parser.add_argument("--out", default=None, help="output directory")
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        overrides = _collect_overrides(extra)
        config = load_config(args.config, overrides)
        return COMMANDS[args.subcommand](config, args)
    except (UsageError, ConfigError) as e:
        log.error("%s", e)
        return 1
    except (DataError, SchemaError, FileNotFoundError) as e:
        log.error("%s", e)
        return 2
    except FloatingPointError as e:
        log.error("numeric failure: %s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
