"""Command-line entry point: ``groundedge <command> --config FILE ...``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
faults raised while running.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import compress as cmp
from .config import ConfigError, RunConfig, load_config
from .evaluation import run_experiment
from .nn import TrainingFault, load_model, save_model
from .pipeline import (ROLE_TEST, build_dataset, flight_seed, pipeline_detect, process_record,
                       simulate_flight, train_model, training_flights)
from .simulator import SimulationFault
from .spectral import SpectralError
from .telemetry import TelemetryError, emit_log, parse_log, write_series_csv

RUNTIME_FAULTS = (SimulationFault, TrainingFault, TelemetryError, SpectralError, OSError,
                  ValueError)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _read_log(path: str):
    with open(path, "rb") as fh:
        return parse_log(fh.read())


def _write_json(path: str | None, data) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = flight_seed(cfg.seed, ROLE_TEST, 0, args.index)
    record = simulate_flight(cfg, seed, height=args.height, angle_deg=args.angle)
    with open(args.out, "wb") as fh:
        fh.write(emit_log(record))
    return 0


def cmd_features(args) -> int:
    cfg = _config(args)
    flight = process_record(_read_log(args.log), cfg)
    f, d = flight.features, flight.disturbance
    idx = np.clip(np.searchsorted(d.t, f.frame_times - 1e-9), 0, len(d.t) - 1)
    write_series_csv(args.out, ("t", "a_s", "omega_s", "m_s", "f_mag", "cfar_threshold", "alert"),
                     [f.frame_times, f.c[:, 0], f.c[:, 1], f.c[:, 2], d.magnitude[idx],
                      d.threshold[idx], d.alert[idx].astype(int)])
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset = build_dataset(training_flights(cfg), cfg)
    model, history = train_model(dataset, cfg)
    model.meta.update(seed=cfg.seed, n_windows=len(dataset), final_loss=history["loss"][-1],
                      final_accuracy=history["accuracy"][-1])
    save_model(model, args.out)
    if args.history:
        n = len(history["loss"])
        write_series_csv(args.history, ("epoch", "loss", "accuracy"),
                         [np.arange(1, n + 1), history["loss"], history["accuracy"]])
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    flight = process_record(_read_log(args.log), cfg)
    found = pipeline_detect(model, flight, cfg)
    _write_json(args.out, {"detections": found,
                           "ground_truth": [ev.t for ev in flight.record.ground_truth]})
    return 0


def cmd_compress(args) -> int:
    cfg = _config(args)
    compact = cmp.compress(load_model(args.model), cfg.compress.sparsity, cfg.compress.bits)
    cmp.save_compact(compact, args.out)
    _write_json(args.report, cmp.size_report(compact))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg, out_dir=args.out)
    main = result.summary["main"]
    print(f"pipeline MAE {main['pipeline']['penalized_mae_m']:.4f} m, "
          f"baseline MAE {main['baseline']['penalized_mae_m']:.4f} m, "
          f"improvement {main['improvement_pct']:.1f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundedge",
                                     description="Ground-effect edge detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "simulate one flight and write its telemetry CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=0, help="flight index within the seed")
    p.add_argument("--height", type=float, help="height above the platform (m)")
    p.add_argument("--angle", type=float, help="approach angle (deg)")

    p = add("features", cmd_features, "fused features and disturbance screen of a log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "simulate training flights and train the classifier")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="CSV of per-epoch loss and accuracy")

    p = add("detect", cmd_detect, "detect edges in a telemetry log")
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", help="JSON output (stdout if omitted)")

    p = add("compress", cmd_compress, "prune and quantize a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="size report JSON (stdout if omitted)")

    p = add("eval", cmd_eval, "full comparison against the baseline with sweeps")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"groundedge: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_FAULTS as exc:
        print(f"groundedge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
