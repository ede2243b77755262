"""Command line front end.

Subcommands: `synth` writes a synthetic fleet to disk, `run` executes an
experiment from a config file plus flag overrides, `eval` scores a saved
checkpoint against a fleet, and `dump-features` exports selected hidden
neuron activations for inspection.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from . import client as cl
from . import data, nn, orchestrator as orch


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = orch.ExperimentConfig()
    for f in dataclasses.fields(orch.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        shown = getattr(defaults, f.name)
        if isinstance(shown, tuple):
            shown = ",".join(str(v) for v in shown)
        parser.add_argument(flag, dest=f.name, default=None, metavar="V",
                            help=f"override {f.name} (default: {shown})")


def build_config(args) -> orch.ExperimentConfig:
    """Config file first, then explicit flags on top."""
    cfg = orch.load_config(args.config) if args.config else orch.ExperimentConfig()
    for f in dataclasses.fields(orch.ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            setattr(cfg, f.name, orch._coerce(f.name, f.type, raw))
    orch.validate_config(cfg)
    return cfg


def cmd_synth(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.task == "cyclic":
        fleets = data.gen_synthetic_cyclic(cfg.n_clients, cfg.cycles_per_client,
                                           cfg.seed, cfg.heterogeneity)
        for j, records in enumerate(fleets):
            data.write_cyclic_csv(out / f"cyclic_client_{j}.csv", records, j)
        print(f"wrote {len(fleets)} cyclic clients "
              f"({cfg.cycles_per_client} cycles each) to {out}")
    else:
        span = (cfg.lifespan_min, cfg.lifespan_max)
        train = data.gen_synthetic_noncyclic(cfg.n_engines, span, cfg.seed,
                                             cfg.knee_fraction, cfg.rul_cap)
        held = data.gen_synthetic_noncyclic(cfg.n_test_engines, span,
                                            cfg.seed + 1, cfg.knee_fraction,
                                            cfg.rul_cap)
        test, ruls = data.truncate_for_test(held, cfg.seed, cfg.rul_cap)
        data.write_engine_csv(out / "engine_train.csv", train)
        data.write_engine_csv(out / "engine_test.csv", test)
        data.write_rul_file(out / "engine_test_rul.txt", ruls)
        print(f"wrote {len(train)} training and {len(test)} test engines to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = build_config(args)
    records = orch.run_experiment(cfg, args.out)
    for rec in records:
        print(f"round {rec.round} {rec.algo} rmse {rec.fed_rmse:.6f} "
              f"hidden {rec.hidden_size}")
    scored = [r for r in records if r.algo == cfg.algo] or records
    best = min(scored, key=lambda r: r.fed_rmse)
    print(f"best round {best.round} rmse {best.fed_rmse:.6f}; "
          f"outputs in {args.out}")
    return 0


def _baseline_from_metrics(path) -> dict:
    """client_id -> RMSE from the isolated-training rows of a metrics file."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != orch.METRICS_HEADER:
        raise ValueError(f"{path} is not a metrics file")
    out = {}
    for line in lines[1:]:
        parts = line.split(",")
        if parts[1] == "local":
            out[int(parts[2])] = float(parts[3])
    if not out:
        raise ValueError(f"{path} has no isolated-training rows")
    return out


def cmd_eval(args) -> int:
    cfg = build_config(args)
    model, info = orch.load_checkpoint(args.checkpoint)
    if info["task"] != cfg.task:
        raise ValueError(f"checkpoint was trained on task {info['task']!r}, "
                         f"config says {cfg.task!r}")
    fleet = orch.build_client_data(cfg)
    baseline = _baseline_from_metrics(args.baseline) if args.baseline else None
    rmses = []
    for j, cd in enumerate(fleet):
        rmse = cl.evaluate_rmse(model, cd.test)
        rmses.append(rmse)
        line = f"client {j} rmse {rmse:.6f}"
        if baseline and j in baseline:
            line += f" imp {(baseline[j] - rmse) / baseline[j]:.4f}"
        print(line)
    print(f"mean rmse {sum(rmses) / len(rmses):.6f}")
    return 0


def cmd_dump_features(args) -> int:
    cfg = build_config(args)
    model, _ = orch.load_checkpoint(args.checkpoint)
    fleet = orch.build_client_data(cfg)
    if not 0 <= args.client < len(fleet):
        raise ValueError(f"client {args.client} out of range, fleet has {len(fleet)}")
    neurons = [int(part) for part in args.neurons.split(",")]
    windows = fleet[args.client].test.features
    acts = cl.dump_feature_extractors(model, windows, neurons)
    cl.write_feature_dump(args.out, acts, neurons)
    print(f"wrote {acts.shape[0]} windows x {acts.shape[1]} neurons to {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedprog",
        description="Federated LSTM training for equipment health prognostics")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic fleet to disk")
    synth.add_argument("--config", default=None, help="config file")
    synth.add_argument("--out", required=True, help="output directory")
    _add_config_flags(synth)
    synth.set_defaults(func=cmd_synth)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", default=None, help="config file")
    run.add_argument("--out", required=True, help="output directory")
    _add_config_flags(run)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score a checkpoint against a fleet")
    ev.add_argument("checkpoint", help="checkpoint.json from a run")
    ev.add_argument("--config", default=None, help="config file")
    ev.add_argument("--baseline", default=None,
                    help="metrics.csv whose isolated-training rows give "
                         "the improvement reference")
    _add_config_flags(ev)
    ev.set_defaults(func=cmd_eval)

    dump = sub.add_parser("dump-features",
                          help="export hidden neuron activations")
    dump.add_argument("checkpoint", help="checkpoint.json from a run")
    dump.add_argument("--config", default=None, help="config file")
    dump.add_argument("--out", required=True, help="output csv file")
    dump.add_argument("--client", type=int, default=0,
                      help="fleet member whose test windows to use")
    dump.add_argument("--neurons", required=True,
                      help="comma separated hidden unit indices")
    _add_config_flags(dump)
    dump.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (orch.ConfigError, data.CsvFormatError, data.SequenceTooShortError,
            nn.DataQualityError, nn.TrainingDivergedError, FileNotFoundError,
            IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
