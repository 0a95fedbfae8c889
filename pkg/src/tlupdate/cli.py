"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ann import DivergenceError
from .data import DataError, DriftInjection, generate_synthetic, save_csv
from .explain import attribute_rows, attributions_csv, importance_profile
from .monitor import assemble_update_buffer, replay
from .pipeline import (
    ConfigError,
    PipelineConfig,
    acquire,
    policy_for,
    prepare,
    run_pipeline,
    train_reference,
)
from .serialize import load_model, save_model
from .tuning import TuningError, trials_to_csv
from .update import STRATEGIES, Ensemble, run_strategy

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4

log = logging.getLogger("tlupdate")


def _config(args) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = PipelineConfig(data={"synthetic": {"days": 30, "interval": 600, "seed": 0}})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _out(cfg: PipelineConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_network(path: str):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such model file") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: not a model document ({exc})") from None


def cmd_generate(args) -> None:
    if args.config:
        spec = dict(PipelineConfig.load(args.config).data.get("synthetic", {}))
    else:
        spec = {}
    drift = spec.get("drift")
    drift = None if drift is None else DriftInjection.from_dict(drift)
    if args.drift_day is not None:
        drift = DriftInjection(
            start_day=args.drift_day,
            mean_shift={"Secondary Air Outlet Temperature": args.shift},
            rotation=args.rotation,
            sampling_interval=args.new_interval,
        )
    data = generate_synthetic(
        days=args.days or int(spec.get("days", 30)),
        interval=args.interval or float(spec.get("interval", 600.0)),
        drift=drift,
        seed=args.seed if args.seed is not None else int(spec.get("seed", 0)),
    )
    out = Path(args.out or "synthetic.csv")
    if out.suffix != ".csv":
        out = out / "synthetic.csv"
    save_csv(data, out)
    print(f"wrote {len(data)} rows to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    prep = prepare(cfg, acquire(cfg.data))
    tr = train_reference(cfg, prep)
    out = _out(cfg)
    save_model(tr.model, out / "models" / "reference.json")
    (out / "trials.csv").write_text(trials_to_csv(tr.search.trials))
    (out / "training.json").write_text(json.dumps({
        "selected_trial": tr.search.best.label,
        "architecture": tr.model.architecture.to_dict(),
        "learning_rate": tr.model.learning_rate,
        "test": tr.test.to_dict(),
        "tuning_seconds": round(tr.search.tuning_seconds, 3),
        "training_seconds": round(tr.search.training_seconds, 3),
    }, indent=1) + "\n")
    print(f"{tr.search.best.label}: test r2 {tr.test.r2:.4f} rmse {tr.test.rmse:.4f} mae {tr.test.mae:.4f}")
    print(f"tuning {tr.search.tuning_seconds:.1f}s, training {tr.search.training_seconds:.1f}s -> {out}")


def _deployment(cfg: PipelineConfig, model):
    prep = prepare(cfg, acquire(cfg.data))
    net = model.members[0] if isinstance(model, Ensemble) else model
    test = net.metadata.get("test_metrics")
    if not test:
        raise ConfigError("model file carries no test-metric baselines; train it with this tool")
    policy = policy_for(cfg, test["rmse"], test["mae"])
    stream = prep.norm.slice(prep.train_end, len(prep.norm))
    return prep, policy, stream


def cmd_replay(args) -> None:
    cfg = _config(args)
    model = _load_network(args.model)
    prep, policy, stream = _deployment(cfg, model)
    rr = replay(model, stream, policy, halt=not args.no_halt)
    out = _out(cfg)
    (out / "daily_errors.csv").write_text(rr.state.to_csv())
    event = {"fired_on": None if rr.state.fired_on is None else str(rr.state.fired_on),
             "baselines": policy.to_dict()}
    if rr.fired:
        event["buffer"] = assemble_update_buffer(prep.norm, prep.batches, rr.state.fired_on).to_dict()
    (out / "trigger.json").write_text(json.dumps(event, indent=1) + "\n")
    print(f"replayed {len(rr.state.records)} days; fired on {event['fired_on']}")


def cmd_update(args) -> None:
    cfg = _config(args)
    model = _load_network(args.model)
    prep, policy, stream = _deployment(cfg, model)
    rr = replay(model, stream, policy)
    if not rr.fired:
        print("trigger did not fire; nothing to update")
        return
    buffer = assemble_update_buffer(prep.norm, prep.batches, rr.state.fired_on)
    out = _out(cfg)
    for s in args.strategy or cfg.strategies:
        src = model if s == "ETL" or not isinstance(model, Ensemble) else model.latest
        outcome = run_strategy(s, src, buffer, cfg.seed, base=cfg.update)
        save_model(outcome.model, out / "models" / f"{s}.json")
        (out / f"update_{s}.json").write_text(json.dumps(outcome.to_dict(), indent=1) + "\n")
        print(f"{s}: selected {outcome.search.best.label}, validation rmse {outcome.metrics.rmse:.4f}")


def cmd_run(args) -> None:
    cfg = _config(args)
    if args.multi_cycle:
        cfg = replace(cfg, multi_cycle=True)
    report = run_pipeline(cfg)
    print(_summary(report.to_dict()))


def cmd_explain(args) -> None:
    cfg = _config(args)
    model = _load_network(args.model)
    prep = prepare(cfg, acquire(cfg.data))
    window = prep.norm.inputs[prep.train_end :]
    background = prep.norm.inputs[prep.train_idx]
    names = prep.raw.schema.input_names
    prof = importance_profile(model, window, background, args.tag, names, cfg.background_size, cfg.eval_size,
                              cfg.seed)
    out = _out(cfg)
    (out / f"importance_{args.tag}.json").write_text(json.dumps(prof.to_dict(), indent=1) + "\n")
    rng = np.random.default_rng(cfg.seed)
    rows = window[np.sort(rng.choice(len(window), size=min(args.rows, len(window)), replace=False))]
    bg = background[np.sort(rng.choice(len(background), size=min(cfg.background_size, len(background)),
                                       replace=False))]
    values, base = attribute_rows(model, rows, bg)
    (out / f"attributions_{args.tag}.csv").write_text(attributions_csv(names, values, base))
    for rank, k in enumerate(prof.ranking, start=1):
        print(f"{rank:2d}. {names[k]:<36s} {prof.importance[k]:.5f}")


def _summary(d: dict) -> str:
    lines = []
    tr = d["training"]
    lines.append(f"reference {tr['selected_trial']}: test r2 {tr['test']['r2']:.4f} rmse {tr['test']['rmse']:.4f}")
    trig = d["trigger"]
    lines.append(f"trigger fired on {trig['fired_on']}" if trig["fired_on"] else "trigger did not fire; update skipped")
    ev = d.get("evaluation") or {}
    if ev.get("stale"):
        lines.append(f"evaluation on {ev['rows']} rows after the buffer")
        lines.append(f"  {'model':<10s} {'rmse':>8s} {'mae':>8s} {'r2':>8s}")
        rows = [("stale", ev["stale"])] + list(ev["updated"].items())
        for name, m in rows:
            if m:
                lines.append(f"  {name:<10s} {m['rmse']:8.4f} {m['mae']:8.4f} {m['r2']:8.4f}")
    return "\n".join(lines)


def cmd_report(args) -> None:
    cfg_out = Path(args.out or (PipelineConfig.load(args.config).output_dir if args.config else "run"))
    path = cfg_out / "report.json" if cfg_out.is_dir() else cfg_out
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no report found") from None
    print(_summary(d))
    timing = path.parent / "timing.csv"
    if timing.exists():
        import csv

        print("timing (s)")
        for row in csv.DictReader(timing.open()):
            if row["item"] in ("tuning", "training", "total"):
                print(f"  {row['stage']:<14s} {row['item']:<9s} {float(row['seconds']):9.3f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (file for generate)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="tlupdate", parents=[common],
                                     description="Drift-triggered transfer-learning model updates.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic plant stream to CSV")
    p.add_argument("--days", type=int)
    p.add_argument("--interval", type=float, help="sampling interval in seconds")
    p.add_argument("--drift-day", type=float, help="inject drift from this day on")
    p.add_argument("--shift", type=float, default=1.5, help="secondary air outlet shift (nominal sd units)")
    p.add_argument("--rotation", type=float, default=0.0)
    p.add_argument("--new-interval", type=float, help="sampling interval after the drift point")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="full search on the first batches")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("replay", parents=[common], help="replay a model over the deployment stream")
    p.add_argument("--model", required=True)
    p.add_argument("--no-halt", action="store_true", help="keep predicting after the trigger fires")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("update", parents=[common], help="replay until failure, then update")
    p.add_argument("--model", required=True)
    p.add_argument("--strategy", action="append", choices=STRATEGIES)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("run", parents=[common], help="full pipeline")
    p.add_argument("--multi-cycle", action="store_true", help="re-arm the trigger after each update")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("explain", parents=[common], help="Shapley importance for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--tag", default="model")
    p.add_argument("--rows", type=int, default=50, help="rows written to the attribution CSV")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", parents=[common], help="summarize a finished run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, TuningError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
