"""Command-line driver.

    edgeunlearn train      --config exp.json
    edgeunlearn importance --config exp.json
    edgeunlearn unlearn    --config exp.json --mode cau
    edgeunlearn simulate   --config exp.json --mode cau
    edgeunlearn report     --config exp.json --mode cau
    edgeunlearn sweep      --config exp.json --seeds 10 --jobs 4

Artifacts live in the configured output directory. On failure a JSON error
record goes to stderr and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import experiment as ex
from .config import ExperimentConfig
from .fisher import load_importance, save_importance
from .kernels import BACKEND_NAME
from .nn_model import load_model, save_model
from .orchestrator import MODES

log = logging.getLogger("edgeunlearn")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(cfg: ExperimentConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    ds = ex.build_dataset(cfg)
    model, summary = ex.train(cfg, ds)
    out = _out(cfg)
    save_model(model, out / ex.MODEL_FILE)
    ex.write_json(out / ex.TRAIN_FILE, summary)
    print(f"train accuracy {summary['train_acc']:.4f}  test accuracy {summary['test_acc']:.4f}  L={model.L}")
    return summary


def cmd_importance(cfg: ExperimentConfig, args) -> dict:
    out = _out(cfg)
    model = load_model(ex.need(out / ex.MODEL_FILE))
    ds = ex.build_dataset(cfg)
    gi = ex.global_importance(cfg, model, ds)
    save_importance(gi, out / ex.IMPORTANCE_FILE)
    print(f"global importance over {gi.sample_count} samples -> {out / ex.IMPORTANCE_FILE}")
    return {"sample_count": gi.sample_count}


def cmd_unlearn(cfg: ExperimentConfig, args) -> dict:
    out = _out(cfg)
    model = load_model(ex.need(out / ex.MODEL_FILE))
    gi = load_importance(ex.need(out / ex.IMPORTANCE_FILE), model)
    ds = ex.build_dataset(cfg)
    outcome, doc = ex.unlearn(cfg, model, ds, gi, args.mode)
    save_model(outcome.model, out / f"model_{args.mode}.fcbm")
    ex.write_json(out / f"outcome_{args.mode}.json", doc)
    (out / f"dampening_{args.mode}.jsonl").write_text(outcome.report.to_text())
    ev = doc["eval"]
    print(f"{args.mode}: stop_layer={outcome.stop_layer}/{model.L} retain {ev['retain_acc']:.4f} "
          f"forget {ev['forget_acc']:.4f} MACs {outcome.ledger.ratio_vs_ssd:.2f}% of SSD")
    ssd_path = out / "outcome_ssd_full.json"
    if args.mode != "ssd_full" and ssd_path.exists():
        rep, table = ex.report(ex.read_json(ssd_path), doc)
        ex.write_json(out / f"comparison_{args.mode}.json", rep)
        (out / f"comparison_{args.mode}.txt").write_text(table)
        print(table, end="")
    return doc


def cmd_simulate(cfg: ExperimentConfig, args) -> dict:
    out = _out(cfg)
    path = Path(args.outcome) if args.outcome else out / f"outcome_{args.mode}.json"
    doc = ex.read_json(path)
    if "ledger" not in doc:
        raise ValueError(f"{path} has no MAC ledger")
    sim = ex.simulate(cfg, doc)
    ex.write_json(out / f"sim_{doc.get('mode', args.mode)}.json", sim)
    ratio = sim["energy_ratio_vs_baseline"]
    print(f"cycles: ours {sim['engine']['total_cycles']} baseline {sim['baseline']['total_cycles']}; "
          f"energy ratio {'n/a' if ratio is None else f'{ratio:.3f}%'}")
    print(sim["calibration"])
    return sim


def cmd_report(cfg: ExperimentConfig, args) -> dict:
    out = _out(cfg)
    ssd = ex.read_json(out / "outcome_ssd_full.json")
    ours = ex.read_json(out / f"outcome_{args.mode}.json")
    sim_path = out / f"sim_{args.mode}.json"
    sim = ex.read_json(sim_path) if sim_path.exists() else ex.simulate(cfg, ours)
    rep, table = ex.report(ssd, ours, sim)
    ex.write_json(out / f"report_{args.mode}.json", rep)
    (out / f"report_{args.mode}.txt").write_text(table)
    print(table, end="")
    return rep


def _sweep_one(cfg: ExperimentConfig, seed: int) -> dict:
    scfg = cfg.with_seed(seed)
    scfg.output_dir = cfg.output_dir / f"seed_{seed:03d}"
    trial = ex.run_trial(scfg)
    scfg.output_dir.mkdir(parents=True, exist_ok=True)
    ex.write_json(scfg.output_dir / "trial.json", trial)
    return ex.trial_summary(trial, float(cfg.unlearn["tau"]))


def cmd_sweep(cfg: ExperimentConfig, args) -> dict:
    out = _out(cfg)
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, [cfg] * len(seeds), seeds))
    else:
        rows = [_sweep_one(cfg, s) for s in seeds]
    doc = {
        "seeds": seeds,
        "rows": rows,
        "trend_ok": sum(r["trend_ok"] for r in rows),
        "balanced_ok": sum(r.get("balanced_ok", False) for r in rows),
    }
    ex.write_json(out / "sweep.json", doc)
    for r in rows:
        print(f"seed {r['seed']:3d} stop {r['stop_layer']} forget@stop {r['forget_acc_at_stop']:.3f} "
              f"drop {r['retain_drop_pp']:+.2f}pp MACs {r['mac_ratio']:.1f}% balanced drop "
              f"{r['balanced_retain_drop_pp']:+.2f}pp")
    print(f"trend ok in {doc['trend_ok']}/{len(rows)} seeds, balanced <= uniform drop in {doc['balanced_ok']}/{len(rows)}")
    return doc


COMMANDS = {
    "train": cmd_train,
    "importance": cmd_importance,
    "unlearn": cmd_unlearn,
    "simulate": cmd_simulate,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgeunlearn", description="Layer-wise Fisher unlearning experiments")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment JSON file")
        if name in ("unlearn", "simulate", "report"):
            s.add_argument("--mode", choices=MODES, default="cau")
        if name == "simulate":
            s.add_argument("--outcome", help="outcome JSON (default: outcome_<mode>.json in the output dir)")
        if name == "sweep":
            s.add_argument("--seeds", type=int, default=10)
            s.add_argument("--first-seed", type=int, default=0)
            s.add_argument("--jobs", type=int, default=1)
    return p


def _fail(command, exc: BaseException, code: int) -> int:
    rec = {"ok": False, "command": command, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(None, exc, EXIT_USAGE)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", BACKEND_NAME)
    try:
        cfg = ExperimentConfig.load(args.config)
        COMMANDS[args.command](cfg, args)
    except Exception as exc:  # reported as a machine-readable record
        log.debug("command failed", exc_info=True)
        return _fail(args.command, exc, EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
