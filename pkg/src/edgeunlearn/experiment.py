"""End-to-end steps behind the CLI: build data and model, train, global
importance, unlearning runs, simulation and the comparison report. Each
step reads and writes files in the output directory so the commands can run
separately; ``run_trial`` chains them in memory for sweeps."""
from __future__ import annotations

import json
import logging
from pathlib import Path


from . import data, metrics, nn_model, orchestrator, pipeline_sim
from .config import ExperimentConfig
from .dampening import ProfileParams
from .fisher import ImportanceMap, estimate_importance
from .orchestrator import UnlearnConfig, UnlearnOutcome

log = logging.getLogger(__name__)

MODEL_FILE = "model.fcbm"
IMPORTANCE_FILE = "global.fcbi"
TRAIN_FILE = "train.json"


class MissingArtifactError(FileNotFoundError):
    pass


def dump_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, doc) -> None:
    path.write_text(dump_json(doc))


def read_json(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}")
    return json.loads(path.read_text())


def need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run the earlier command first")
    return path


# -- builders ------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> data.Dataset:
    d = cfg.dataset
    if d["kind"] == "blobs":
        return data.make_blobs(d["classes"], d["dims"], d["per_class"], d["distance"], d["noise"],
                               d["seed"], d["test_fraction"], d["layout"])
    if d["kind"] == "image_blobs":
        return data.make_image_blobs(d["classes"], tuple(d.get("shape", (1, 8, 8))), d["per_class"],
                                     d.get("separation", 1.0), d["noise"], d["seed"], d["test_fraction"])
    try:
        return data.load_npz(d["path"], d["seed"], d["test_fraction"])
    except (OSError, KeyError, ValueError) as exc:
        raise MissingArtifactError(f"cannot read dataset {d['path']}: {exc}") from exc


def build_model(cfg: ExperimentConfig, ds: data.Dataset) -> nn_model.Model:
    m = cfg.model
    classes = ds.num_classes
    if m["kind"] == "mlp":
        if ds.x_train.ndim != 2:
            raise ValueError("mlp needs flat inputs")
        return nn_model.mlp(ds.x_train.shape[1], classes, tuple(m.get("hidden", (128, 64))), m["seed"])
    if ds.x_train.ndim != 4:
        raise ValueError("tinycnn needs (C, H, W) inputs")
    return nn_model.tiny_cnn(ds.x_train.shape[1:], classes, tuple(m.get("channels", (4, 8))),
                             int(m.get("hidden", 32)), m["seed"])


def checkpoints_for(cfg: ExperimentConfig, L: int) -> tuple[int, ...]:
    cps = cfg.unlearn["checkpoints"]
    if cps == "all":
        return tuple(range(1, L + 1))
    if cps == "default":
        return orchestrator.default_checkpoints(L)
    return tuple(int(c) for c in cps)


def fisher_group(cfg: ExperimentConfig) -> int:
    g = cfg.unlearn["fisher_group"]
    return int(cfg.unlearn["N"]) if g is None else int(g)


def pipeline_config(cfg: ExperimentConfig) -> pipeline_sim.PipelineConfig:
    if cfg.pipeline is None:
        return pipeline_sim.PipelineConfig()
    return pipeline_sim.PipelineConfig.from_dict(json.loads(need(cfg.pipeline).read_text()))


# -- steps -----------------------------------------------------------------------

def train(cfg: ExperimentConfig, ds: data.Dataset) -> tuple[nn_model.Model, dict]:
    model = build_model(cfg, ds)
    t = cfg.train
    history = data.train_sgd(model, ds.x_train, ds.y_train, int(t["epochs"]), float(t["lr"]),
                             int(t["batch_size"]), int(t["seed"]))
    summary = {
        "train_acc": nn_model.evaluate_accuracy(model, ds.x_train, ds.y_train),
        "test_acc": nn_model.evaluate_accuracy(model, ds.x_test, ds.y_test),
        "loss_history": history,
        "L": model.L,
    }
    return model, summary


def global_importance(cfg: ExperimentConfig, model: nn_model.Model, ds: data.Dataset) -> ImportanceMap:
    return estimate_importance(model, ds.x_train, ds.y_train, source="global", group=fisher_group(cfg))


def unlearn_config(cfg: ExperimentConfig, model: nn_model.Model, mode: str, split: data.UnlearnSplit,
                   gi: ImportanceMap) -> UnlearnConfig:
    u = cfg.unlearn
    cps = () if mode == "ssd_full" else checkpoints_for(cfg, model.L)
    profile = None
    if mode == "cau_balanced":
        c_m = u["c_m"]
        if c_m is None:
            c_m = orchestrator.balanced_profile(model, split.forget_x, split.forget_y, gi, float(u["alpha"]),
                                                float(u["b_r"]), None, fisher_group(cfg)).c_m
        profile = ProfileParams(float(u["b_r"]), float(c_m), model.L)
    return UnlearnConfig(alpha=float(u["alpha"]), lam=float(u["lambda"]), checkpoints=cps,
                         tau=0.0 if mode == "ssd_full" else float(u["tau"]), N=int(u["N"]),
                         profile=profile, mode=mode, fisher_group=u["fisher_group"])


def unlearn(cfg: ExperimentConfig, model: nn_model.Model, ds: data.Dataset, gi: ImportanceMap,
            mode: str) -> tuple[UnlearnOutcome, dict]:
    """Run ``mode`` on a copy of ``model``; returns the outcome and its report document."""
    split = data.unlearn_split(ds, int(cfg.unlearn["forget_class"]), int(cfg.unlearn["N"]))
    base_r, base_f = data.accuracies(model, split)
    ucfg = unlearn_config(cfg, model, mode, split, gi)
    work = model.copy()
    outcome = orchestrator.run_unlearning(work, split.forget_x, split.forget_y, gi, ucfg)
    r, f = data.accuracies(work, split)
    doc = outcome.to_dict()
    doc["eval"] = {
        "baseline_retain_acc": base_r,
        "baseline_forget_acc": base_f,
        "retain_acc": r,
        "forget_acc": f,
        "forget_batch_acc": nn_model.evaluate_accuracy(work, split.forget_x, split.forget_y),
        "forget_class": int(cfg.unlearn["forget_class"]),
    }
    return outcome, doc


def simulate(cfg: ExperimentConfig, outcome_doc: dict) -> dict:
    return pipeline_sim.simulate_outcome(outcome_doc, pipeline_config(cfg))


def _run_eval(doc: dict, energy_mj: float | None, key: str) -> metrics.RunEval:
    return metrics.RunEval(doc["eval"]["retain_acc"], doc["eval"]["forget_acc"], doc["ledger"]["total"], energy_mj, key)


def report(ssd_doc: dict, ours_doc: dict, ours_sim: dict | None = None) -> tuple[dict, str]:
    """Comparison document and plain-text table for SSD vs. one of our modes.

    The energy row compares our processor against the no-IP baseline
    processor running full SSD, as simulated for ``ours``."""
    ev = ours_doc["eval"]
    if ssd_doc["eval"]["baseline_retain_acc"] != ev["baseline_retain_acc"]:
        raise ValueError("SSD and unlearning outcomes come from different models")
    key = json.dumps({k: ev[k] for k in ("baseline_retain_acc", "forget_class")}, sort_keys=True)
    baseline = metrics.RunEval(ev["baseline_retain_acc"], ev["baseline_forget_acc"], None, None, key)
    ssd_energy = ours_energy = None
    if ours_sim is not None and ours_sim.get("energy_ratio_vs_baseline") is not None:
        ssd_energy = ours_sim["baseline"]["energy_total_mj"]
        ours_energy = ours_sim["engine"]["energy_total_mj"]
    ssd_rec, ours_rec = metrics.compare_runs(baseline, _run_eval(ssd_doc, ssd_energy, key),
                                             _run_eval(ours_doc, ours_energy, key))
    doc = json.loads(metrics.records_json(baseline, ssd_rec, ours_rec))
    doc["mode"] = ours_doc["mode"]
    doc["stop_layer"] = ours_doc["stop_layer"]
    doc["L"] = ours_doc["config"]["L"]
    if ours_sim is not None:
        doc["calibration"] = ours_sim.get("calibration")
    rows = metrics.comparison_rows(baseline, ssd_rec, ours_rec)
    return doc, metrics.render_table(rows)


# -- one full trial (for sweeps and the acceptance tests) ---------------------

def run_trial(cfg: ExperimentConfig, modes=("ssd_full", "cau", "cau_balanced")) -> dict:
    ds = build_dataset(cfg)
    model, summary = train(cfg, ds)
    gi = global_importance(cfg, model, ds)
    docs = {}
    for mode in modes:
        _, docs[mode] = unlearn(cfg, model, ds, gi, mode)
    out = {"seed": cfg.train["seed"], "test_acc": summary["test_acc"], "outcomes": docs}
    if "ssd_full" in docs:
        out["reports"] = {}
        for mode in modes:
            if mode != "ssd_full":
                sim = simulate(cfg, docs[mode])
                out["reports"][mode] = report(docs["ssd_full"], docs[mode], sim)[0]
    return out


def trial_summary(trial: dict, tau: float) -> dict:
    """Per-seed pass flags for the unlearning trend and the balanced comparison."""
    cau = trial["outcomes"]["cau"]
    row = {
        "seed": trial["seed"],
        "test_acc": trial["test_acc"],
        "stop_layer": cau["stop_layer"],
        "forget_acc_at_stop": cau["forget_acc_trace"][-1][1] if cau["forget_acc_trace"] else None,
        "forget_test_acc": cau["eval"]["forget_acc"],
        "retain_drop_pp": metrics.retain_drop(cau["eval"]["baseline_retain_acc"], cau["eval"]["retain_acc"]),
        "mac_ratio": cau["ledger"]["ratio_vs_ssd"],
    }
    row["trend_ok"] = bool(row["forget_acc_at_stop"] is not None and row["forget_acc_at_stop"] <= tau
                           and row["retain_drop_pp"] <= 5.0 and row["mac_ratio"] < 100.0)
    bal = trial["outcomes"].get("cau_balanced")
    if bal is not None:
        row["balanced_stop_layer"] = bal["stop_layer"]
        row["balanced_retain_drop_pp"] = metrics.retain_drop(bal["eval"]["baseline_retain_acc"], bal["eval"]["retain_acc"])
        row["balanced_ok"] = bool(row["balanced_retain_drop_pp"] <= row["retain_drop_pp"])
    return row

