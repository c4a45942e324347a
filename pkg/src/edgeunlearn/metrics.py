"""Retain/forget accuracy records, retain preservation rate, MAC ratios, and
the Baseline / SSD / Ours comparison table."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass


@dataclass
class RunEval:
    """Accuracies of one model state plus the cost of producing it."""

    retain_acc: float
    forget_acc: float
    macs: int | None = None
    energy_mj: float | None = None
    config_key: str | None = None


@dataclass
class EvalRecord:
    retain_acc: float
    forget_acc: float
    delta_retain: float  # percentage points below the pre-unlearning baseline
    mac_ratio: float
    rpr: float | None
    energy_ratio: float | None = None
    mia_acc: float | None = None  # not computed; kept for table layout

    def __post_init__(self):
        for name in ("retain_acc", "forget_acc"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def energy_saving(self) -> float | None:
        return None if self.energy_ratio is None else 100.0 - self.energy_ratio


def rpr(delta_ssd: float, delta_ours: float) -> float | None:
    """Retain preservation rate in percent; None when SSD lost nothing."""
    if delta_ssd == 0:
        return None
    return (1.0 - delta_ours / delta_ssd) * 100.0


def retain_drop(baseline_retain: float, retain: float) -> float:
    return (baseline_retain - retain) * 100.0


def compare_runs(baseline: RunEval, ssd: RunEval, ours: RunEval) -> tuple[EvalRecord, EvalRecord]:
    if ssd.macs is None or ours.macs is None:
        raise ValueError("SSD and unlearning runs need MAC totals")
    keys = {r.config_key for r in (baseline, ssd, ours)} - {None}
    if len(keys) > 1:
        raise ValueError(f"runs come from different configurations: {sorted(keys)}")
    d_ssd = retain_drop(baseline.retain_acc, ssd.retain_acc)
    d_ours = retain_drop(baseline.retain_acc, ours.retain_acc)
    energy = None
    if ssd.energy_mj and ours.energy_mj is not None:
        energy = 100.0 * ours.energy_mj / ssd.energy_mj
    ssd_rec = EvalRecord(ssd.retain_acc, ssd.forget_acc, d_ssd, 100.0, None, 100.0 if energy is not None else None)
    ours = EvalRecord(ours.retain_acc, ours.forget_acc, d_ours, 100.0 * ours.macs / ssd.macs, rpr(d_ssd, d_ours), energy)
    return ssd_rec, ours


def _fmt(v, digits=2):
    return "--" if v is None else f"{v:.{digits}f}"


def comparison_rows(baseline: RunEval, ssd: EvalRecord, ours: EvalRecord) -> list[dict]:
    """Machine-readable rows, values in percent; None marks not-applicable."""
    return [
        {"metric": "D_r", "baseline": 100 * baseline.retain_acc, "ssd": 100 * ssd.retain_acc, "ours": 100 * ours.retain_acc},
        {"metric": "D_f", "baseline": 100 * baseline.forget_acc, "ssd": 100 * ssd.forget_acc, "ours": 100 * ours.forget_acc},
        {"metric": "dD_r", "baseline": None, "ssd": ssd.delta_retain, "ours": ours.delta_retain},
        {"metric": "MIA", "baseline": None, "ssd": None, "ours": None},
        {"metric": "MACs", "baseline": None, "ssd": ssd.mac_ratio, "ours": ours.mac_ratio},
        {"metric": "RPR", "baseline": None, "ssd": None, "ours": ours.rpr},
        {"metric": "ES", "baseline": None, "ssd": None, "ours": ours.energy_saving},
    ]


def render_table(rows: list[dict]) -> str:
    header = f"{'Metric':<8}|{'Baseline':>10} |{'SSD':>10} |{'Ours':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['metric']:<8}|{_fmt(r['baseline']):>10} |{_fmt(r['ssd']):>10} |{_fmt(r['ours']):>10}")
    return "\n".join(lines) + "\n"


def records_json(baseline: RunEval, ssd: EvalRecord, ours: EvalRecord) -> str:
    doc = {
        "baseline": asdict(baseline),
        "ssd": asdict(ssd),
        "ours": asdict(ours),
        "table": comparison_rows(baseline, ssd, ours),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
