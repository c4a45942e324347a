"""Back-end-first unlearning with checkpointed early stop, and MAC accounting.

Layers are processed l = 1, 2, ..., L. Each layer gets its forget-set Fisher
slice, selection and in-place dampening. At checkpoint layers the forget
accuracy is measured by partial inference from the cached layer inputs; the
run stops as soon as it reaches the target, leaving deeper layers untouched.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dampening import (
    DampeningParams,
    DampeningReport,
    ProfileParams,
    count_selected,
    dampen_layer,
    default_midpoint,
    scaled_params,
)
from .fisher import ImportanceMap, layer_importance
from .nn_model import Layer, Model, accuracy_from_logits, cache_from_trace, forward_trace, iter_backward, partial_inference_batch

MODES = ("ssd_full", "cau", "cau_balanced")

# gradient pass of a layer = input-gradient GEMM + weight-gradient GEMM
GRADIENT_COST_FACTOR = 2


class ConfigError(ValueError):
    pass


@dataclass
class UnlearnConfig:
    alpha: float = 10.0
    lam: float = 1.0
    checkpoints: tuple[int, ...] = ()
    tau: float = 0.2
    N: int = 64
    profile: ProfileParams | None = None
    mode: str = "cau"
    # gradient group size for the forget-set Fisher; None means the whole batch
    fisher_group: int | None = None

    def validate(self, L: int) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.N < 1:
            raise ConfigError("forget batch size N must be >= 1")
        if self.fisher_group is not None and self.fisher_group < 1:
            raise ConfigError("fisher_group must be >= 1")
        bad = [c for c in self.checkpoints if not 1 <= c <= L]
        if bad:
            raise ConfigError(f"checkpoints {bad} outside 1..{L}")
        DampeningParams(self.alpha, self.lam)
        if self.mode == "cau_balanced" and self.profile is None:
            raise ConfigError("cau_balanced needs profile parameters")
        if self.profile is not None and self.profile.L != L:
            raise ConfigError(f"profile depth {self.profile.L} != model depth {L}")

    @property
    def params(self) -> DampeningParams:
        return DampeningParams(self.alpha, self.lam)

    @property
    def group(self) -> int:
        return self.N if self.fisher_group is None else self.fisher_group

    def effective_checkpoints(self) -> tuple[int, ...]:
        return () if self.mode == "ssd_full" else tuple(sorted(set(self.checkpoints)))

    def effective_profile(self) -> ProfileParams | None:
        return self.profile if self.mode == "cau_balanced" else None


def default_checkpoints(L: int) -> tuple[int, ...]:
    """First and last parameterized layers plus every ceil(L/4)-th layer."""
    step = math.ceil(L / 4)
    return tuple(sorted({1, L, *range(step, L + 1, step)}))


# -- MAC accounting ----------------------------------------------------------------

def count_macs_layer(spec: Layer, batch: int) -> int:
    """Forward MACs of one layer over ``batch`` samples; zero for unparameterized layers."""
    return batch * spec.forward_macs()


@dataclass
class MacLedger:
    forward_pass: int = 0
    gradient_pass: dict[int, int] = field(default_factory=dict)
    checkpoint_partial_inference: int = 0
    dampening_ops: int = 0
    ratio_vs_ssd: float | None = None

    @property
    def total(self) -> int:
        return (self.forward_pass + sum(self.gradient_pass.values())
                + self.checkpoint_partial_inference + self.dampening_ops)

    def to_dict(self) -> dict:
        return {
            "forward_pass": self.forward_pass,
            "gradient_pass": {str(k): v for k, v in sorted(self.gradient_pass.items())},
            "checkpoint_partial_inference": self.checkpoint_partial_inference,
            "dampening_ops": self.dampening_ops,
            "total": self.total,
            "ratio_vs_ssd": self.ratio_vs_ssd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MacLedger":
        led = cls(
            forward_pass=d["forward_pass"],
            gradient_pass={int(k): v for k, v in d["gradient_pass"].items()},
            checkpoint_partial_inference=d["checkpoint_partial_inference"],
            dampening_ops=d.get("dampening_ops", 0),
            ratio_vs_ssd=d.get("ratio_vs_ssd"),
        )
        if "total" in d and d["total"] != led.total:
            raise ValueError("ledger total does not match its counters")
        return led


def forward_macs(model: Model, N: int) -> int:
    return sum(count_macs_layer(layer, N) for layer in model.layers)


def partial_macs(model: Model, l: int, N: int) -> int:
    """MACs of running layers l..1 over N samples."""
    return sum(count_macs_layer(layer, N) for layer in model.layers[model.position(l):])


def ssd_ledger(model: Model, N: int) -> MacLedger:
    """Full one-shot SSD: one forward pass plus the gradient pass of every layer."""
    led = MacLedger(forward_pass=forward_macs(model, N))
    for l in model.indices():
        led.gradient_pass[l] = GRADIENT_COST_FACTOR * count_macs_layer(model.layer(l), N)
    led.ratio_vs_ssd = 100.0
    return led


# -- the run -----------------------------------------------------------------

@dataclass
class UnlearnOutcome:
    stop_layer: int
    early_stopped: bool
    forget_acc_trace: list[tuple[int, float]]
    model: Model
    ledger: MacLedger
    report: DampeningReport
    mode: str
    config: dict
    layer_table: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "stop_layer": self.stop_layer,
            "early_stopped": self.early_stopped,
            "forget_acc_trace": [[l, a] for l, a in self.forget_acc_trace],
            "ledger": self.ledger.to_dict(),
            "dampening": [asdict(r) for r in self.report.layers],
            "config": self.config,
            "layers": self.layer_table,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def layer_table(model: Model) -> list[dict]:
    return [{"l": l, "kind": model.layer(l).kind, "params": model.param_count(l),
             "forward_macs": model.layer(l).forward_macs()} for l in model.indices()]


def _config_record(cfg: UnlearnConfig, L: int) -> dict:
    prof = cfg.effective_profile()
    return {
        "alpha": cfg.alpha,
        "lambda": cfg.lam,
        "checkpoints": list(cfg.effective_checkpoints()),
        "tau": cfg.tau,
        "N": cfg.N,
        "fisher_group": cfg.group,
        "L": L,
        "profile": None if prof is None else {"b_r": prof.b_r, "c_m": prof.c_m},
    }


def run_unlearning(model: Model, forget_x, forget_y, global_imp: ImportanceMap, cfg: UnlearnConfig) -> UnlearnOutcome:
    """Edit ``model`` in place and return the outcome (which references it)."""
    cfg.validate(model.L)
    global_imp.check_against(model)
    forget_y = np.asarray(forget_y)
    if len(forget_y) != cfg.N or len(forget_x) != cfg.N:
        raise ConfigError(f"forget batch has {len(forget_y)} samples, config says N={cfg.N}")

    checkpoints = set(cfg.effective_checkpoints())
    profile = cfg.effective_profile()
    base = cfg.params
    N = cfg.N

    # step 0: one forward pass; keep inputs to checkpoint layers
    logits, inputs = forward_trace(model, forget_x)
    cache = cache_from_trace(model, inputs, checkpoints)
    ledger = MacLedger(forward_pass=forward_macs(model, N))
    report = DampeningReport()
    trace: list[tuple[int, float]] = []
    stop_layer, early = model.L, False

    grads_stream = iter_backward(model, forget_x, forget_y, inputs=inputs, logits=logits, group=cfg.group)
    for l, grads in grads_stream:
        imp_f = layer_importance(grads)
        ledger.gradient_pass[l] = GRADIENT_COST_FACTOR * count_macs_layer(model.layer(l), N)
        report.layers.append(dampen_layer(model, l, imp_f, global_imp[l], scaled_params(base, l, profile)))
        if l in checkpoints:
            acc = accuracy_from_logits(partial_inference_batch(model, cache, l), forget_y)
            ledger.checkpoint_partial_inference += partial_macs(model, l, N)
            trace.append((l, acc))
            if acc <= cfg.tau:
                stop_layer, early = l, l < model.L
                break
    grads_stream.close()
    cache.clear()
    del inputs

    ssd_total = ssd_ledger(model, N).total
    ledger.ratio_vs_ssd = 100.0 * ledger.total / ssd_total
    return UnlearnOutcome(stop_layer, early, trace, model, ledger, report, cfg.mode,
                          _config_record(cfg, model.L), layer_table(model))


def run_ssd_baseline(model: Model, forget_x, forget_y, global_imp: ImportanceMap, params: DampeningParams,
                     N: int | None = None, fisher_group: int | None = None) -> UnlearnOutcome:
    n = len(forget_y) if N is None else N
    cfg = UnlearnConfig(alpha=params.alpha, lam=params.lam, checkpoints=(), tau=0.0, N=n, mode="ssd_full",
                        fisher_group=fisher_group)
    return run_unlearning(model, forget_x, forget_y, global_imp, cfg)


def ssd_selection_counts(model: Model, forget_x, forget_y, global_imp: ImportanceMap, alpha: float,
                         group: int | None = None) -> dict[int, int]:
    """Per-layer counts SSD would select, without editing the model."""
    forget_y = np.asarray(forget_y)
    counts = {}
    for l, grads in iter_backward(model, forget_x, forget_y, group=len(forget_y) if group is None else group):
        counts[l] = count_selected(layer_importance(grads), global_imp[l], alpha)
    return counts


def balanced_profile(model: Model, forget_x, forget_y, global_imp: ImportanceMap, alpha: float,
                     b_r: float = 10.0, c_m: float | None = None, group: int | None = None) -> ProfileParams:
    """Profile with ``c_m`` placed from the SSD selection distribution unless given."""
    if c_m is None:
        c_m = default_midpoint(ssd_selection_counts(model, forget_x, forget_y, global_imp, alpha, group))
    return ProfileParams(b_r=b_r, c_m=c_m, L=model.L)

