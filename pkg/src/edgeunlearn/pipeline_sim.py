"""Cycle-approximate model of the unlearning engine: a patch-level
GEMM -> FIMD -> Dampening stream with double-buffered hand-offs, plus a
constant-power energy model.

The cycle constants are calibration, not measurements. Defaults reproduce
the reported IP speedups over a scalar core (about 11.7x for Fisher
accumulation, 7.9x for dampening) at ``CALIBRATION_ELEMENTS`` elements, and
keep both IPs inside the default GEMM patch window.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field

STAGES = ("gemm", "fimd", "damp")

# 3x3 conv, 64 -> 64 channels: a mid-network layer of an 18-layer residual net
CALIBRATION_ELEMENTS = 3 * 3 * 64 * 64
CALIBRATION_NOTE = (
    "calibrated: core cycles/element chosen so IP speedups match 11.7x (FIMD) and 7.9x "
    f"(dampening) at {CALIBRATION_ELEMENTS} elements; not RTL-derived"
)


class SimulationError(ValueError):
    pass


@dataclass
class PipelineConfig:
    patch_dim: int = 16
    gemm_cycles_per_patch: int = 512
    fimd_stage_latencies: tuple[int, ...] = (1, 1, 1, 1)  # load, square, accumulate, store
    damp_stage_latencies: tuple[int, ...] = (1, 1, 1, 1, 1)  # load, compare, beta, multiply, store
    elements_per_cycle: int = 1
    fimd_core_cycles_per_element: float = 11.7
    damp_core_cycles_per_element: float = 7.9
    gemm_macs_per_cycle: int = 256
    buffer_depth: int = 2
    clock_hz: float = 50e6

    def __post_init__(self):
        self.fimd_stage_latencies = tuple(int(v) for v in self.fimd_stage_latencies)
        self.damp_stage_latencies = tuple(int(v) for v in self.damp_stage_latencies)
        if len(self.fimd_stage_latencies) != 4 or len(self.damp_stage_latencies) != 5:
            raise ValueError("FIMD has 4 stages and dampening has 5")
        lat = (self.gemm_cycles_per_patch, *self.fimd_stage_latencies, *self.damp_stage_latencies)
        if min(lat) < 1:
            raise ValueError("all latencies must be >= 1 cycle")
        if self.patch_dim < 1 or self.elements_per_cycle < 1 or self.buffer_depth < 1:
            raise ValueError("patch_dim, elements_per_cycle and buffer_depth must be >= 1")
        if self.gemm_macs_per_cycle < 1 or self.clock_hz <= 0:
            raise ValueError("gemm_macs_per_cycle and clock_hz must be positive")

    @property
    def patch_elements(self) -> int:
        return self.patch_dim * self.patch_dim

    def fill(self, ip: str) -> int:
        return sum(self.fimd_stage_latencies if ip == "fimd" else self.damp_stage_latencies)

    def ip_patch_latency(self, ip: str, elements: int) -> int:
        """Cycles an IP is occupied by one patch: pipeline fill plus streaming."""
        return self.fill(ip) + math.ceil(elements / self.elements_per_cycle)

    def service(self, stage: str, elements: int) -> int:
        if stage == "gemm":
            return self.gemm_cycles_per_patch
        return self.ip_patch_latency(stage, elements)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fimd_stage_latencies"] = list(self.fimd_stage_latencies)
        d["damp_stage_latencies"] = list(self.damp_stage_latencies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


@dataclass
class PowerTable:
    """Per-component power in mW. ``unlearning_engine`` = ``vta`` + ``specialized_ips``."""

    total: float = 185.89
    core: float = 11.2
    sram: float = 1.71
    dma: float = 4.07
    peripherals: float = 5.68
    ddr: float = 88.62
    interconnect: float = 33.9
    unlearning_engine: float = 40.71
    vta: float = 39.9
    specialized_ips: float = 0.81

    def __post_init__(self):
        if not self.specialized_ips <= self.unlearning_engine <= self.total:
            raise ValueError("power table must satisfy specialized_ips <= unlearning_engine <= total")

    def leaves(self) -> dict[str, float]:
        names = ("core", "sram", "dma", "peripherals", "ddr", "interconnect", "vta", "specialized_ips")
        return {n: getattr(self, n) for n in names}


# -- workload ----------------------------------------------------------------

@dataclass(frozen=True)
class LayerWork:
    layer: int
    patch_count: int
    element_count: int


def layer_work(layer: int, elements: int, cfg: PipelineConfig) -> LayerWork:
    return LayerWork(layer, math.ceil(elements / cfg.patch_elements), elements)


def expand_patches(workload: list[LayerWork], cfg: PipelineConfig) -> list[int]:
    """Element count of every patch, in stream order."""
    out = []
    pe = cfg.patch_elements
    for w in workload:
        if w.patch_count < 1 or w.element_count < 1:
            raise SimulationError(f"layer {w.layer}: zero-size work")
        full, rem = divmod(w.element_count, pe)
        sizes = [pe] * full + ([rem] if rem else [])
        if len(sizes) != w.patch_count:
            raise SimulationError(
                f"layer {w.layer}: {w.element_count} elements do not fill {w.patch_count} patches of {pe}")
        out.extend(sizes)
    return out


# -- simulation ------------------------------------------------------------------

@dataclass
class StageStats:
    busy: int = 0
    stall: int = 0  # idle with input ready, blocked by a full downstream buffer
    starve: int = 0  # idle waiting for input
    patches: int = 0
    elements: int = 0


@dataclass
class SimReport:
    total_cycles: int
    stages: dict[str, StageStats]
    steady_interval: int | None
    hidden: bool
    patches_per_cycle: float
    start_times: dict[str, list[int]] = field(default_factory=dict, repr=False)
    finish_times: dict[str, list[int]] = field(default_factory=dict, repr=False)
    energy_mj: dict[str, float] = field(default_factory=dict)
    energy_total_mj: float = 0.0
    energy_ratio_vs_baseline: float | None = None
    calibration: str = CALIBRATION_NOTE

    def to_dict(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "stages": {k: asdict(v) for k, v in self.stages.items()},
            "steady_interval": self.steady_interval,
            "hidden": self.hidden,
            "patches_per_cycle": self.patches_per_cycle,
            "energy_mj": self.energy_mj,
            "energy_total_mj": self.energy_total_mj,
            "energy_ratio_vs_baseline": self.energy_ratio_vs_baseline,
            "calibration": self.calibration,
        }


def simulate_patches(sizes: list[int], cfg: PipelineConfig, keep_times: bool = False) -> SimReport:
    """Event-driven run of the three-stage stream over patches of the given sizes.

    Stage s may start patch k once it is idle, stage s-1 has finished k, and
    stage s+1 has started patch k - buffer_depth (a hand-off slot is free).
    Simultaneous events resolve downstream stage first.
    """
    n = len(sizes)
    if n == 0:
        raise SimulationError("workload is empty")
    if min(sizes) < 1:
        raise SimulationError("zero-size patch")
    S = len(STAGES)
    B = cfg.buffer_depth
    started = [0] * S  # patches started per stage
    finished = [0] * S
    busy_until = [0] * S
    running = [False] * S
    idle_since = [0] * S
    stats = {name: StageStats() for name in STAGES}
    start_t = [[0] * n for _ in range(S)]
    finish_t = [[0] * n for _ in range(S)]
    events: list[tuple[int, int]] = []  # (time, -stage)

    def ready(s: int) -> bool:
        k = started[s]
        if running[s] or k >= n:
            return False
        return s == 0 or finished[s - 1] > k

    def unblocked(s: int) -> bool:
        return s == S - 1 or started[s + 1] > started[s] - B

    def try_start(s: int, t: int) -> bool:
        if not (ready(s) and unblocked(s)):
            return False
        k = started[s]
        dur = cfg.service(STAGES[s], sizes[k])
        start_t[s][k] = t
        finish_t[s][k] = t + dur
        started[s] += 1
        running[s] = True
        busy_until[s] = t + dur
        st = stats[STAGES[s]]
        st.busy += dur
        st.patches += 1
        st.elements += sizes[k]
        heapq.heappush(events, (t + dur, -s))
        return True

    blocked_since: list[int | None] = [None] * S

    def settle(t: int):
        # downstream first; repeat until nothing new can start at time t
        progress = True
        while progress:
            progress = False
            for s in reversed(range(S)):
                if try_start(s, t):
                    if blocked_since[s] is not None:
                        stats[STAGES[s]].stall += t - blocked_since[s]
                        blocked_since[s] = None
                    else:
                        stats[STAGES[s]].starve += t - idle_since[s]
                    progress = True
        for s in range(S):
            if not running[s] and blocked_since[s] is None and ready(s) and not unblocked(s):
                # became ready but is blocked: the idle time so far was starvation
                stats[STAGES[s]].starve += t - idle_since[s]
                blocked_since[s] = t

    settle(0)
    while events:
        t = events[0][0]
        while events and events[0][0] == t:
            _, neg = heapq.heappop(events)
            s = -neg
            finished[s] += 1
            running[s] = False
            idle_since[s] = t
        settle(t)

    total = finish_t[S - 1][n - 1]
    interval = finish_t[S - 1][n - 1] - finish_t[S - 1][n - 2] if n >= 2 else None
    report = SimReport(
        total_cycles=total,
        stages=stats,
        steady_interval=interval,
        hidden=interval == cfg.gemm_cycles_per_patch if interval is not None
        else max(cfg.service("fimd", sizes[0]), cfg.service("damp", sizes[0])) <= cfg.gemm_cycles_per_patch,
        patches_per_cycle=n / total,
    )
    if keep_times:
        report.start_times = {STAGES[s]: start_t[s] for s in range(S)}
        report.finish_times = {STAGES[s]: finish_t[s] for s in range(S)}
    return report


def simulate_stream(workload: list[LayerWork], cfg: PipelineConfig, keep_times: bool = False) -> SimReport:
    if not workload:
        raise SimulationError("workload is empty")
    return simulate_patches(expand_patches(workload, cfg), cfg, keep_times)


def analytic_interval(cfg: PipelineConfig, elements: int | None = None) -> int:
    """Steady-state patch interval for uniform patches: the slowest stage."""
    e = cfg.patch_elements if elements is None else elements
    return max(cfg.service(s, e) for s in STAGES)


def speedup_vs_core(elements: int, cfg: PipelineConfig, ip: str = "fimd") -> float:
    """Scalar-core cycles over pipelined-IP cycles for the same element count."""
    if elements < 1:
        raise ValueError("elements must be >= 1")
    core = cfg.fimd_core_cycles_per_element if ip == "fimd" else cfg.damp_core_cycles_per_element
    return core * elements / cfg.ip_patch_latency(ip, elements)


# -- energy ------------------------------------------------------------------------

def estimate_energy(cycles: int, power: PowerTable, active_components, clock_hz: float) -> dict[str, float]:
    """mJ per component: mW x seconds. Any table entry may be named,
    including the ``unlearning_engine`` and ``total`` aggregates."""
    seconds = cycles / clock_hz
    leaves = asdict(power)
    out = {}
    for name in active_components:
        if name not in leaves:
            raise KeyError(f"no power entry for component {name!r}")
        out[name] = leaves[name] * seconds
    return out


ENGINE_COMPONENTS = ("core", "sram", "dma", "peripherals", "ddr", "interconnect", "vta", "specialized_ips")
BASELINE_COMPONENTS = ENGINE_COMPONENTS[:-1]


@dataclass
class ProcessorRun:
    name: str
    gemm_only_cycles: int
    stream_cycles: int
    core_cycles: int
    energy_mj: dict[str, float]
    stream: SimReport | None = None

    @property
    def total_cycles(self) -> int:
        return self.gemm_only_cycles + self.stream_cycles + self.core_cycles

    @property
    def energy_total_mj(self) -> float:
        return math.fsum(self.energy_mj.values())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gemm_only_cycles": self.gemm_only_cycles,
            "stream_cycles": self.stream_cycles,
            "core_cycles": self.core_cycles,
            "total_cycles": self.total_cycles,
            "energy_mj": self.energy_mj,
            "energy_total_mj": self.energy_total_mj,
            "stream": None if self.stream is None else self.stream.to_dict(),
        }


def run_engine_processor(gemm_macs: int, workload: list[LayerWork], cfg: PipelineConfig,
                         power: PowerTable) -> ProcessorRun:
    """Unlearning engine with both IPs streaming behind the GEMM."""
    gemm_only = math.ceil(gemm_macs / cfg.gemm_macs_per_cycle)
    stream = simulate_stream(workload, cfg) if workload else None
    stream_cycles = stream.total_cycles if stream else 0
    cycles = gemm_only + stream_cycles
    energy = estimate_energy(cycles, power, ENGINE_COMPONENTS, cfg.clock_hz)
    return ProcessorRun("engine", gemm_only, stream_cycles, 0, energy, stream)


def run_baseline_processor(gemm_macs: int, workload: list[LayerWork], cfg: PipelineConfig,
                           power: PowerTable) -> ProcessorRun:
    """Same system without the IPs: gradient patches on the GEMM, Fisher and
    dampening on the scalar core, nothing overlapped."""
    gemm_only = math.ceil(gemm_macs / cfg.gemm_macs_per_cycle)
    patches = sum(w.patch_count for w in workload)
    elements = sum(w.element_count for w in workload)
    core = math.ceil(elements * (cfg.fimd_core_cycles_per_element + cfg.damp_core_cycles_per_element))
    stream_cycles = patches * cfg.gemm_cycles_per_patch
    cycles = gemm_only + stream_cycles + core
    energy = estimate_energy(cycles, power, BASELINE_COMPONENTS, cfg.clock_hz)
    return ProcessorRun("baseline", gemm_only, stream_cycles, core, energy)


def workload_from_outcome(outcome: dict, cfg: PipelineConfig, all_layers: bool = False) -> tuple[int, list[LayerWork]]:
    """(non-streamed GEMM MACs, streamed gradient workload) for an unlearning outcome.

    The weight-gradient half of each processed layer's gradient pass is the
    streamed part: one gradient row per Fisher group (ceil(N / group) rows of
    ``params`` elements) flows GEMM -> FIMD -> dampening.
    Forward, checkpoint and input-gradient MACs run on the GEMM alone.
    ``all_layers`` builds the full one-shot SSD workload for the same model.
    """
    N = outcome["config"]["N"]
    rows = math.ceil(N / outcome["config"].get("fisher_group", 1))
    layers = {int(r["l"]): r for r in outcome["layers"]}
    led = outcome["ledger"]
    if all_layers:
        processed = sorted(layers)
        grad = sum(2 * N * layers[l]["forward_macs"] for l in processed)
        gemm_macs = led["forward_pass"] + grad // 2
    else:
        processed = sorted(int(l) for l in led["gradient_pass"])
        grad = sum(led["gradient_pass"].values())
        gemm_macs = led["forward_pass"] + led["checkpoint_partial_inference"] + grad // 2
    work = [layer_work(l, rows * layers[l]["params"], cfg) for l in processed]
    return gemm_macs, work


def simulate_outcome(outcome: dict, cfg: PipelineConfig, power: PowerTable | None = None) -> dict:
    """Unlearning-engine processor running the outcome vs. baseline processor running full SSD."""
    power = power or PowerTable()
    if not outcome.get("ledger") or outcome["ledger"].get("total", 1) == 0:
        zero = {"total_cycles": 0, "energy_total_mj": 0.0}
        return {"engine": zero, "baseline": zero, "energy_ratio_vs_baseline": None, "calibration": CALIBRATION_NOTE}
    macs, work = workload_from_outcome(outcome, cfg)
    ours = run_engine_processor(macs, work, cfg, power)
    bmacs, bwork = workload_from_outcome(outcome, cfg, all_layers=True)
    base = run_baseline_processor(bmacs, bwork, cfg, power)
    ratio = 100.0 * ours.energy_total_mj / base.energy_total_mj if base.energy_total_mj else None
    return {
        "engine": ours.to_dict(),
        "baseline": base.to_dict(),
        "energy_ratio_vs_baseline": ratio,
        "speedups": {
            "fimd": speedup_vs_core(CALIBRATION_ELEMENTS, cfg, "fimd"),
            "damp": speedup_vs_core(CALIBRATION_ELEMENTS, cfg, "damp"),
            "at_elements": CALIBRATION_ELEMENTS,
        },
        "calibration": CALIBRATION_NOTE,
    }


def report_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
