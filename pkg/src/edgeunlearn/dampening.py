"""Parameter selection, dampening strength, in-place update, and the
sigmoid depth profile that scales (alpha, lambda) per layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .nn_model import Model
from .tensor_core import as_f32


class DegenerateDepthError(ValueError):
    pass


@dataclass(frozen=True)
class DampeningParams:
    alpha: float
    lam: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.lam > 0):
            raise ValueError(f"alpha and lambda must be positive, got {self.alpha}, {self.lam}")


@dataclass(frozen=True)
class ProfileParams:
    b_r: float
    c_m: float
    L: int

    def __post_init__(self):
        if self.b_r < 1:
            raise ValueError(f"b_r must be >= 1, got {self.b_r}")


@dataclass
class LayerDampening:
    l: int
    selected: int
    size: int
    beta_min: float | None
    beta_mean: float | None
    alpha: float
    lam: float


@dataclass
class DampeningReport:
    layers: list[LayerDampening] = field(default_factory=list)

    @property
    def total_modified(self) -> int:
        return sum(r.selected for r in self.layers)

    def selected_counts(self) -> dict[int, int]:
        return {r.l: r.selected for r in self.layers}

    def to_text(self) -> str:
        """One JSON record per line, in processing order."""
        return "".join(json.dumps(r.__dict__, sort_keys=True) + "\n" for r in self.layers)

    @classmethod
    def from_text(cls, text: str) -> "DampeningReport":
        return cls([LayerDampening(**json.loads(line)) for line in text.splitlines() if line.strip()])


def select_mask(imp_f, imp_d, alpha: float) -> np.ndarray:
    imp_f, imp_d = as_f32(imp_f), as_f32(imp_d)
    if imp_f.shape != imp_d.shape:
        raise ValueError(f"importance shapes differ: {imp_f.shape} vs {imp_d.shape}")
    return imp_f > np.float32(alpha) * imp_d


def beta(imp_f: float, imp_d: float, lam: float) -> float:
    """min(lam * imp_d / imp_f, 1) in float32."""
    imp_f, imp_d = np.float32(imp_f), np.float32(imp_d)
    if not imp_f > 0:
        raise ArithmeticError("dampening strength needs positive forget importance")
    return float(min((np.float32(lam) * imp_d) / imp_f, np.float32(1.0)))


def dampen_tensor(theta: np.ndarray, imp_f, imp_d, params: DampeningParams) -> tuple[np.ndarray, np.ndarray]:
    """Dampen ``theta`` in place. Returns (selection mask, beta of selected)."""
    if theta.dtype != np.float32 or not theta.flags.c_contiguous:
        raise TypeError("parameters must be contiguous float32 to be edited in place")
    imp_f, imp_d = as_f32(imp_f), as_f32(imp_d)
    if not (theta.shape == imp_f.shape == imp_d.shape):
        raise ValueError(f"shape mismatch: theta {theta.shape}, imp_f {imp_f.shape}, imp_d {imp_d.shape}")
    flat_f, flat_d = imp_f.reshape(-1), imp_d.reshape(-1)
    if np.any((flat_f <= 0) & (flat_f > np.float32(params.alpha) * flat_d)):
        # only reachable with negative global importance
        raise ArithmeticError("selected parameter with non-positive forget importance")
    betas = np.zeros(theta.size, dtype=np.float32)
    mask = kernels.dampen_f32(theta.reshape(-1), flat_f, flat_d,
                              np.float32(params.alpha), np.float32(params.lam), betas)
    mask = mask.astype(bool)
    return mask.reshape(theta.shape), betas[mask]


def dampen_layer(model: Model, l: int, imp_f: list[np.ndarray], imp_d: list[np.ndarray],
                 params: DampeningParams) -> LayerDampening:
    layer = model.layer(l)
    if len(imp_f) != len(layer.params) or len(imp_d) != len(layer.params):
        raise ValueError(f"layer {l} has {len(layer.params)} tensors, importance has {len(imp_f)}/{len(imp_d)}")
    selected, size, betas = 0, 0, []
    for theta, f, d, ok in zip(layer.params, imp_f, imp_d, layer.eligible):
        size += theta.size
        if not ok:
            continue
        mask, b = dampen_tensor(theta, f, d, params)
        selected += int(mask.sum())
        betas.append(b)
    b = np.concatenate(betas) if betas else np.zeros(0, np.float32)
    return LayerDampening(
        l=l,
        selected=selected,
        size=size,
        beta_min=float(b.min()) if b.size else None,
        beta_mean=float(np.mean(b, dtype=np.float64)) if b.size else None,
        alpha=float(params.alpha),
        lam=float(params.lam),
    )


def count_selected(imp_f: list[np.ndarray], imp_d: list[np.ndarray], alpha: float) -> int:
    return sum(int(select_mask(f, d, alpha).sum()) for f, d in zip(imp_f, imp_d))


# -- depth profile -----------------------------------------------------------

def _log_sigmoid(x: float) -> float:
    return -np.logaddexp(0.0, -x)


def profile_scale(l: int, p: ProfileParams) -> float:
    """1 + (b_r - 1) * (sig(l) - sig(1)) / (sig(L) - sig(1)), sig(x) = 1/(1+exp(-(x-c_m))).

    Uses sig(a) - sig(b) = -sig(a) * sig(-b) * expm1(b - a); the sig(-b)
    factor cancels, which keeps the ratio accurate when the sigmoid saturates.
    """
    if p.L < 2:
        raise DegenerateDepthError("the depth profile needs at least two layers")
    if not 1 <= l <= p.L:
        raise IndexError(f"layer index {l} outside 1..{p.L}")
    if l == p.L:
        return float(p.b_r)
    ratio = math.exp(_log_sigmoid(l - p.c_m) - _log_sigmoid(p.L - p.c_m)) * (math.expm1(1 - l) / math.expm1(1 - p.L))
    return 1.0 + (p.b_r - 1.0) * ratio


def scaled_params(base: DampeningParams, l: int, p: ProfileParams | None) -> DampeningParams:
    if p is None:
        return base
    s = profile_scale(l, p)
    return DampeningParams(s * base.alpha, s * base.lam)


def smooth3(values) -> np.ndarray:
    """Centered 3-point moving average; the edges average their two available points."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        return v.copy()
    out = np.empty_like(v)
    out[1:-1] = (v[:-2] + v[1:-1] + v[2:]) / 3.0
    out[0] = (v[0] + v[1]) / 2.0
    out[-1] = (v[-2] + v[-1]) / 2.0
    return out


def default_midpoint(selected_counts: dict[int, int], threshold: float = 0.1) -> float:
    """Midpoint between the first and last layers whose smoothed selection
    count exceeds ``threshold`` of the smoothed maximum."""
    ls = sorted(selected_counts)
    smoothed = smooth3([selected_counts[l] for l in ls])
    peak = smoothed.max(initial=0.0)
    if peak <= 0:
        return (ls[0] + ls[-1]) / 2.0
    active = [l for l, s in zip(ls, smoothed) if s > threshold * peak]
    return (active[0] + active[-1]) / 2.0
