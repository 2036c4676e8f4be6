"""Forward multipliers, their width-scaling laws, the rescaling symmetry, and the tuner.

All width dependence lives in forward multipliers (y = m W x); learning-rate and
weight-decay multipliers are width-independent. A multiplier set keeps the tuned values
at its reference shapes, so transferring to new shapes is always recomputed from the
reference and transfers compose exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FORWARD_KEYS = ("m_emb", "m_unemb", "m_MLP", "m_attn", "m_SSM", "m_gate",
                "m_key", "m_x", "m_z", "m_B", "m_C", "m_dt")
MATRIX_KEYS = ("W_emb", "W_unemb", "W_in", "W_out", "W_up", "W_gate", "W_down")
VECTOR_KEYS = ("N^f", "N^Mixer", "N^MLP", "N^SSM", "W_conv1d", "b_conv1d", "b_dt", "A_log", "D")


@dataclass(frozen=True)
class ModelShapes:
    """Dimensions entering the width-scaling laws."""

    d: float
    d_mlp: float
    d_head_ssm: float
    n_heads_ssm: float
    d_state: float
    n_groups: float
    d_head_attn: float
    n_heads_attn: float


# base model the tuned values below belong to
REF_SHAPES = ModelShapes(d=1280, d_mlp=3840, d_head_ssm=64, n_heads_ssm=16, d_state=128,
                         n_groups=1, d_head_attn=64, n_heads_attn=12)

# exponent of each shape ratio in the multiplier's scaling law
SCALING_LAWS: dict[str, dict[str, float]] = {
    "m_emb": {},
    "m_unemb": {"d": -1},
    "m_MLP": {"d_mlp": -1, "d": -1},
    "m_gate": {"d": -1},
    "m_attn": {"d_head_attn": -1, "n_heads_attn": -1, "d": -1},
    "m_key": {"d": -2, "d_head_attn": -0.5},
    "m_x": {"d": -1},
    "m_z": {"d": -1},
    "m_B": {"d_state": -1, "n_groups": -1, "d": -1},
    "m_C": {"d": -1},
    "m_dt": {"d": -1},
    "m_SSM": {"d_head_ssm": -1, "n_heads_ssm": -1},
}

TABLE13_FORWARD = {
    "m_emb": 2 ** 2.5, "m_unemb": 2 ** -5, "m_MLP": 2 ** -2, "m_attn": 2 ** -1,
    "m_SSM": 2 ** -1.5, "m_gate": 2 ** -0.5, "m_key": 2 ** -2, "m_x": 2 ** -2,
    "m_z": 2 ** -1.5, "m_B": 2 ** -1.5, "m_C": 2 ** -1, "m_dt": 2 ** -1.5,
}
TABLE13_MATRIX_LR = {"W_emb": 2 ** 2, "W_unemb": 2 ** 0, "W_in": 2 ** -0.5, "W_out": 2 ** -2,
                     "W_up": 2 ** -0.5, "W_gate": 2 ** 0.5, "W_down": 2 ** -0.5}
TABLE13_MATRIX_WD = {"W_emb": 2 ** -3, "W_unemb": 2 ** -2, "W_in": 2 ** 0.5, "W_out": 2 ** 2,
                     "W_up": 2 ** -0.5, "W_gate": 2 ** 0, "W_down": 2 ** -0.5}
TABLE13_VECTOR_LR = {"N^f": 2 ** 1.5, "N^Mixer": 2 ** 2, "N^MLP": 2 ** 1.5, "N^SSM": 2 ** 1,
                     "W_conv1d": 2 ** 2.5, "b_conv1d": 2 ** 1, "b_dt": 2 ** 1.5, "A_log": 2 ** 1.5, "D": 2 ** 3}
BASE_LR = 256e-6
BASE_WD = 0.1


def width_factor(key: str, ref: ModelShapes, shapes: ModelShapes) -> float:
    if key not in SCALING_LAWS:
        raise KeyError(f"unknown multiplier {key!r}")
    f = 1.0
    for dim, exp in SCALING_LAWS[key].items():
        f *= (getattr(shapes, dim) / getattr(ref, dim)) ** exp
    return f


@dataclass
class MuPMultiplierSet:
    """The 35 tunables. ``tuned`` holds forward values at ``ref_shapes``."""

    tuned: dict[str, float]
    matrix_lr: dict[str, float]
    matrix_wd: dict[str, float]
    vector_lr: dict[str, float]
    ref_shapes: ModelShapes = REF_SHAPES
    shapes: ModelShapes = REF_SHAPES

    def __post_init__(self):
        for name, table, keys in (("forward", self.tuned, FORWARD_KEYS), ("matrix_lr", self.matrix_lr, MATRIX_KEYS),
                                  ("matrix_wd", self.matrix_wd, MATRIX_KEYS), ("vector_lr", self.vector_lr, VECTOR_KEYS)):
            if set(table) != set(keys):
                raise ValueError(f"{name} keys {sorted(table)} != {sorted(keys)}")
            bad = [k for k, v in table.items() if not (v > 0 and math.isfinite(v))]
            if bad:
                raise ValueError(f"{name} multipliers must be positive and finite: {bad}")

    @classmethod
    def table13(cls) -> "MuPMultiplierSet":
        return cls(dict(TABLE13_FORWARD), dict(TABLE13_MATRIX_LR), dict(TABLE13_MATRIX_WD), dict(TABLE13_VECTOR_LR))

    @classmethod
    def ones(cls, shapes: ModelShapes = REF_SHAPES) -> "MuPMultiplierSet":
        return cls({k: 1.0 for k in FORWARD_KEYS}, {k: 1.0 for k in MATRIX_KEYS},
                   {k: 1.0 for k in MATRIX_KEYS}, {k: 1.0 for k in VECTOR_KEYS}, shapes, shapes)

    @property
    def forward(self) -> dict[str, float]:
        return {k: self.tuned[k] * width_factor(k, self.ref_shapes, self.shapes) for k in FORWARD_KEYS}

    def tunables(self) -> list[tuple[str, str]]:
        return ([("forward", k) for k in FORWARD_KEYS] + [("elr", k) for k in MATRIX_KEYS]
                + [("ewd", k) for k in MATRIX_KEYS] + [("vector", k) for k in VECTOR_KEYS])

    def with_forward(self, key: str, value: float) -> "MuPMultiplierSet":
        """Set the forward multiplier as seen at the current shapes."""
        tuned = dict(self.tuned)
        tuned[key] = value / width_factor(key, self.ref_shapes, self.shapes)
        return replace(self, tuned=tuned)

    def copy(self) -> "MuPMultiplierSet":
        return replace(self, tuned=dict(self.tuned), matrix_lr=dict(self.matrix_lr),
                       matrix_wd=dict(self.matrix_wd), vector_lr=dict(self.vector_lr))

    def to_dict(self) -> dict:
        return {"forward_tuned": self.tuned, "matrix_lr": self.matrix_lr, "matrix_wd": self.matrix_wd,
                "vector_lr": self.vector_lr, "ref_shapes": asdict(self.ref_shapes), "shapes": asdict(self.shapes)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MuPMultiplierSet":
        return cls(dict(d["forward_tuned"]), dict(d["matrix_lr"]), dict(d["matrix_wd"]), dict(d["vector_lr"]),
                   ModelShapes(**d["ref_shapes"]), ModelShapes(**d["shapes"]))


def scale_multipliers(base: MuPMultiplierSet, d_ref: float | None = None, d: float | None = None,
                      shapes: ModelShapes | None = None) -> MuPMultiplierSet:
    """Transfer to new shapes. Either give full ``shapes`` or move only the width d_ref -> d."""
    if shapes is None:
        if d is None or d_ref is None:
            raise ValueError("need either shapes or (d_ref, d)")
        if d <= 0 or d_ref <= 0:
            raise ValueError("widths must be positive")
        if d_ref != base.shapes.d:
            raise ValueError(f"d_ref={d_ref} does not match the set's current width {base.shapes.d}")
        shapes = replace(base.shapes, d=d)
    out = base.copy()
    out.shapes = shapes
    return out


# -- initialisation --------------------------------------------------------------------
def init_std(mult: float, fan_in: int, gain: float = 1.0) -> float:
    """sigma with mult * sigma * sqrt(fan_in) == gain, so pre-activations are O(gain) at any width."""
    return gain / (mult * math.sqrt(fan_in))


# -- the exact rescaling symmetry -------------------------------------------------------
def apply_symmetry(params: Mapping[str, np.ndarray], mults: MuPMultiplierSet,
                   hypers: Mapping[str, tuple[float, float]], attached: Mapping[str, Sequence[str]],
                   p: float, keys: Iterable[str] | None = None):
    """(m, W, eta, lambda) -> (m/p, p W, p eta, lambda/p) for every multiplier in ``keys``.

    ``attached`` maps a forward multiplier to the parameter names it multiplies and
    ``hypers`` maps parameter name -> (lr multiplier, wd multiplier). Under AdamW with
    eps = 0 the whole trajectory of model outputs is unchanged.
    """
    if p <= 0:
        raise ValueError("p must be positive")
    keys = list(attached) if keys is None else list(keys)
    params = dict(params)
    hypers = dict(hypers)
    out = mults.copy()
    for k in keys:
        out.tuned[k] = mults.tuned[k] / p
        for name in attached[k]:
            params[name] = params[name] * p
            lr, wd = hypers[name]
            hypers[name] = (lr * p, wd / p)
    return params, out, hypers


# -- sensitivity fit and stagewise tuner ------------------------------------------------
def fit_sensitivity(L_minus: float, L_0: float, L_plus: float, p: float) -> tuple[float, float]:
    """Three-point quadratic in log2(m): curvature a and offset of the minimum (log2 units)."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    if not all(math.isfinite(v) for v in (L_minus, L_0, L_plus)):
        raise ValueError("losses must be finite")
    s = math.log2(p)
    a = (L_plus + L_minus - 2.0 * L_0) / (s * s)
    b = (L_plus - L_minus) / (2.0 * s)
    if a == 0.0:
        offset = 0.0 if b == 0.0 else -math.copysign(math.inf, b)
    else:
        offset = -b / a
    return a, offset


@dataclass
class SweepRecord:
    multiplier: str
    kind: str
    p: float
    L_minus: float
    L_0: float
    L_plus: float
    step: int            # -1, 0 or +1 in units of log2 p
    next_value: float
    a: float
    offset: float
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SweepRecord":
        return cls(**json.loads(line))


def _shifted(m: MuPMultiplierSet, kind: str, key: str, factor: float) -> MuPMultiplierSet:
    out = m.copy()
    if kind == "forward":
        out.tuned[key] *= factor
    elif kind == "vector":
        out.vector_lr[key] *= factor
    elif kind == "elr":
        out.matrix_lr[key] *= factor
        out.matrix_wd[key] *= factor
    elif kind == "ewd":
        out.matrix_lr[key] *= factor
        out.matrix_wd[key] /= factor
    else:
        raise ValueError(f"unknown coordinate kind {kind!r}")
    return out


def coordinate_value(m: MuPMultiplierSet, kind: str, key: str) -> float:
    if kind == "forward":
        return m.forward[key]
    if kind == "vector":
        return m.vector_lr[key]
    if kind == "elr":
        return math.sqrt(m.matrix_lr[key] * m.matrix_wd[key])
    if kind == "ewd":
        return math.sqrt(m.matrix_wd[key] / m.matrix_lr[key])
    raise ValueError(f"unknown coordinate kind {kind!r}")


def select_step(L_minus: float, L_0: float, L_plus: float, tol: float = 1e-4) -> int:
    """Argmin of the three; the center wins unless a side improves on it by more than tol."""
    best = min(L_minus, L_plus)
    if L_0 - best <= tol:
        return 0
    return -1 if L_minus < L_plus else 1


def tune_stage(current: MuPMultiplierSet, p: float, loss_oracle: Callable[[MuPMultiplierSet], float],
               coords: Sequence[tuple[str, str]] | None = None, tol: float = 1e-4):
    """One stage of coordinate micro-sweeps; every selected move is applied together."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    coords = current.tunables() if coords is None else list(coords)
    L0 = float(loss_oracle(current))
    if not math.isfinite(L0):
        raise FloatingPointError("baseline loss is not finite")
    nxt = current.copy()
    records = []
    for kind, key in coords:
        losses, status = [], "ok"
        for f in (1.0 / p, p):
            try:
                val = float(loss_oracle(_shifted(current, kind, key, f)))
            except (FloatingPointError, ValueError, ArithmeticError):
                val = math.nan
            losses.append(val)
        Lm, Lp = losses
        if not (math.isfinite(Lm) and math.isfinite(Lp)):
            status, step, a, off = "failed", 0, math.nan, math.nan
        else:
            step = select_step(Lm, L0, Lp, tol)
            a, off = fit_sensitivity(Lm, L0, Lp, p)
        if step:
            nxt = _shifted(nxt, kind, key, p ** step)
        records.append(SweepRecord(key, kind, p, Lm, L0, Lp, step,
                                   coordinate_value(_shifted(current, kind, key, p ** step), kind, key),
                                   a, off, status))
    return nxt, records


def apply_records(m: MuPMultiplierSet, records: Sequence[SweepRecord]) -> MuPMultiplierSet:
    """Replay the moves of a finished stage."""
    out = m
    for r in records:
        if r.status == "ok" and r.step:
            out = _shifted(out, r.kind, r.multiplier, r.p ** r.step)
    return out


def tuning_schedule(n_stages: int, n_coarse: int | None = None) -> list[float]:
    """p = 2 for the early stages, sqrt(2) for the rest."""
    n_coarse = (n_stages + 1) // 2 if n_coarse is None else n_coarse
    return [2.0] * n_coarse + [math.sqrt(2.0)] * (n_stages - n_coarse)


def tune(start: MuPMultiplierSet, loss_oracle, schedule: Sequence[float],
         coords: Sequence[tuple[str, str]] | None = None, tol: float = 1e-4):
    m, history = start, []
    for p in schedule:
        m, recs = tune_stage(m, p, loss_oracle, coords, tol)
        history.append(recs)
    return m, history
