"""Optimizer, effective LR / WD, schedules, the noisy quadratic toy model, DP throughput."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np
from scipy.signal import lfilter


# -- AdamW ----------------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                              self.step, self.beta1, self.beta2, self.eps)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               hypers: Mapping[str, tuple[float, float]], eta: float, lam: float,
               state: OptimizerState) -> dict[str, np.ndarray]:
    """One decoupled-decay Adam step with bias correction; returns new arrays, advances ``state``.

    W <- W - eta*lr*A - eta*lr*lam*wd*W with A = mhat / (sqrt(vhat) + eps); A = 0 where vhat = 0.
    """
    if eta < 0 or lam < 0:
        raise ValueError("eta and lambda must be non-negative")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat, vhat = m / c1, v / c2
        denom = np.sqrt(vhat) + state.eps
        A = np.divide(mhat, denom, out=np.zeros_like(mhat), where=denom > 0)
        lr, wd = hypers[name]
        out[name] = w - (eta * lr) * A - (eta * lr) * (lam * wd) * w
    state.step = t
    return out


# -- effective learning rate and weight decay ------------------------------------------------
def elr_ewd(eta: float, lam: float) -> tuple[float, float]:
    if eta <= 0 or lam <= 0:
        raise ValueError("eta and lambda must be positive")
    return math.sqrt(eta * lam), math.sqrt(lam / eta)


def elr_ewd_inverse(eta_eff: float, lam_eff: float) -> tuple[float, float]:
    if eta_eff <= 0 or lam_eff <= 0:
        raise ValueError("effective values must be positive")
    return eta_eff / lam_eff, eta_eff * lam_eff


# d(log eta_eff, log lam_eff) / d(log eta, log lam)
ELR_EWD_LOG_JACOBIAN = np.array([[0.5, 0.5], [-0.5, 0.5]])


def log_orthogonality() -> float:
    """Dot product of the two rows; zero means the coordinates move independently."""
    return float(ELR_EWD_LOG_JACOBIAN[0] @ ELR_EWD_LOG_JACOBIAN[1])


def batch_scaled_lr(eta_ref: float, b_ref: float, b: float) -> float:
    if b <= 0 or b_ref <= 0:
        raise ValueError("batch sizes must be positive")
    return eta_ref * math.sqrt(b / b_ref)


# -- schedules ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RampupSpec:
    b_start: float
    b_end: float
    duration_tokens: float = 0.0
    batch_scaling: bool = True
    micro_batch: int | None = None   # round b to multiples of this when set

    def batch_at(self, t: float) -> float:
        if self.duration_tokens > 0 and t < self.duration_tokens:
            b = self.b_start + (self.b_end - self.b_start) * t / self.duration_tokens
        else:
            b = self.b_end
        if self.micro_batch:
            b = max(self.micro_batch, round(b / self.micro_batch) * self.micro_batch)
        return float(b)


@dataclass(frozen=True)
class ScheduleSpec:
    eta0: float
    lam0: float
    warmup_tokens: float = 0.0
    rampup: RampupSpec | None = None
    stable_tokens: float = math.inf
    decay_tokens: float = 0.0
    decay_factor: float = 8.0
    power_mode: str = "none"        # none | PS | EPS
    t0: float = 1.0
    batch: float = 1.0              # constant batch when there is no rampup

    def __post_init__(self):
        if min(self.warmup_tokens, self.stable_tokens, self.decay_tokens) < 0:
            raise ValueError("durations must be non-negative")
        if self.decay_factor <= 1:
            raise ValueError("decay factor must exceed 1")
        if self.power_mode not in ("none", "PS", "EPS"):
            raise ValueError(f"unknown power mode {self.power_mode!r}")
        if self.power_mode != "none" and self.t0 <= 0:
            raise ValueError("t0 must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.stable_tokens):
            d["stable_tokens"] = None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScheduleSpec":
        d = dict(d)
        if d.get("stable_tokens") is None:
            d["stable_tokens"] = math.inf
        if d.get("rampup") is not None:
            d["rampup"] = RampupSpec(**d["rampup"])
        return cls(**d)


def _power(t: float, spec: ScheduleSpec) -> tuple[float, float]:
    if spec.power_mode == "none" or t <= spec.t0:
        return 1.0, 1.0
    r = spec.t0 / t
    if spec.power_mode == "PS":
        return math.sqrt(r), 1.0
    q = r ** 0.25
    return q, q


def _pre_decay(t: float, spec: ScheduleSpec) -> tuple[float, float, float]:
    warm = min(1.0, t / spec.warmup_tokens) if spec.warmup_tokens > 0 else 1.0
    pe, pl = _power(t, spec)
    if spec.rampup is not None:
        b = spec.rampup.batch_at(t)
        scale = math.sqrt(b / spec.rampup.b_end) if spec.rampup.batch_scaling else 1.0
    else:
        b, scale = spec.batch, 1.0
    return spec.eta0 * warm * pe * scale, spec.lam0 * pl, b


def schedule_at(tokens_seen: float, spec: ScheduleSpec) -> tuple[float, float, float]:
    """(eta_t, lambda_t, b_t). The decay phase shrinks eta exponentially by decay_factor."""
    if tokens_seen < 0:
        raise ValueError("tokens_seen must be non-negative")
    t_dec = spec.warmup_tokens + spec.stable_tokens
    if tokens_seen <= t_dec or spec.decay_tokens == 0 and math.isinf(t_dec):
        return _pre_decay(tokens_seen, spec)
    eta_start, _, _ = _pre_decay(t_dec, spec)
    _, lam, b = _pre_decay(tokens_seen, spec)
    frac = 1.0 if spec.decay_tokens == 0 else min(1.0, (tokens_seen - t_dec) / spec.decay_tokens)
    return eta_start * spec.decay_factor ** (-frac), lam, b


def noise_level(loss_before_decay: float, loss_after_decay: float) -> float:
    """Loss removed by annealing; a proxy for the gradient-noise floor."""
    return loss_before_decay - loss_after_decay


# -- noisy quadratic toy model --------------------------------------------------------------
@dataclass(frozen=True)
class ToyModelSpec:
    h: float
    x_star: float
    sigma: float
    eta: float
    lam: float
    T: int = 100_000
    seed: int = 0
    x0: float = 0.0
    burn_in: float = 0.5    # fraction of steps discarded before averaging

    def small_step(self, limit: float = 0.1) -> bool:
        return self.eta * self.lam < limit and self.eta * self.h < limit


class ToyMoments(NamedTuple):
    x_inf: float
    x2_inf: float
    x2_simplified: float


class ToySimulation(NamedTuple):
    mean: float
    second_moment: float
    stationary: bool


def toy_stationary_moments(spec: ToyModelSpec) -> ToyMoments:
    """Exact stationary mean and second moment of x_{t+1} = x_t - eta(h(x_t - x*) + xi_t) - eta lam x_t."""
    h, lam, eta = spec.h, spec.lam, spec.eta
    den = (lam + h) * (2.0 - eta * lam - eta * h)
    if not den > 0:
        raise ValueError("stationary moments need (lam + h)(2 - eta lam - eta h) > 0")
    x_inf = h * spec.x_star / (h + lam)
    x2 = eta * spec.sigma ** 2 / den + x_inf ** 2
    simplified = 0.5 * (eta / lam) * (spec.sigma ** 2 + 2.0 * (h * spec.x_star) ** 2 / (eta * lam)) if lam > 0 else math.inf
    return ToyMoments(x_inf, x2, simplified)


def toy_trajectory(spec: ToyModelSpec) -> np.ndarray:
    """x_1..x_T as an AR(1) filter over the noisy forcing."""
    rng = np.random.default_rng(spec.seed)
    a = 1.0 - spec.eta * (spec.h + spec.lam)
    forcing = spec.eta * spec.h * spec.x_star - spec.eta * spec.sigma * rng.standard_normal(spec.T)
    x, _ = lfilter([1.0], [1.0, -a], forcing, zi=[a * spec.x0])
    bad = np.flatnonzero(~(np.abs(x) <= 1e12))
    if bad.size:
        raise FloatingPointError(f"toy model diverged at step {int(bad[0]) + 1}")
    return x


def toy_simulate(spec: ToyModelSpec) -> ToySimulation:
    x = toy_trajectory(spec)
    tail = x[int(spec.burn_in * spec.T):]
    m2 = tail * tail
    half = len(tail) // 2
    # correlation time of the AR(1) process sets the effective sample count
    tau = max(1.0, 1.0 / max(spec.eta * (spec.h + spec.lam), 1e-300))
    n_eff = max(1.0, half / (2 * tau))
    se = math.sqrt(2.0 / n_eff) * max(float(m2.mean()), 1e-300)
    stationary = abs(float(m2[:half].mean() - m2[half:].mean())) < 5.0 * se
    return ToySimulation(float(tail.mean()), float(m2.mean()), bool(stationary))


# -- data-parallel throughput ----------------------------------------------------------------
def dp_throughput(B_g: int, N_dp: int, B_mu: int, t_mu: float,
                  t_sync_fn: Callable[[int], float] | float = 0.0) -> float:
    """Tokens (or samples) per unit time for one optimizer step split over N_dp replicas."""
    if min(B_g, N_dp, B_mu) < 1:
        raise ValueError("batch sizes and replica count must be positive")
    if B_g % (N_dp * B_mu):
        raise ValueError(f"global batch {B_g} is not divisible by N_dp*B_mu = {N_dp * B_mu}")
    t_sync = t_sync_fn(N_dp) if callable(t_sync_fn) else float(t_sync_fn)
    accum = B_g // (N_dp * B_mu)
    return B_g / (accum * t_mu + t_sync)
