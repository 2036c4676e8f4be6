"""Write / forget dynamics of a single SSM head.

Notation: u_i is the raw step (pre-softplus), dtt_i = alpha * softplus(u_i) the effective step,
Abar_i = exp(-exp(A_log) dtt_i), and for s < t

    M_ts = C B dtt_s prod_{i=s+1..t} Abar_i
    log M_ts = log(C B) + log dtt_s - exp(A_log) sum_{i=s+1..t} dtt_i

Raising u_s strengthens the write at s; raising any later u_i, or A_log, speeds forgetting.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import sigmoid_np, softplus_inverse_np, softplus_np


@dataclass(frozen=True)
class WriteForgetInstance:
    A_log: float
    dt_raw: np.ndarray = field(default_factory=lambda: np.zeros(8))
    B: float = 1.0
    C: float = 1.0
    span: int = 8
    alpha: float = 1.0
    eta: float = 0.1

    def __post_init__(self):
        if self.span < 1:
            raise ValueError("span must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        object.__setattr__(self, "dt_raw", np.asarray(self.dt_raw, dtype=np.float64))

    @property
    def dtt(self) -> np.ndarray:
        return self.alpha * softplus_np(self.dt_raw)

    @property
    def abar(self) -> np.ndarray:
        return np.exp(-np.exp(self.A_log) * self.dtt)


def _check_pair(inst: WriteForgetInstance, s: int, t: int):
    if not 0 <= s < t < len(inst.dt_raw):
        raise ValueError(f"need 0 <= s < t < {len(inst.dt_raw)}, got s={s}, t={t}")


def log_M(inst: WriteForgetInstance, s: int, t: int) -> float:
    _check_pair(inst, s, t)
    dtt = inst.dtt
    return float(np.log(abs(inst.C * inst.B)) + np.log(dtt[s]) - np.exp(inst.A_log) * dtt[s + 1:t + 1].sum())


def grad_logM_dt(inst: WriteForgetInstance, s: int, t: int, j: int | None = None) -> float:
    """d log M_ts / d u_j (default j = s, where only the write term is present).

    j = s gives sigmoid(u_s)/softplus(u_s) > 0; s < j <= t gives -exp(A_log) alpha sigmoid(u_j) < 0.
    """
    _check_pair(inst, s, t)
    j = s if j is None else j
    u = inst.dt_raw
    if j == s:
        return float(sigmoid_np(u[s]) / softplus_np(u[s]))
    if s < j <= t:
        return float(-np.exp(inst.A_log) * inst.alpha * sigmoid_np(u[j]))
    return 0.0


def aggregate_dt_gradient(inst: WriteForgetInstance, s: int) -> float:
    """sum over t in (s, s+span] and all j of d log M_ts / d u_j.

    This is the net pressure on a shared shift of every raw step; negative once forgetting dominates.
    """
    total = 0.0
    last = min(s + inst.span, len(inst.dt_raw) - 1)
    for t in range(s + 1, last + 1):
        total += sum(grad_logM_dt(inst, s, t, j) for j in range(s, t + 1))
    return total


def grad_loss_Alog(inst: WriteForgetInstance, upstream: Sequence[float]) -> float:
    """dL/dA_log = -exp(A_log) sum_i dtt_i Abar_i dL/dAbar_i."""
    g = np.asarray(upstream, dtype=np.float64)
    return float(-np.exp(inst.A_log) * np.sum(inst.dtt * inst.abar * g))


def grad_loss_dt(inst: WriteForgetInstance, upstream_dtt: Sequence[float], upstream_abar: Sequence[float]) -> np.ndarray:
    """dL/du_i given dL/d dtt_i and dL/dAbar_i: the write path minus the forget path, both through alpha sigmoid(u_i)."""
    gd = np.asarray(upstream_dtt, dtype=np.float64)
    ga = np.asarray(upstream_abar, dtype=np.float64)
    return inst.alpha * sigmoid_np(inst.dt_raw) * (gd - np.exp(inst.A_log) * inst.abar * ga)


def memory_decay_factor(A_log: float, delta_dt: float) -> float:
    if delta_dt < 0:
        raise ValueError("delta_dt must be non-negative")
    return float(np.exp(-np.exp(A_log) * delta_dt))


def attenuation_lipschitz(alpha: float, A_log: float) -> float:
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return float((1.0 - alpha) + alpha * np.exp(A_log))


def width_eigen_proxy(eta: float, head_count: int, grad_var: float) -> float:
    """Rough largest Jacobian eigenvalue 1 + eta * head_count * grad_var as heads multiply."""
    return 1.0 + eta * head_count * grad_var


# -- linearised feedback with a one-step lag -----------------------------------------------
def companion_matrix(H: np.ndarray, eta: float, alpha: float = 1.0, delay: int = 1) -> np.ndarray:
    """Linear map of the lagged update for theta = (u, A_log).

    theta_{k+1} = theta_k - eta D (H_diag theta_k + H_off theta_{k-1}), D = diag(alpha, 1):
    each coordinate sees its own curvature immediately and the cross-coupling one step late.
    With delay = 0 this is the plain I - eta D H.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (2, 2) or not np.allclose(H, H.T):
        raise ValueError("H must be a symmetric 2x2 matrix")
    D = np.diag([alpha, 1.0])
    Hd = np.diag(np.diag(H))
    Ho = H - Hd
    I = np.eye(2)
    if delay == 0:
        return I - eta * D @ H
    if delay != 1:
        raise ValueError("only delays of 0 or 1 steps are modelled")
    return np.block([[I - eta * D @ Hd, -eta * D @ Ho], [I, np.zeros((2, 2))]])


def feedback_eigen(H: np.ndarray, eta: float, alpha: float = 1.0, delay: int = 1) -> float:
    """Spectral radius of the lagged linearisation; above 1 means the loop is unstable."""
    return float(np.max(np.abs(np.linalg.eigvals(companion_matrix(H, eta, alpha, delay)))))


def critical_eta(H: np.ndarray, etas: Sequence[float], alpha: float = 1.0, delay: int = 1) -> float | None:
    """First eta on the (increasing) grid whose radius exceeds 1, or None."""
    for eta in etas:
        if feedback_eigen(H, eta, alpha, delay) > 1.0:
            return float(eta)
    return None


def eigen_scan(H: np.ndarray, etas: Sequence[float], alphas: Sequence[float], delay: int = 1) -> np.ndarray:
    return np.array([[feedback_eigen(H, e, a, delay) for a in alphas] for e in etas])


# -- nonlinear write/forget simulator ----------------------------------------------------------
@dataclass(frozen=True)
class WriteForgetObjective:
    """l(u, A) = -log dtt + span * exp(A) * dtt + 0.5 (A - a_target)^2 with dtt = alpha softplus(u).

    The first term rewards writing, the second is -log prod Abar over the span (the memory
    lost), and the quadratic anchor keeps A_log from running to -inf. At the stationary point
    span * exp(A) * dtt = 1 and A = a_target - 1.
    """

    span: int = 8
    a_target: float = 1.5
    alpha: float = 1.0

    def dtt(self, u):
        return self.alpha * softplus_np(u)

    def loss(self, u: float, A: float) -> float:
        d = self.dtt(u)
        return float(-np.log(d) + self.span * np.exp(A) * d + 0.5 * (A - self.a_target) ** 2)

    def grad_u(self, u: float, A: float) -> float:
        sig, sp = sigmoid_np(u), softplus_np(u)
        return float(-sig / sp + self.span * np.exp(A) * self.alpha * sig)

    def grad_A(self, u: float, A: float) -> float:
        return float(self.span * np.exp(A) * self.dtt(u) + (A - self.a_target))

    def stationary(self) -> tuple[float, float]:
        A = self.a_target - 1.0
        sp = 1.0 / (self.alpha * self.span * np.exp(A))
        return float(softplus_inverse_np(np.float64(sp))), A

    def hessian(self) -> np.ndarray:
        """Curvature at the stationary point: [[q^2, q], [q, 2]] with q = sigmoid(u*) / softplus(u*)."""
        u, _ = self.stationary()
        q = float(sigmoid_np(u) / softplus_np(u))
        return np.array([[q * q, q], [q, 2.0]])


class Trajectory(NamedTuple):
    dt_raw: np.ndarray
    A_log: np.ndarray
    loss: np.ndarray
    amplitude_ratio: float
    diverged: bool


def simulate_write_forget(objective: WriteForgetObjective, steps: int, eta: float,
                          init_offset: tuple[float, float] = (1e-3, 0.0), noise: float = 0.0,
                          seed: int = 0) -> Trajectory:
    """Gradient descent on (u, A_log) where each coordinate sees the other's value one step late.

    amplitude_ratio compares the peak deviation from the stationary point in the last quarter
    of the run to that in the first quarter (< 1: oscillation dies out).
    """
    if steps < 4:
        raise ValueError("need at least 4 steps")
    rng = np.random.default_rng(seed)
    u_star, A_star = objective.stationary()
    u = np.empty(steps + 1)
    A = np.empty(steps + 1)
    L = np.empty(steps + 1)
    u[0], A[0] = u_star + init_offset[0], A_star + init_offset[1]
    u_prev, A_prev = u[0], A[0]
    L[0] = objective.loss(u[0], A[0])
    n = steps + 1
    diverged = False
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(steps):
            gu = objective.grad_u(u[k], A_prev)
            gA = objective.grad_A(u_prev, A[k])
            if noise:
                gu += noise * rng.standard_normal()
                gA += noise * rng.standard_normal()
            u_prev, A_prev = u[k], A[k]
            u[k + 1] = u[k] - eta * gu
            A[k + 1] = A[k] - eta * gA
            L[k + 1] = objective.loss(u[k + 1], A[k + 1])
            if not (np.isfinite(u[k + 1]) and np.isfinite(A[k + 1]) and np.isfinite(L[k + 1])
                    and abs(u[k + 1]) < 1e6 and abs(A[k + 1]) < 1e3):
                diverged = True
                n = k + 2
                break
    u, A, L = u[:n], A[:n], L[:n]
    dev = np.abs(u - u_star) + np.abs(A - A_star)
    q = max(1, len(dev) // 4)
    head = float(np.max(dev[:q]))
    tail = float(np.max(dev[-q:]))
    ratio = np.inf if diverged else (tail / head if head > 0 else 0.0)
    return Trajectory(u, A, L, ratio, diverged)


def critical_alpha(objective: WriteForgetObjective, eta: float, lo: float = 1e-3, hi: float = 1.0,
                   iters: int = 60) -> float:
    """Largest alpha whose stationary-point linearisation is stable at ``eta`` (bisection)."""
    radius = lambda a: feedback_eigen(replace(objective, alpha=a).hessian(), eta)
    if radius(lo) >= 1.0:
        raise ValueError("no stable alpha in range")
    if radius(hi) < 1.0:
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if radius(mid) < 1.0 else (lo, mid)
    return lo
