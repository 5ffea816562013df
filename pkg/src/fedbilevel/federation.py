"""Simulated federated execution with periodic averaging and exact accounting."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .algorithms import (
    Algorithm,
    EstimatorState,
    HyperParams,
    StepSchedule,
    bsgm_estimator_step,
    bsgm_init,
    bsgvrm_estimator_step,
    bsgvrm_init,
    local_update,
    samples_per_step,
)
from .numerics import RandomStream
from .problems import BilevelOracle, UnsupportedCapability

DIVERGENCE_LIMIT = 1e6
# stream id reserved for the shared lower-level warm start
INIT_STREAM_ID = 2**63 - 1


class DivergenceError(RuntimeError):
    pass


@dataclass
class DeviceState:
    device_id: int
    x: np.ndarray
    y: np.ndarray
    est: EstimatorState | None
    stream: RandomStream
    samples: int = 0


@dataclass(frozen=True)
class FederationConfig:
    K: int
    T: int
    seed: int
    algorithm: Algorithm
    hp: HyperParams
    schedule: StepSchedule
    L_tilde: float = 1.0
    x0: np.ndarray | None = None
    y0: np.ndarray | None = None
    bytes_per_scalar: int = 8
    count_broadcast: bool = True
    shared_stream: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.bytes_per_scalar < 1:
            raise ValueError("bytes_per_scalar must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))

    @property
    def p(self) -> int:
        return self.hp.p


@dataclass(frozen=True)
class RoundRecord:
    t: int
    max_discrepancy: float
    mean_shift: float


@dataclass
class RunTrace:
    d_x: int
    d_y: int
    L_tilde: float
    t: list[int] = field(default_factory=list)
    eta: list[float] = field(default_factory=list)
    grad_norm_sq: list[float] = field(default_factory=list)
    lower_gap_sq: list[float] = field(default_factory=list)
    running_metric: list[float] = field(default_factory=list)
    samples: list[int] = field(default_factory=list)
    bytes: list[int] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)
    round_records: list[RoundRecord] = field(default_factory=list)

    @property
    def metric(self) -> np.ndarray:
        return np.asarray(self.grad_norm_sq) + self.L_tilde**2 * np.asarray(self.lower_gap_sq)

    @property
    def final_metric(self) -> float:
        return self.running_metric[-1] if self.running_metric else math.nan


def device_stream(seed: int, k: int, shared: bool = False) -> RandomStream:
    return RandomStream(seed, stream_id=0 if shared else k)


def average_and_reset(devices: list[DeviceState]) -> list[DeviceState]:
    """Replace ``u, v, x, y`` on every device by their device average."""
    K = len(devices)

    def mean(get):
        total = get(devices[0]).astype(float, copy=True)
        for d in devices[1:]:
            total += get(d)
        return total / K

    u = mean(lambda d: d.est.u)
    v = mean(lambda d: d.est.v)
    x = mean(lambda d: d.x)
    y = mean(lambda d: d.y)
    return [
        replace(d, x=x.copy(), y=y.copy(), est=replace(d.est, u=u.copy(), v=v.copy())) for d in devices
    ]


def _means(devices):
    K = len(devices)
    out = []
    for get in (lambda d: d.est.u, lambda d: d.est.v, lambda d: d.x, lambda d: d.y):
        total = get(devices[0]).astype(float, copy=True)
        for d in devices[1:]:
            total += get(d)
        out.append(total / K)
    return out


def _round_record(t, before, after) -> RoundRecord:
    pre = _means(before)
    post = _means(after)
    shift = 0.0
    for a, b in zip(pre, post):
        shift = max(shift, float(np.max(np.abs(a - b), initial=0.0)) / max(1.0, float(np.max(np.abs(a), initial=0.0))))
    disc = 0.0
    for d in after[1:]:
        for a, b in zip(
            (d.est.u, d.est.v, d.x, d.y), (after[0].est.u, after[0].est.v, after[0].x, after[0].y)
        ):
            scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
            disc = max(disc, float(np.max(np.abs(a - b), initial=0.0)) / scale)
    return RoundRecord(t, disc, shift)


def warm_start_lower(oracle: BilevelOracle, x0, y0, hp: HyperParams, eta: float, seed: int):
    """Lower-level starting point ``y*(x0)``, exactly or by plain SGD.

    Returns the point and the number of oracle samples spent.
    """
    if oracle.has_exact_lower_solution:
        return oracle.exact_lower_solution(x0), 0
    mu = oracle.smoothness_constants().mu
    n0 = math.ceil(50 / (hp.rho2 * eta * mu))
    stream = RandomStream(seed, stream_id=INIT_STREAM_ID)
    y = np.array(y0, dtype=float)
    for _ in range(n0):
        zeta, stream = oracle.draw_lower(stream)
        y = y - hp.rho2 * eta * oracle.grad_y_g(x0, y, zeta)
    return y, n0


def _check_state(d: DeviceState, t: int):
    for name, v in (("x", d.x), ("y", d.y), ("u", d.est.u), ("v", d.est.v)):
        n = float(np.linalg.norm(v))
        if not n <= DIVERGENCE_LIMIT:
            raise DivergenceError(f"device {d.device_id}: |{name}| = {n:.3g} exceeds {DIVERGENCE_LIMIT:g} at t={t}")


def run(
    cfg: FederationConfig,
    oracle: BilevelOracle,
    observer: Callable[[int, list[DeviceState]], None] | None = None,
) -> RunTrace:
    """Execute ``cfg.T`` iterations on ``cfg.K`` simulated devices.

    Every ``p`` iterations the devices average ``(u, v, x, y)``. The
    optional ``observer`` is called after each iteration with the device
    list (after averaging, when a round happened).
    """
    hp, K, p = cfg.hp, cfg.K, cfg.p
    x0 = np.zeros(oracle.d_x) if cfg.x0 is None else np.array(cfg.x0, dtype=float)
    y0 = np.zeros(oracle.d_y) if cfg.y0 is None else np.array(cfg.y0, dtype=float)
    if x0.shape != (oracle.d_x,) or y0.shape != (oracle.d_y,):
        raise ValueError("initial point dimensions do not match the oracle")
    vr = cfg.algorithm is Algorithm.BSGVRM
    init_samples = 0
    if vr:
        y0, init_samples = warm_start_lower(oracle, x0, y0, hp, cfg.schedule(0), cfg.seed)

    devices = [
        DeviceState(k, x0.copy(), y0.copy(), None, device_stream(cfg.seed, k, cfg.shared_stream), init_samples)
        for k in range(K)
    ]
    exact = oracle.has_exact_hypergradient and oracle.has_exact_lower_solution
    trace = RunTrace(oracle.d_x, oracle.d_y, cfg.L_tilde)
    step_cost = samples_per_step(cfg.algorithm, hp.neumann)
    init_cost = (hp.neumann.samples + 1) * (hp.B if vr else 1)
    round_bytes = K * 2 * (oracle.d_x + oracle.d_y) * cfg.bytes_per_scalar * (2 if cfg.count_broadcast else 1)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def step(d: DeviceState, t: int, eta: float, eta_prev: float) -> DeviceState:
        if t == 0:
            init = bsgvrm_init if vr else bsgm_init
            est, stream = init(d.x, d.y, hp, oracle, d.stream)
            spent = init_cost
        elif vr:
            est, stream = bsgvrm_estimator_step(d.est, d.x, d.y, eta_prev, hp, oracle, d.stream)
            spent = step_cost
        else:
            est, stream = bsgm_estimator_step(d.est, d.x, d.y, eta, hp, oracle, d.stream)
            spent = step_cost
        x, y = local_update(d.x, d.y, est, eta, hp)
        return DeviceState(d.device_id, x, y, est, stream, d.samples + spent)

    running_sum = 0.0
    rounds = 0
    eta_prev = cfg.schedule(0)
    try:
        for t in range(cfg.T):
            eta = cfg.schedule(t)
            if exact:
                xbar, ybar = _mean_xy(devices)
                gap = ybar - oracle.exact_lower_solution(xbar)
                gn = float(np.sum(oracle.exact_hypergradient(xbar) ** 2))
                lg = float(gap @ gap)
            else:
                gn = lg = math.nan
            running_sum += gn + cfg.L_tilde**2 * lg

            if pool is None:
                devices = [step(d, t, eta, eta_prev) for d in devices]
            else:
                devices = list(pool.map(lambda d: step(d, t, eta, eta_prev), devices))
            if (t + 1) % p == 0:
                before = devices
                devices = average_and_reset(devices)
                rounds += 1
                trace.round_records.append(_round_record(t, before, devices))
            for d in devices:
                _check_state(d, t)

            trace.t.append(t)
            trace.eta.append(float(eta))
            trace.grad_norm_sq.append(gn)
            trace.lower_gap_sq.append(lg)
            trace.running_metric.append(running_sum / (t + 1))
            trace.samples.append(devices[0].samples)
            trace.rounds.append(rounds)
            trace.bytes.append(rounds * round_bytes)
            if observer is not None:
                observer(t, devices)
            eta_prev = eta
    finally:
        if pool is not None:
            pool.shutdown()
    return trace


def _mean_xy(devices):
    K = len(devices)
    x = devices[0].x.astype(float, copy=True)
    y = devices[0].y.astype(float, copy=True)
    for d in devices[1:]:
        x += d.x
        y += d.y
    return x / K, y / K


def convergence_metric(trace: RunTrace, L_tilde: float) -> float:
    """Time average of ``|grad Phi(xbar_t)|^2 + L_tilde^2 |ybar_t - y*(xbar_t)|^2``."""
    g = np.asarray(trace.grad_norm_sq, dtype=float)
    h = np.asarray(trace.lower_gap_sq, dtype=float)
    if g.size == 0:
        raise ValueError("empty trace")
    if np.any(np.isnan(g)) or np.any(np.isnan(h)):
        raise UnsupportedCapability("trace has no exact hypergradient / lower-level gap values")
    return float(np.mean(g + L_tilde**2 * h))


@dataclass(frozen=True)
class Accounting:
    samples_per_device: int
    rounds: int
    bytes: int
    upload_bytes: int
    broadcast_bytes: int


def accounting(trace: RunTrace, cfg: FederationConfig) -> Accounting:
    rounds = trace.rounds[-1] if trace.rounds else 0
    per_round = cfg.K * 2 * (trace.d_x + trace.d_y) * cfg.bytes_per_scalar
    up = rounds * per_round
    down = up if cfg.count_broadcast else 0
    return Accounting(
        samples_per_device=trace.samples[-1] if trace.samples else 0,
        rounds=rounds,
        bytes=up + down,
        upload_bytes=up,
        broadcast_bytes=down,
    )


def expected_samples(cfg: FederationConfig, T: int | None = None, warm_start: int = 0) -> int:
    """Closed-form per-device oracle samples after ``T`` iterations."""
    T = cfg.T if T is None else T
    per = cfg.hp.neumann.samples + 1
    if cfg.algorithm is Algorithm.BSGM:
        return per * T
    return warm_start + per * cfg.hp.B + 2 * per * (T - 1)
