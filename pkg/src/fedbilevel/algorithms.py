"""Momentum estimators, local updates, step schedules and theorem-derived settings.

Two per-device estimators are provided:

* ``bsgm`` keeps moving averages ``u``/``v`` of the stochastic hypergradient
  and lower-level gradient, weighted by ``alpha*eta`` and ``beta*eta``.
* ``bsgvrm`` is the STORM-style recursive estimator: the previous estimate
  is corrected by the difference of two evaluations, at the current and the
  previous iterate, that share one sample. Mixing weights are
  ``alpha*eta_{t-1}**2`` and ``beta*eta_{t-1}**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .hypergrad import DerivedConstants, NeumannConfig, stochastic_hypergradient
from .numerics import RandomStream
from .problems import BilevelOracle, SmoothnessConstants


class Algorithm(str, Enum):
    BSGM = "LocalBSGM"
    BSGVRM = "LocalBSGVRM"


class Variant(str, Enum):
    BSGM_THM1 = "BSGM-Thm1"
    BSGVRM_THM3 = "BSGVRM-Thm3"
    BSGVRM_THM5 = "BSGVRM-Thm5"


class StepSizeError(ValueError):
    """A mixing weight left the interval [0, 1]."""


@dataclass(frozen=True)
class HyperParams:
    alpha: float
    beta: float
    rho1: float
    rho2: float
    p: int
    neumann: NeumannConfig
    B: int = 1

    def __post_init__(self):
        for name in ("alpha", "beta", "rho1", "rho2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"p must be a positive integer, got {self.p}")
        if int(self.B) != self.B or self.B < 1:
            raise ValueError(f"B must be a positive integer, got {self.B}")


@dataclass(frozen=True)
class FixedSchedule:
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")

    def __call__(self, t: int) -> float:
        return self.eta


@dataclass(frozen=True)
class DecayingSchedule:
    """``eta_t = (K^{2/3}/L_hat) / (w_t + t)^{1/3}`` with the offset ``w_t`` below."""

    K: int
    p: int
    L_hat: float
    rho1: float
    L_Phi: float

    def w(self, t: int) -> float:
        return max(
            2.0,
            200.0**3 * self.K**2 * self.p**3 - t,
            8 * self.rho1**3 * self.L_Phi**3 * self.K**2 / self.L_hat**3 - t,
        )

    def __call__(self, t: int) -> float:
        return float((self.K ** (2 / 3) / self.L_hat) / np.cbrt(self.w(t) + t))


StepSchedule = FixedSchedule | DecayingSchedule


def schedule_eta(s: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"iteration index must be >= 0, got {t}")
    return float(s(t))


@dataclass(frozen=True)
class EstimatorState:
    u: np.ndarray
    v: np.ndarray
    prev_x: np.ndarray | None = None
    prev_y: np.ndarray | None = None


def samples_per_step(algorithm: Algorithm, neumann: NeumannConfig) -> int:
    """Oracle samples one device spends in a non-initial step."""
    per_eval = neumann.samples + 1
    return per_eval if Algorithm(algorithm) is Algorithm.BSGM else 2 * per_eval


def _draw_pair(oracle, x, y, cfg, stream):
    hg, stream = stochastic_hypergradient(oracle, x, y, cfg, stream)
    zeta, stream = oracle.draw_lower(stream)
    return hg, oracle.grad_y_g(x, y, zeta), stream


def bsgm_init(x, y, hp: HyperParams, oracle: BilevelOracle, stream: RandomStream):
    u, v, stream = _draw_pair(oracle, x, y, hp.neumann, stream)
    return EstimatorState(u, v), stream


def bsgvrm_init(x, y, hp: HyperParams, oracle: BilevelOracle, stream: RandomStream):
    """Batch-of-``hp.B`` averages at the starting point."""
    u = np.zeros(oracle.d_x)
    v = np.zeros(oracle.d_y)
    for _ in range(hp.B):
        du, dv, stream = _draw_pair(oracle, x, y, hp.neumann, stream)
        u += du
        v += dv
    return EstimatorState(u / hp.B, v / hp.B, np.array(x, dtype=float), np.array(y, dtype=float)), stream


def _weight(name: str, w: float) -> float:
    if not 0 <= w <= 1:
        raise StepSizeError(f"mixing weight {name} = {w} outside [0, 1]")
    return w


def bsgm_estimator_step(
    state: EstimatorState, x, y, eta: float, hp: HyperParams, oracle: BilevelOracle, stream: RandomStream
) -> tuple[EstimatorState, RandomStream]:
    a = _weight("alpha*eta", hp.alpha * eta)
    b = _weight("beta*eta", hp.beta * eta)
    hg, gy, stream = _draw_pair(oracle, x, y, hp.neumann, stream)
    return EstimatorState((1 - a) * state.u + a * hg, (1 - b) * state.v + b * gy), stream


def bsgvrm_estimator_step(
    state: EstimatorState, x, y, eta_prev: float, hp: HyperParams, oracle: BilevelOracle, stream: RandomStream
) -> tuple[EstimatorState, RandomStream]:
    if state.prev_x is None or state.prev_y is None:
        raise ValueError("variance-reduced step needs the previous iterate in the state")
    a = _weight("alpha*eta^2", hp.alpha * eta_prev**2)
    b = _weight("beta*eta^2", hp.beta * eta_prev**2)
    # both evaluations replay the samples drawn from the same stream position
    hg_new, gy_new, after = _draw_pair(oracle, x, y, hp.neumann, stream)
    hg_old, gy_old, _ = _draw_pair(oracle, state.prev_x, state.prev_y, hp.neumann, stream)
    u = (1 - a) * (state.u - hg_old) + hg_new
    v = (1 - b) * (state.v - gy_old) + gy_new
    return EstimatorState(u, v, np.array(x, dtype=float), np.array(y, dtype=float)), after


def local_update(x, y, state: EstimatorState, eta: float, hp: HyperParams):
    return x - hp.rho1 * eta * state.u, y - hp.rho2 * eta * state.v


# -- theorem-driven settings ---------------------------------------------

STRICT_BACKOFF = 0.99


def theorem_hyperparams(
    consts: DerivedConstants,
    sc: SmoothnessConstants,
    K: int,
    p: int,
    variant: Variant,
    neumann: NeumannConfig,
    B: int = 1,
) -> tuple[HyperParams, StepSchedule]:
    """Largest settings satisfying every inequality of the chosen theorem.

    Strict upper bounds are met at ``STRICT_BACKOFF`` times the bound.
    """
    variant = Variant(variant)
    mu, L1 = sc.mu, sc.L1
    Lh, Lt, LP = consts.L_hat, consts.L_tilde, consts.L_Phi

    if variant is Variant.BSGM_THM1:
        alpha = beta = 1.0
        rho2 = min(
            (6 * Lt**2 / mu) / (4 * Lh**2 / alpha**2 + 400 * L1**2 * Lt**2 / (3 * beta**2 * mu**2)),
            1 / (6 * L1),
        )
        rho1 = min(
            3 * rho2 * mu**2 / (50 * L1 * Lt),
            0.25 / math.sqrt(4 * Lh**2 / alpha**2 + 500 * L1**2 * Lt**2 / (3 * beta**2 * mu**2)),
        )
        eta = STRICT_BACKOFF * min(_thm1_eta_caps(alpha, beta, rho1, rho2, p, LP, Lh))
        hp = HyperParams(alpha, beta, rho1, rho2, p, neumann, B)
        return hp, FixedSchedule(eta)

    if variant is Variant.BSGVRM_THM3:
        alpha = beta = Lh**2 / K
        S = _thm3_sum(alpha, beta, K, L1, Lt, Lh, mu)
        rho2 = min(1 / (6 * L1), (15 * Lt**2 / mu) / S, 10.0)
        rho1 = min(rho2 * mu**2 / (20 * Lt * L1), 0.5 / math.sqrt(S), 10.0)
        eta = min(1 / math.sqrt(alpha), 1 / math.sqrt(beta), 1 / (200 * p * Lh))
        return HyperParams(alpha, beta, rho1, rho2, p, neumann, B), FixedSchedule(eta)

    alpha = beta = Lh**2 / (3 * p * K**2) + Lh**2 / K
    rho2 = min(15 * mu / 1174, 1 / (6 * L1), 10.0)
    rho1 = min(rho2 * mu**2 / (60 * L1**2), mu / (100 * Lt), 10.0)
    return HyperParams(alpha, beta, rho1, rho2, p, neumann, B), DecayingSchedule(K, p, Lh, rho1, LP)


def _thm1_eta_caps(alpha, beta, rho1, rho2, p, L_Phi, L_hat):
    return (
        1 / alpha,
        1 / beta,
        1 / (2 * rho1 * L_Phi),
        1 / (3 * p * (alpha**2 + beta**2) ** 0.25 * (rho1**2 + rho2**2) ** 0.25 * math.sqrt(L_hat)),
        1.0,
    )


def _thm3_sum(alpha, beta, K, L1, Lt, Lh, mu):
    a = 16 * Lh**2 / (alpha * K) + 2000 * L1**2 * Lt**2 / (3 * beta * mu**2 * K)
    return a + (12 / 25) * (4 + 1000 * Lt**2 / (3 * mu**2) + a)


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    value: float
    bound: float
    strict: bool
    ok: bool


def _le(name, value, bound, strict=False, rtol=1e-12):
    ok = value < bound if strict else value <= bound * (1 + rtol)
    return ConstraintCheck(name, float(value), float(bound), strict, bool(ok))


def check_theorem_constraints(
    hp: HyperParams,
    schedule: StepSchedule,
    consts: DerivedConstants,
    sc: SmoothnessConstants,
    K: int,
    variant: Variant,
) -> list[ConstraintCheck]:
    """Re-evaluate every inequality of a theorem for the given settings."""
    variant = Variant(variant)
    mu, L1 = sc.mu, sc.L1
    Lh, Lt, LP = consts.L_hat, consts.L_tilde, consts.L_Phi
    a, b, r1, r2, p = hp.alpha, hp.beta, hp.rho1, hp.rho2, hp.p
    out = [_le("theta < 1/L1", hp.neumann.theta, 1 / L1, strict=True)]

    if variant is Variant.BSGM_THM1:
        eta = schedule(0)
        out += [
            _le("rho1 <= 3 rho2 mu^2/(50 L1 Lt)", r1, 3 * r2 * mu**2 / (50 * L1 * Lt)),
            _le(
                "rho1 <= 1/4 / sqrt(...)",
                r1,
                0.25 / math.sqrt(4 * Lh**2 / a**2 + 500 * L1**2 * Lt**2 / (3 * b**2 * mu**2)),
            ),
            _le(
                "rho2 <= 6 Lt^2/mu / (...)",
                r2,
                (6 * Lt**2 / mu) / (4 * Lh**2 / a**2 + 400 * L1**2 * Lt**2 / (3 * b**2 * mu**2)),
            ),
            _le("rho2 <= 1/(6 L1)", r2, 1 / (6 * L1)),
        ]
        names = ("1/alpha", "1/beta", "1/(2 rho1 L_Phi)", "communication-period cap", "1")
        for n, cap in zip(names, _thm1_eta_caps(a, b, r1, r2, p, LP, Lh)):
            out.append(_le(f"eta < {n}", eta, cap, strict=True))
        return out

    if variant is Variant.BSGVRM_THM3:
        eta = schedule(0)
        S = _thm3_sum(a, b, K, L1, Lt, Lh, mu)
        out += [
            _le("alpha <= L_hat^2/K", a, Lh**2 / K),
            _le("beta <= L_hat^2/K", b, Lh**2 / K),
            _le("eta <= 1/sqrt(alpha)", eta, 1 / math.sqrt(a)),
            _le("eta <= 1/sqrt(beta)", eta, 1 / math.sqrt(b)),
            _le("eta <= 1/(200 p L_hat)", eta, 1 / (200 * p * Lh)),
            _le("rho1 <= rho2 mu^2/(20 Lt L1)", r1, r2 * mu**2 / (20 * Lt * L1)),
            _le("rho1 <= 1/2 / sqrt(...)", r1, 0.5 / math.sqrt(S)),
            _le("rho1 <= 10", r1, 10.0),
            _le("rho2 <= 1/(6 L1)", r2, 1 / (6 * L1)),
            _le("rho2 <= 15 Lt^2/mu / (...)", r2, (15 * Lt**2 / mu) / S),
            _le("rho2 <= 10", r2, 10.0),
        ]
        return out

    target = Lh**2 / (3 * p * K**2) + Lh**2 / K
    out += [
        ConstraintCheck("alpha = L_hat^2/(3pK^2) + L_hat^2/K", a, target, False, math.isclose(a, target, rel_tol=1e-12)),
        ConstraintCheck("beta = L_hat^2/(3pK^2) + L_hat^2/K", b, target, False, math.isclose(b, target, rel_tol=1e-12)),
        _le("rho1 <= rho2 mu^2/(60 L1^2)", r1, r2 * mu**2 / (60 * L1**2)),
        _le("rho1 <= mu/(100 Lt)", r1, mu / (100 * Lt)),
        _le("rho1 <= 10", r1, 10.0),
        _le("rho2 <= 15 mu/1174", r2, 15 * mu / 1174),
        _le("rho2 <= 1/(6 L1)", r2, 1 / (6 * L1)),
        _le("rho2 <= 10", r2, 10.0),
    ]
    return out
