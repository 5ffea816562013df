"""Neumann-series hypergradient estimator and the derived smoothness constants."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream
from .problems import BilevelOracle, SmoothnessConstants, UnsupportedCapability


@dataclass(frozen=True)
class NeumannConfig:
    """Step ``theta`` and number of Hessian samples ``Q`` of the truncated series.

    When ``L1`` is given the contraction condition ``0 < theta*L1 < 1`` is
    enforced.
    """

    theta: float
    Q: int
    L1: float | None = None

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if int(self.Q) != self.Q or self.Q < 0:
            raise ValueError(f"Q must be a non-negative integer, got {self.Q}")
        if self.L1 is not None and not self.theta * self.L1 < 1:
            raise ValueError(f"theta*L1 = {self.theta * self.L1} must be < 1")

    @property
    def samples(self) -> int:
        """Oracle samples consumed by one stochastic hypergradient."""
        return self.Q + 2


@dataclass(frozen=True)
class DerivedConstants:
    L_Phi: float
    L_hat: float
    L_tilde: float
    G: float
    Delta_Q: float


def derived_constants(sc: SmoothnessConstants, cfg: NeumannConfig) -> DerivedConstants:
    mu, L0, L1, L21, L22, sigma = sc.mu, sc.L0, sc.L1, sc.L21, sc.L22, sc.sigma
    th, Q = cfg.theta, cfg.Q
    L_Phi = (
        L1
        + (2 * L1**2 + L21 * L0**2) / mu
        + (L22 * L1 * L0 + L1**3 + L21 * L0 * L1) / mu**2
        + L22 * L1**2 * L0 / mu**3
    )
    L_hat_sq = (
        2 * L1**2
        + 4 * th**2 * L0**2 * L21**2 * (Q + 1) ** 2
        + 8 * th**2 * L1**4 * (Q + 1) ** 2
        + 2 * th**4 * L0**2 * L1**2 * L22**2 * Q**2 * (Q + 1) ** 2
    )
    L_tilde = L1 + L1**2 / mu + L0 * L21 / mu + L0 * L1 * L22 / mu**2
    G = (
        2 * L0**2
        + 12 * th**2 * L0**2 * L1**2 * (Q + 1) ** 2
        + 4 * th**4 * L0**2 * L1**2 * (Q + 2) * (Q + 1) ** 2 * sigma**2
    )
    Delta_Q = (1 - th * mu) ** (Q + 1) * L0 * L1 / mu
    return DerivedConstants(L_Phi=L_Phi, L_hat=math.sqrt(L_hat_sq), L_tilde=L_tilde, G=G, Delta_Q=Delta_Q)


def neumann_for_target(sc: SmoothnessConstants, epsilon: float, theta_frac: float = 0.9) -> NeumannConfig:
    """``theta = theta_frac/L1`` and the smallest ``Q`` with ``Delta_Q <= epsilon/10``."""
    if not 0 < theta_frac < 1:
        raise ValueError("theta_frac must lie in (0, 1)")
    theta = theta_frac / sc.L1
    rate = 1 - theta * sc.mu
    target = (epsilon / 10) * sc.mu / (sc.L0 * sc.L1)
    if rate <= 0 or target >= 1:
        Q = 0
    else:
        Q = max(0, math.ceil(math.log(target) / math.log(rate)) - 1)
    return NeumannConfig(theta=theta, Q=Q, L1=sc.L1)


def neumann_apply(
    oracle: BilevelOracle,
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    cfg: NeumannConfig,
    stream: RandomStream | None,
) -> tuple[np.ndarray, RandomStream | None]:
    """Apply the truncated Neumann inverse-Hessian surrogate to ``w``.

    Draws ``Q`` lower-level samples and uses one Hessian-vector product per
    sample. With ``stream=None`` the expected Hessian is used throughout,
    which gives the exact expectation of the estimator since the samples
    are independent.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (oracle.d_y,):
        raise ValueError(f"w has shape {w.shape}, expected ({oracle.d_y},)")
    samples = []
    for _ in range(cfg.Q):
        if stream is None:
            samples.append(None)
        else:
            zeta, stream = oracle.draw_lower(stream)
            samples.append(zeta)
    s = w.copy()
    acc = w.copy()
    for zeta in reversed(samples):
        s = s - cfg.theta * oracle.hvp_yy_g(x, y, s, zeta)
        acc += s
    return cfg.theta * acc, stream


def stochastic_hypergradient(
    oracle: BilevelOracle,
    x: np.ndarray,
    y: np.ndarray,
    cfg: NeumannConfig,
    stream: RandomStream | None,
) -> tuple[np.ndarray, RandomStream | None]:
    """One draw of the Neumann hypergradient estimator.

    Uses one upper sample for both upper gradients, one lower sample for the
    mixed partial and ``Q`` further lower samples inside the series, so the
    call costs ``cfg.samples`` oracle samples. Calling again with the same
    ``stream`` replays the same samples.
    """
    if stream is None:
        xi = zeta = None
    else:
        xi, stream = oracle.draw_upper(stream)
        zeta, stream = oracle.draw_lower(stream)
    gx = oracle.grad_x_f(x, y, xi)
    gy = oracle.grad_y_f(x, y, xi)
    hv, stream = neumann_apply(oracle, x, y, gy, cfg, stream)
    return gx - oracle.jvp_xy_g(x, y, hv, zeta), stream


def expected_hypergradient(oracle: BilevelOracle, x, y, cfg: NeumannConfig) -> np.ndarray:
    return stochastic_hypergradient(oracle, x, y, cfg, None)[0]


def measure_bias(
    oracle: BilevelOracle,
    x: np.ndarray,
    cfg: NeumannConfig,
    n_draws: int,
    stream: RandomStream | None = None,
    reference=None,
) -> float:
    """``|mean of n_draws estimates at (x, y*(x)) - true hypergradient|``.

    ``n_draws=0`` evaluates the estimator's exact expectation instead of
    sampling. ``reference`` overrides the oracle's exact hypergradient.
    """
    if not (oracle.has_exact_hypergradient and oracle.has_exact_lower_solution):
        raise UnsupportedCapability("bias measurement needs exact y* and hypergradient")
    x = np.asarray(x, dtype=float)
    y = oracle.exact_lower_solution(x)
    if n_draws == 0:
        est = expected_hypergradient(oracle, x, y, cfg)
    else:
        if stream is None:
            stream = RandomStream(0, stream_id=0)
        total = np.zeros(oracle.d_x)
        for _ in range(n_draws):
            g, stream = stochastic_hypergradient(oracle, x, y, cfg, stream)
            total += g
        est = total / n_draws
    truth = oracle.exact_hypergradient(x) if reference is None else reference(x)
    return float(np.linalg.norm(est - truth))
