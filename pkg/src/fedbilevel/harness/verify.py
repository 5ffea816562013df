"""Self-check suite: each invariant is measured and compared to a threshold."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..algorithms import (
    Algorithm,
    DecayingSchedule,
    EstimatorState,
    FixedSchedule,
    HyperParams,
    Variant,
    bsgm_estimator_step,
    bsgm_init,
    check_theorem_constraints,
    theorem_hyperparams,
)
from ..federation import FederationConfig, accounting, device_stream, run
from ..hypergrad import NeumannConfig, derived_constants, expected_hypergradient, measure_bias, neumann_apply
from ..numerics import RandomStream, finite_diff_grad
from ..problems import QuadQuad


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    threshold: float
    passed: bool
    detail: str = ""

    def as_dict(self):
        return asdict(self)


def _problem(noise_std: float = 0.0) -> QuadQuad:
    return QuadQuad.random(10, 10, mu=1.0, L1=2.0, noise_std=noise_std, seed=0)


def check_hypergradient_fd(oracle: QuadQuad, n_points: int = 100) -> Check:
    rng = RandomStream(11, stream_id=1)
    worst = 0.0
    for _ in range(n_points):
        x, rng = rng.gaussian(oracle.d_x, 1.0)
        exact = oracle.exact_hypergradient(x)
        fd = finite_diff_grad(oracle.phi, x)
        worst = max(worst, float(np.linalg.norm(exact - fd) / max(np.linalg.norm(fd), 1e-12)))
    return Check("hypergradient_finite_difference", worst, 1e-5, worst <= 1e-5, f"{n_points} random points")


def check_neumann_contraction(oracle: QuadQuad) -> Check:
    sc = oracle.smoothness_constants()
    theta = 0.9 / sc.L1
    H = oracle.hessian_yy(None, None)
    rng = RandomStream(12, stream_id=1)
    x0 = np.zeros(oracle.d_x)
    y0 = np.zeros(oracle.d_y)
    worst = 0.0
    for Q in range(21):
        cfg = NeumannConfig(theta, Q, sc.L1)
        for _ in range(5):
            w, rng = rng.gaussian(oracle.d_y, 1.0)
            got, _ = neumann_apply(oracle, x0, y0, w, cfg, None)
            bound = (1 - theta * sc.mu) ** (Q + 1) / sc.mu * np.linalg.norm(w)
            worst = max(worst, float(np.linalg.norm(got - np.linalg.solve(H, w)) / bound))
    return Check("neumann_contraction", worst, 1.0, worst <= 1.0, "max error / bound over Q=0..20")


def check_bias(oracle: QuadQuad) -> list[Check]:
    sc = oracle.smoothness_constants()
    theta = 0.9 / sc.L1
    x = RandomStream(13, stream_id=1).gaussian(oracle.d_x, 1.0)[0]
    out = []
    prev = math.inf
    monotone = True
    for Q in range(21):
        cfg = NeumannConfig(theta, Q, sc.L1)
        dq = derived_constants(sc, cfg).Delta_Q
        bias = measure_bias(oracle, x, cfg, n_draws=1, reference=oracle.closed_form_hypergradient)
        if Q in (0, 4, 8):
            out.append(Check(f"bias_bound_Q{Q}", bias, dq, bias <= dq, f"Delta_Q={dq!r}"))
        monotone &= bias <= prev + 1e-12
        prev = bias
    out.append(Check("bias_monotone_in_Q", float(not monotone), 0.0, monotone, "Q=0..20"))
    return out


def check_storm_exactness(oracle: QuadQuad, steps: int = 200) -> Check:
    neumann = NeumannConfig(0.4, 6)
    hp = HyperParams(alpha=1.0, beta=1.0, rho1=0.5, rho2=0.5, p=5, neumann=neumann, B=3)
    cfg = FederationConfig(
        K=2, T=steps, seed=3, algorithm=Algorithm.BSGVRM, hp=hp, schedule=FixedSchedule(0.5),
        x0=np.ones(oracle.d_x),
    )
    worst = [0.0]

    def observe(t, devices):
        for d in devices:
            ref_u = expected_hypergradient(oracle, d.est.prev_x, d.est.prev_y, neumann)
            ref_v = oracle.grad_y_g(d.est.prev_x, d.est.prev_y)
            worst[0] = max(worst[0], float(np.max(np.abs(d.est.u - ref_u))), float(np.max(np.abs(d.est.v - ref_v))))

    run(cfg, oracle, observer=observe)
    return Check("storm_exactness", worst[0], 1e-10, worst[0] <= 1e-10, f"{steps} steps, sigma=0")


def check_consensus(oracle: QuadQuad, steps: int = 400) -> list[Check]:
    neumann = NeumannConfig(0.4, 4)
    hp = HyperParams(alpha=1.0, beta=1.0, rho1=0.5, rho2=0.5, p=3, neumann=neumann)
    cfg = FederationConfig(
        K=4, T=steps, seed=4, algorithm=Algorithm.BSGM, hp=hp, schedule=FixedSchedule(0.1),
        x0=np.ones(oracle.d_x),
    )
    tr = run(cfg, oracle.with_noise(0.5))
    disc = max(r.max_discrepancy for r in tr.round_records)
    shift = max(r.mean_shift for r in tr.round_records)
    acc = accounting(tr, cfg)
    ok_rounds = acc.rounds == steps // 3
    return [
        Check("consensus_after_round", disc, 1e-12, disc <= 1e-12),
        Check("mean_preservation", shift, 1e-12, shift <= 1e-12),
        Check("rounds_equal_T_over_p", float(acc.rounds), float(steps // 3), ok_rounds),
    ]


def check_centralized_equivalence(oracle: QuadQuad, steps: int = 100) -> Check:
    noisy = oracle.with_noise(0.3)
    K = 4
    hp = HyperParams(alpha=1.0, beta=1.0, rho1=0.5, rho2=0.5, p=1, neumann=NeumannConfig(0.4, 3))
    eta = 0.2
    x0 = np.ones(noisy.d_x)
    cfg = FederationConfig(K=K, T=steps, seed=5, algorithm=Algorithm.BSGM, hp=hp, schedule=FixedSchedule(eta), x0=x0)
    fed = []
    run(cfg, noisy, observer=lambda t, ds: fed.append(ds[0].x.copy()))
    ref = centralized_momentum(noisy, hp, eta, x0, np.zeros(noisy.d_y), K, seed=5, steps=steps)
    worst = float(np.max(np.abs(np.array(fed) - ref)))
    return Check("centralized_equivalence_p1", worst, 1e-10, worst <= 1e-10, f"K={K}, {steps} steps")


def centralized_momentum(oracle, hp, eta, x0, y0, K, seed, steps):
    """Single-server momentum loop whose gradients average ``K`` device draws.

    Returns the upper iterate after each step.
    """
    streams = [device_stream(seed, k) for k in range(K)]
    x, y = np.array(x0, dtype=float), np.array(y0, dtype=float)
    u = v = None
    xs = []
    for t in range(steps):
        ests = []
        for k in range(K):
            if t == 0:
                est, streams[k] = bsgm_init(x, y, hp, oracle, streams[k])
            else:
                est, streams[k] = bsgm_estimator_step(EstimatorState(u, v), x, y, eta, hp, oracle, streams[k])
            ests.append(est)
        u = ests[0].u.copy()
        v = ests[0].v.copy()
        for e in ests[1:]:
            u += e.u
            v += e.v
        u /= K
        v /= K
        x = x - hp.rho1 * eta * u
        y = y - hp.rho2 * eta * v
        xs.append(x)
    return np.array(xs)


def check_schedule(oracle: QuadQuad) -> list[Check]:
    sc = oracle.smoothness_constants()
    neumann = NeumannConfig(0.9 / sc.L1, 4, sc.L1)
    consts = derived_constants(sc, neumann)
    hp, sched = theorem_hyperparams(consts, sc, 1, 1, Variant.BSGVRM_THM5, neumann)
    assert isinstance(sched, DecayingSchedule)
    eta0 = sched(0)
    cap = 1 / (200 * consts.L_hat)
    rel = abs(eta0 - cap) / cap
    ts = np.unique(np.concatenate([np.arange(0, 10_001), np.geomspace(1, 1e6, 2000).astype(int)]))
    etas = np.array([sched(int(t)) for t in ts])
    nonincreasing = bool(np.all(np.diff(etas) <= 0))
    worst_mix = float(np.max(hp.alpha * etas**2))
    return [
        Check("decaying_eta0_matches_fixed_cap", rel, 1e-12, rel <= 1e-12, f"eta0={eta0!r}, cap={cap!r}"),
        Check("decaying_eta_nonincreasing", float(not nonincreasing), 0.0, nonincreasing, "t <= 1e6"),
        Check("decaying_alpha_eta_sq_below_1", worst_mix, 1.0, worst_mix < 1.0, "t <= 1e6"),
    ]


def check_theorem_audit(oracle: QuadQuad) -> Check:
    sc = oracle.smoothness_constants()
    neumann = NeumannConfig(0.9 / sc.L1, 5, sc.L1)
    consts = derived_constants(sc, neumann)
    failures = 0
    for variant in Variant:
        hp, sched = theorem_hyperparams(consts, sc, 4, 4, variant, neumann)
        failures += sum(not c.ok for c in check_theorem_constraints(hp, sched, consts, sc, 4, variant))
    return Check("theorem_hyperparams_self_consistent", float(failures), 0.0, failures == 0)


def verify(fault_inject: bool = False) -> list[Check]:
    oracle = _problem()
    if fault_inject:
        oracle = oracle.with_fault()
    checks = [check_hypergradient_fd(oracle), check_neumann_contraction(oracle)]
    checks += check_bias(oracle)
    checks.append(check_storm_exactness(oracle))
    checks += check_consensus(oracle)
    checks.append(check_centralized_equivalence(oracle))
    checks += check_schedule(oracle)
    checks.append(check_theorem_audit(oracle))
    return checks
