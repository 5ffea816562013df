"""Experiment configuration: an INI file with [problem], [federation], [algorithm], [output].

Every key is optional; defaults are listed in ``DEFAULTS`` and in the README.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..algorithms import (
    Algorithm,
    FixedSchedule,
    HyperParams,
    Variant,
    theorem_hyperparams,
)
from ..federation import FederationConfig
from ..hypergrad import NeumannConfig, derived_constants, neumann_for_target
from ..problems import BilevelOracle, QuadQuad, RidgeHyper, load_ridge_csv


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending ``section.key``."""


DEFAULTS = {
    "problem": {
        "family": "quadquad",
        "d_x": "10",
        "d_y": "10",
        "mu": "1.0",
        "L1": "2.0",
        "noise_std": "0.1",
        "upper_noise_std": "",
        "lam": "1.0",
        "B_norm": "1.0",
        "b_scale": "1.0",
        "y_c_scale": "1.0",
        "radius": "10.0",
        "problem_seed": "0",
        "csv_path": "",
        "val_ratio": "0.3",
        "n_train": "200",
        "n_val": "100",
        "data_noise": "0.5",
        "x0": "1.0",
        "y0": "0.0",
    },
    "federation": {
        "K": "4",
        "p": "4",
        "T": "1000",
        "B": "8",
        "seeds": "0,1,2,3,4",
        "workers": "1",
        "bytes_per_scalar": "8",
        "count_broadcast": "true",
        "shared_stream": "false",
    },
    "algorithm": {
        "name": "LocalBSGM",
        "hyperparams": "theorem",
        "variant": "",
        "theta_frac": "0.9",
        "Q": "",
        "epsilon": "1e-3",
        "alpha": "",
        "beta": "",
        "rho1": "",
        "rho2": "",
        "eta": "",
        "eta_scaling": "none",
    },
    "output": {"path": "trace.csv"},
}


@dataclass(frozen=True)
class ProblemSpec:
    family: str = "quadquad"
    d_x: int = 10
    d_y: int = 10
    mu: float = 1.0
    L1: float = 2.0
    noise_std: float = 0.1
    upper_noise_std: float | None = None
    lam: float = 1.0
    B_norm: float = 1.0
    b_scale: float = 1.0
    y_c_scale: float = 1.0
    radius: float = 10.0
    problem_seed: int = 0
    csv_path: str | None = None
    val_ratio: float = 0.3
    n_train: int = 200
    n_val: int = 100
    data_noise: float = 0.5
    x0: float = 1.0
    y0: float = 0.0


@dataclass(frozen=True)
class FederationSpec:
    K: int = 4
    p: int = 4
    T: int = 1000
    B: int = 8
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    workers: int = 1
    bytes_per_scalar: int = 8
    count_broadcast: bool = True
    shared_stream: bool = False


@dataclass(frozen=True)
class AlgorithmSpec:
    name: Algorithm = Algorithm.BSGM
    hyperparams: str = "theorem"
    variant: Variant | None = None
    theta_frac: float = 0.9
    Q: int | None = None
    epsilon: float = 1e-3
    alpha: float | None = None
    beta: float | None = None
    rho1: float | None = None
    rho2: float | None = None
    eta: float | None = None
    eta_scaling: str = "none"

    @property
    def resolved_variant(self) -> Variant:
        if self.variant is not None:
            return self.variant
        return Variant.BSGM_THM1 if self.name is Algorithm.BSGM else Variant.BSGVRM_THM3


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    federation: FederationSpec = field(default_factory=FederationSpec)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    output: str = "trace.csv"


def _get(cp, section, key, conv, optional=False):
    raw = cp.get(section, key, fallback=DEFAULTS[section][key]).strip()
    if optional and raw == "":
        return None
    try:
        return conv(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from None


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _seeds(raw: str) -> tuple[int, ...]:
    vals = tuple(int(s) for s in raw.split(",") if s.strip())
    if not vals:
        raise ValueError("empty seed list")
    return vals


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"{sec}: unknown section")
        for key in cp[sec]:
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"{sec}.{key}: unknown key")
    for sec in DEFAULTS:
        if not cp.has_section(sec):
            cp.add_section(sec)

    g = lambda k, c, o=False: _get(cp, "problem", k, c, o)  # noqa: E731
    problem = ProblemSpec(
        family=g("family", str).lower(),
        d_x=g("d_x", int),
        d_y=g("d_y", int),
        mu=g("mu", float),
        L1=g("L1", float),
        noise_std=g("noise_std", float),
        upper_noise_std=g("upper_noise_std", float, True),
        lam=g("lam", float),
        B_norm=g("B_norm", float),
        b_scale=g("b_scale", float),
        y_c_scale=g("y_c_scale", float),
        radius=g("radius", float),
        problem_seed=g("problem_seed", int),
        csv_path=g("csv_path", str, True),
        val_ratio=g("val_ratio", float),
        n_train=g("n_train", int),
        n_val=g("n_val", int),
        data_noise=g("data_noise", float),
        x0=g("x0", float),
        y0=g("y0", float),
    )
    g = lambda k, c, o=False: _get(cp, "federation", k, c, o)  # noqa: E731
    federation = FederationSpec(
        K=g("K", int),
        p=g("p", int),
        T=g("T", int),
        B=g("B", int),
        seeds=g("seeds", _seeds),
        workers=g("workers", int),
        bytes_per_scalar=g("bytes_per_scalar", int),
        count_broadcast=g("count_broadcast", _bool),
        shared_stream=g("shared_stream", _bool),
    )
    g = lambda k, c, o=False: _get(cp, "algorithm", k, c, o)  # noqa: E731
    algorithm = AlgorithmSpec(
        name=g("name", Algorithm),
        hyperparams=g("hyperparams", str).lower(),
        variant=g("variant", Variant, True),
        theta_frac=g("theta_frac", float),
        Q=g("Q", int, True),
        epsilon=g("epsilon", float),
        alpha=g("alpha", float, True),
        beta=g("beta", float, True),
        rho1=g("rho1", float, True),
        rho2=g("rho2", float, True),
        eta=g("eta", float, True),
        eta_scaling=g("eta_scaling", str).lower(),
    )
    cfg = ExperimentConfig(problem, federation, algorithm, _get(cp, "output", "path", str))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    return parse_config(text)


def validate(cfg: ExperimentConfig) -> None:
    pr, fe, al = cfg.problem, cfg.federation, cfg.algorithm

    def need(cond, where, msg):
        if not cond:
            raise ConfigError(f"{where}: {msg}")

    need(pr.family in ("quadquad", "ridgehyper"), "problem.family", "must be quadquad or ridgehyper")
    need(pr.d_x >= 1, "problem.d_x", "must be >= 1")
    need(pr.d_y >= 1, "problem.d_y", "must be >= 1")
    need(0 < pr.mu <= pr.L1, "problem.mu", "need 0 < mu <= L1")
    need(pr.noise_std >= 0, "problem.noise_std", "must be >= 0")
    need(pr.upper_noise_std is None or pr.upper_noise_std >= 0, "problem.upper_noise_std", "must be >= 0")
    need(pr.radius > 0, "problem.radius", "must be positive")
    need(0 < pr.val_ratio < 1, "problem.val_ratio", "must lie in (0, 1)")
    need(pr.n_train >= 1 and pr.n_val >= 1, "problem.n_train", "splits must be non-empty")
    need(fe.K >= 1, "federation.K", "must be >= 1")
    need(fe.p >= 1, "federation.p", "must be >= 1")
    need(fe.T >= 1, "federation.T", "must be >= 1")
    need(fe.B >= 1, "federation.B", "must be >= 1")
    need(fe.workers >= 1, "federation.workers", "must be >= 1")
    need(fe.bytes_per_scalar >= 1, "federation.bytes_per_scalar", "must be >= 1")
    need(al.hyperparams in ("theorem", "manual"), "algorithm.hyperparams", "must be theorem or manual")
    need(0 < al.theta_frac < 1, "algorithm.theta_frac", "must lie in (0, 1)")
    need(al.Q is None or al.Q >= 0, "algorithm.Q", "must be >= 0")
    need(al.epsilon > 0, "algorithm.epsilon", "must be positive")
    need(al.eta_scaling in ("none", "linear"), "algorithm.eta_scaling", "must be none or linear")
    for key in ("alpha", "beta", "rho1", "rho2", "eta"):
        v = getattr(al, key)
        need(v is None or v > 0, f"algorithm.{key}", "must be positive")
    if al.hyperparams == "manual":
        for key in ("alpha", "beta", "rho1", "rho2", "eta"):
            need(getattr(al, key) is not None, f"algorithm.{key}", "required when hyperparams = manual")
    if al.variant is not None:
        ok = (al.variant is Variant.BSGM_THM1) == (al.name is Algorithm.BSGM)
        need(ok, "algorithm.variant", f"{al.variant.value} does not belong to {al.name.value}")


def build_oracle(spec: ProblemSpec) -> BilevelOracle:
    if spec.family == "quadquad":
        return QuadQuad.random(
            spec.d_x,
            spec.d_y,
            mu=spec.mu,
            L1=spec.L1,
            noise_std=spec.noise_std,
            upper_noise_std=spec.upper_noise_std,
            seed=spec.problem_seed,
            lam=spec.lam,
            B_norm=spec.B_norm,
            b_scale=spec.b_scale,
            y_c_scale=spec.y_c_scale,
            radius=spec.radius,
        )
    if spec.csv_path:
        return load_ridge_csv(spec.csv_path, val_ratio=spec.val_ratio, seed=spec.problem_seed, radius=spec.radius)
    return RidgeHyper.synthetic(
        n_train=spec.n_train,
        n_val=spec.n_val,
        d=spec.d_x,
        noise=spec.data_noise,
        seed=spec.problem_seed,
        radius=spec.radius,
    )


@dataclass(frozen=True)
class Resolved:
    """Everything needed to launch runs of one configuration."""

    oracle: BilevelOracle
    neumann: NeumannConfig
    hp: HyperParams
    schedule: object
    L_tilde: float
    Delta_Q: float


def resolve(cfg: ExperimentConfig, oracle: BilevelOracle | None = None) -> Resolved:
    """Build the oracle and the hyperparameters a configuration asks for."""
    oracle = build_oracle(cfg.problem) if oracle is None else oracle
    al, fe = cfg.algorithm, cfg.federation
    sc = oracle.smoothness_constants()
    if al.Q is None:
        neumann = neumann_for_target(sc, al.epsilon, al.theta_frac)
    else:
        neumann = NeumannConfig(al.theta_frac / sc.L1, al.Q, sc.L1)
    consts = derived_constants(sc, neumann)
    if al.hyperparams == "theorem":
        hp, schedule = theorem_hyperparams(consts, sc, fe.K, fe.p, al.resolved_variant, neumann, fe.B)
    else:
        hp, schedule = HyperParams(1.0, 1.0, 1.0, 1.0, fe.p, neumann, fe.B), FixedSchedule(al.eta)
    hp = replace(
        hp,
        **{k: getattr(al, k) for k in ("alpha", "beta", "rho1", "rho2") if getattr(al, k) is not None},
    )
    if al.eta is not None:
        schedule = FixedSchedule(al.eta)
    if al.eta_scaling == "linear":
        if not isinstance(schedule, FixedSchedule):
            raise ConfigError("algorithm.eta_scaling: linear scaling needs a fixed step size")
        schedule = FixedSchedule(schedule.eta * fe.K)
    return Resolved(oracle, neumann, hp, schedule, consts.L_tilde, consts.Delta_Q)


def federation_config(cfg: ExperimentConfig, res: Resolved, seed: int, T: int | None = None) -> FederationConfig:
    pr, fe = cfg.problem, cfg.federation
    return FederationConfig(
        K=fe.K,
        T=fe.T if T is None else T,
        seed=seed,
        algorithm=cfg.algorithm.name,
        hp=res.hp,
        schedule=res.schedule,
        L_tilde=res.L_tilde,
        x0=np.full(res.oracle.d_x, pr.x0),
        y0=np.full(res.oracle.d_y, pr.y0),
        bytes_per_scalar=fe.bytes_per_scalar,
        count_broadcast=fe.count_broadcast,
        shared_stream=fe.shared_stream,
    )
