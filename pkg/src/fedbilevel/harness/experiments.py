"""Multi-seed runs, sweeps and their CSV output."""

from __future__ import annotations

import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from ..algorithms import Algorithm, Variant
from ..federation import RunTrace, accounting, expected_samples, run
from ..hypergrad import measure_bias
from .config import ConfigError, ExperimentConfig, federation_config, resolve

RUN_COLUMNS = (
    "seed",
    "t",
    "eta",
    "grad_norm_sq",
    "lower_gap_sq",
    "metric",
    "running_metric",
    "samples",
    "bytes",
    "rounds",
)
SWEEP_COLUMNS = (
    "axis",
    "value",
    "T",
    "final_metric",
    "iterations_to_eps",
    "samples_to_eps",
    "rounds_to_eps",
    "speedup",
    "bias",
    "delta_Q",
)
NOT_REACHED = "NA"
AXES = ("K", "p", "Q", "algorithm")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_seed(cfg: ExperimentConfig, seed: int, T: int | None = None) -> RunTrace:
    res = resolve(cfg)
    return run(federation_config(cfg, res, seed, T), res.oracle)


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(workers) as ex:
        # results come back in submission order whatever the completion order
        return list(ex.map(fn, *zip(*jobs)))


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[tuple[int, RunTrace]]:
    seeds = cfg.federation.seeds
    w = cfg.federation.workers if workers is None else workers
    traces = _map(run_seed, [(cfg, s) for s in seeds], w)
    return list(zip(seeds, traces))


def write_run_csv(cfg: ExperimentConfig, results: list[tuple[int, RunTrace]]) -> str:
    """One row per iteration per seed followed by a ``#`` summary block."""
    res = resolve(cfg)
    out = io.StringIO()
    out.write(",".join(RUN_COLUMNS) + "\n")
    for seed, tr in results:
        metric = tr.metric
        for i in range(len(tr.t)):
            row = (
                seed,
                tr.t[i],
                tr.eta[i],
                tr.grad_norm_sq[i],
                tr.lower_gap_sq[i],
                float(metric[i]),
                tr.running_metric[i],
                tr.samples[i],
                tr.bytes[i],
                tr.rounds[i],
            )
            out.write(",".join(_fmt(v) for v in row) + "\n")
    out.write("# summary\n")
    out.write("# seed,final_metric,samples_per_device,rounds,bytes\n")
    finals = []
    for seed, tr in results:
        acc = accounting(tr, federation_config(cfg, res, seed))
        finals.append(tr.final_metric)
        out.write(f"# {seed},{_fmt(tr.final_metric)},{acc.samples_per_device},{acc.rounds},{acc.bytes}\n")
    out.write(f"# mean_final_metric,{_fmt(float(np.mean(finals)))}\n")
    return out.getvalue()


@dataclass(frozen=True)
class EpsilonHit:
    iterations: int | None
    samples: int | None
    rounds: int | None


def seed_averaged_running(traces: list[RunTrace]) -> np.ndarray:
    return np.mean([np.asarray(tr.running_metric) for tr in traces], axis=0)


def first_hit(traces: list[RunTrace], epsilon: float) -> EpsilonHit:
    """First ``t`` where the seed-averaged running metric is ``<= epsilon``.

    The running metric at index ``t`` covers iterates ``0..t``; producing
    iterate ``t`` took ``t`` steps, so samples and rounds are read at ``t-1``.
    """
    avg = seed_averaged_running(traces)
    idx = np.flatnonzero(avg <= epsilon)
    if idx.size == 0:
        return EpsilonHit(None, None, None)
    t = int(idx[0])
    if t == 0:
        return EpsilonHit(0, 0, 0)
    tr = traces[0]
    return EpsilonHit(t, tr.samples[t - 1], tr.rounds[t - 1])


def _parse_algorithm_value(v: str) -> tuple[Algorithm, str | None]:
    name, _, mode = v.partition(":")
    try:
        alg = Algorithm(name.strip())
    except ValueError:
        raise ConfigError(f"sweep.values: unknown algorithm {name!r}") from None
    return alg, (mode.strip() or None)


def sweep_point(cfg: ExperimentConfig, axis: str, value: str) -> ExperimentConfig:
    """Configuration for one swept value."""
    fe, al = cfg.federation, cfg.algorithm
    try:
        if axis == "K":
            return replace(cfg, federation=replace(fe, K=int(value)))
        if axis == "p":
            return replace(cfg, federation=replace(fe, p=int(value)))
        if axis == "Q":
            return replace(cfg, algorithm=replace(al, Q=int(value)))
    except ValueError:
        raise ConfigError(f"sweep.values: {value!r} is not an integer") from None
    if axis == "algorithm":
        alg, mode = _parse_algorithm_value(value)
        new = replace(al, name=alg, variant=None)
        if mode == "manual":
            new = replace(new, hyperparams="manual")
        elif mode is not None:
            try:
                variant = Variant(mode)
            except ValueError:
                raise ConfigError(f"sweep.values: unknown hyperparameter mode {mode!r}") from None
            # theorem settings replace any manual overrides
            new = replace(
                new, hyperparams="theorem", variant=variant, alpha=None, beta=None, rho1=None, rho2=None,
                eta=None, eta_scaling="none",
            )
        return replace(cfg, algorithm=new)
    raise ConfigError(f"sweep.axis: must be one of {', '.join(AXES)}")


def _matched_T(cfg: ExperimentConfig, budget: int) -> int:
    """Largest T whose per-device sample cost stays within ``budget``."""
    res = resolve(cfg)
    fc = federation_config(cfg, res, cfg.federation.seeds[0], T=1)
    lo, hi = 1, max(1, budget)
    if expected_samples(fc, 1) > budget:
        return 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if expected_samples(fc, mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


@dataclass(frozen=True)
class SweepRow:
    value: str
    T: int
    final_metric: float
    hit: EpsilonHit
    speedup: float | None
    bias: float
    delta_Q: float
    wall_time: float


def _bias(cfg: ExperimentConfig, x0: float) -> tuple[float, float]:
    res = resolve(cfg)
    o = res.oracle
    if not (o.has_exact_hypergradient and o.has_exact_lower_solution):
        return math.nan, res.Delta_Q
    return measure_bias(o, np.full(o.d_x, x0), res.neumann, n_draws=0), res.Delta_Q


def run_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: list[str],
    epsilon: float,
    workers: int | None = None,
) -> list[SweepRow]:
    """Run every swept value over all seeds.

    For the algorithm axis the per-device sample budget of the first value
    fixes the horizon of the others.
    """
    if axis not in AXES:
        raise ConfigError(f"sweep.axis: must be one of {', '.join(AXES)}")
    if not values:
        raise ConfigError("sweep.values: empty")
    if not epsilon > 0:
        raise ConfigError("sweep.epsilon: must be positive")
    w = cfg.federation.workers if workers is None else workers
    points = [sweep_point(cfg, axis, v) for v in values]
    horizons = [c.federation.T for c in points]
    if axis == "algorithm":
        res0 = resolve(points[0])
        budget = expected_samples(federation_config(points[0], res0, points[0].federation.seeds[0]))
        horizons = [points[0].federation.T] + [_matched_T(c, budget) for c in points[1:]]

    jobs = [(c, s, T) for c, T in zip(points, horizons) for s in c.federation.seeds]
    flat = _map(_timed_seed, jobs, w)
    rows = []
    i = 0
    for c, v, T in zip(points, values, horizons):
        n = len(c.federation.seeds)
        chunk = flat[i : i + n]
        i += n
        traces = [tr for tr, _ in chunk]
        bias, dq = _bias(c, c.problem.x0)
        rows.append(
            SweepRow(
                value=v,
                T=T,
                final_metric=float(np.mean([tr.final_metric for tr in traces])),
                hit=first_hit(traces, epsilon),
                speedup=None,
                bias=bias,
                delta_Q=dq,
                wall_time=float(sum(el for _, el in chunk)),
            )
        )
    if axis == "K":
        ref = rows[0].hit.iterations
        rows = [
            replace(r, speedup=(ref / r.hit.iterations) if ref and r.hit.iterations else None) for r in rows
        ]
    return rows


def _timed_seed(cfg, seed, T):
    t0 = time.perf_counter()
    tr = run_seed(cfg, seed, T)
    return tr, time.perf_counter() - t0


def write_sweep_csv(axis: str, rows: list[SweepRow], epsilon: float, timing: bool = False) -> str:
    cols = SWEEP_COLUMNS + (("wall_time",) if timing else ())
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    for r in rows:
        vals = [
            axis,
            r.value,
            r.T,
            r.final_metric,
            NOT_REACHED if r.hit.iterations is None else r.hit.iterations,
            NOT_REACHED if r.hit.samples is None else r.hit.samples,
            NOT_REACHED if r.hit.rounds is None else r.hit.rounds,
            NOT_REACHED if r.speedup is None else float(r.speedup),
            r.bias,
            r.delta_Q,
        ]
        if timing:
            vals.append(r.wall_time)
        out.write(",".join(_fmt(v) for v in vals) + "\n")
    out.write(f"# epsilon,{_fmt(float(epsilon))}\n")
    return out.getvalue()
