"""Scaling sweeps over r: stationary deviation size, workload drift and
fluid-scale convergence of the simulated chain."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateRegressionError, UnsupportedExperimentError
from .fluid import FluidState, drain_time, integrate_fluid
from .model import DualVariables, Network, compute_duals, solve_spp
from .priority import EquilibriumPoint, PriorityOrder, check_assumption3
from .rng import UniformStream
from .simulator import (Engine, SimConfig, SystemState, batch_statistics, equilibrium_rounded,
                        estimate_stationary, settle)


@dataclass
class ScalingConfig:
    r_values: list[int]
    epsilon: float = 0.25
    horizon_multiplier: float = 100.0
    warmup_fraction: float = 0.1
    replications: int = 10
    base_seed: int = 0
    num_batches: int = 10
    tail_constant: float = 1.0
    workers: int = 1

    def __post_init__(self):
        self.r_values = [int(r) for r in self.r_values]
        if any(r <= 0 for r in self.r_values) or any(b <= a for a, b in zip(self.r_values, self.r_values[1:])):
            raise ValueError("r_values must be increasing positive integers")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 1/2)")
        if not self.horizon_multiplier > 0:
            raise ValueError("horizon_multiplier must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.replications < 1:
            raise ValueError("replications must be positive")

    def horizon(self, r: int) -> float:
        return self.horizon_multiplier * math.log(r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")  # results do not depend on it
        return d


@dataclass
class ReplicationSummary:
    r: int
    replication: int
    mean_normF: float
    ci_halfwidth: float
    mean_W: float
    mean_l1F: float
    tail_fraction: float


@dataclass
class ScalingResult:
    config: ScalingConfig
    rows: list[ReplicationSummary]
    mean_norm: dict[int, float] = field(default_factory=dict)
    half_width: dict[int, float] = field(default_factory=dict)
    scaled_median: dict[int, float] = field(default_factory=dict)
    slope: float = float("nan")
    intercept: float = float("nan")
    slope_stderr: float = float("nan")

    def __post_init__(self):
        self.summarize()

    def summarize(self) -> None:
        """Recompute every aggregate from the per-replication rows."""
        self.mean_norm, self.half_width, self.scaled_median = {}, {}, {}
        expo = 0.5 + self.config.epsilon
        for r in self.config.r_values:
            vals = np.array([row.mean_normF for row in self.rows if row.r == r])
            if len(vals) == 0:
                continue
            self.mean_norm[r] = float(vals.mean())
            self.half_width[r] = float(batch_statistics(vals)[1]) if len(vals) > 1 else float("nan")
            self.scaled_median[r] = float(np.median(vals / r ** expo))
        if len(self.mean_norm) >= 2:
            fit = fit_tightness_exponent(self)
            self.slope, self.intercept, self.slope_stderr = fit["slope"], fit["intercept"], fit["stderr"]

    def scaled_nonincreasing(self) -> bool:
        m = [self.scaled_median[r] for r in sorted(self.scaled_median)]
        return all(b <= a for a, b in zip(m, m[1:]))

    def tail_probabilities(self) -> dict[int, float]:
        """Mean fraction of time with |F| above tail_constant * r^(1/2+eps)."""
        return {r: float(np.mean([row.tail_fraction for row in self.rows if row.r == r]))
                for r in self.mean_norm}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "replication", "mean_normF", "ci_halfwidth", "mean_W"])
            for row in self.rows:
                w.writerow([row.r, row.replication, repr(row.mean_normF), repr(row.ci_halfwidth), repr(row.mean_W)])

    def summary(self, net: Network) -> dict:
        return {
            "inputs": {"network": net.to_dict(), "config": self.config.to_dict()},
            "mean_normF": {str(r): v for r, v in self.mean_norm.items()},
            "ci_halfwidth": {str(r): v for r, v in self.half_width.items()},
            "scaled_median": {str(r): v for r, v in self.scaled_median.items()},
            "scaled_nonincreasing": self.scaled_nonincreasing(),
            "tail_probability": {str(r): v for r, v in self.tail_probabilities().items()},
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_stderr": self.slope_stderr,
        }

    def write_json(self, path, net: Network) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(net), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _require_stationary(net: Network, po: PriorityOrder, eq: EquilibriumPoint) -> DualVariables:
    rho = solve_spp(net).rho
    if rho >= 1:
        raise UnsupportedExperimentError(f"rho = {rho:.6g} >= 1: the system is not stable")
    ok, why = check_assumption3(net, eq, po)
    if not ok:
        raise UnsupportedExperimentError(f"equilibrium does not use every activity: {why}")
    return compute_duals(net)


def _replication(args) -> ReplicationSummary:
    net, po, eq, duals, cfg, r, rep = args
    horizon = cfg.horizon(r)
    sim = SimConfig(seed=cfg.base_seed, horizon=horizon, warmup=cfg.warmup_fraction * horizon,
                    stream_key=(1, r, rep))
    est = estimate_stationary(net, po, eq, sim, r, cfg.num_batches, duals=duals,
                              tail_threshold=cfg.tail_constant * r ** (0.5 + cfg.epsilon))
    return ReplicationSummary(r, rep, est.means["norm_F"], est.half_widths["norm_F"], est.means["W"],
                              est.means["l1_F"], est.means["tail_fraction"])


def default_horizon_multiplier(net: Network, po: PriorityOrder, r_min: int, K: float = 3.0,
                               eps: float = 1e-3) -> float:
    """Smallest multiplier whose horizon at ``r_min`` covers 20 measured fluid drain times."""
    return 20.0 * drain_time(K, eps, net, po).drain_time / math.log(r_min)


def run_scaling_sweep(net: Network, po: PriorityOrder, eq: EquilibriumPoint, cfg: ScalingConfig) -> ScalingResult:
    """Stationary E|F^r| for every r and replication, from the rounded equilibrium."""
    duals = _require_stationary(net, po, eq)
    jobs = [(net, po, eq, duals, cfg, r, rep) for r in cfg.r_values for rep in range(cfg.replications)]
    workers = max(1, int(cfg.workers))
    if workers == 1:
        rows = [_replication(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_replication, jobs))
    return ScalingResult(cfg, rows)


def fit_tightness_exponent(res: ScalingResult | dict) -> dict:
    """OLS of log E|F^r| on log r. Accepts a result or a plain {r: mean} mapping."""
    means = res.mean_norm if isinstance(res, ScalingResult) else res
    rs = np.array(sorted(means), float)
    if len(rs) < 2 or np.ptp(rs) == 0:
        raise DegenerateRegressionError("need at least two distinct r values")
    x = np.log(rs)
    y = np.log(np.array([means[k] for k in sorted(means)], float))
    a = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(a, y, rcond=None)
    n = len(x)
    if n > 2:
        resid = y - (slope * x + intercept)
        s2 = float(resid @ resid) / (n - 2)
        stderr = math.sqrt(s2 / float(((x - x.mean()) ** 2).sum()))
    else:
        stderr = float("nan")
    return {"slope": float(slope), "intercept": float(intercept), "stderr": stderr}


@dataclass
class DriftEstimate:
    r: int
    window: float
    initial_W: float
    drift: float
    half_width: float
    samples: np.ndarray

    @property
    def negative(self) -> bool:
        """Drift below zero with the stated confidence."""
        return self.drift + self.half_width < 0

    def to_dict(self) -> dict:
        return {"r": self.r, "window": self.window, "initial_W": self.initial_W, "drift": self.drift,
                "half_width": self.half_width, "negative": self.negative,
                "samples": [float(x) for x in self.samples]}


def _fluid_workload(state: SystemState, net: Network, duals: DualVariables) -> float:
    x = list(state.q)
    for k, (i, _) in enumerate(net.activities):
        x[i] += state.psi[k]
    return float(np.dot(duals.workloads, x)) / state.r


def workload_start(net: Network, po: PriorityOrder, eq: EquilibriumPoint, duals: DualVariables, r: int,
                   level: float | None) -> SystemState:
    """Rounded equilibrium, with the queue of the highest-workload class padded up to ``level``."""
    state = equilibrium_rounded(net, po, eq, r)
    if level is None:
        return state
    i = int(np.argmax(duals.workloads))
    gap = level - _fluid_workload(state, net, duals)
    if gap > 0:
        state.q[i] += int(round(gap * r / duals.workloads[i]))
    return settle(state, net, po)


def lyapunov_drift_check(net: Network, po: PriorityOrder, eq: EquilibriumPoint, duals: DualVariables, r: int,
                         window: float, level: float | None, replications: int = 50, base_seed: int = 0,
                         level_confidence: float = 0.95) -> DriftEstimate:
    """Estimate E[W(T) - W(0)] for the fluid-scaled workload W = sum_i nu_i x_i / r."""
    if solve_spp(net).rho >= 1:
        raise UnsupportedExperimentError("rho >= 1: the workload has no downward drift")
    start = workload_start(net, po, eq, duals, r, level)
    w0 = _fluid_workload(start, net, duals)
    out = np.empty(replications)
    for rep in range(replications):
        state = start.copy()
        Engine(net, po, eq, state, UniformStream(base_seed, (2, r, rep))).advance(window)
        out[rep] = _fluid_workload(state, net, duals) - w0
    mean, hw = batch_statistics(out, level_confidence)
    return DriftEstimate(r, window, w0, float(mean), float(hw), out)


@dataclass
class FluidLimitRow:
    r: int
    seed: int
    sup_dist: float


def fluid_limit_distance(net: Network, po: PriorityOrder, eq: EquilibriumPoint, r_values, seeds,
                         horizon: float = 10.0, dt: float = 0.01, base_seed: int = 0,
                         initial: FluidState | None = None) -> list[FluidLimitRow]:
    """Sup over a time grid of |state/r - fluid solution|, per r and seed.

    The simulated system starts at round(r * initial) and the fluid model at
    ``initial`` (default: empty).
    """
    if initial is None:
        initial = FluidState(np.zeros(net.num_activities), np.zeros(net.num_classes))
    step = dt / 10
    traj = integrate_fluid(initial, net, po, horizon, step=step, record_every=10, eq=eq)
    fluid = np.hstack([traj.psi, traj.q])
    rows = []
    for r in r_values:
        for seed in seeds:
            state = settle(SystemState(int(r), [int(round(x * r)) for x in initial.psi],
                                       [int(round(x * r)) for x in initial.q]), net, po)
            eng = Engine(net, po, eq, state, UniformStream(base_seed, (4, int(r), int(seed))))
            worst = 0.0
            for n, t in enumerate(traj.times):
                eng.advance(float(t))
                diff = np.array(state.psi + state.q, float) / r - fluid[n]
                worst = max(worst, float(np.linalg.norm(diff)))
            rows.append(FluidLimitRow(int(r), int(seed), worst))
    return rows


def median_by_r(rows, column: str = "sup_dist") -> dict[int, float]:
    rs = sorted({row.r for row in rows})
    return {r: float(np.median([getattr(row, column) for row in rows if row.r == r])) for r in rs}


def available_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
