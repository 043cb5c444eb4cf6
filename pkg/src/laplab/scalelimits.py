"""Hydrodynamic and local-fluid limit models around the LAP equilibrium."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import Assumption3Error, LapError, NonDecayingSpectrumError
from .fluid import PriorityFlow
from .model import Network
from .priority import EquilibriumPoint, PriorityOrder, check_assumption3, compute_equilibrium, lowest_pool
from .rng import UniformStream
from .simulator import Engine, SystemState, pool_capacity, settle


@dataclass
class DeviationState:
    """Centered deviations: u_ij = psi_ij - psi*_ij, w_i = queue."""

    u: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, float)
        self.w = np.asarray(self.w, float)

    def z(self, net: Network) -> np.ndarray:
        a_cls, _ = net.incidence()
        return self.w + a_cls @ self.u

    def vector(self) -> np.ndarray:
        return np.concatenate([self.u, self.w])

    @classmethod
    def zero(cls, net: Network) -> "DeviationState":
        return cls(np.zeros(net.num_activities), np.zeros(net.num_classes))


def check_deviation(dev: DeviationState, net: Network, po: PriorityOrder, tol: float = 1e-9) -> list[str]:
    problems = []
    if np.any(dev.w < -tol):
        problems.append("negative queue component")
    low = lowest_pool(net, po)
    occ = np.zeros(net.num_pools)
    for k, (_, j) in enumerate(net.activities):
        occ[j] += dev.u[k]
    for j in range(net.num_pools):
        if j != low and occ[j] > tol:
            problems.append(f"pool {j + 1} occupancy above its equilibrium level")
    return problems


def reduced_map(z, net: Network, po: PriorityOrder) -> np.ndarray:
    """L': the occupancy deviations c with sum_j c_ij = z_i for every class and
    sum_i c_ij = 0 for every pool but the lowest-priority one.

    Solved by peeling leaves: any class, or any constrained pool, with a single
    undetermined activity fixes that activity.
    """
    z = np.asarray(z, float)
    low = lowest_pool(net, po)
    E = net.num_activities
    c = [None] * E
    cls_edges = {i: [k for k, (a, _) in enumerate(net.activities) if a == i] for i in range(net.num_classes)}
    pool_edges = {j: [k for k, (_, b) in enumerate(net.activities) if b == j] for j in range(net.num_pools) if j != low}
    solved = 0
    while solved < E:
        progress = False
        for i, ks in cls_edges.items():
            open_ = [k for k in ks if c[k] is None]
            if len(open_) == 1:
                c[open_[0]] = z[i] - sum(c[k] for k in ks if c[k] is not None)
                solved += 1
                progress = True
        for j, ks in pool_edges.items():
            open_ = [k for k in ks if c[k] is None]
            if len(open_) == 1:
                c[open_[0]] = -sum(c[k] for k in ks if c[k] is not None)
                solved += 1
                progress = True
        if not progress:
            raise LapError("singular system in map L (activity graph is not a tree)")
    return np.array(c, float)


def map_L(dev: DeviationState, net: Network, po: PriorityOrder) -> DeviationState:
    """The frozen hydrodynamic state reached from ``dev``: queues emptied into
    occupancies, all pools but the lowest-priority one back at equilibrium level."""
    return DeviationState(reduced_map(dev.z(net), net, po), np.zeros(net.num_classes))


@dataclass
class LinearMaps:
    L: np.ndarray  # (E + I) x (E + I), acts on (u, w)
    L_reduced: np.ndarray  # E x I, z -> c
    B: np.ndarray  # I x I, dz/dt = -B z
    activities: list = field(default_factory=list)
    num_classes: int = 0

    def to_dict(self) -> dict:
        acts = [f"{i + 1},{j + 1}" for i, j in self.activities]
        cls = [str(i + 1) for i in range(self.num_classes)]
        return {
            "L": {"rows": [f"u{a}" for a in acts] + [f"w{c}" for c in cls],
                  "cols": [f"u{a}" for a in acts] + [f"w{c}" for c in cls], "data": self.L.tolist()},
            "L_reduced": {"rows": [f"c{a}" for a in acts], "cols": [f"z{c}" for c in cls],
                          "data": self.L_reduced.tolist()},
            "B": {"rows": [f"z{c}" for c in cls], "cols": [f"z{c}" for c in cls], "data": self.B.tolist()},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def lfm_matrix(net: Network, po: PriorityOrder) -> LinearMaps:
    eq = compute_equilibrium(net, po, strict=False)
    ok, why = check_assumption3(net, eq, po)
    if not ok:
        raise Assumption3Error(why)
    E, I = net.num_activities, net.num_classes
    lp = np.column_stack([reduced_map(np.eye(I)[i], net, po) for i in range(I)])
    a_cls, _ = net.incidence()
    big = np.zeros((E + I, E + I))
    big[:E, :E] = lp @ a_cls
    big[:E, E:] = lp
    rates = a_cls * np.array(net.service_rates)[None, :]
    return LinearMaps(big, lp, rates @ lp, list(net.activities), I)


@dataclass
class DecayConstants:
    c1: float  # from eigenbasis conditioning
    c2: float
    c1_measured: float  # sup_t |exp(-Bt)| e^{c2 t} on a grid
    eigenvalues: np.ndarray


def decay_constants(maps: LinearMaps, margin: float = 0.01) -> DecayConstants:
    vals, vecs = np.linalg.eig(maps.B)
    lo = float(np.min(vals.real))
    if lo <= 0:
        raise NonDecayingSpectrumError(f"B has an eigenvalue with real part {lo:.3g} <= 0")
    c2 = (1.0 - margin) * lo
    cond = float(np.linalg.cond(vecs))
    # transient growth of a non-normal exp(-Bt) happens on the 1/lo time scale
    ts = np.linspace(0.0, 30.0 / lo, 3001)
    with np.errstate(divide="ignore"):
        logs = [math.log(max(np.linalg.norm(expm(-maps.B * t), 2), 1e-300)) + c2 * t for t in ts]
    measured = math.exp(max(logs))
    c1 = max(1.0, cond) if math.isfinite(cond) and cond < 1e8 else max(1.0, measured)
    return DecayConstants(c1, c2, max(1.0, measured), vals)


@dataclass
class LfmTrajectory:
    times: np.ndarray
    x: np.ndarray  # (n, I)
    psi: np.ndarray  # (n, E), L'(x)
    q: np.ndarray  # zeros

    def write_csv(self, path, net: Network) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(net.num_classes)]
                       + [f"psi_{i + 1}_{j + 1}" for i, j in net.activities])
            for n, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.x[n]]
                           + [repr(float(v)) for v in self.psi[n]])


def integrate_lfm(initial: DeviationState, maps: LinearMaps, horizon: float, net: Network,
                  dt: float = 0.01, method: str = "expm", rk_step: float = 1e-3) -> LfmTrajectory:
    """Project ``initial`` with L, then solve dx/dt = -B x on [0, horizon]."""
    x0 = initial.z(net)
    n = int(round(horizon / dt))
    times = np.linspace(0.0, n * dt, n + 1)
    if method == "expm":
        xs = np.array([expm(-maps.B * t) @ x0 for t in times])
    elif method == "rk4":
        xs = _rk4_linear(-maps.B, x0[:, None], dt, n, rk_step)[:, :, 0]
    else:
        raise ValueError(f"unknown method {method!r}")
    psi = xs @ maps.L_reduced.T
    return LfmTrajectory(times, xs, psi, np.zeros_like(xs))


def _rk4_linear(a: np.ndarray, x0: np.ndarray, dt: float, n: int, h: float) -> np.ndarray:
    """RK4 for dx/dt = a x with several columns at once; output every ``dt``."""
    sub = max(1, int(round(dt / h)))
    h = dt / sub
    # one RK4 step of a linear system is multiplication by a fixed polynomial in a
    ah = a * h
    eye = np.eye(len(a))
    ah2 = ah @ ah
    p = eye + ah + ah2 / 2 + ah2 @ ah / 6 + ah2 @ ah2 / 24
    out = np.empty((n + 1,) + x0.shape)
    out[0] = x0
    x = x0
    for m in range(n):
        for _ in range(sub):
            x = p @ x
        out[m + 1] = x
    return out


@dataclass
class HydroTrajectory:
    times: np.ndarray
    u: np.ndarray
    w: np.ndarray

    def x(self, net: Network) -> np.ndarray:
        a_cls, _ = net.incidence()
        return self.w + self.u @ a_cls.T

    def terminal(self) -> DeviationState:
        return DeviationState(self.u[-1], self.w[-1])

    def write_csv(self, path, net: Network) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"u_{i + 1}_{j + 1}" for i, j in net.activities]
                       + [f"w_{i + 1}" for i in range(net.num_classes)])
            for n, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.u[n]]
                           + [repr(float(v)) for v in self.w[n]])


def _hydro_flow(net: Network, po: PriorityOrder, eq: EquilibriumPoint) -> PriorityFlow:
    low = lowest_pool(net, po)
    cap = [math.inf if j == low else 0.0 for j in range(net.num_pools)]
    service = np.array(net.service_rates) * eq.occupancies
    return PriorityFlow(net, po, cap, service=service, nonnegative=False)


def integrate_hydro(initial: DeviationState, net: Network, po: PriorityOrder, horizon: float,
                    step: float = 1e-2, record_every: int = 1, eq: EquilibriumPoint | None = None) -> HydroTrajectory:
    """Hydrodynamic model: fluid allocation with completions frozen at mu_ij psi*_ij
    and pools (except the lowest-priority one) full at zero deviation."""
    if eq is None:
        eq = compute_equilibrium(net, po, strict=False)
    flow = _hydro_flow(net, po, eq)
    times, arr = flow.integrate(list(initial.u), list(initial.w), horizon, step, record_every, freeze_stop=True)
    E, I = net.num_activities, net.num_classes
    return HydroTrajectory(times, arr[:, :E], arr[:, E:E + I])


def random_deviation(net: Network, po: PriorityOrder, rng: np.random.Generator, scale: float = 1.0,
                     queues: bool = True) -> DeviationState:
    """A random admissible deviation: pools other than the lowest-priority one not above equilibrium."""
    low = lowest_pool(net, po)
    u = rng.normal(size=net.num_activities) * scale
    for j in range(net.num_pools):
        if j == low:
            continue
        members = [k for k, (_, p) in enumerate(net.activities) if p == j]
        excess = u[members].sum()
        if excess > 0:
            u[members] -= excess / len(members) + rng.uniform() * 0.1 * scale
    w = rng.exponential(size=net.num_classes) * scale * (rng.uniform(size=net.num_classes) < 0.5) if queues \
        else np.zeros(net.num_classes)
    return DeviationState(u, w)


def _perturbed_start(net: Network, po: PriorityOrder, eq: EquilibriumPoint, r: int, h: float,
                     dev: DeviationState) -> SystemState:
    cap = pool_capacity(net, r)
    psi = [max(0, int(round(p * r + h * u))) for p, u in zip(eq.occupancies, dev.u)]
    busy = [0] * net.num_pools
    for k, (_, j) in enumerate(net.activities):
        busy[j] += psi[k]
    for k in reversed(po.activities_by_priority()):
        j = net.activities[k][1]
        cut = min(psi[k], max(0, busy[j] - cap[j]))
        psi[k] -= cut
        busy[j] -= cut
    q = [max(0, int(round(h * w))) for w in dev.w]
    return settle(SystemState(r, psi, q), net, po)


def _sampled_path(net, po, eq, state, stream, sample_times):
    """Deviation vectors F at each absolute sim time."""
    eng = Engine(net, po, eq, state, stream)
    center = np.concatenate([eq.occupancies * state.r, np.zeros(net.num_classes)])
    out = np.empty((len(sample_times), net.num_activities + net.num_classes))
    for m, t in enumerate(sample_times):
        eng.advance(float(t))
        out[m] = np.array(state.psi + state.q, float) - center
    return out


@dataclass
class ComparisonRow:
    r: int
    gamma: float
    seed: int
    sup_dist_lfm: float
    sup_dist_hydro: float
    noise_floor: float
    final_queue_hydro: float


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]

    def medians(self, column: str) -> dict[int, float]:
        rs = sorted({row.r for row in self.rows})
        return {r: float(np.median([getattr(row, column) for row in self.rows if row.r == r])) for r in rs}

    def nonincreasing(self, column: str) -> bool:
        m = list(self.medians(column).values())
        return all(b <= a for a, b in zip(m, m[1:]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "gamma", "seed", "sup_dist_lfm", "sup_dist_hydro"])
            for row in self.rows:
                w.writerow([row.r, repr(row.gamma), row.seed, repr(row.sup_dist_lfm), repr(row.sup_dist_hydro)])


def compare_scalings(net: Network, po: PriorityOrder, eq: EquilibriumPoint, r_values, gamma: float, seeds,
                     lfm_start: DeviationState | None = None, hydro_start: DeviationState | None = None,
                     lfm_horizon: float = 5.0, hydro_horizon: float = 5.0, dt: float = 0.05,
                     base_seed: int = 0) -> ComparisonReport:
    """Rescale simulated deviations by h(r) = r^gamma and measure their sup
    distance to the local-fluid model (unscaled time) and to the hydrodynamic
    model (time compressed by h(r)/r)."""
    if not 0.5 < gamma <= 1.0:
        raise ValueError("gamma must lie in (1/2, 1]")
    maps = lfm_matrix(net, po)
    if lfm_start is None:
        lfm_start = DeviationState(np.zeros(net.num_activities), np.ones(net.num_classes))
    lfm_start = map_L(lfm_start, net, po)
    if hydro_start is None:
        # one unit of idle capacity on every activity of the pools that are full at equilibrium
        low = lowest_pool(net, po)
        hydro_start = DeviationState(np.array([0.0 if j == low else -1.0 for _, j in net.activities]),
                                     np.zeros(net.num_classes))
    lfm = integrate_lfm(lfm_start, maps, lfm_horizon, net, dt=dt)
    lfm_path = np.hstack([lfm.psi, lfm.q])
    hydro = integrate_hydro(hydro_start, net, po, hydro_horizon, step=dt, eq=eq)
    hydro_path = np.hstack([hydro.u, hydro.w])
    rows = []
    for r in r_values:
        h = float(r) ** gamma
        for seed in seeds:
            stream = UniformStream(base_seed, (3, r, seed, 0))
            f = _sampled_path(net, po, eq, _perturbed_start(net, po, eq, r, h, lfm_start), stream, lfm.times) / h
            d_lfm = float(np.max(np.linalg.norm(f - lfm_path, axis=1)))
            stream = UniformStream(base_seed, (3, r, seed, 1))
            f = _sampled_path(net, po, eq, _perturbed_start(net, po, eq, r, h, hydro_start), stream,
                              hydro.times * h / r) / h
            d_hydro = float(np.max(np.linalg.norm(f - hydro_path, axis=1)))
            final_q = float(np.max(f[-1, net.num_activities:]))
            stream = UniformStream(base_seed, (3, r, seed, 2))
            f = _sampled_path(net, po, eq, _perturbed_start(net, po, eq, r, h, DeviationState.zero(net)), stream,
                              lfm.times) / h
            floor = float(np.max(np.linalg.norm(f, axis=1)))
            rows.append(ComparisonRow(int(r), float(gamma), int(seed), d_lfm, d_hydro, floor, final_q))
    return ComparisonReport(rows)
