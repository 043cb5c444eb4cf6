"""Fluid model of LAP: priority-ordered rate allocation and boundary-aware integration."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import HorizonExceededError, InvalidStateError, StepUnderflowError, UnsupportedExperimentError
from .model import Network
from .priority import EquilibriumPoint, PriorityOrder, check_assumption3, compute_equilibrium, lowest_pool

BOUNDARY_TOL = 1e-9
ABORT_TOL = 1e-6
DEFAULT_STEP = 1e-3


@dataclass
class FluidState:
    psi: np.ndarray  # per activity
    q: np.ndarray  # per class

    def __post_init__(self):
        self.psi = np.asarray(self.psi, float)
        self.q = np.asarray(self.q, float)

    def x(self, net: Network) -> np.ndarray:
        out = self.q.copy()
        for k, (i, _) in enumerate(net.activities):
            out[i] += self.psi[k]
        return out

    def vector(self) -> np.ndarray:
        return np.concatenate([self.psi, self.q])


def equilibrium_state(net: Network, eq: EquilibriumPoint) -> FluidState:
    return FluidState(eq.occupancies.copy(), np.zeros(net.num_classes))


class PriorityFlow:
    """Sequential budget allocation shared by the fluid and hydrodynamic models.

    ``capacity[j]`` is the level at which pool j counts as full (``inf`` for a
    pool that never fills). ``service`` is either ``None`` (completions at
    mu_ij psi_ij) or a fixed per-activity completion rate.
    """

    def __init__(self, net: Network, po: PriorityOrder, capacity, service=None, nonnegative=True):
        self.net = net
        self.E = net.num_activities
        self.I = net.num_classes
        self.J = net.num_pools
        self.cls = [i for i, _ in net.activities]
        self.pool = [j for _, j in net.activities]
        self.mu = list(net.service_rates)
        self.lam = list(net.arrival_rates)
        self.order = po.activities_by_priority()
        self.capacity = [float(c) for c in capacity]
        self.service = None if service is None else [float(s) for s in service]
        self.nonnegative = nonnegative
        self.tol = BOUNDARY_TOL * max(1.0, max((c for c in self.capacity if math.isfinite(c)), default=1.0))

    def occupancy(self, psi) -> list[float]:
        occ = [0.0] * self.J
        for k in range(self.E):
            occ[self.pool[k]] += psi[k]
        return occ

    def flags(self, psi, q) -> tuple[list[bool], list[bool]]:
        occ = self.occupancy(psi)
        full = [occ[j] >= self.capacity[j] - self.tol for j in range(self.J)]
        queued = [q[i] > self.tol for i in range(self.I)]
        return full, queued

    def allocate(self, psi, q, flags=None):
        """Service-start rates and the derivatives (dpsi, dq, completion rates)."""
        full, queued = flags if flags is not None else self.flags(psi, q)
        dep = self.service if self.service is not None else [m * p for m, p in zip(self.mu, psi)]
        R = list(self.lam)
        S = [0.0] * self.J
        for k in range(self.E):
            S[self.pool[k]] += dep[k]
        rates = [0.0] * self.E
        for k in self.order:
            i, j = self.cls[k], self.pool[k]
            if queued[i] and full[j]:
                x = S[j]
            elif full[j]:
                x = R[i] if R[i] < S[j] else S[j]
            else:
                x = R[i]
            if x < 0.0:
                x = 0.0
            rates[k] = x
            R[i] -= x
            S[j] -= x
        dpsi = [rates[k] - dep[k] for k in range(self.E)]
        dq = list(self.lam)
        for k in range(self.E):
            dq[self.cls[k]] -= rates[k]
        return rates, dpsi, dq, dep

    # augmented state: psi (E), q (I), xi (E), d (E)
    def _deriv(self, y, flags):
        E, I = self.E, self.I
        rates, dpsi, dq, dep = self.allocate(y[:E], y[E:E + I], flags)
        return dpsi + dq + rates + list(dep)

    def _rk4(self, y, h, flags):
        k1 = self._deriv(y, flags)
        y2 = [a + 0.5 * h * b for a, b in zip(y, k1)]
        k2 = self._deriv(y2, flags)
        y3 = [a + 0.5 * h * b for a, b in zip(y, k2)]
        k3 = self._deriv(y3, flags)
        y4 = [a + h * b for a, b in zip(y, k3)]
        k4 = self._deriv(y4, flags)
        return [a + h / 6.0 * (b + 2.0 * c + 2.0 * d + e) for a, b, c, d, e in zip(y, k1, k2, k3, k4)]

    def _crossed(self, y, flags) -> bool:
        """True if the step pushed a slack pool past capacity or a queue below zero."""
        full, queued = flags
        E, I = self.E, self.I
        occ = self.occupancy(y[:E])
        for j in range(self.J):
            if not full[j] and occ[j] > self.capacity[j]:
                return True
        for i in range(I):
            if queued[i] and y[E + i] < 0.0:
                return True
        return False

    def project(self, y, abort=ABORT_TOL):
        """Clip float noise back onto the invariant region; abort on real violations."""
        E, I = self.E, self.I
        y = list(y)
        for i in range(I):
            if y[E + i] < 0.0:
                if y[E + i] < -abort:
                    raise InvalidStateError(f"queue {i + 1} negative: {y[E + i]:.3g}")
                y[E + i] = 0.0
        if self.nonnegative:
            for k in range(E):
                if y[k] < 0.0:
                    if y[k] < -abort:
                        raise InvalidStateError(f"occupancy of activity {k} negative: {y[k]:.3g}")
                    y[k] = 0.0
        occ = self.occupancy(y[:E])
        for j in range(self.J):
            over = occ[j] - self.capacity[j]
            if over > 0.0:
                if over > abort:
                    raise InvalidStateError(f"pool {j + 1} over capacity by {over:.3g}")
                # take the excess from the lowest-priority activities of the pool
                for k in reversed(self.order):
                    if self.pool[k] == j and over > 0:
                        cut = min(over, y[k]) if self.nonnegative else over
                        y[k] -= cut
                        over -= cut
        return y

    def settle(self, psi, q):
        """Move queued fluid into slack compatible pools, activities in priority order."""
        psi = list(map(float, psi))
        q = list(map(float, q))
        occ = self.occupancy(psi)
        for k in self.order:
            i, j = self.cls[k], self.pool[k]
            room = self.capacity[j] - occ[j]
            if q[i] > 0 and room > 0:
                m = min(q[i], room)
                q[i] -= m
                psi[k] += m
                occ[j] += m
        return psi, q

    def integrate(self, psi0, q0, horizon: float, step: float, record_every: int = 1, freeze_stop: bool = False):
        """Fixed-step RK4 with boundary crossings located by bisection."""
        E, I = self.E, self.I
        psi, q = self.settle(psi0, q0)
        y = psi + q + [0.0] * (2 * E)
        n_steps = int(math.ceil(horizon / step - 1e-9))
        times = [0.0]
        rows = [list(y)]
        t = 0.0
        tiny_run = 0
        tail = None
        for n in range(1, n_steps + 1):
            t_target = min(n * step, horizon)
            if tail is not None:
                # frozen: only the cumulative counters keep moving
                y = y[:E + I] + [c + v * (t_target - t) for c, v in zip(y[E + I:], tail)]
                t = t_target
            while t < t_target - 1e-15:
                flags = self.flags(y[:E], y[E:E + I])
                h = t_target - t
                y1 = self._rk4(y, h, flags)
                if not self._crossed(y1, flags):
                    y = self.project(y1)
                    t = t_target
                    tiny_run = 0
                    continue
                lo, hi = 0.0, h
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if self._crossed(self._rk4(y, mid, flags), flags):
                        hi = mid
                    else:
                        lo = mid
                    if hi - lo < 1e-15:
                        break
                y = self._snap(self._rk4(y, hi, flags), flags)
                t += hi
                tiny_run = tiny_run + 1 if hi < 1e-12 else 0
                if tiny_run > 100:
                    raise StepUnderflowError(f"boundary chattering at t={t:.6g}")
            if freeze_stop and tail is None:
                d = self._deriv(y, self.flags(y[:E], y[E:E + I]))
                if max(abs(v) for v in d[:E + I]) < 1e-13:
                    tail = d[E + I:]
            if n % record_every == 0 or n == n_steps:
                times.append(t_target)
                rows.append(list(y))
        arr = np.array(rows)
        return np.array(times), arr

    def _snap(self, y, flags):
        full, queued = flags
        E, I = self.E, self.I
        y = list(y)
        for i in range(I):
            if queued[i] and y[E + i] < self.tol:
                y[E + i] = 0.0
        occ = self.occupancy(y[:E])
        for j in range(self.J):
            if not full[j] and occ[j] > self.capacity[j] - self.tol and math.isfinite(self.capacity[j]):
                excess = occ[j] - self.capacity[j]
                members = [k for k in range(E) if self.pool[k] == j]
                total = sum(abs(y[k]) for k in members) or 1.0
                for k in members:
                    y[k] -= excess * abs(y[k]) / total
        return self.project(y)


@dataclass
class FluidTrajectory:
    times: np.ndarray
    psi: np.ndarray  # (n, E)
    q: np.ndarray  # (n, I)
    xi: np.ndarray  # cumulative service starts
    d: np.ndarray  # cumulative completions
    dist_to_eq: np.ndarray

    def state(self, n: int) -> FluidState:
        return FluidState(self.psi[n], self.q[n])

    def x(self, net: Network) -> np.ndarray:
        a_cls, _ = net.incidence()
        return self.q + self.psi @ a_cls.T

    def write_csv(self, path, net: Network) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"psi_{i + 1}_{j + 1}" for i, j in net.activities]
                       + [f"q_{i + 1}" for i in range(net.num_classes)] + ["dist_to_eq"])
            for n, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.psi[n]]
                           + [repr(float(v)) for v in self.q[n]] + [repr(float(self.dist_to_eq[n]))])


def check_fluid_state(state: FluidState, net: Network, tol: float = BOUNDARY_TOL) -> list[str]:
    problems = []
    if np.any(state.q < -tol):
        problems.append("negative queue")
    if np.any(state.psi < -tol):
        problems.append("negative occupancy")
    occ = np.zeros(net.num_pools)
    for k, (_, j) in enumerate(net.activities):
        occ[j] += state.psi[k]
    for j in range(net.num_pools):
        if occ[j] > net.pool_sizes[j] + tol:
            problems.append(f"pool {j + 1} over capacity")
    return problems


def _fluid_flow(net: Network, po: PriorityOrder) -> PriorityFlow:
    return PriorityFlow(net, po, net.pool_sizes)


def allocate_rates(state: FluidState, net: Network, po: PriorityOrder) -> dict:
    """Instantaneous service-start rates and state derivatives at ``state``."""
    problems = check_fluid_state(state, net, ABORT_TOL)
    if problems:
        raise InvalidStateError("; ".join(problems))
    rates, dpsi, dq, _ = _fluid_flow(net, po).allocate(list(state.psi), list(state.q))
    return {"xi": np.array(rates), "dpsi": np.array(dpsi), "dq": np.array(dq)}


def integrate_fluid(initial: FluidState, net: Network, po: PriorityOrder, horizon: float,
                    step: float = DEFAULT_STEP, record_every: int = 1,
                    eq: EquilibriumPoint | None = None) -> FluidTrajectory:
    """Integrate the fluid model from ``initial`` over [0, horizon].

    A queue next to a slack compatible pool is not a fluid state; such
    initial states are first settled, queue by queue in priority order.
    """
    problems = check_fluid_state(initial, net, ABORT_TOL)
    if problems:
        raise InvalidStateError("; ".join(problems))
    if eq is None:
        eq = compute_equilibrium(net, po, strict=False)
    flow = _fluid_flow(net, po)
    times, arr = flow.integrate(list(initial.psi), list(initial.q), horizon, step, record_every)
    E, I = net.num_activities, net.num_classes
    psi, q = arr[:, :E], arr[:, E:E + I]
    dist = np.sqrt(((psi - eq.occupancies) ** 2).sum(axis=1) + (q ** 2).sum(axis=1))
    return FluidTrajectory(times, psi, q, arr[:, E + I:2 * E + I], arr[:, 2 * E + I:], dist)


def settle_time(traj: FluidTrajectory, eps: float) -> float:
    """First recorded time after which the trajectory stays within ``eps`` of equilibrium."""
    outside = np.nonzero(traj.dist_to_eq >= eps)[0]
    if len(outside) == 0:
        return 0.0
    last = outside[-1]
    if last == len(traj.times) - 1:
        raise HorizonExceededError(
            f"trajectory still {traj.dist_to_eq[-1]:.3g} from equilibrium at t={traj.times[-1]:.6g}"
        )
    return float(traj.times[last + 1])


def sample_initial_states(net: Network, K: float, n_random: int, seed: int = 0) -> list[FluidState]:
    """Grid corners plus seeded random fluid states with Euclidean norm at most ``K``.

    Random points keep their occupancy part fixed across ``K`` and scale only
    the queue part, so larger ``K`` means longer queues from the same start.
    """
    E, I = net.num_activities, net.num_classes
    beta = np.array(net.pool_sizes)
    pts = [FluidState(np.zeros(E), np.zeros(I))]
    full = np.zeros(E)
    for j in range(net.num_pools):
        members = [k for k, (_, p) in enumerate(net.activities) if p == j]
        for k in members:
            full[k] = beta[j] / len(members)
    for base in (np.zeros(E), full):
        nb = np.linalg.norm(base)
        if nb > K:
            base = base * (K / nb)
            nb = K
        for i in range(I):
            qv = np.zeros(I)
            qv[i] = math.sqrt(max(K * K - nb * nb, 0.0))
            pts.append(FluidState(base, qv))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5,)))
    for _ in range(n_random):
        psi = np.zeros(E)
        for j in range(net.num_pools):
            members = [k for k, (_, p) in enumerate(net.activities) if p == j]
            share = rng.dirichlet(np.ones(len(members))) * rng.uniform() * beta[j]
            psi[members] = share
        direction = rng.exponential(size=I)
        direction /= np.linalg.norm(direction)
        radius = K * rng.uniform() ** (1.0 / (E + I))
        npsi = np.linalg.norm(psi)
        if npsi > radius:
            pts.append(FluidState(psi * (radius / npsi), np.zeros(I)))
        else:
            pts.append(FluidState(psi, direction * math.sqrt(radius ** 2 - npsi ** 2)))
    return pts


@dataclass
class DrainReport:
    drain_time: float
    per_state: list[float]
    terminal_psi: np.ndarray
    terminal_q: np.ndarray


def drain_time(K: float, eps: float, net: Network, po: PriorityOrder, n_random: int = 20,
               horizon: float = 40.0, step: float = 1e-2, seed: int = 0) -> DrainReport:
    """Largest time, over sampled initial states of norm at most ``K``, to
    enter and stay in the ``eps``-ball around the equilibrium."""
    eq = compute_equilibrium(net, po, strict=False)
    ok, why = check_assumption3(net, eq, po)
    if not ok:
        raise UnsupportedExperimentError(f"drain time needs all activities in use: {why}")
    times = []
    terminal_psi, terminal_q = [], []
    for st in sample_initial_states(net, K, n_random, seed):
        traj = integrate_fluid(st, net, po, horizon, step, record_every=max(1, int(round(0.05 / step))), eq=eq)
        times.append(settle_time(traj, eps))
        terminal_psi.append(traj.psi[-1])
        terminal_q.append(traj.q[-1])
    return DrainReport(max(times), times, np.array(terminal_psi), np.array(terminal_q))


def workload_rate(state: FluidState, net: Network, po: PriorityOrder, nu) -> float:
    """d/dt sum_i nu_i x_i at ``state``."""
    alloc = allocate_rates(state, net, po)
    a_cls, _ = net.incidence()
    dx = alloc["dq"] + a_cls @ alloc["dpsi"]
    return float(np.dot(nu, dx))

