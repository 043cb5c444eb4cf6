"""Exact simulation of the r-scaled Markov chain under LAP routing and scheduling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, InvalidStateError, UnsupportedExperimentError, ZeroRateError
from .model import DualVariables, Network
from .priority import EquilibriumPoint, PriorityOrder
from .rng import UniformStream

RESYNC_EVERY = 1024


def pool_capacity(net: Network, r: int) -> list[int]:
    """N_j(r) = floor(beta_j r); the 1e-9 guards against 0.7 * 10 = 6.999..."""
    return [int(math.floor(b * r + 1e-9)) for b in net.pool_sizes]


@dataclass
class SystemState:
    r: int
    psi: list[int]  # servers of each activity that are busy
    q: list[int]  # queue length per class
    t: float = 0.0
    arrivals: list[int] = field(default_factory=list)
    departures: list[int] = field(default_factory=list)
    starts: list[int] = field(default_factory=list)
    psi0: list[int] = field(default_factory=list)
    q0: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.psi = [int(x) for x in self.psi]
        self.q = [int(x) for x in self.q]
        if not self.arrivals:
            self.arrivals = [0] * len(self.q)
        if not self.departures:
            self.departures = [0] * len(self.psi)
        if not self.starts:
            self.starts = [0] * len(self.psi)
        if not self.psi0:
            self.psi0 = list(self.psi)
        if not self.q0:
            self.q0 = list(self.q)

    @classmethod
    def empty(cls, net: Network, r: int) -> "SystemState":
        return cls(r, [0] * net.num_activities, [0] * net.num_classes)

    def copy(self) -> "SystemState":
        return SystemState(
            self.r, list(self.psi), list(self.q), self.t, list(self.arrivals),
            list(self.departures), list(self.starts), list(self.psi0), list(self.q0),
        )

    def key(self) -> tuple:
        return tuple(self.psi) + tuple(self.q)

    def busy(self, net: Network) -> list[int]:
        out = [0] * net.num_pools
        for k, (_, j) in enumerate(net.activities):
            out[j] += self.psi[k]
        return out


def deviation(state: SystemState, eq: EquilibriumPoint) -> np.ndarray:
    """F = (Psi_ij - r psi*_ij, Q_i)."""
    return np.concatenate([np.asarray(state.psi, float) - state.r * eq.occupancies, np.asarray(state.q, float)])


def check_state(state: SystemState, net: Network) -> list[str]:
    """Violations of the capacity, work-conservation and flow invariants."""
    problems = []
    cap = pool_capacity(net, state.r)
    busy = state.busy(net)
    for j in range(net.num_pools):
        if busy[j] > cap[j]:
            problems.append(f"pool {j + 1} holds {busy[j]} > {cap[j]} customers")
    if any(x < 0 for x in state.psi) or any(x < 0 for x in state.q):
        problems.append("negative occupancy or queue")
    for i in range(net.num_classes):
        if state.q[i] > 0:
            for j in net.pools_of(i):
                if busy[j] < cap[j]:
                    problems.append(f"class {i + 1} queued while pool {j + 1} has an idle server")
    for i in range(net.num_classes):
        started = sum(state.starts[k] for k, (c, _) in enumerate(net.activities) if c == i)
        if state.q[i] != state.q0[i] + state.arrivals[i] - started:
            problems.append(f"queue flow identity broken for class {i + 1}")
    for k in range(net.num_activities):
        if state.psi[k] != state.psi0[k] + state.starts[k] - state.departures[k]:
            problems.append(f"occupancy flow identity broken for activity {net.activities[k]}")
    return problems


class _Tables:
    """Priority-sorted lookup tables shared by the event handlers."""

    def __init__(self, net: Network, po: PriorityOrder, r: int):
        self.cap = pool_capacity(net, r)
        self.act_class = [i for i, _ in net.activities]
        self.act_pool = [j for _, j in net.activities]
        self.mu = list(net.service_rates)
        by_rank = po.activities_by_priority()
        # per class: (activity, pool) in activity-rank order
        self.route = [[(k, net.activities[k][1]) for k in by_rank if net.activities[k][0] == i]
                      for i in range(net.num_classes)]
        # per pool: (activity, class) in class-rank order
        self.sched = [
            sorted(((k, net.activities[k][0]) for k in range(net.num_activities) if net.activities[k][1] == j),
                   key=lambda kc: po.class_rank[kc[1]])
            for j in range(net.num_pools)
        ]
        self.lam = [x * r for x in net.arrival_rates]
        self.lam_total = sum(self.lam)


_TABLE_CACHE: dict = {}


def _tables(net: Network, po: PriorityOrder, r: int) -> _Tables:
    key = (net, po, r)
    tab = _TABLE_CACHE.get(key)
    if tab is None:
        if len(_TABLE_CACHE) > 64:
            _TABLE_CACHE.clear()
        tab = _TABLE_CACHE[key] = _Tables(net, po, r)
    return tab


def route_arrival(state: SystemState, i: int, net: Network, po: PriorityOrder) -> SystemState:
    """An arriving class-i customer takes an idle server in its best-ranked
    pool that has one, or joins queue i."""
    tab = _tables(net, po, state.r)
    busy = state.busy(net)
    state.arrivals[i] += 1
    for k, j in tab.route[i]:
        if busy[j] < tab.cap[j]:
            state.psi[k] += 1
            state.starts[k] += 1
            return state
    state.q[i] += 1
    return state


def schedule_server(state: SystemState, j: int, net: Network, po: PriorityOrder) -> SystemState:
    """A server freed in pool j takes the head of the highest-ranked nonempty queue it serves."""
    tab = _tables(net, po, state.r)
    for k, i in tab.sched[j]:
        if state.q[i] > 0:
            state.q[i] -= 1
            state.psi[k] += 1
            state.starts[k] += 1
            break
    return state


@dataclass
class EventRecord:
    t: float
    kind: str  # "arrival" or "departure"
    cls: int
    pool: int  # -1 for an arrival that queued


def step_event(state: SystemState, net: Network, po: PriorityOrder, rng: UniformStream) -> tuple[SystemState, EventRecord]:
    """Advance to the next arrival or service completion."""
    tab = _tables(net, po, state.r)
    total = tab.lam_total + sum(m * x for m, x in zip(tab.mu, state.psi))
    if total <= 0:
        raise ZeroRateError("no arrival or service clock is running")
    state.t -= math.log(1.0 - rng.next()) / total
    x = rng.next() * total
    if x < tab.lam_total:
        i = _pick(tab.lam, x)
        before = list(state.psi)
        route_arrival(state, i, net, po)
        pool = next((tab.act_pool[k] for k in range(len(before)) if state.psi[k] != before[k]), -1)
        return state, EventRecord(state.t, "arrival", i, pool)
    x -= tab.lam_total
    k = _pick([m * p for m, p in zip(tab.mu, state.psi)], x)
    state.psi[k] -= 1
    state.departures[k] += 1
    schedule_server(state, tab.act_pool[k], net, po)
    return state, EventRecord(state.t, "departure", tab.act_class[k], tab.act_pool[k])


def _pick(weights, x):
    last = 0
    for n, w in enumerate(weights):
        if w > 0:
            last = n
            if x < w:
                return n
            x -= w
    return last


def settle(state: SystemState, net: Network, po: PriorityOrder) -> SystemState:
    """Move queued customers into idle compatible servers, activities in priority order.

    Only needed for hand-built initial states; the dynamics never produce a
    queue next to an idle compatible server.
    """
    tab = _tables(net, po, state.r)
    busy = state.busy(net)
    for k in po.activities_by_priority():
        i, j = net.activities[k]
        n = min(state.q[i], tab.cap[j] - busy[j])
        if n > 0:
            state.q[i] -= n
            state.psi[k] += n
            busy[j] += n
    state.psi0 = list(state.psi)
    state.q0 = list(state.q)
    return state


def equilibrium_rounded(net: Network, po: PriorityOrder, eq: EquilibriumPoint, r: int) -> SystemState:
    """Psi_ij = round(psi*_ij r), trimming overfull pools from their lowest-priority activity."""
    cap = pool_capacity(net, r)
    psi = [int(round(x * r)) for x in eq.occupancies]
    busy = [0] * net.num_pools
    for k, (_, j) in enumerate(net.activities):
        busy[j] += psi[k]
    for k in reversed(po.activities_by_priority()):
        j = net.activities[k][1]
        cut = min(psi[k], max(0, busy[j] - cap[j]))
        psi[k] -= cut
        busy[j] -= cut
    return SystemState(r, psi, [0] * net.num_classes)


InitialState = Union[SystemState, str]


@dataclass
class SimConfig:
    seed: int
    horizon: float
    warmup: float = 0.0
    initial_state: InitialState = "equilibrium-rounded"
    sample_interval: float = 1.0
    stream_key: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.horizon > self.warmup >= 0:
            raise ValueError("need horizon > warmup >= 0")
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be positive")
        if isinstance(self.initial_state, str) and self.initial_state not in ("empty", "equilibrium-rounded"):
            raise ValueError(f"unknown initial state {self.initial_state!r}")


def initial_state(net: Network, po: PriorityOrder, eq: EquilibriumPoint, r: int, spec: InitialState) -> SystemState:
    if isinstance(spec, SystemState):
        state = settle(spec.copy(), net, po)
        problems = check_state(state, net)
        if problems:
            raise InvalidStateError("; ".join(problems))
        return state
    if spec == "empty":
        return SystemState.empty(net, r)
    return equilibrium_rounded(net, po, eq, r)


class Engine:
    """Event loop with exact time integrals of occupancies and deviation norms.

    The next event time is drawn when the previous event fires and is kept
    across ``advance`` calls, so the sample path does not depend on where the
    caller stops to observe it.
    """

    def __init__(self, net: Network, po: PriorityOrder, eq: EquilibriumPoint, state: SystemState,
                 stream: UniformStream, tail_threshold: float = math.inf, log: list | None = None):
        self.net = net
        self.tab = _tables(net, po, state.r)
        self.state = state
        self.stream = stream
        self.center = [x * state.r for x in eq.occupancies]
        self.tail2 = tail_threshold ** 2
        self.log = log
        self._pending = None
        self._rate = 0.0
        self._events = 0
        self._resync()
        self.reset_integrals()

    def _resync(self):
        st = self.state
        self._dep_rate = sum(m * x for m, x in zip(self.tab.mu, st.psi))
        dev = [p - c for p, c in zip(st.psi, self.center)]
        self._ss = sum(d * d for d in dev) + sum(x * x for x in st.q)
        self._l1 = sum(abs(d) for d in dev) + sum(st.q)

    def reset_integrals(self):
        t = self.state.t
        self.t_start = t
        self.int_psi = [0.0] * len(self.state.psi)
        self.int_q = [0.0] * len(self.state.q)
        self._last_psi = [t] * len(self.state.psi)
        self._last_q = [t] * len(self.state.q)
        self.int_norm = 0.0
        self.int_l1 = 0.0
        self.int_tail = 0.0

    def integrals(self) -> dict:
        """Time integrals over [t_start, now]; call after ``advance``."""
        t = self.state.t
        st = self.state
        psi = [a + p * (t - s) for a, p, s in zip(self.int_psi, st.psi, self._last_psi)]
        q = [a + x * (t - s) for a, x, s in zip(self.int_q, st.q, self._last_q)]
        return {"span": t - self.t_start, "psi": psi, "q": q, "norm": self.int_norm,
                "l1": self.int_l1, "tail": self.int_tail}

    def norm(self) -> float:
        return math.sqrt(max(self._ss, 0.0))

    def advance(self, t_stop: float) -> None:
        st = self.state
        tab = self.tab
        psi, q = st.psi, st.q
        arrivals, departures, starts = st.arrivals, st.departures, st.starts
        cap, mu, lam, lam_total = tab.cap, tab.mu, tab.lam, tab.lam_total
        route, sched, act_class, act_pool = tab.route, tab.sched, tab.act_class, tab.act_pool
        center = self.center
        int_psi, int_q, last_psi, last_q = self.int_psi, self.int_q, self._last_psi, self._last_q
        busy = st.busy(self.net)
        stream = self.stream
        buf, pos = stream.buf, stream.pos
        log = self.log
        tail2 = self.tail2
        sqrt, ln = math.sqrt, math.log
        t = st.t
        nxt = self._pending
        rate = self._rate
        ss, l1, dep_rate = self._ss, self._l1, self._dep_rate
        int_norm, int_l1, int_tail = self.int_norm, self.int_l1, self.int_tail
        events = self._events
        while True:
            if nxt is None:
                rate = lam_total + dep_rate
                if rate <= 0:
                    raise ZeroRateError("no arrival or service clock is running")
                if pos == len(buf):
                    buf = stream.refill()
                    pos = 0
                nxt = t - ln(1.0 - buf[pos]) / rate
                pos += 1
            if nxt > t_stop:
                break
            dt = nxt - t
            int_norm += sqrt(ss if ss > 0 else 0.0) * dt
            int_l1 += l1 * dt
            if ss > tail2:
                int_tail += dt
            t = nxt
            nxt = None
            if pos == len(buf):
                buf = stream.refill()
                pos = 0
            x = buf[pos] * rate
            pos += 1
            if x < lam_total:
                i = 0
                for i, li in enumerate(lam):
                    if x < li:
                        break
                    x -= li
                arrivals[i] += 1
                for k, j in route[i]:
                    if busy[j] < cap[j]:
                        int_psi[k] += psi[k] * (t - last_psi[k])
                        last_psi[k] = t
                        d = psi[k] - center[k]
                        ss += 2.0 * d + 1.0
                        l1 += abs(d + 1.0) - abs(d)
                        psi[k] += 1
                        starts[k] += 1
                        busy[j] += 1
                        dep_rate += mu[k]
                        if log is not None:
                            log.append(EventRecord(t, "arrival", i, j))
                        break
                else:
                    int_q[i] += q[i] * (t - last_q[i])
                    last_q[i] = t
                    ss += 2.0 * q[i] + 1.0
                    l1 += 1.0
                    q[i] += 1
                    if log is not None:
                        log.append(EventRecord(t, "arrival", i, -1))
            else:
                x -= lam_total
                k = -1
                for kk, p in enumerate(psi):
                    if p:
                        k = kk
                        w = mu[kk] * p
                        if x < w:
                            break
                        x -= w
                int_psi[k] += psi[k] * (t - last_psi[k])
                last_psi[k] = t
                d = psi[k] - center[k]
                ss += 1.0 - 2.0 * d
                l1 += abs(d - 1.0) - abs(d)
                psi[k] -= 1
                departures[k] += 1
                dep_rate -= mu[k]
                j = act_pool[k]
                busy[j] -= 1
                if log is not None:
                    log.append(EventRecord(t, "departure", act_class[k], j))
                for k2, i2 in sched[j]:
                    if q[i2]:
                        int_q[i2] += q[i2] * (t - last_q[i2])
                        last_q[i2] = t
                        ss += 1.0 - 2.0 * q[i2]
                        l1 -= 1.0
                        q[i2] -= 1
                        int_psi[k2] += psi[k2] * (t - last_psi[k2])
                        last_psi[k2] = t
                        d = psi[k2] - center[k2]
                        ss += 2.0 * d + 1.0
                        l1 += abs(d + 1.0) - abs(d)
                        psi[k2] += 1
                        starts[k2] += 1
                        busy[j] += 1
                        dep_rate += mu[k2]
                        break
            events += 1
            if events % RESYNC_EVERY == 0:
                st.t = t
                self._resync()
                ss, l1, dep_rate = self._ss, self._l1, self._dep_rate
        dt = t_stop - t
        if dt > 0:
            int_norm += sqrt(ss if ss > 0 else 0.0) * dt
            int_l1 += l1 * dt
            if ss > tail2:
                int_tail += dt
            t = t_stop
        st.t = t
        stream.buf, stream.pos = buf, pos
        self._pending, self._rate = nxt, rate
        self._ss, self._l1, self._dep_rate = ss, l1, dep_rate
        self.int_norm, self.int_l1, self.int_tail = int_norm, int_l1, int_tail
        self._events = events


@dataclass
class Trace:
    times: np.ndarray
    psi: np.ndarray  # (n_samples, n_activities)
    q: np.ndarray  # (n_samples, n_classes)
    norm_F: np.ndarray

    def write_csv(self, path, net: Network) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"psi_{i + 1}_{j + 1}" for i, j in net.activities]
                       + [f"q_{i + 1}" for i in range(net.num_classes)] + ["norm_F"])
            for n, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [int(x) for x in self.psi[n]] + [int(x) for x in self.q[n]]
                           + [repr(float(self.norm_F[n]))])


@dataclass
class SimResult:
    trace: Trace
    summary: dict
    final_state: SystemState
    events: list[EventRecord] | None = None


def _time_averages(integ: dict, net: Network, duals: DualVariables | None, r: int) -> dict:
    span = integ["span"]
    psi = [x / span for x in integ["psi"]]
    q = [x / span for x in integ["q"]]
    out = {
        "psi": psi,
        "q": q,
        "total": sum(psi) + sum(q),
        "norm_F": integ["norm"] / span,
        "l1_F": integ["l1"] / span,
        "tail_fraction": integ["tail"] / span,
    }
    if duals is not None:
        x = [0.0] * net.num_classes
        for k, (i, _) in enumerate(net.activities):
            x[i] += psi[k]
        for i in range(net.num_classes):
            x[i] += q[i]
        out["W"] = float(np.dot(duals.workloads, x)) / r
    return out


def simulate_horizon(net: Network, po: PriorityOrder, eq: EquilibriumPoint, cfg: SimConfig, r: int,
                     duals: DualVariables | None = None, event_log: bool = False) -> SimResult:
    """Run to ``cfg.horizon``, sampling every ``sample_interval`` from ``warmup`` on."""
    state = initial_state(net, po, eq, r, cfg.initial_state)
    log = [] if event_log else None
    eng = Engine(net, po, eq, state, UniformStream(cfg.seed, cfg.stream_key), log=log)
    n = int(math.floor((cfg.horizon - cfg.warmup) / cfg.sample_interval + 1e-9)) + 1
    times = cfg.warmup + cfg.sample_interval * np.arange(n)
    psi = np.zeros((n, net.num_activities), dtype=np.int64)
    q = np.zeros((n, net.num_classes), dtype=np.int64)
    norms = np.zeros(n)
    eng.advance(cfg.warmup)
    eng.reset_integrals()
    for m, t in enumerate(times):
        eng.advance(float(t))
        psi[m] = state.psi
        q[m] = state.q
        norms[m] = math.sqrt(sum((p - c) ** 2 for p, c in zip(state.psi, eng.center)) + sum(x * x for x in state.q))
    eng.advance(cfg.horizon)
    summary = _time_averages(eng.integrals(), net, duals, r)
    summary.update({"r": r, "seed": cfg.seed, "horizon": cfg.horizon, "warmup": cfg.warmup})
    return SimResult(Trace(times, psi, q, norms), summary, state, log)


@dataclass
class StationaryEstimate:
    means: dict
    half_widths: dict
    batch_means: dict
    num_batches: int
    batch_length: float

    def to_dict(self) -> dict:
        return {"means": self.means, "half_widths": self.half_widths,
                "num_batches": self.num_batches, "batch_length": self.batch_length}


def batch_statistics(values: np.ndarray, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Mean and t-based confidence half-width over the first axis."""
    values = np.asarray(values, float)
    b = values.shape[0]
    if b < 2:
        raise InsufficientDataError("need at least two batches")
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    return mean, stats.t.ppf(0.5 + level / 2, b - 1) * sd / math.sqrt(b)


def estimate_stationary(net: Network, po: PriorityOrder, eq: EquilibriumPoint, cfg: SimConfig, r: int,
                        num_batches: int, duals: DualVariables | None = None, rho: float | None = None,
                        tail_threshold: float = math.inf) -> StationaryEstimate:
    """Batch means over ``num_batches`` equal post-warmup segments of one run."""
    if num_batches < 2:
        raise InsufficientDataError("need at least two batches")
    if rho is not None and rho >= 1:
        raise UnsupportedExperimentError(f"rho = {rho:.6g} >= 1: no stationary regime to estimate")
    state = initial_state(net, po, eq, r, cfg.initial_state)
    eng = Engine(net, po, eq, state, UniformStream(cfg.seed, cfg.stream_key), tail_threshold=tail_threshold)
    eng.advance(cfg.warmup)
    length = (cfg.horizon - cfg.warmup) / num_batches
    rows = []
    for b in range(1, num_batches + 1):
        eng.reset_integrals()
        eng.advance(cfg.warmup + b * length if b < num_batches else cfg.horizon)
        rows.append(_time_averages(eng.integrals(), net, duals, r))
    batches = {key: np.array([row[key] for row in rows]) for key in rows[0]}
    means, hws = {}, {}
    for key, vals in batches.items():
        m, h = batch_statistics(vals)
        means[key] = m.tolist() if m.ndim else float(m)
        hws[key] = h.tolist() if h.ndim else float(h)
    return StationaryEstimate(means, hws, batches, num_batches, length)


def run_to(net: Network, po: PriorityOrder, eq: EquilibriumPoint, state: SystemState, t: float,
           stream: UniformStream) -> SystemState:
    """Advance ``state`` in place to absolute time ``t``."""
    Engine(net, po, eq, state, stream).advance(t)
    return state


def write_event_log(events: Iterable[EventRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kind", "class", "pool"])
        for e in events:
            w.writerow([repr(e.t), e.kind, e.cls + 1, e.pool + 1 if e.pool >= 0 else ""])
