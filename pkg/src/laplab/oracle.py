"""Stationary law of the chain on a truncated state space, by direct linear solve."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import StateSpaceTooLargeError
from .model import Network
from .priority import PriorityOrder
from .simulator import SystemState, route_arrival, schedule_server

MAX_STATES = 200_000


@dataclass
class OracleResult:
    states: list[tuple]  # (psi..., q...) per state
    probs: np.ndarray
    num_activities: int

    def expect(self, fn) -> float:
        return float(sum(p * fn(s) for s, p in zip(self.states, self.probs)))

    @property
    def mean_total(self) -> float:
        return self.expect(sum)

    @property
    def mean_psi(self) -> np.ndarray:
        e = self.num_activities
        return np.array([self.expect(lambda s, k=k: s[k]) for k in range(e)])

    @property
    def mean_q(self) -> np.ndarray:
        e = self.num_activities
        n = len(self.states[0]) - e
        return np.array([self.expect(lambda s, i=i: s[e + i]) for i in range(n)])

    def moments(self) -> dict:
        return {"total": self.mean_total, "psi": self.mean_psi.tolist(), "q": self.mean_q.tolist(),
                "num_states": len(self.states)}


def solve_ctmc_oracle(net: Network, po: PriorityOrder, r: int, queue_cap: int) -> OracleResult:
    """Enumerate states reachable from empty under the routing and scheduling
    rules (arrivals that would push a queue past ``queue_cap`` are lost) and
    solve pi Q = 0."""
    e = net.num_activities
    lam = [x * r for x in net.arrival_rates]
    index = {}
    states = []
    rows, cols, vals = [], [], []
    start = SystemState.empty(net, r)
    index[start.key()] = 0
    states.append(start.key())
    frontier = [start]
    while frontier:
        nxt = []
        for st in frontier:
            src = index[st.key()]
            moves = []
            for i in range(net.num_classes):
                after = route_arrival(st.copy(), i, net, po)
                if after.q[i] <= queue_cap:
                    moves.append((after, lam[i]))
            for k in range(e):
                if st.psi[k] > 0:
                    after = st.copy()
                    after.psi[k] -= 1
                    after.departures[k] += 1
                    schedule_server(after, net.activities[k][1], net, po)
                    moves.append((after, net.service_rates[k] * st.psi[k]))
            for after, rate in moves:
                key = after.key()
                dst = index.get(key)
                if dst is None:
                    dst = index[key] = len(states)
                    if dst >= MAX_STATES:
                        raise StateSpaceTooLargeError(f"truncated state space exceeds {MAX_STATES} states")
                    states.append(key)
                    nxt.append(after)
                rows.append(src)
                cols.append(dst)
                vals.append(rate)
        frontier = nxt
    n = len(states)
    gen = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    gen = gen - sparse.diags(np.asarray(gen.sum(axis=1)).ravel())
    # pi Q = 0 with the last balance equation replaced by sum(pi) = 1
    a = gen.T.tolil()
    a[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[n - 1] = 1.0
    pi = spsolve(a.tocsc(), b)
    return OracleResult(states, np.asarray(pi), e)
