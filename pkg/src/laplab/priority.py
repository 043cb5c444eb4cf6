"""Leaf activity priorities and the equilibrium point they induce."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import Assumption3Error, LapError
from .model import Network, require_valid

FULL_TOL = 1e-9

TieBreak = Callable[[list], object]


def lowest(candidates: list):
    """Default rule: smallest candidate, classes before pools for tree nodes."""
    return min(candidates)


def highest(candidates: list):
    return max(candidates)


def random_tie_break(seed: int) -> TieBreak:
    rng = random.Random(seed)

    def pick(candidates):
        return rng.choice(sorted(candidates))

    return pick


TIE_BREAKS = {"lowest": lowest, "highest": highest}


@dataclass(frozen=True)
class PriorityOrder:
    """Total orders on classes and activities; rank 1 is the highest priority.

    ``class_rank[i]`` is the rank of class i, ``activity_rank[k]`` the rank of
    ``net.activities[k]``.
    """

    class_rank: tuple[int, ...]
    activity_rank: tuple[int, ...]

    def classes_by_priority(self) -> list[int]:
        return sorted(range(len(self.class_rank)), key=self.class_rank.__getitem__)

    def activities_by_priority(self) -> list[int]:
        return sorted(range(len(self.activity_rank)), key=self.activity_rank.__getitem__)

    def lowest_activity(self) -> int:
        return self.activity_rank.index(len(self.activity_rank))

    def to_dict(self, net: Network) -> dict:
        return {
            "class_rank": list(self.class_rank),
            "activity_rank": [
                [i + 1, j + 1, r] for (i, j), r in zip(net.activities, self.activity_rank)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, net: Network) -> "PriorityOrder":
        ranks = {(int(i) - 1, int(j) - 1): int(r) for i, j, r in d["activity_rank"]}
        return cls(tuple(int(x) for x in d["class_rank"]), tuple(ranks[a] for a in net.activities))


def lowest_pool(net: Network, po: PriorityOrder) -> int:
    """The pool of the lowest-priority activity; the only slack pool at equilibrium."""
    return net.activities[po.lowest_activity()][1]


def check_order(net: Network, po: PriorityOrder) -> list[str]:
    """List violations of the priority-order invariants for ``net``."""
    problems = []
    if sorted(po.class_rank) != list(range(1, net.num_classes + 1)):
        problems.append("class ranks are not a permutation")
    if sorted(po.activity_rank) != list(range(1, net.num_activities + 1)):
        problems.append("activity ranks are not a permutation")
    if problems:
        return problems
    for a, (i, _) in enumerate(net.activities):
        for b, (k, _) in enumerate(net.activities):
            if po.class_rank[i] < po.class_rank[k] and not po.activity_rank[a] < po.activity_rank[b]:
                problems.append(
                    f"class {i + 1} outranks class {k + 1} but activity "
                    f"{net.activities[a]} does not outrank {net.activities[b]}"
                )
    return problems


def assign_priorities(net: Network, tie_break: TieBreak | str = "lowest") -> PriorityOrder:
    """Rank classes by leaf elimination, then rank activities class by class."""
    require_valid(net)
    pick = TIE_BREAKS[tie_break] if isinstance(tie_break, str) else tie_break
    I = net.num_classes

    # tree nodes: (0, i) for class i, (1, j) for pool j
    adj = {(0, i): set() for i in range(I)}
    adj.update({(1, j): set() for j in range(net.num_pools)})
    for i, j in net.activities:
        adj[(0, i)].add((1, j))
        adj[(1, j)].add((0, i))

    class_order = []
    while adj:
        leaves = [v for v, nb in adj.items() if len(nb) <= 1]
        if not leaves:
            raise LapError("leaf elimination stalled: activity graph has a cycle")
        v = pick(leaves)
        if v[0] == 0:
            class_order.append(v[1])
        for u in adj.pop(v):
            adj[u].discard(v)
    class_rank = [0] * I
    for r, i in enumerate(class_order, start=1):
        class_rank[i] = r

    remaining = set(net.activities)
    pool_deg = {j: 0 for j in range(net.num_pools)}
    for _, j in remaining:
        pool_deg[j] += 1
    edge_order = []
    for i in class_order:
        while True:
            mine = [(c, j) for (c, j) in remaining if c == i]
            if len(mine) == 1:
                edge = mine[0]
            else:
                inner = [e for e in mine if pool_deg[e[1]] > 1]
                if len(inner) > 1:
                    raise LapError(
                        f"class {i + 1} has {len(inner)} edges to non-leaf pools during activity ranking"
                    )
                leaf_edges = [e for e in mine if pool_deg[e[1]] == 1]
                assert leaf_edges, "non-leaf class must reach a leaf pool"
                edge = pick(leaf_edges)
            remaining.discard(edge)
            pool_deg[edge[1]] -= 1
            edge_order.append(edge)
            if len(mine) == 1:
                break
    activity_rank = [0] * net.num_activities
    for r, e in enumerate(edge_order, start=1):
        activity_rank[net.activity_index(*e)] = r
    po = PriorityOrder(tuple(class_rank), tuple(activity_rank))
    assert not check_order(net, po)
    return po


@dataclass
class EquilibriumPoint:
    occupancies: np.ndarray  # psi*_ij per activity
    queues: np.ndarray  # q*_i, identically zero
    lap_rates: np.ndarray  # lambda_ij from the priority recursion

    def pool_occupancy(self, net: Network) -> np.ndarray:
        occ = np.zeros(net.num_pools)
        for k, (_, j) in enumerate(net.activities):
            occ[j] += self.occupancies[k]
        return occ

    def to_dict(self, net: Network) -> dict:
        return {
            "psi": [[i + 1, j + 1, float(x)] for (i, j), x in zip(net.activities, self.occupancies)],
            "lap_rates": [[i + 1, j + 1, float(x)] for (i, j), x in zip(net.activities, self.lap_rates)],
            "q": [float(x) for x in self.queues],
        }


def compute_equilibrium(net: Network, po: PriorityOrder, strict: bool = True) -> EquilibriumPoint:
    """Fill activities in priority order, each taking the smaller of its
    class's leftover inflow and its pool's leftover capacity.

    With ``strict`` an ``Assumption3Error`` is raised when the result does not
    use every activity or leaves no slack in the lowest pool.
    """
    require_valid(net)
    problems = check_order(net, po)
    if problems:
        raise LapError("priority order inconsistent with network: " + "; ".join(problems))
    lam_left = list(net.arrival_rates)
    cap_left = list(net.pool_sizes)
    rates = np.zeros(net.num_activities)
    for k in po.activities_by_priority():
        i, j = net.activities[k]
        mu = net.service_rates[k]
        x = min(lam_left[i], mu * cap_left[j])
        rates[k] = x
        lam_left[i] -= x
        cap_left[j] -= x / mu
    psi = rates / np.array(net.service_rates)
    eq = EquilibriumPoint(psi, np.zeros(net.num_classes), rates)
    if strict:
        ok, why = check_assumption3(net, eq, po)
        if not ok:
            raise Assumption3Error(why)
    return eq


def check_assumption3(net: Network, eq: EquilibriumPoint, po: PriorityOrder) -> tuple[bool, str]:
    """All activities used, every pool full except the lowest-priority one, which is slack.

    The diagnostic lists every failed condition.
    """
    scale = max(net.arrival_rates)
    problems = []
    unused = [a for a, x in zip(net.activities, eq.lap_rates) if not x > FULL_TOL * scale]
    if unused:
        problems.append("equilibrium does not use activities " + ", ".join(f"({i + 1},{j + 1})" for i, j in unused))
    served = np.zeros(net.num_classes)
    for k, (i, _) in enumerate(net.activities):
        served[i] += eq.lap_rates[k]
    if np.any(np.abs(served - net.arrival_rates) > FULL_TOL * scale):
        problems.append("equilibrium routing rates do not carry the full arrival rate")
    occ = eq.pool_occupancy(net)
    low = lowest_pool(net, po)
    for j in range(net.num_pools):
        full = abs(occ[j] - net.pool_sizes[j]) <= FULL_TOL * net.pool_sizes[j]
        if j != low and not full:
            problems.append(f"pool {j + 1} not full at equilibrium ({occ[j]:.12g} < {net.pool_sizes[j]:.12g})")
        if j == low and full:
            problems.append(f"lowest-priority pool {j + 1} is full at equilibrium")
    return (False, "; ".join(problems)) if problems else (True, "ok")


def relabel_order(po: PriorityOrder, net: Network, class_perm: Sequence[int], pool_perm: Sequence[int]) -> PriorityOrder:
    """Carry ``po`` over to ``net.relabeled(class_perm, pool_perm)``."""
    new_net = net.relabeled(class_perm, pool_perm)
    cr = [0] * net.num_classes
    for i, r in enumerate(po.class_rank):
        cr[class_perm[i]] = r
    ar = [0] * net.num_activities
    for (i, j), r in zip(net.activities, po.activity_rank):
        ar[new_net.activity_index(class_perm[i], pool_perm[j])] = r
    return PriorityOrder(tuple(cr), tuple(ar))
