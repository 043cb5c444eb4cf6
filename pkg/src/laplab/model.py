"""Network instances, the static planning LP and its dual workloads."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import DegenerateOptimumError, InfeasibleLPError, InvalidNetworkError

FEAS_TOL = 1e-9
IDENTITY_TOL = 1e-10
RHO_TOL = 1e-9

NOT_A_TREE = "activity set not a tree"


@dataclass(frozen=True)
class Network:
    """A multi-class, multi-pool service system at fluid scale (r = 1).

    Classes and pools are 0-based internally. ``activities[k]`` is the
    (class, pool) pair of activity ``k`` and ``service_rates[k]`` its rate.
    """

    num_classes: int
    num_pools: int
    arrival_rates: tuple[float, ...]
    pool_sizes: tuple[float, ...]
    activities: tuple[tuple[int, int], ...]
    service_rates: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "arrival_rates", tuple(float(x) for x in self.arrival_rates))
        object.__setattr__(self, "pool_sizes", tuple(float(x) for x in self.pool_sizes))
        object.__setattr__(self, "activities", tuple((int(i), int(j)) for i, j in self.activities))
        object.__setattr__(self, "service_rates", tuple(float(x) for x in self.service_rates))

    @property
    def num_activities(self) -> int:
        return len(self.activities)

    def activity_index(self, i: int, j: int) -> int:
        return self.activities.index((i, j))

    def pools_of(self, i: int) -> list[int]:
        """S(i): pools that can serve class i."""
        return [j for (c, j) in self.activities if c == i]

    def classes_of(self, j: int) -> list[int]:
        """C(j): classes that pool j can serve."""
        return [c for (c, p) in self.activities if p == j]

    def mu(self, i: int, j: int) -> float:
        try:
            return self.service_rates[self.activity_index(i, j)]
        except ValueError:
            return 0.0

    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """Class-by-activity and pool-by-activity 0/1 incidence matrices."""
        a_cls = np.zeros((self.num_classes, self.num_activities))
        a_pool = np.zeros((self.num_pools, self.num_activities))
        for k, (i, j) in enumerate(self.activities):
            a_cls[i, k] = 1.0
            a_pool[j, k] = 1.0
        return a_cls, a_pool

    def scaled(self, factor: float) -> "Network":
        """Same network with every arrival and service rate multiplied by ``factor``."""
        return Network(
            self.num_classes,
            self.num_pools,
            tuple(x * factor for x in self.arrival_rates),
            self.pool_sizes,
            self.activities,
            tuple(m * factor for m in self.service_rates),
        )

    def relabeled(self, class_perm: Sequence[int], pool_perm: Sequence[int]) -> "Network":
        """Rename class ``i`` to ``class_perm[i]`` and pool ``j`` to ``pool_perm[j]``."""
        lam = [0.0] * self.num_classes
        for i, x in enumerate(self.arrival_rates):
            lam[class_perm[i]] = x
        beta = [0.0] * self.num_pools
        for j, x in enumerate(self.pool_sizes):
            beta[pool_perm[j]] = x
        pairs = sorted(
            ((class_perm[i], pool_perm[j]), m)
            for (i, j), m in zip(self.activities, self.service_rates)
        )
        return Network(
            self.num_classes,
            self.num_pools,
            tuple(lam),
            tuple(beta),
            tuple(p for p, _ in pairs),
            tuple(m for _, m in pairs),
        )

    # JSON: 1-based indices, ``[i, j, mu]`` activity triples.
    def to_dict(self) -> dict:
        return {
            "classes": self.num_classes,
            "pools": self.num_pools,
            "lambda": list(self.arrival_rates),
            "beta": list(self.pool_sizes),
            "activities": [[i + 1, j + 1, m] for (i, j), m in zip(self.activities, self.service_rates)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        try:
            acts = [(int(a[0]) - 1, int(a[1]) - 1) for a in d["activities"]]
            mus = [float(a[2]) for a in d["activities"]]
            return cls(int(d["classes"]), int(d["pools"]), d["lambda"], d["beta"], acts, mus)
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise ValueError(f"malformed network description: {exc!r}") from exc


def load_network(path: str | Path) -> Network:
    with open(path) as fh:
        return Network.from_dict(json.load(fh))


def save_network(net: Network, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(net.to_dict(), fh, indent=2)
        fh.write("\n")


def net_1() -> Network:
    """Single class, single pool: an M/M/N system at load 0.5."""
    return Network(1, 1, (0.5,), (1.0,), ((0, 0),), (1.0,))


def net_n() -> Network:
    """The 'N' network: class 1 -> pool 2, class 2 -> pools 1 and 2."""
    return Network(2, 2, (0.5, 1.2), (1.0, 1.0), ((0, 1), (1, 0), (1, 1)), (1.0, 1.0, 1.0))


def net_w() -> Network:
    """Two classes sharing one pool with different service speeds."""
    return Network(2, 1, (0.3, 0.4), (1.0,), ((0, 0), (1, 0)), (1.0, 2.0))


CANONICAL = {"NET-1": net_1, "NET-N": net_n, "NET-W": net_w}


def _is_spanning_tree(num_classes: int, num_pools: int, edges) -> bool:
    n = num_classes + num_pools
    edges = list(edges)
    if len(edges) != n - 1:
        return False
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        a, b = find(i), find(num_classes + j)
        if a == b:
            return False
        parent[a] = b
    return True


def validate_network(net: Network) -> list[str]:
    """Return every violated structural condition; empty when ``net`` is usable."""
    report = []
    if net.num_classes < 1:
        report.append("number of classes must be positive")
    if net.num_pools < 1:
        report.append("number of pools must be positive")
    if len(net.arrival_rates) != net.num_classes:
        report.append("lambda length does not match number of classes")
    if len(net.pool_sizes) != net.num_pools:
        report.append("beta length does not match number of pools")
    if len(net.service_rates) != len(net.activities):
        report.append("one service rate required per activity")
    if report:
        return report

    for i, lam in enumerate(net.arrival_rates):
        if not (lam > 0 and math.isfinite(lam)):
            report.append(f"arrival rate of class {i + 1} must be positive")
    for j, b in enumerate(net.pool_sizes):
        if not (b > 0 and math.isfinite(b)):
            report.append(f"size of pool {j + 1} must be positive")

    in_range = True
    for (i, j), m in zip(net.activities, net.service_rates):
        if not (0 <= i < net.num_classes and 0 <= j < net.num_pools):
            report.append(f"activity ({i + 1},{j + 1}) references an unknown class or pool")
            in_range = False
        elif not (m > 0 and math.isfinite(m)):
            report.append(f"service rate of activity ({i + 1},{j + 1}) must be positive")
    if len(set(net.activities)) != len(net.activities):
        report.append("duplicate activity")
    if not in_range:
        return report

    for i in range(net.num_classes):
        if not net.pools_of(i):
            report.append(f"class {i + 1} has no activity")
    for j in range(net.num_pools):
        if not net.classes_of(j):
            report.append(f"pool {j + 1} has no activity")
    if not _is_spanning_tree(net.num_classes, net.num_pools, set(net.activities)):
        report.append(NOT_A_TREE)
    return report


def require_valid(net: Network) -> None:
    report = validate_network(net)
    if report:
        raise InvalidNetworkError(report)


@dataclass
class SppSolution:
    routing_rates: np.ndarray  # per activity, aligned with net.activities
    rho: float
    basic_activities: tuple[tuple[int, int], ...]
    unique: bool = True
    pool_loads: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def rate(self, net: Network, i: int, j: int) -> float:
        return float(self.routing_rates[net.activity_index(i, j)])


def _spp_matrices(net: Network):
    n_e = net.num_activities
    a_cls, a_pool = net.incidence()
    mu = np.array(net.service_rates)
    beta = np.array(net.pool_sizes)
    # pool load rows: sum_i lam_ij / (beta_j mu_ij) - rho <= 0
    load = a_pool / (beta[:, None] * mu[None, :])
    a_ub = np.hstack([load, -np.ones((net.num_pools, 1))])
    a_eq = np.hstack([a_cls, np.zeros((net.num_classes, 1))])
    b_eq = np.array(net.arrival_rates)
    c = np.zeros(n_e + 1)
    c[-1] = 1.0
    return c, a_ub, a_eq, b_eq, load


_HIGHS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _tree_solution(net: Network):
    """Solve the square system where every pool constraint binds."""
    n_e = net.num_activities
    a_cls, a_pool = net.incidence()
    mu = np.array(net.service_rates)
    beta = np.array(net.pool_sizes)
    m = np.zeros((n_e + 1, n_e + 1))
    rhs = np.zeros(n_e + 1)
    m[: net.num_classes, :n_e] = a_cls
    rhs[: net.num_classes] = net.arrival_rates
    m[net.num_classes :, :n_e] = a_pool / (beta[:, None] * mu[None, :])
    m[net.num_classes :, -1] = -1.0
    sol = np.linalg.solve(m, rhs)
    return sol[:n_e], float(sol[-1])


def _optimal_face_is_point(net: Network, rho: float) -> bool:
    c, a_ub, a_eq, b_eq, _ = _spp_matrices(net)
    n_e = net.num_activities
    cap = rho + RHO_TOL * max(1.0, abs(rho))
    bounds = [(0, None)] * n_e + [(0, cap)]
    scale = max(net.arrival_rates)
    for k in range(n_e):
        lo_hi = []
        for sign in (1.0, -1.0):
            obj = np.zeros(n_e + 1)
            obj[k] = sign
            res = linprog(obj, A_ub=a_ub, b_ub=np.zeros(len(a_ub)), A_eq=a_eq, b_eq=b_eq,
                          bounds=bounds, method="highs", options=_HIGHS)
            lo_hi.append(sign * res.fun)
        if lo_hi[1] - lo_hi[0] > 1e-6 * scale:
            return False
    return True


def solve_spp(net: Network) -> SppSolution:
    """Minimize the maximal pool load over routing splits.

    Raises ``DegenerateOptimumError`` when the minimizing split is not unique.
    """
    require_valid(net)
    c, a_ub, a_eq, b_eq, load = _spp_matrices(net)
    n_e = net.num_activities

    lam, rho = _tree_solution(net)
    scale = max(net.arrival_rates)
    if np.all(lam > FEAS_TOL * scale):
        # strictly positive duals on a tree certify optimality and uniqueness
        unique = True
    else:
        res = linprog(c, A_ub=a_ub, b_ub=np.zeros(len(a_ub)), A_eq=a_eq, b_eq=b_eq,
                      bounds=[(0, None)] * (n_e + 1), method="highs", options=_HIGHS)
        if res.status == 2:
            raise InfeasibleLPError("static planning LP is infeasible")
        if res.status != 0:
            raise InfeasibleLPError(f"LP solver failed: {res.message}")
        lam = np.clip(res.x[:n_e], 0.0, None)
        rho = float(res.x[-1])
        unique = _optimal_face_is_point(net, rho)
        if not unique:
            raise DegenerateOptimumError(
                f"static planning LP optimum (rho={rho:.12g}) is not unique; "
                "complete resource pooling fails"
            )
    lam[np.abs(lam) <= FEAS_TOL * scale] = 0.0
    basic = tuple(a for a, x in zip(net.activities, lam) if x > 0)
    return SppSolution(lam, rho, basic, unique, load @ lam)


def check_crp(sol: SppSolution, net: Network) -> tuple[bool, str]:
    if not sol.unique:
        return False, "optimal routing split is not unique"
    if not _is_spanning_tree(net.num_classes, net.num_pools, sol.basic_activities):
        missing = [f"({i + 1},{j + 1})" for (i, j) in net.activities if (i, j) not in sol.basic_activities]
        return False, "basic activities do not span the class/pool graph; zero rate on " + ", ".join(missing)
    slack = np.abs(sol.pool_loads - sol.rho)
    if np.any(slack > FEAS_TOL * max(1.0, sol.rho)):
        return False, "some pool constraint is not binding"
    return True, "ok"


@dataclass
class DualVariables:
    workloads: np.ndarray  # nu_i
    pool_rates: np.ndarray  # alpha_j


def compute_duals(net: Network) -> DualVariables:
    """Propagate nu_i mu_ij = alpha_j / beta_j over the activity tree, then normalize.

    The tree is rooted at pool 0; the unnormalized root value is alpha_0 = 1.
    """
    require_valid(net)
    nu = [None] * net.num_classes
    alpha = [None] * net.num_pools
    alpha[0] = 1.0
    stack = [("pool", 0)]
    while stack:
        kind, v = stack.pop()
        for (i, j), m in zip(net.activities, net.service_rates):
            if kind == "pool" and j == v and nu[i] is None:
                nu[i] = alpha[j] / (net.pool_sizes[j] * m)
                stack.append(("class", i))
            elif kind == "class" and i == v and alpha[j] is None:
                alpha[j] = nu[i] * m * net.pool_sizes[j]
                stack.append(("pool", j))
    total = sum(alpha)
    return DualVariables(np.array(nu) / total, np.array(alpha) / total)


def workload(duals: DualVariables, net: Network) -> float:
    """Sum_i nu_i lambda_i, which equals rho under complete resource pooling."""
    return float(np.dot(duals.workloads, net.arrival_rates))
