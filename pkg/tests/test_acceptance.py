"""End-to-end acceptance checks. Each test appends one PASS/FAIL line to the run summary."""
import time

import numpy as np
import pytest

import conftest
from laplab.cli import dispatch
from laplab.experiments import (ScalingConfig, default_horizon_multiplier, fluid_limit_distance,
                                lyapunov_drift_check, median_by_r, run_scaling_sweep, available_workers)
from laplab.fluid import drain_time
from laplab.model import compute_duals, net_1, net_n, net_w, solve_spp, workload
from laplab.oracle import solve_ctmc_oracle
from laplab.priority import assign_priorities, check_assumption3, compute_equilibrium
from laplab.scalelimits import (decay_constants, integrate_hydro, integrate_lfm, lfm_matrix, map_L,
                                random_deviation)
from laplab.simulator import SimConfig, estimate_stationary
from oracles import erlang_c_mean_in_system, random_crp_network, spp_vertex_rho

CANONICAL = {"NET-1": net_1, "NET-N": net_n, "NET-W": net_w}


def setup(factory):
    net = factory()
    po = assign_priorities(net)
    return net, po, compute_equilibrium(net, po)


def report(n, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail} [{elapsed:.1f}s / {budget:.0f}s]"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_lp_and_dual_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    nets = [f() for f in CANONICAL.values()] + [random_crp_network(rng) for _ in range(100)]
    rho_err = dual_err = 0.0
    for net in nets:
        rho = solve_spp(net).rho
        rho_err = max(rho_err, abs(rho - spp_vertex_rho(net)))
        d = compute_duals(net)
        for (i, j), m in zip(net.activities, net.service_rates):
            dual_err = max(dual_err, abs(d.workloads[i] * m - d.pool_rates[j] / net.pool_sizes[j]))
        dual_err = max(dual_err, abs(d.pool_rates.sum() - 1.0), abs(workload(d, net) - rho))
    report(1, rho_err <= 1e-9 and dual_err <= 1e-10,
           f"{len(nets)} nets, max |rho - vertex rho| = {rho_err:.1e}, max dual residual = {dual_err:.1e}",
           time.perf_counter() - t0, 5)


def test_equilibrium_structure():
    t0 = time.perf_counter()
    net, po, eq = setup(net_n)
    err = np.max(np.abs(eq.occupancies - [0.5, 1.0, 0.2]))
    occ = eq.pool_occupancy(net)
    ok3, why = check_assumption3(net, eq, po)
    ok = err <= 1e-12 and abs(occ[0] - 1.0) <= 1e-12 and abs(occ[1] - 0.7) <= 1e-12 and ok3
    report(2, ok, f"psi* error {err:.1e}, pool occupancy {occ.tolist()}, assumption check {why!r}",
           time.perf_counter() - t0, 1)


def test_fluid_drain():
    t0 = time.perf_counter()
    worst, failures = {}, []
    for name, f in CANONICAL.items():
        net = f()
        try:
            worst[name] = drain_time(3.0, 1e-3, net, assign_priorities(net), n_random=20).drain_time
        except Exception as exc:  # any failure to settle counts
            failures.append(f"{name}: {exc}")
    detail = "worst drain times " + ", ".join(f"{k}={v:.2f}" for k, v in worst.items())
    report(3, not failures, detail + (f"; failures {failures}" if failures else ""), time.perf_counter() - t0, 30)


def test_hydrodynamic_freeze():
    t0 = time.perf_counter()
    map_err = cons_err = 0.0
    for f in CANONICAL.values():
        net, po, eq = setup(f)
        rng = np.random.default_rng(7)
        for _ in range(50):
            dev = random_deviation(net, po, rng)
            traj = integrate_hydro(dev, net, po, 40.0, eq=eq)
            map_err = max(map_err, float(np.max(np.abs(traj.terminal().vector() - map_L(dev, net, po).vector()))))
            x = traj.x(net)
            cons_err = max(cons_err, float(np.max(np.abs(x - x[0]))))
    report(4, map_err <= 1e-6 and cons_err <= 1e-9,
           f"150 starts, terminal vs map L {map_err:.1e}, conservation {cons_err:.1e}",
           time.perf_counter() - t0, 30)


def test_local_fluid_decay():
    t0 = time.perf_counter()
    path_err, excess = 0.0, -np.inf
    for f in CANONICAL.values():
        net, po, _ = setup(f)
        maps = lfm_matrix(net, po)
        dc = decay_constants(maps)
        rng = np.random.default_rng(11)
        for n in range(100):
            dev = random_deviation(net, po, rng)
            a = integrate_lfm(dev, maps, 20.0, net, dt=0.05)
            norms = np.linalg.norm(a.x, axis=1)
            bound = dc.c1 * np.exp(-dc.c2 * a.times) * norms[0]
            excess = max(excess, float(np.max(norms - bound * (1 + 1e-12))))
            if n < 10:
                b = integrate_lfm(dev, maps, 20.0, net, dt=0.05, method="rk4")
                path_err = max(path_err, float(np.max(np.abs(a.x - b.x))))
    report(5, path_err <= 1e-8 and excess <= 0,
           f"expm vs RK4 {path_err:.1e}, max excess over decay bound {excess:.1e}", time.perf_counter() - t0, 10)


def test_ctmc_exactness():
    t0 = time.perf_counter()
    net, po, eq = setup(net_1)
    oracle = solve_ctmc_oracle(net, po, 5, 200).mean_total
    closed = erlang_c_mean_in_system(2.5, 1.0, 5)
    est = estimate_stationary(net, po, eq, SimConfig(seed=0, horizon=20000.0, warmup=200.0), 5, 20)
    sim, hw = est.means["total"], est.half_widths["total"]
    ok = abs(sim - oracle) <= 3 * hw and abs(oracle - closed) <= 1e-8
    report(6, ok, f"sim {sim:.4f} +/- {hw:.4f}, oracle {oracle:.10f}, Erlang-C {closed:.10f}",
           time.perf_counter() - t0, 120)


def test_fluid_scale_law_of_large_numbers():
    t0 = time.perf_counter()
    net, po, eq = setup(net_n)
    rows = fluid_limit_distance(net, po, eq, [100, 400], range(20), horizon=10.0)
    med = median_by_r(rows)
    ok = med[400] < 0.5 * med[100] and med[400] < 0.1
    report(7, ok, f"median sup distance r=100: {med[100]:.4f}, r=400: {med[400]:.4f} (need < half and < 0.1)",
           time.perf_counter() - t0, 300)


def test_tightness_exponent():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in ("NET-1", "NET-N"):
        net, po, eq = setup(CANONICAL[name])
        r_values = [25, 50, 100, 200, 400]
        cfg = ScalingConfig(r_values, horizon_multiplier=default_horizon_multiplier(net, po, r_values[0]),
                            replications=10, workers=min(4, available_workers()))
        res = run_scaling_sweep(net, po, eq, cfg)
        good = 0.35 <= res.slope <= 0.65 and res.scaled_nonincreasing()
        ok = ok and good
        parts.append(f"{name} slope {res.slope:.3f}, scaled medians nonincreasing {res.scaled_nonincreasing()}")
    report(8, ok, "; ".join(parts), time.perf_counter() - t0, 900)


def test_lyapunov_drift():
    t0 = time.perf_counter()
    net, po, eq = setup(net_n)
    est = lyapunov_drift_check(net, po, eq, compute_duals(net), 100, 20.0, 5.0, replications=50)
    report(9, est.negative, f"W(0) = {est.initial_W:.3f}, drift {est.drift:.3f} +/- {est.half_width:.3f}",
           time.perf_counter() - t0, 300)


RUNS = {
    "analyze": [],
    "fluid": ["--horizon", "3", "--drain-radius", "1"],
    "hydro": ["--horizon", "3"],
    "lfm": ["--horizon", "3"],
    "simulate": ["--r", "20", "--horizon", "5", "--batches", "4", "--event-log"],
    "sweep": ["--r", "10,20", "--T", "3", "--replications", "2"],
    "lyapunov": ["--r", "20", "--window", "2", "--replications", "5"],
    "oracle": ["--r", "2", "--queue-cap", "30"],
}


def test_determinism(tmp_path):
    t0 = time.perf_counter()
    mismatched = []
    for cmd, extra in RUNS.items():
        first, again = tmp_path / cmd / "first", tmp_path / cmd / "replay"
        assert dispatch([cmd, "--canonical", "NET-N", "--seed", "3", "--out", str(first)] + extra) == 0
        assert dispatch(["replay", str(first / "manifest.json"), "--out", str(again)]) == 0
        names = sorted(p.name for p in first.iterdir())
        if names != sorted(p.name for p in again.iterdir()):
            mismatched.append(f"{cmd}: file sets differ")
        for name in names:
            if (first / name).read_bytes() != (again / name).read_bytes():
                mismatched.append(f"{cmd}/{name}")
    report(10, not mismatched, f"{len(RUNS)} commands replayed" + (f"; differing {mismatched}" if mismatched else ""),
           time.perf_counter() - t0, 60)
