"""Command-line entry point.

Every subcommand resolves its settings as built-in defaults, then values
from ``--config FILE`` (a JSON object), then explicit flags. The seed falls
back to ``$LAPLAB_SEED`` and then 0. Outputs go to ``--out`` together with a
``manifest.json`` from which ``laplab replay`` reproduces them exactly.

Exit codes: 0 success, 1 runtime error, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidNetworkError, LapError
from .model import CANONICAL, Network, check_crp, compute_duals, load_network, require_valid, solve_spp, workload
from .priority import (TIE_BREAKS, assign_priorities, check_assumption3, compute_equilibrium, lowest_pool,
                       random_tie_break)

DEFAULTS = {
    "analyze": {},
    "fluid": {"initial": "empty", "horizon": 20.0, "step": 1e-3, "record_every": 10, "drain_radius": None,
              "eps": 1e-3},
    "hydro": {"initial": "random", "horizon": 10.0, "step": 1e-2, "record_every": 1},
    "lfm": {"initial": "random", "horizon": 20.0, "dt": 0.01, "method": "expm"},
    "simulate": {"r": 100, "horizon": 100.0, "warmup": 0.0, "sample_interval": 1.0,
                 "initial": "equilibrium-rounded", "batches": 0, "event_log": False},
    "sweep": {"r": [25, 50, 100, 200, 400], "eps": 0.25, "T": "auto", "warmup_fraction": 0.1,
              "replications": 10, "batches": 10, "tail_constant": 1.0, "workers": None},
    "lyapunov": {"r": 100, "window": 20.0, "level": 5.0, "replications": 50},
    "oracle": {"r": 5, "queue_cap": 200},
}
COMMON = {"net": None, "canonical": None, "tie_break": "lowest", "seed": None}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _level(text: str):
    return None if text.lower() in ("none", "equilibrium") else float(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="laplab", description="Leaf activity priority analysis and simulation.")
    p.add_argument("--version", action="version", version=f"laplab {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="JSON file with settings; flags take precedence")
        c.add_argument("--out", default=".", help="output directory (default: current)")
        src = c.add_mutually_exclusive_group()
        src.add_argument("--net", help="network JSON file")
        src.add_argument("--canonical", choices=sorted(CANONICAL), help="built-in network")
        c.add_argument("--tie-break", dest="tie_break", choices=sorted(TIE_BREAKS) + ["random"])
        c.add_argument("--seed", type=int, help="base seed (fallback: $LAPLAB_SEED, then 0)")
        return c

    command("analyze", "static planning LP, duals, priorities and equilibrium")

    c = command("fluid", "integrate the fluid model")
    c.add_argument("--initial", help="'empty', 'equilibrium' or a JSON file with psi and q")
    c.add_argument("--horizon", type=float)
    c.add_argument("--step", type=float)
    c.add_argument("--record-every", dest="record_every", type=int)
    c.add_argument("--drain-radius", dest="drain_radius", type=float,
                   help="also measure the drain time from states of this norm")
    c.add_argument("--eps", type=float, help="equilibrium ball radius for the drain time")

    c = command("hydro", "integrate the hydrodynamic model and compare with its freezing map")
    c.add_argument("--initial", help="'random' or a JSON file with u and w")
    c.add_argument("--horizon", type=float)
    c.add_argument("--step", type=float)
    c.add_argument("--record-every", dest="record_every", type=int)

    c = command("lfm", "linear maps, decay constants and a local fluid trajectory")
    c.add_argument("--initial", help="'random' or a JSON file with u and w")
    c.add_argument("--horizon", type=float)
    c.add_argument("--dt", type=float)
    c.add_argument("--method", choices=["expm", "rk4"])

    c = command("simulate", "simulate the r-scaled system")
    c.add_argument("--r", type=int)
    c.add_argument("--horizon", type=float)
    c.add_argument("--warmup", type=float)
    c.add_argument("--sample-interval", dest="sample_interval", type=float)
    c.add_argument("--initial", choices=["empty", "equilibrium-rounded"])
    c.add_argument("--batches", type=int, help="batch-means stationary estimate with this many batches")
    c.add_argument("--event-log", dest="event_log", action="store_const", const=True)

    c = command("sweep", "stationary deviation size across r")
    c.add_argument("--r", type=_int_list, help="comma-separated scales")
    c.add_argument("--eps", type=float)
    c.add_argument("--T", dest="T", help="horizon multiplier, or 'auto'")
    c.add_argument("--warmup-fraction", dest="warmup_fraction", type=float)
    c.add_argument("--replications", type=int)
    c.add_argument("--batches", type=int)
    c.add_argument("--tail-constant", dest="tail_constant", type=float)
    c.add_argument("--workers", type=int, help="worker processes (default: available cores)")

    c = command("lyapunov", "workload drift from a padded initial state")
    c.add_argument("--r", type=int)
    c.add_argument("--window", type=float)
    c.add_argument("--level", type=_level, help="initial fluid workload, or 'equilibrium'")
    c.add_argument("--replications", type=int)

    c = command("oracle", "exact stationary moments on a truncated state space")
    c.add_argument("--r", type=int)
    c.add_argument("--queue-cap", dest="queue_cap", type=int)

    c = sub.add_parser("replay", help="re-run a command from its manifest")
    c.add_argument("manifest")
    c.add_argument("--out", default=".", help="output directory (default: current)")
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(COMMON)
    cfg.update(DEFAULTS[command])
    if args.config:
        with open(args.config) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed config {args.config}: {exc.msg} at line {exc.lineno}")
        if not isinstance(loaded, dict):
            raise ValueError(f"malformed config {args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ValueError(f"malformed config {args.config}: unknown keys {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "net", None):
        cfg["canonical"] = None
    elif getattr(args, "canonical", None):
        cfg["net"] = None
    if cfg["seed"] is None:
        env = os.environ.get("LAPLAB_SEED")
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError:
            raise ValueError(f"LAPLAB_SEED must be an integer, got {env!r}")
    if cfg["net"] is None and cfg["canonical"] is None:
        raise UsageError("no network given: use --net FILE or --canonical NAME")
    return cfg


def _network(cfg: dict) -> Network:
    net = load_network(cfg["net"]) if cfg["net"] else CANONICAL[cfg["canonical"]]()
    require_valid(net)
    return net


def _order(net: Network, cfg: dict):
    tb = random_tie_break(cfg["seed"]) if cfg["tie_break"] == "random" else cfg["tie_break"]
    return assign_priorities(net, tb)


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _pairs(net: Network, values) -> list:
    return [[i + 1, j + 1, float(v)] for (i, j), v in zip(net.activities, values)]


def _read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _analysis(net: Network, cfg: dict) -> dict:
    sol = solve_spp(net)
    crp, crp_msg = check_crp(sol, net)
    duals = compute_duals(net)
    po = _order(net, cfg)
    eq = compute_equilibrium(net, po, strict=False)
    a3, a3_msg = check_assumption3(net, eq, po)
    return {
        "network": net.to_dict(),
        "rho": sol.rho,
        "routing_rates": _pairs(net, sol.routing_rates),
        "unique": sol.unique,
        "crp": {"holds": crp, "diagnostic": crp_msg},
        "nu": [float(x) for x in duals.workloads],
        "alpha": [float(x) for x in duals.pool_rates],
        "workload": workload(duals, net),
        "priority": po.to_dict(net),
        "lowest_pool": lowest_pool(net, po) + 1,
        "equilibrium": eq.to_dict(net),
        "pool_occupancy": [float(x) for x in eq.pool_occupancy(net)],
        "assumption3": {"holds": a3, "diagnostic": a3_msg},
    }


def run_analyze(net, cfg, out):
    result = _analysis(net, cfg)
    _dump(out / "analysis.json", result)
    print(json.dumps({k: result[k] for k in ("rho", "nu", "equilibrium")}, sort_keys=True))
    return ["analysis.json"]


def _fluid_initial(net, eq, spec):
    from .fluid import FluidState, equilibrium_state
    if spec == "empty":
        return FluidState(np.zeros(net.num_activities), np.zeros(net.num_classes))
    if spec == "equilibrium":
        return equilibrium_state(net, eq)
    d = _read_json(spec)
    return FluidState(np.array(d["psi"], float), np.array(d["q"], float))


def run_fluid(net, cfg, out):
    from .fluid import drain_time, integrate_fluid
    po = _order(net, cfg)
    eq = compute_equilibrium(net, po, strict=False)
    traj = integrate_fluid(_fluid_initial(net, eq, cfg["initial"]), net, po, cfg["horizon"], cfg["step"],
                           cfg["record_every"], eq)
    traj.write_csv(out / "fluid.csv", net)
    files = ["fluid.csv"]
    if cfg["drain_radius"] is not None:
        rep = drain_time(cfg["drain_radius"], cfg["eps"], net, po, seed=cfg["seed"])
        _dump(out / "drain.json", {"drain_time": rep.drain_time, "per_state": rep.per_state,
                                   "radius": cfg["drain_radius"], "eps": cfg["eps"]})
        files.append("drain.json")
    return files


def _deviation(net, po, cfg):
    from .scalelimits import DeviationState, random_deviation
    if cfg["initial"] == "random":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg["seed"], spawn_key=(6,)))
        return random_deviation(net, po, rng)
    d = _read_json(cfg["initial"])
    return DeviationState(np.array(d["u"], float), np.array(d["w"], float))


def run_hydro(net, cfg, out):
    from .scalelimits import integrate_hydro, map_L
    po = _order(net, cfg)
    eq = compute_equilibrium(net, po)
    dev = _deviation(net, po, cfg)
    traj = integrate_hydro(dev, net, po, cfg["horizon"], cfg["step"], cfg["record_every"], eq)
    target = map_L(dev, net, po)
    end = traj.terminal()
    traj.write_csv(out / "hydro.csv", net)
    _dump(out / "hydro.json", {
        "initial": {"u": dev.u.tolist(), "w": dev.w.tolist()},
        "terminal": {"u": end.u.tolist(), "w": end.w.tolist()},
        "map_L": {"u": target.u.tolist(), "w": target.w.tolist()},
        "terminal_error": float(np.max(np.abs(end.vector() - target.vector()))),
    })
    return ["hydro.csv", "hydro.json"]


def run_lfm(net, cfg, out):
    from .scalelimits import decay_constants, integrate_lfm, lfm_matrix
    po = _order(net, cfg)
    maps = lfm_matrix(net, po)
    dc = decay_constants(maps)
    traj = integrate_lfm(_deviation(net, po, cfg), maps, cfg["horizon"], net, cfg["dt"], cfg["method"])
    doc = maps.to_dict()
    doc["decay"] = {"c1": dc.c1, "c2": dc.c2, "c1_measured": dc.c1_measured,
                    "eigenvalues_real": dc.eigenvalues.real.tolist(),
                    "eigenvalues_imag": dc.eigenvalues.imag.tolist()}
    _dump(out / "maps.json", doc)
    traj.write_csv(out / "lfm.csv", net)
    return ["maps.json", "lfm.csv"]


def run_simulate(net, cfg, out):
    from .simulator import SimConfig, estimate_stationary, simulate_horizon, write_event_log
    po = _order(net, cfg)
    eq = compute_equilibrium(net, po, strict=False)
    duals = compute_duals(net)
    sim = SimConfig(seed=cfg["seed"], horizon=cfg["horizon"], warmup=cfg["warmup"], initial_state=cfg["initial"],
                    sample_interval=cfg["sample_interval"])
    res = simulate_horizon(net, po, eq, sim, cfg["r"], duals=duals, event_log=bool(cfg["event_log"]))
    res.trace.write_csv(out / "trace.csv", net)
    summary = {"time_average": res.summary}
    files = ["trace.csv", "summary.json"]
    if cfg["batches"]:
        est = estimate_stationary(net, po, eq, sim, cfg["r"], cfg["batches"], duals=duals,
                                  rho=solve_spp(net).rho)
        summary["stationary"] = est.to_dict()
    _dump(out / "summary.json", summary)
    if cfg["event_log"]:
        write_event_log(res.events, out / "events.csv")
        files.append("events.csv")
    return files


def run_sweep(net, cfg, out):
    from .experiments import ScalingConfig, available_workers, default_horizon_multiplier, run_scaling_sweep
    po = _order(net, cfg)
    eq = compute_equilibrium(net, po, strict=False)
    r_values = cfg["r"] if isinstance(cfg["r"], list) else _int_list(str(cfg["r"]))
    T = cfg["T"]
    T = default_horizon_multiplier(net, po, r_values[0]) if T in (None, "auto") else float(T)
    workers = cfg["workers"] or available_workers()
    sc = ScalingConfig(r_values, cfg["eps"], T, cfg["warmup_fraction"], cfg["replications"], cfg["seed"],
                       cfg["batches"], cfg["tail_constant"], workers)
    res = run_scaling_sweep(net, po, eq, sc)
    res.write_csv(out / "sweep.csv")
    res.write_json(out / "sweep.json", net)
    return ["sweep.csv", "sweep.json"]


def run_lyapunov(net, cfg, out):
    from .experiments import lyapunov_drift_check
    po = _order(net, cfg)
    eq = compute_equilibrium(net, po, strict=False)
    est = lyapunov_drift_check(net, po, eq, compute_duals(net), cfg["r"], cfg["window"], cfg["level"],
                               cfg["replications"], cfg["seed"])
    _dump(out / "lyapunov.json", est.to_dict())
    return ["lyapunov.json"]


def run_oracle(net, cfg, out):
    from .oracle import solve_ctmc_oracle
    po = _order(net, cfg)
    res = solve_ctmc_oracle(net, po, cfg["r"], cfg["queue_cap"])
    _dump(out / "oracle.json", {"r": cfg["r"], "queue_cap": cfg["queue_cap"], **res.moments()})
    return ["oracle.json"]


RUNNERS = {
    "analyze": run_analyze, "fluid": run_fluid, "hydro": run_hydro, "lfm": run_lfm,
    "simulate": run_simulate, "sweep": run_sweep, "lyapunov": run_lyapunov, "oracle": run_oracle,
}


def execute(command: str, cfg: dict, out: Path) -> dict:
    net = _network(cfg)
    out.mkdir(parents=True, exist_ok=True)
    files = RUNNERS[command](net, cfg, out)
    manifest = {
        "command": command,
        "inputs": [p for p in (cfg["net"], cfg.get("initial")) if p and Path(str(p)).suffix == ".json"],
        "resolved_config": cfg,
        "version": __version__,
        "base_seed": cfg["seed"],
        "outputs": files,
    }
    _dump(out / "manifest.json", manifest)
    return manifest


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(list(RUNNERS) + ["replay"]))
        if args.command == "replay":
            m = _read_json(args.manifest)
            if m.get("command") not in RUNNERS or not isinstance(m.get("resolved_config"), dict):
                raise ValueError(f"malformed manifest {args.manifest}")
            execute(m["command"], m["resolved_config"], Path(args.out))
        else:
            execute(args.command, resolve(args.command, args), Path(args.out))
    except UsageError as exc:
        print(f"laplab: error: {exc}", file=sys.stderr)
        return 2
    except InvalidNetworkError as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"laplab: error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"laplab: error: malformed JSON input: {exc.msg} at line {exc.lineno}", file=sys.stderr)
        return 1
    except (LapError, ValueError, KeyError, OSError) as exc:
        print(f"laplab: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
