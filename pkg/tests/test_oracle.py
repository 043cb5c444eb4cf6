import numpy as np
import pytest

from laplab.errors import StateSpaceTooLargeError
from laplab.model import net_1, net_n, net_w
from laplab.oracle import solve_ctmc_oracle
from laplab.priority import assign_priorities, compute_equilibrium
from laplab.simulator import SimConfig, estimate_stationary
from oracles import erlang_c_mean_in_system


def test_single_server_busy_probability():
    net = net_1()
    res = solve_ctmc_oracle(net, assign_priorities(net), 1, 100)
    # M/M/1 with load 1/2: P(busy) = 1/2, mean in system = 1
    assert res.mean_psi[0] == pytest.approx(0.5, abs=1e-10)
    assert res.mean_total == pytest.approx(1.0, abs=1e-10)


def test_erlang_c():
    net = net_1()
    res = solve_ctmc_oracle(net, assign_priorities(net), 5, 200)
    assert res.mean_total == pytest.approx(erlang_c_mean_in_system(2.5, 1.0, 5), abs=1e-8)
    assert res.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(res.probs >= -1e-15)


def test_single_pool_two_classes_total_is_erlang_c():
    # with equal service rates the busy-server count is M/M/c regardless of class mix
    from laplab.model import Network
    net = Network(2, 1, (0.3, 0.4), (1.0,), [(0, 0), (1, 0)], (1.0, 1.0))
    res = solve_ctmc_oracle(net, assign_priorities(net), 3, 70)
    assert res.mean_total == pytest.approx(erlang_c_mean_in_system(2.1, 1.0, 3), abs=1e-6)


@pytest.mark.parametrize("factory", [net_n, net_w])
def test_agrees_with_simulation(factory):
    net = factory()
    po = assign_priorities(net)
    eq = compute_equilibrium(net, po)
    res = solve_ctmc_oracle(net, po, 3, 30)
    est = estimate_stationary(net, po, eq, SimConfig(seed=21, horizon=6000.0, warmup=100.0), 3, 20)
    assert abs(est.means["total"] - res.mean_total) <= 3 * est.half_widths["total"]


def test_too_large():
    net = net_n()
    with pytest.raises(StateSpaceTooLargeError):
        solve_ctmc_oracle(net, assign_priorities(net), 40, 10_000)
