import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laplab.errors import DegenerateOptimumError, InvalidNetworkError
from laplab.model import (NOT_A_TREE, Network, check_crp, compute_duals, load_network, net_1, net_n, net_w,
                          save_network, solve_spp, validate_network, workload)
from oracles import random_crp_network, random_tree_network, spp_vertex_rho


def cyclic_net_n():
    n = net_n()
    return Network(2, 2, n.arrival_rates, n.pool_sizes, [(0, 0)] + list(n.activities), (1.0,) + n.service_rates)


class TestValidation:
    def test_canonical_nets_are_valid(self):
        for net in (net_1(), net_n(), net_w()):
            assert validate_network(net) == []

    def test_cycle_reported(self):
        assert NOT_A_TREE in validate_network(cyclic_net_n())

    def test_complete_bipartite_rejected_before_crp(self):
        net = Network(2, 2, (0.5, 0.5), (1, 1), [(0, 0), (0, 1), (1, 0), (1, 1)], (1, 1, 1, 1))
        assert NOT_A_TREE in validate_network(net)
        with pytest.raises(InvalidNetworkError):
            solve_spp(net)

    def test_lists_every_problem(self):
        net = Network(2, 2, (0.5, -1.0), (1, 0), [(0, 0), (1, 0)], (1, 1))
        report = validate_network(net)
        assert "arrival rate of class 2 must be positive" in report
        assert "size of pool 2 must be positive" in report
        assert "pool 2 has no activity" in report

    def test_forest_is_not_a_tree(self):
        net = Network(2, 2, (0.5, 0.5), (1, 1), [(0, 0), (1, 1)], (1, 1))
        assert NOT_A_TREE in validate_network(net)


class TestSpp:
    def test_single_activity(self):
        sol = solve_spp(net_1())
        assert sol.rho == pytest.approx(0.5, abs=1e-12)
        assert sol.routing_rates[0] == pytest.approx(0.5, abs=1e-12)

    def test_net_n(self):
        sol = solve_spp(net_n())
        assert sol.rho == pytest.approx(0.85, abs=1e-12)
        np.testing.assert_allclose(sol.routing_rates, [0.5, 0.85, 0.35], atol=1e-12)
        assert check_crp(sol, net_n()) == (True, "ok")

    def test_net_w(self):
        sol = solve_spp(net_w())
        assert sol.rho == pytest.approx(0.5, abs=1e-12)
        np.testing.assert_allclose(sol.routing_rates, [0.3, 0.4], atol=1e-12)

    def test_net_1_crp(self):
        assert check_crp(solve_spp(net_1()), net_1())[0]

    def test_class_balance_and_pool_loads(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            net = random_crp_network(rng)
            sol = solve_spp(net)
            a_cls, _ = net.incidence()
            np.testing.assert_allclose(a_cls @ sol.routing_rates, net.arrival_rates, atol=1e-10)
            np.testing.assert_allclose(sol.pool_loads, sol.rho, atol=1e-10)

    def test_general_trees_match_oracle_or_report_degeneracy(self):
        rng = np.random.default_rng(5)
        matched = degenerate = 0
        for _ in range(60):
            net = random_tree_network(rng)
            try:
                rho = solve_spp(net).rho
            except DegenerateOptimumError:
                degenerate += 1
                continue
            assert rho == pytest.approx(spp_vertex_rho(net), abs=1e-9)
            matched += 1
        assert matched > 0 and degenerate > 0

    def test_degenerate_optimum(self):
        # class 1 alone sets the load on pool 1; class 2 may split freely over pools 2 and 3
        net = Network(2, 3, (0.9, 0.2), (1, 1, 1), [(0, 0), (1, 0), (1, 1), (1, 2)], (1, 1, 1, 1))
        with pytest.raises(DegenerateOptimumError):
            solve_spp(net)


class TestDuals:
    def test_values(self):
        d = compute_duals(net_1())
        np.testing.assert_allclose(d.workloads, [1.0])
        np.testing.assert_allclose(d.pool_rates, [1.0])
        d = compute_duals(net_n())
        np.testing.assert_allclose(d.workloads, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(d.pool_rates, [0.5, 0.5], atol=1e-12)
        d = compute_duals(net_w())
        np.testing.assert_allclose(d.workloads, [1.0, 0.5], atol=1e-12)
        np.testing.assert_allclose(d.pool_rates, [1.0], atol=1e-12)

    def test_edge_identity_and_workload(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            net = random_crp_network(rng)
            d = compute_duals(net)
            for (i, j), m in zip(net.activities, net.service_rates):
                assert d.workloads[i] * m == pytest.approx(d.pool_rates[j] / net.pool_sizes[j], abs=1e-10)
            assert d.pool_rates.sum() == pytest.approx(1.0, abs=1e-12)
            assert workload(d, net) == pytest.approx(solve_spp(net).rho, abs=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), factor=st.floats(0.1, 10.0))
    def test_rate_scaling(self, seed, factor):
        net = random_crp_network(np.random.default_rng(seed))
        big = net.scaled(factor)
        assert solve_spp(big).rho == pytest.approx(solve_spp(net).rho, rel=1e-9)
        a, b = compute_duals(net), compute_duals(big)
        np.testing.assert_allclose(b.pool_rates, a.pool_rates, atol=1e-12)
        np.testing.assert_allclose(b.workloads, a.workloads / factor, rtol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_relabeling(self, seed):
        rng = np.random.default_rng(seed)
        net = random_tree_network(rng)
        cp = rng.permutation(net.num_classes)
        pp = rng.permutation(net.num_pools)
        a, b = compute_duals(net), compute_duals(net.relabeled(cp, pp))
        np.testing.assert_allclose(b.workloads[cp], a.workloads, atol=1e-12)
        np.testing.assert_allclose(b.pool_rates[pp], a.pool_rates, atol=1e-12)


class TestFiles:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        for _ in range(10):
            net = random_tree_network(rng)
            path = tmp_path / "n.json"
            save_network(net, path)
            back = load_network(path)
            assert back == net
            save_network(back, tmp_path / "m.json")
            assert (tmp_path / "m.json").read_bytes() == path.read_bytes()

    def test_one_based_triples(self, tmp_path):
        save_network(net_n(), tmp_path / "n.json")
        doc = json.loads((tmp_path / "n.json").read_text())
        assert doc["activities"] == [[1, 2, 1.0], [2, 1, 1.0], [2, 2, 1.0]]
        assert doc["classes"] == 2 and doc["pools"] == 2

    def test_malformed(self):
        with pytest.raises(ValueError):
            Network.from_dict({"classes": 1})
