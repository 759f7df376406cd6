from __future__ import annotations

import math
from importlib import resources
from dataclasses import fields

import numpy as np
import pytest

from builders import TWO_BUS_M, bus, gen, line, make_case, ring_case
from gridsplit.network import (
    CaseSyntaxError,
    CaseValidationError,
    adjacency,
    build_admittance,
    load_case,
    parse_case,
    to_json,
    to_matpower,
)


def _pi_model_oracle(br, n=2):
    """Two-port admittance from an explicit ideal-transformer-plus-pi circuit."""
    t = br.tap_ratio * complex(math.cos(br.phase_shift), math.sin(br.phase_shift))
    ys = 1 / complex(br.series_r, br.series_x)
    ysh = 0.5j * br.charging_b
    Y = np.zeros((2, 2), dtype=complex)
    for col, (vf, vt) in enumerate(((1.0, 0.0), (0.0, 1.0))):
        vf_int = vf / t
        i_series = ys * (vf_int - vt)
        i_f_int = i_series + ysh * vf_int
        i_f = i_f_int / np.conj(t)  # lossless ideal transformer
        i_t = -i_series + ysh * vt
        Y[:, col] = (i_f, i_t)
    return Y


class TestParse:
    def test_two_bus_fixture(self):
        c = parse_case(TWO_BUS_M, name="two_bus")
        assert (c.n_bus, c.n_branch, c.n_gen) == (2, 1, 1)
        assert c.buses[c.reference_index].id == 1
        assert c.buses[1].p_load == pytest.approx(0.1)
        assert c.buses[1].q_load == pytest.approx(0.05)
        assert c.generators[0].p_max == pytest.approx(2.0)
        assert c.generators[0].cost_a == 0.01

    def test_case14_counts(self, case14):
        assert (case14.n_bus, case14.n_branch, case14.n_gen) == (14, 20, 5)

    def test_case30_and_case118_counts(self, case30):
        assert (case30.n_bus, case30.n_branch, case30.n_gen) == (30, 41, 6)
        c = load_case("case118")
        assert (c.n_bus, c.n_branch, c.n_gen) == (118, 186, 54)

    def test_syntax_error_reports_line(self):
        bad = TWO_BUS_M.replace("0.01\t0.1\t0.02", "0.01\t0.x1\t0.02")
        with pytest.raises(CaseSyntaxError) as err:
            parse_case(bad)
        expected = 1 + next(k for k, row in enumerate(bad.splitlines()) if "0.x1" in row)
        assert err.value.line == expected == 12

    def test_unterminated_matrix(self):
        with pytest.raises(CaseSyntaxError):
            parse_case(TWO_BUS_M.split("mpc.gencost")[0] + "mpc.gencost = [\n 2 0 0 3 1 2 3;\n")

    def test_piecewise_linear_cost_rejected(self):
        bad = TWO_BUS_M.replace("2\t0\t0\t3\t0.01\t20\t5;", "1\t0\t0\t2\t0\t0\t100\t2000;")
        with pytest.raises(CaseValidationError, match="piecewise"):
            parse_case(bad)

    def test_two_reference_buses_rejected(self):
        bad = TWO_BUS_M.replace("2\t1\t10\t5", "2\t3\t10\t5")
        with pytest.raises(CaseValidationError, match="reference"):
            parse_case(bad)

    def test_unknown_generator_bus_rejected(self):
        bad = TWO_BUS_M.replace("\t1\t0\t0\t100\t-100", "\t7\t0\t0\t100\t-100")
        with pytest.raises(CaseValidationError, match="unknown bus"):
            parse_case(bad)

    def test_invalid_json(self):
        with pytest.raises(CaseSyntaxError) as err:
            parse_case('{\n "base_mva": 100,\n oops\n}', "json")
        assert err.value.line == 3

    @pytest.mark.parametrize(
        "kwargs, message",
        [
            (dict(base=0.0), "base_mva"),
            (dict(vmin=1.2), "v_min"),
            (dict(r=0.0, x=0.0), "impedance"),
            (dict(tap=-1.0), "tap_ratio"),
            (dict(a=-1.0), "cost_a"),
        ],
    )
    def test_validation_errors(self, kwargs, message):
        with pytest.raises(CaseValidationError, match=message):
            make_case(
                [bus(1, ref=True, v_min=kwargs.get("vmin", 0.9)), bus(2)],
                [line(1, 2, r=kwargs.get("r", 0.01), x=kwargs.get("x", 0.1), tap_ratio=kwargs.get("tap", 1.0))],
                [gen(1, a=kwargs.get("a", 0.01))],
                base=kwargs.get("base", 100.0),
            )


def _assert_same_case(a, b):
    assert a.base_mva == pytest.approx(b.base_mva, abs=1e-12)
    for xs, ys in ((a.buses, b.buses), (a.branches, b.branches), (a.generators, b.generators)):
        assert len(xs) == len(ys)
        for x, y in zip(xs, ys):
            for f in fields(x):
                u, v = getattr(x, f.name), getattr(y, f.name)
                if isinstance(u, float):
                    assert u == pytest.approx(v, rel=1e-12, abs=1e-12), f.name
                else:
                    assert u == v, f.name


@pytest.mark.parametrize("name", ["case14", "case30", "case118"])
def test_round_trip_matpower_and_json(name):
    c = load_case(name)
    _assert_same_case(c, parse_case(to_matpower(c), name=name))
    _assert_same_case(c, parse_case(to_json(c), "json", name=name))


class TestAdmittance:
    def test_single_line_closed_form(self):
        c = make_case([bus(1, ref=True), bus(2)], [line(1, 2, r=0.0, x=0.1)], [gen(1)])
        Y = build_admittance(c).dense()
        y = 1 / 0.1j
        np.testing.assert_allclose(Y, [[y, -y], [-y, y]], atol=1e-12)
        assert Y[0, 1] == pytest.approx(10j)

    @pytest.mark.parametrize("tap, shift", [(1.05, 0.0), (0.97, math.radians(-5)), (1.0, math.radians(10))])
    def test_tap_and_charging_match_circuit_oracle(self, tap, shift):
        br = line(1, 2, r=0.02, x=0.08, b=0.04, tap_ratio=tap, phase_shift=shift)
        c = make_case([bus(1, ref=True), bus(2)], [br], [gen(1)])
        np.testing.assert_allclose(build_admittance(c).dense(), _pi_model_oracle(br), atol=1e-12)

    def test_case14_matches_branchwise_oracle(self, case14, adm14):
        n = case14.n_bus
        Y = np.zeros((n, n), dtype=complex)
        for k, br in enumerate(case14.branches):
            idx = [case14.branch_from[k], case14.branch_to[k]]
            Y[np.ix_(idx, idx)] += _pi_model_oracle(br)
        Y += np.diag(case14.bus_array("shunt_g") + 1j * case14.bus_array("shunt_b"))
        np.testing.assert_allclose(adm14.dense(), Y, atol=1e-12)

    def test_disconnected_bus_has_only_shunt(self):
        c = make_case(
            [bus(1, ref=True), bus(2), bus(3, shunt_g=0.01, shunt_b=0.19)],
            [line(1, 2, b=0.05)],
            [gen(1)],
        )
        Y = build_admittance(c).dense()
        assert np.all(Y[2, :2] == 0) and np.all(Y[:2, 2] == 0)
        assert Y[2, 2] == pytest.approx(0.01 + 0.19j)

    def test_zero_row_sum_without_shunts(self):
        c = make_case(
            [bus(1, ref=True)] + [bus(i) for i in range(2, 6)],
            [line(1, 2), line(2, 3, r=0.0), line(3, 4, x=0.3), line(4, 5), line(5, 1), line(2, 4)],
            [gen(1)],
        )
        Y = build_admittance(c).dense()
        np.testing.assert_allclose(Y.sum(axis=1), 0, atol=1e-12)

    def test_sparsity_follows_branches(self, case30, adm30):
        Y = adm30.dense()
        adj = np.eye(case30.n_bus, dtype=bool)
        adj[case30.branch_from, case30.branch_to] = True
        adj[case30.branch_to, case30.branch_from] = True
        assert not np.any((Y != 0) & ~adj)
        assert np.array_equal(Y != 0, (Y != 0).T)

    def test_branch_flow_coefficients(self, case14, adm14):
        rng = np.random.default_rng(3)
        V = 1 + 0.1 * (rng.standard_normal(14) + 1j * rng.standard_normal(14))
        If, It = adm14.Yf @ V, adm14.Yt @ V
        for k, br in enumerate(case14.branches):
            i, j = case14.branch_from[k], case14.branch_to[k]
            ref = _pi_model_oracle(br) @ np.array([V[i], V[j]])
            assert If[k] == pytest.approx(ref[0], abs=1e-12)
            assert It[k] == pytest.approx(ref[1], abs=1e-12)


class TestAdjacency:
    def test_two_bus(self):
        assert adjacency(parse_case(TWO_BUS_M)) == {1: {2}, 2: {1}}

    def test_parallel_branches_counted_once(self):
        c = make_case([bus(1, ref=True), bus(2)], [line(1, 2), line(2, 1, x=0.2)], [gen(1)])
        assert adjacency(c) == {1: {2}, 2: {1}}

    def test_case14_degrees_match_edge_scan(self, case14):
        text = (resources.files("gridsplit") / "data" / "case14.m").read_text()
        body = text.split("mpc.branch = [")[1].split("];")[0]
        edges = set()
        for row in body.strip().splitlines():
            vals = row.split("%")[0].replace(";", " ").split()
            if vals:
                a, b = int(vals[0]), int(vals[1])
                edges.add(frozenset((a, b)))
        degree = {b.id: sum(b.id in e for e in edges) for b in case14.buses}
        assert {k: len(v) for k, v in adjacency(case14).items()} == degree

    @pytest.mark.parametrize("name", ["case14", "case30", "case118"])
    def test_symmetric(self, name):
        nb = adjacency(load_case(name))
        assert all(i in nb[j] for i in nb for j in nb[i])

    def test_ring_fixture(self):
        nb = adjacency(ring_case(5))
        assert nb[1] == {2, 3, 5}
