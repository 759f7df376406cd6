from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import bus, gen, line, make_case
from gridsplit.acopf import Coupling, power_flow_residual
from gridsplit.admm import (
    FLAT_START_PRESETS,
    ROWS_PER_TIE,
    TRACE_COLUMNS,
    AdmmOptions,
    Message,
    RegionState,
    average_boundary_voltages,
    check_convergence,
    coupling_gradient_terms,
    decompose,
    lambda_update,
    make_message,
    primal_residue,
    rho_tilde,
    rho_update,
    run_admm,
    starting_point,
    x_update,
    z_update,
)
from gridsplit.nlp import NlpProblem, solve_nlp
from gridsplit.partitioning import Partition


def msg(sender, ties, values, rho=None):
    return Message(sender, list(ties), np.asarray(values, float).reshape(-1, 4), rho)


def random_regions(case, seed, K=3):
    rng = np.random.default_rng(seed)
    while True:
        labels = rng.integers(1, K + 1, case.n_bus)
        if len(np.unique(labels)) == K:
            break
    return decompose(case, Partition(labels, case.bus_ids))


def neighbours(rp, msgs):
    wanted = set(rp.neighbor_of.values())
    return [m for m in msgs if m.sender in wanted]


def mirror_rows(regions):
    """(region a, row a, region b, row b) for every tie line and its mirror."""
    where = {}
    for a, rp in enumerate(regions):
        for t, tie in enumerate(rp.ties):
            where[tie] = (a, t)
    return [(a, t, *where[(j, i)]) for (i, j), (a, t) in where.items()]


class TestFormulaExamples:
    def test_z_minus(self):
        z = z_update(msg(1, [(0, 1)], [1.0, 0, 0, 0]), [msg(2, [(1, 0)], [0.4, 0, 0, 0])])
        assert z[0] == pytest.approx(0.3)

    def test_z_plus_consensus(self):
        z = z_update(msg(1, [(0, 1)], [0, 0, 0.8, 0]), [msg(2, [(1, 0)], [0, 0, 0.8, 0])])
        assert z[2] == pytest.approx(0.8)

    def test_missing_mirror(self):
        with pytest.raises(ValueError, match="mirror"):
            z_update(msg(1, [(0, 1)], np.zeros(4)), [msg(2, [(1, 5)], np.zeros(4))])

    def test_lambda(self):
        lam = np.array([0.3, -1.0])
        np.testing.assert_array_equal(lambda_update(lam, np.array([5.0, 5.0]), np.ones(2), np.ones(2)), lam)
        assert lambda_update(np.zeros(1), np.array([2.0]), np.array([0.6]), np.array([0.5]))[0] == pytest.approx(0.2)

    def test_residue(self):
        assert primal_residue(np.ones(4), np.ones(4)) == 0.0
        assert primal_residue(np.array([1.0, 2.0, 3.05]), np.array([1.0, 2.0, 3.0])) == pytest.approx(0.05)
        assert primal_residue(np.zeros(0), np.zeros(0)) == 0.0

    def test_rho_tilde(self):
        rho = np.full(4, 3.0)
        assert rho_tilde(rho, 0.5, 1.0, 0.9, 1.1, 1.0) == 3.0
        assert rho_tilde(rho, 0.95, 1.0, 0.9, 1.1, 1.0) == pytest.approx(3.3)
        assert rho_tilde(rho, 0.1, np.inf, 0.9, 1.1, 1.0) == 3.0

    def test_rho_max_of_both_sides(self):
        k = msg(1, [(0, 1)], np.zeros(4), rho=4.4)
        l_ = msg(2, [(1, 0)], np.zeros(4), rho=4.0)
        np.testing.assert_array_equal(rho_update(k, [l_]), np.full(4, 4.4))
        np.testing.assert_array_equal(rho_update(l_, [k]), np.full(4, 4.4))


@pytest.mark.parametrize("seed", range(5))
def test_updates_match_closed_form_on_random_states(case14, seed):
    rng = np.random.default_rng(seed)
    regions = random_regions(case14, seed)
    xs = [rng.standard_normal(rp.model.n) for rp in regions]
    msgs = [make_message(rp, x) for rp, x in zip(regions, xs)]
    for rp, x, m in zip(regions, xs, msgs):
        z = z_update(m, neighbours(rp, msgs))
        V = rp.model.voltages(x)
        for t, (i, j) in enumerate(rp.ties):
            other = next(r for r in regions if (j, i) in r.ties)
            Vo = other.model.voltages(xs[regions.index(other)])
            mk_minus = 2.0 * (V[rp.model.loc[i]] - V[rp.model.loc[j]])
            ml_minus = 2.0 * (Vo[other.model.loc[j]] - Vo[other.model.loc[i]])
            mk_plus = 0.5 * (V[rp.model.loc[i]] + V[rp.model.loc[j]])
            ml_plus = 0.5 * (Vo[other.model.loc[j]] + Vo[other.model.loc[i]])
            zm, zp = 0.5 * (mk_minus - ml_minus), 0.5 * (mk_plus + ml_plus)
            np.testing.assert_allclose(z[4 * t : 4 * t + 4], [zm.real, zm.imag, zp.real, zp.imag], atol=1e-12)
        lam, rho = rng.standard_normal(len(z)), rng.random(len(z)) + 0.1
        Ax = rp.A @ x
        want = np.array([lam[r] + rho[r] * (Ax[r] - z[r]) for r in range(len(z))])
        np.testing.assert_allclose(lambda_update(lam, rho, Ax, z), want, atol=1e-12)
        assert primal_residue(Ax, z) == pytest.approx(max(abs(Ax[r] - z[r]) for r in range(len(z))), abs=1e-12)


def test_invariants_over_random_iterations(case14):
    """1000 rounds of random messages: exact mirror symmetry and monotone, mirrored penalties."""
    rng = np.random.default_rng(42)
    regions = random_regions(case14, 7)
    pairs = mirror_rows(regions)
    rho0, gamma, tau = 10.0, 0.9, 1.1
    rho = [np.full(ROWS_PER_TIE * rp.n_ties, rho0) for rp in regions]
    res_prev = [np.inf] * len(regions)
    for _ in range(1000):
        msgs = [msg(rp.region, rp.ties, rng.standard_normal(ROWS_PER_TIE * rp.n_ties)) for rp in regions]
        zs = [z_update(m, neighbours(rp, msgs)).reshape(-1, 4) for rp, m in zip(regions, msgs)]
        for a, t, b, s in pairs:
            assert np.all(zs[a][t, :2] + zs[b][s, :2] == 0.0)
            assert np.all(zs[a][t, 2:] - zs[b][s, 2:] == 0.0)
        res = [float(rng.random()) for _ in regions]
        props = [rho_tilde(r, g, gp, gamma, tau, rho0) for r, g, gp in zip(rho, res, res_prev)]
        msgs = [Message(m.sender, m.ties, m.values, p) for m, p in zip(msgs, props)]
        new = [rho_update(m, neighbours(rp, msgs)) for rp, m in zip(regions, msgs)]
        for old, nw in zip(rho, new):
            assert np.all(nw >= old) and np.all(nw >= rho0)
        for a, t, b, s in pairs:
            assert np.all(new[a][4 * t : 4 * t + 4] == new[b][4 * s : 4 * s + 4])
        rho, res_prev = new, res


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
    st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
)
def test_z_lies_in_consensus_set(mine, theirs):
    zk = z_update(msg(1, [(0, 1)], mine), [msg(2, [(1, 0)], theirs)])
    zl = z_update(msg(2, [(1, 0)], theirs), [msg(1, [(0, 1)], mine)])
    assert np.all(zk[:2] == -zl[:2]) and np.all(zk[2:] == zl[2:])


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(0.01, 100), st.floats(-10, 10))
def test_dual_update_identity(lam0, rho, r):
    lam = lambda_update(np.array([lam0]), np.array([rho]), np.array([r]), np.zeros(1))
    assert lam[0] - lam0 == pytest.approx(rho * r, rel=1e-12, abs=1e-12)


class TestDecompose:
    def test_single_region(self, case14):
        (rp,) = decompose(case14, Partition(np.ones(14, int), case14.bus_ids))
        assert rp.n_ties == 0 and rp.A.shape == (0, rp.model.n) and len(rp.dup) == 0

    def test_two_bus_split(self):
        c = make_case([bus(1, ref=True), bus(2, p=0.3)], [line(1, 2)], [gen(1), gen(2)])
        regions = decompose(c, Partition(np.array([1, 2]), c.bus_ids))
        for rp in regions:
            assert len(rp.own) == 1 and len(rp.dup) == 1
            assert rp.A.shape[0] == 4
            assert rp.model.ng == 1
        assert regions[0].model.ref_local is not None and regions[1].model.ref_local is None

    def test_coupling_rows(self):
        c = make_case([bus(1, ref=True), bus(2)], [line(1, 2)], [gen(1)])
        rp = decompose(c, Partition(np.array([1, 2]), c.bus_ids), AdmmOptions(beta_minus=3.0, beta_plus=0.25))[0]
        x = np.array([1.1, 0.9, 0.2, -0.1, 0.5, 0.0])  # e1 e2 f1 f2 P Q
        Vi, Vj = 1.1 + 0.2j, 0.9 - 0.1j
        want = [3 * (Vi - Vj).real, 3 * (Vi - Vj).imag, 0.25 * (Vi + Vj).real, 0.25 * (Vi + Vj).imag]
        np.testing.assert_allclose(rp.A @ x, want, atol=1e-15)
        assert np.linalg.matrix_rank(rp.A.toarray()) == 4

    @pytest.mark.parametrize("seed", range(3))
    def test_tie_count_matches_edge_scan(self, case14, seed):
        labels = np.random.default_rng(seed).integers(1, 3, 14)
        labels[0], labels[1] = 1, 2
        regions = decompose(case14, Partition(labels, case14.bus_ids))
        crossing = {
            frozenset((int(f), int(t)))
            for f, t in zip(case14.branch_from, case14.branch_to)
            if labels[f] != labels[t]
        }
        assert sum(rp.n_ties for rp in regions) == 2 * len(crossing)
        for rp in regions:
            # Each tie's four rows span (e, f) of both ends, so the rank is set by
            # the distinct boundary buses; it is full only when ties share no bus.
            assert np.linalg.matrix_rank(rp.A.toarray()) == 2 * len(rp.boundary_buses)

    def test_mismatched_partition(self, case14, case30):
        with pytest.raises(ValueError):
            decompose(case30, Partition(np.ones(14, int), case14.bus_ids))


class TestXUpdate:
    @settings(max_examples=20, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.1, 50), st.floats(-5, 5))
    def test_scalar_quadratic(self, lam, rho, z):
        cpl = Coupling(sp.csr_matrix([[1.0]]), np.array([z]), np.array([lam]), np.array([rho]))

        def objective(x):
            return (x[0] - 1) ** 2 + cpl.value(x), np.array([2 * (x[0] - 1)]) + cpl.gradient(x)

        p = NlpProblem(np.zeros(1), objective, lambda x, l, m: sp.csr_matrix([[2.0]]) + cpl.hessian())
        res = solve_nlp(p)
        assert res.x[0] == pytest.approx((2 + rho * z - lam) / (2 + rho), abs=1e-8)

    def test_scalar_example(self):
        cpl = Coupling(sp.csr_matrix([[1.0]]), np.zeros(1), np.zeros(1), np.array([2.0]))
        p = NlpProblem(
            np.zeros(1),
            lambda x: ((x[0] - 1) ** 2 + cpl.value(x), np.array([2 * (x[0] - 1)]) + cpl.gradient(x)),
            lambda x, l, m: sp.csr_matrix([[2.0]]) + cpl.hessian(),
        )
        assert solve_nlp(p).x[0] == pytest.approx(0.5, abs=1e-9)

    def test_single_region_equals_centralized(self, case14, adm14, opf14):
        opts = AdmmOptions()
        (rp,) = decompose(case14, Partition(np.ones(14, int), case14.bus_ids), opts, adm14)
        x0 = rp.model.vector_from_global(starting_point(case14, adm14, "warm"))
        res = x_update(rp, RegionState(x0, np.zeros(0), np.zeros(0), np.zeros(0)), opts)
        assert rp.model.cost(res.x) == pytest.approx(opf14.objective, rel=1e-7)

    def test_region_kkt(self, case14, adm14, opf14):
        opts = AdmmOptions(rho0=10.0)
        labels = np.where(np.arange(14) < 7, 1, 2)
        regions = decompose(case14, Partition(labels, case14.bus_ids), opts, adm14)
        rng = np.random.default_rng(0)
        for rp in regions:
            m = rp.model
            rows = ROWS_PER_TIE * rp.n_ties
            x0 = m.vector_from_global(opf14.variables)
            z = rp.A @ x0 + 0.01 * rng.standard_normal(rows)
            st_ = RegionState(x0, z, rng.standard_normal(rows), np.full(rows, 10.0))
            res = x_update(rp, st_, opts)
            assert res.status == "optimal"
            # independent evaluation of the local optimality conditions
            _, df = m.objective(res.x)
            g, Jg = m.equality(res.x)
            h, Jh = m.inequality(res.x)
            grad = df + Jg.T @ res.lam + Jh.T @ res.mu - res.mu_lower + res.mu_upper
            lo, hi = m.bounds()
            assert np.max(np.abs(grad)) <= 1e-6
            assert np.max(np.abs(g)) <= 1e-6 and np.max(h) <= 1e-6
            assert np.all(res.x >= lo - 1e-9) and np.all(res.x <= hi + 1e-9)
            assert np.max(np.abs(res.mu * h)) <= 1e-6
            assert np.all(res.mu >= 0)

    def test_coupling_terms_vanish_off_the_boundary(self, case30):
        rng = np.random.default_rng(1)
        labels = np.where(np.arange(30) < 15, 1, 2)
        for rp in decompose(case30, Partition(labels, case30.bus_ids)):
            rows = ROWS_PER_TIE * rp.n_ties
            st_ = RegionState(rng.standard_normal(rp.model.n), rng.standard_normal(rows), rng.standard_normal(rows), rng.random(rows) + 1)
            mask = rp.boundary_variable_mask()
            for term in coupling_gradient_terms(rp, st_):
                assert np.all(term[~mask] == 0.0)
                assert np.any(term[mask] != 0.0)


class TestAveraging:
    def _two_bus(self):
        c = make_case([bus(1, ref=True), bus(2, p=0.3)], [line(1, 2)], [gen(1), gen(2)])
        return c, decompose(c, Partition(np.array([1, 2]), c.bus_ids))

    def _state(self, V1, V2, P, Q):
        # region vectors: [e_own, e_dup, f_own, f_dup, P, Q]
        return RegionState(np.array([V1.real, V2.real, V1.imag, V2.imag, P, Q]), np.zeros(4), np.zeros(4), np.ones(4))

    def test_identical_copies(self):
        c, regions = self._two_bus()
        s1 = self._state(1.0 + 0.0j, 0.98 - 0.05j, 0.4, 0.1)
        s2 = self._state(0.98 - 0.05j, 1.0 + 0.0j, 0.2, 0.0)
        merged = average_boundary_voltages(c, regions, [s1, s2])
        np.testing.assert_allclose(merged.V, [1.0, 0.98 - 0.05j])
        np.testing.assert_allclose(merged.P, [0.4, 0.2])

    def test_mean_of_copies(self):
        c, regions = self._two_bus()
        s1 = self._state(1.00 + 0j, 1.02 + 0j, 0.4, 0.1)
        s2 = self._state(1.00 + 0j, 1.00 + 0j, 0.2, 0.0)
        merged = average_boundary_voltages(c, regions, [s1, s2])
        assert merged.V[1] == pytest.approx(1.01)
        assert merged.V[0] == pytest.approx(1.00)


class TestConvergence:
    def test_examples(self):
        opts = AdmmOptions()
        assert check_convergence(5e-5, 0.005 / 100, opts, 100.0)
        assert not check_convergence(5e-5, 0.5 / 100, opts, 100.0)
        assert not check_convergence(np.inf, 0.0, opts, 100.0)
        assert not check_convergence(2e-4, 0.0, opts, 100.0)

    def test_threshold_uses_case_base(self):
        opts = AdmmOptions()
        assert check_convergence(0.0, 0.009 / 10, opts, 10.0)
        assert not check_convergence(0.0, 0.011 / 10, opts, 10.0)


def test_options_validation():
    for bad in (dict(gamma=1.0), dict(tau=1.0), dict(beta_minus=0.4), dict(rho0=0.0), dict(start="cold")):
        with pytest.raises(ValueError):
            AdmmOptions(**bad)
    assert set(FLAT_START_PRESETS) == {(1e4, 1.05), (1e4, 1.1), (1e5, 1.05), (1e5, 1.1)}


def test_flat_start_profile(case14, adm14):
    v = starting_point(case14, adm14, "flat")
    np.testing.assert_array_equal(v.V, np.ones(14))


class TestRun:
    def test_single_region(self, case30, adm30, opf30):
        res = run_admm(case30, Partition(np.ones(30, int), case30.bus_ids), AdmmOptions(), adm30)
        assert res.converged and res.iterations == 1
        assert res.trace.rows[0].max_primal_residue == 0.0
        assert res.objective == pytest.approx(opf30.objective, rel=1e-6)

    def test_two_regions_converge(self, case14, opf14, admm14):
        _, res = admm14
        assert res.converged and res.iterations <= 300
        assert abs(res.objective - opf14.objective) / opf14.objective <= 0.01

    def test_trace_consistency(self, case14, adm14, admm14):
        _, res = admm14
        tr = res.trace
        assert len(tr) == res.iterations
        assert tr.column("iteration").tolist() == list(range(1, res.iterations + 1))
        assert np.all(np.diff(tr.column("est_parallel_time_s")) > 0)
        assert np.all(np.diff(tr.column("max_rho")) >= 0) and np.all(tr.column("min_rho") >= 1e4)
        last = tr.rows[-1]
        assert last.est_parallel_time_s == pytest.approx(sum(max(r.region_times) for r in tr.rows))
        mismatch = np.max(np.abs(power_flow_residual(case14, adm14, res.variables))) * case14.base_mva
        assert last.max_mismatch_mva == pytest.approx(mismatch, rel=1e-12)
        assert last.max_primal_residue < 1e-4 and last.max_mismatch_mva < 0.01

    def test_final_state_invariants(self, admm14):
        _, res = admm14
        for a, t, b, s in mirror_rows(res.regions):
            za, zb = res.states[a].z.reshape(-1, 4), res.states[b].z.reshape(-1, 4)
            assert np.all(za[t, :2] == -zb[s, :2]) and np.all(za[t, 2:] == zb[s, 2:])
        for st_ in res.states:
            assert np.all(st_.rho >= 1e4)

    def test_trace_csv(self, tmp_path, admm14):
        _, res = admm14
        res.trace.write_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].split(",") == TRACE_COLUMNS
        assert len(lines) == res.iterations + 1
        res.trace.write_csv(tmp_path / "u.csv", include_time=False)
        assert "est_parallel_time_s" not in (tmp_path / "u.csv").read_text().splitlines()[0]

    def test_parallel_workers_give_identical_iterates(self, case14, adm14, admm14):
        part, _ = admm14
        a = run_admm(case14, part, AdmmOptions(rho0=1e4, max_iterations=4), adm14)
        b = run_admm(case14, part, AdmmOptions(rho0=1e4, max_iterations=4, workers=2), adm14)
        assert a.status == b.status == "iteration-limit"
        for col in ("max_primal_residue", "max_mismatch_mva", "objective", "max_rho"):
            np.testing.assert_array_equal(a.trace.column(col), b.trace.column(col))

    def test_flat_start_runs(self, case14, adm14, admm14):
        part, _ = admm14
        res = run_admm(case14, part, AdmmOptions(**FLAT_START_PRESETS[(1e4, 1.1)], max_iterations=3), adm14)
        assert len(res.trace) == 3 and not res.converged
