"""AC OPF in rectangular voltage coordinates.

One :class:`OpfModel` covers both the centralised problem and a region's
local problem: it owns a set of buses (power balance enforced there) and may
also carry duplicated neighbour voltages that only enter through branch
flows. The optional ``coupling`` term adds ``lam @ (A x - z) +
0.5 * ||A x - z||^2_rho`` to the cost, which is exactly the x-update
objective of the distributed scheme.

Decision vector layout: ``[e (nv), f (nv), P (ng), Q (ng)]`` with
``V = e + j f`` per local bus, own buses first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import AdmittanceMatrix, NetworkCase, build_admittance
from .nlp import NlpOptions, NlpProblem, NlpResult, solve_nlp


class PowerFlowError(RuntimeError):
    pass


class OpfError(RuntimeError):
    pass


@dataclass
class OpfVariables:
    """Complex bus voltages and generator outputs (all p.u.)."""

    V: np.ndarray
    P: np.ndarray
    Q: np.ndarray

    def copy(self) -> "OpfVariables":
        return OpfVariables(self.V.copy(), self.P.copy(), self.Q.copy())

    @property
    def size(self) -> int:
        return 2 * len(self.V) + 2 * len(self.P)

    def to_vector(self) -> np.ndarray:
        return np.r_[self.V.real, self.V.imag, self.P, self.Q]

    @classmethod
    def from_vector(cls, x: np.ndarray, nv: int, ng: int) -> "OpfVariables":
        return cls(x[:nv] + 1j * x[nv : 2 * nv], x[2 * nv : 2 * nv + ng].copy(), x[2 * nv + ng :].copy())


@dataclass
class Coupling:
    """Augmented-Lagrangian coupling ``lam@(A x - z) + 0.5*sum(rho*(A x - z)**2)``."""

    A: sp.csr_matrix
    z: np.ndarray
    lam: np.ndarray
    rho: np.ndarray

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x - self.z

    def value(self, x: np.ndarray) -> float:
        r = self.residual(x)
        return float(self.lam @ r + 0.5 * np.sum(self.rho * r * r))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        r = self.residual(x)
        return self.A.T @ (self.lam + self.rho * r)

    def hessian(self) -> sp.csr_matrix:
        # A and rho are fixed for the lifetime of one x-update.
        if getattr(self, "_hess", None) is None:
            self._hess = (self.A.T @ sp.diags(self.rho) @ self.A).tocsr()
        return self._hess


# ---------------------------------------------------------------------------
# complex flow helpers
# ---------------------------------------------------------------------------


class _Pattern:
    """CSR assembly on a fixed sparsity pattern from (row, col) triplets.

    ``build(values)`` sums duplicate triplets, so the values only have to be
    listed in the order the triplets were given.
    """

    def __init__(self, rows, cols, shape: tuple[int, int]):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        keys = rows * shape[1] + cols
        ukeys, self.pos = np.unique(keys, return_inverse=True)
        self.pos = self.pos.ravel()
        self.nnz = len(ukeys)
        self.indices = (ukeys % shape[1]).astype(np.int32)
        self.indptr = np.searchsorted(ukeys // shape[1], np.arange(shape[0] + 1)).astype(np.int32)
        self.shape = shape

    def build(self, values: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.pos, weights=values, minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


class _FlowOperator:
    """``S = (C V) * conj(Yb V)`` for a row selector ``C``.

    Derivatives are returned as values on the triplets ``(rows, cols)``: one
    entry per row at the selected bus, then one per nonzero of ``Yb``. Columns
    index the voltage vector; callers offset them for the e and f blocks.
    """

    def __init__(self, C: sp.spmatrix, Yb: sp.spmatrix):
        C = sp.csr_matrix(C)
        if np.any(np.diff(C.indptr) != 1) or np.any(C.data != 1):
            raise ValueError("C must select exactly one column per row")
        Yc = sp.coo_matrix(Yb)
        self.Yb = sp.csr_matrix(Yb)
        self.m, self.nv = Yc.shape
        self.sel = C.indices.astype(np.int64)
        self.y_row = Yc.row.astype(np.int64)
        self.y_col = Yc.col.astype(np.int64)
        self.y_conj = np.conj(Yc.data)
        self.rows = np.r_[np.arange(self.m), self.y_row]
        self.cols = np.r_[self.sel, self.y_col]
        # Hessian triplets of Re(sum(conj(w) S)) in the stacked (e, f) space.
        p, q, nv = self.sel[self.y_row], self.y_col, self.nv
        self.h_rows = np.r_[p, q, p + nv, q + nv, p, q, q + nv, p + nv]
        self.h_cols = np.r_[q, p, q + nv, p + nv, q + nv, p + nv, p, q]
        # Pairs of derivative entries sharing a row, for outer products.
        order = np.argsort(self.rows, kind="stable")
        bounds = np.searchsorted(self.rows[order], np.arange(self.m + 1))
        k1, k2 = [], []
        for r in range(self.m):
            idx = order[bounds[r] : bounds[r + 1]]
            k1.append(np.repeat(idx, len(idx)))
            k2.append(np.tile(idx, len(idx)))
        self.k1 = np.concatenate(k1) if k1 else np.zeros(0, np.int64)
        self.k2 = np.concatenate(k2) if k2 else np.zeros(0, np.int64)

    def flows(self, V: np.ndarray):
        """``S`` and the values of dS/de and dS/df on ``(rows, cols)``."""
        I = self.Yb @ V
        CV = V[self.sel]
        S = CV * np.conj(I)
        a = np.conj(I)
        b = CV[self.y_row] * self.y_conj
        return S, np.r_[a, b], 1j * np.r_[a, -b]

    def hessian_values(self, w: np.ndarray) -> np.ndarray:
        """Values on ``(h_rows, h_cols)`` of the (e, f) Hessian of Re(sum(conj(w) S))."""
        m = np.conj(w)[self.y_row] * self.y_conj
        re, im = m.real, m.imag
        return np.r_[re, re, re, re, im, -im, im, -im]

    def outer_triplets(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) of ``D' diag(c) D`` for D = [d/de, d/df] of one real flow component."""
        cols2 = np.r_[self.cols, self.cols + self.nv]
        n = len(self.cols)
        k1 = np.r_[self.k1, self.k1, self.k1 + n, self.k1 + n]
        k2 = np.r_[self.k2, self.k2 + n, self.k2, self.k2 + n]
        return cols2[k1], cols2[k2]

    def outer_values(self, c: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Values matching :meth:`outer_triplets` for entries ``d`` = [d/de, d/df]."""
        n = len(self.cols)
        k1 = np.r_[self.k1, self.k1, self.k1 + n, self.k1 + n]
        k2 = np.r_[self.k2, self.k2 + n, self.k2, self.k2 + n]
        rows2 = np.r_[self.rows, self.rows]
        return c[rows2[k1]] * d[k1] * d[k2]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class OpfModel:
    """NLP evaluators for an (optionally regional) AC OPF.

    Parameters
    ----------
    own : bus indices whose balance, generators and voltage bounds belong here.
    dup : duplicated neighbour bus indices (voltage variables and bounds only).
    limit_branches : branch indices whose apparent-power limit is enforced;
        only branches with an end in ``own`` and both ends local are kept.
    fix_reference : add ``f_ref = 0`` when the reference bus is owned.
    """

    def __init__(
        self,
        case: NetworkCase,
        adm: AdmittanceMatrix | None = None,
        own: Sequence[int] | None = None,
        dup: Sequence[int] = (),
        limit_branches: Iterable[int] = (),
        fix_reference: bool = True,
        coupling: Coupling | None = None,
    ):
        self.case = case
        self.adm = adm or build_admittance(case)
        own = np.arange(case.n_bus) if own is None else np.asarray(own, dtype=int)
        self.own = own
        self.dup = np.asarray(dup, dtype=int)
        self.vbus = np.r_[self.own, self.dup].astype(int)
        self.nv = len(self.vbus)
        self.nown = len(self.own)
        loc = -np.ones(case.n_bus, dtype=int)
        loc[self.vbus] = np.arange(self.nv)
        self.loc = loc
        owned = np.zeros(case.n_bus, dtype=bool)
        owned[self.own] = True
        self.gens = np.flatnonzero(owned[case.gen_bus]) if case.n_gen else np.zeros(0, int)
        self.ng = len(self.gens)
        self.n = 2 * self.nv + 2 * self.ng
        self.ref_local = None
        if fix_reference and owned[case.reference_index]:
            self.ref_local = int(loc[case.reference_index])

        base = case.base_mva
        self.cost_a = case.gen_array("cost_a")[self.gens] * base**2
        self.cost_b = case.gen_array("cost_b")[self.gens] * base
        self.cost_c = case.gen_array("cost_c")[self.gens]

        Y = self.adm.Y.tocsr()
        self.Ysub = Y[self.own][:, self.vbus].tocsr()
        self.Csel = sp.csr_matrix((np.ones(self.nown), (np.arange(self.nown), np.arange(self.nown))), shape=(self.nown, self.nv))
        gl = loc[case.gen_bus[self.gens]] if self.ng else np.zeros(0, int)
        self.Cg = sp.csr_matrix((np.ones(self.ng), (gl, np.arange(self.ng))), shape=(self.nown, self.ng))
        self.load = case.load[self.own]

        f_bus, t_bus = case.branch_from, case.branch_to
        lim = []
        for k in limit_branches:
            k = int(k)
            smax = case.branches[k].s_max
            if smax <= 0:
                continue
            if (owned[f_bus[k]] or owned[t_bus[k]]) and loc[f_bus[k]] >= 0 and loc[t_bus[k]] >= 0:
                lim.append(k)
        self.lim = np.asarray(sorted(set(lim)), dtype=int)
        self.nl = len(self.lim)
        if self.nl:
            self.smax2 = np.array([case.branches[k].s_max for k in self.lim]) ** 2
            self.Yf = self.adm.Yf.tocsr()[self.lim][:, self.vbus].tocsr()
            self.Yt = self.adm.Yt.tocsr()[self.lim][:, self.vbus].tocsr()
            self.Cf = self.adm.Cf.tocsr()[self.lim][:, self.vbus].tocsr()
            self.Ct = self.adm.Ct.tocsr()[self.lim][:, self.vbus].tocsr()

        self.vmin2 = case.bus_array("v_min")[self.vbus] ** 2
        self.vmax2 = case.bus_array("v_max")[self.vbus] ** 2
        self.coupling = coupling

        # Bus attribution of every row/column (global bus index).
        gb = case.gen_bus[self.gens] if self.ng else np.zeros(0, int)
        self.var_bus = np.r_[self.vbus, self.vbus, gb, gb].astype(int)
        eq_bus = [self.own, self.own]
        if self.ref_local is not None:
            eq_bus.append([case.reference_index])
        self.eq_bus = np.concatenate(eq_bus).astype(int)
        ineq_bus = [self.vbus, self.vbus]
        if self.nl:
            ineq_bus += [f_bus[self.lim], t_bus[self.lim]]
        self.ineq_bus = np.concatenate(ineq_bus).astype(int)
        self._build_patterns(gl)

    def _build_patterns(self, gl: np.ndarray) -> None:
        nv, ng, nown, n = self.nv, self.ng, self.nown, self.n
        gi = np.arange(ng)
        self._bal = _FlowOperator(self.Csel, self.Ysub)
        self._lines = [_FlowOperator(self.Cf, self.Yf), _FlowOperator(self.Ct, self.Yt)] if self.nl else []

        b = self._bal
        rows = [b.rows, b.rows, gl, b.rows + nown, b.rows + nown, gl + nown]
        cols = [b.cols, b.cols + nv, 2 * nv + gi, b.cols, b.cols + nv, 2 * nv + ng + gi]
        if self.ref_local is not None:
            rows.append([2 * nown])
            cols.append([nv + self.ref_local])
        self._jg = _Pattern(np.concatenate(rows), np.concatenate(cols), (len(self.eq_bus), n))

        iv = np.arange(nv)
        rows = [iv, iv, iv + nv, iv + nv]
        cols = [iv, iv + nv, iv, iv + nv]
        for k, op in enumerate(self._lines):
            off = 2 * nv + k * self.nl
            rows += [op.rows + off, op.rows + off]
            cols += [op.cols, op.cols + nv]
        self._jh = _Pattern(np.concatenate(rows), np.concatenate(cols), (len(self.ineq_bus), n))

        rows = [b.h_rows, iv, iv + nv, 2 * nv + gi]
        cols = [b.h_cols, iv, iv + nv, 2 * nv + gi]
        for op in self._lines:
            orow, ocol = op.outer_triplets()
            rows += [op.h_rows, orow]
            cols += [op.h_cols, ocol]
        self._hl = _Pattern(np.concatenate(rows), np.concatenate(cols), (n, n))

    # -- bounds ----------------------------------------------------------
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.case
        lo = np.r_[np.full(2 * self.nv, -np.inf), c.gen_array("p_min")[self.gens], c.gen_array("q_min")[self.gens]]
        hi = np.r_[np.full(2 * self.nv, np.inf), c.gen_array("p_max")[self.gens], c.gen_array("q_max")[self.gens]]
        return lo, hi

    # -- unpacking ---------------------------------------------------------
    def voltages(self, x: np.ndarray) -> np.ndarray:
        return x[: self.nv] + 1j * x[self.nv : 2 * self.nv]

    def dispatch(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        o = 2 * self.nv
        return x[o : o + self.ng], x[o + self.ng :]

    def variables(self, x: np.ndarray) -> OpfVariables:
        return OpfVariables.from_vector(x, self.nv, self.ng)

    def vector(self, vars: OpfVariables) -> np.ndarray:
        return vars.to_vector()

    def vector_from_global(self, vars: OpfVariables) -> np.ndarray:
        """Restrict a whole-network state to this model's variables."""
        V = vars.V[self.vbus]
        return np.r_[V.real, V.imag, vars.P[self.gens], vars.Q[self.gens]]

    # -- objective ---------------------------------------------------------
    def cost(self, x: np.ndarray) -> float:
        P, _ = self.dispatch(x)
        return float(np.sum(self.cost_a * P**2 + self.cost_b * P + self.cost_c))

    def objective(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        P, _ = self.dispatch(x)
        f = self.cost(x)
        df = np.zeros(self.n)
        df[2 * self.nv : 2 * self.nv + self.ng] = 2 * self.cost_a * P + self.cost_b
        if self.coupling is not None:
            f += self.coupling.value(x)
            df = df + self.coupling.gradient(x)
        return f, df

    # -- constraints -------------------------------------------------------
    def injections(self, x: np.ndarray) -> np.ndarray:
        """Complex power leaving each owned bus into the network."""
        return self._bal.flows(self.voltages(x))[0]

    def equality(self, x: np.ndarray) -> tuple[np.ndarray, sp.csr_matrix]:
        S, dSe, dSf = self._bal.flows(self.voltages(x))
        P, Q = self.dispatch(x)
        mis = self.Cg @ (P + 1j * Q) - self.load - S
        ones = np.ones(self.ng)
        g = [mis.real, mis.imag]
        vals = [-dSe.real, -dSf.real, ones, -dSe.imag, -dSf.imag, ones]
        if self.ref_local is not None:
            g.append([x[self.nv + self.ref_local]])
            vals.append([1.0])
        return np.concatenate(g), self._jg.build(np.concatenate(vals))

    def inequality(self, x: np.ndarray) -> tuple[np.ndarray, sp.csr_matrix]:
        e, f = x[: self.nv], x[self.nv : 2 * self.nv]
        vm2 = e * e + f * f
        h = [self.vmin2 - vm2, vm2 - self.vmax2]
        vals = [-2 * e, -2 * f, 2 * e, 2 * f]
        if self.nl:
            V = self.voltages(x)
            for op in self._lines:
                S, dSe, dSf = op.flows(V)
                cS = np.conj(S)[op.rows]
                h.append(np.abs(S) ** 2 - self.smax2)
                vals += [2 * (cS * dSe).real, 2 * (cS * dSf).real]
        return np.concatenate(h), self._jh.build(np.concatenate(vals))

    def hessian(self, x: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> sp.csr_matrix:
        nv = self.nv
        w = -(lam[: self.nown] + 1j * lam[self.nown : 2 * self.nown])
        dvm = 2 * (mu[nv : 2 * nv] - mu[:nv])
        vals = [self._bal.hessian_values(w), dvm, dvm, 2 * self.cost_a]
        if self.nl:
            V = self.voltages(x)
            for k, op in enumerate(self._lines):
                m = mu[2 * nv + k * self.nl : 2 * nv + (k + 1) * self.nl]
                S, dSe, dSf = op.flows(V)
                d = np.r_[dSe, dSf]
                vals += [op.hessian_values(2 * m * S), op.outer_values(2 * m, d.real) + op.outer_values(2 * m, d.imag)]
        H = self._hl.build(np.concatenate(vals))
        if self.coupling is not None:
            H = H + self.coupling.hessian()
        return H

    def problem(self, x0: np.ndarray) -> NlpProblem:
        lo, hi = self.bounds()
        return NlpProblem(
            x0=x0,
            objective=self.objective,
            hessian=self.hessian,
            equality=self.equality,
            inequality=self.inequality,
            lower=lo,
            upper=hi,
        )

    def start_point(self, vars: OpfVariables | None = None) -> np.ndarray:
        """Initial vector; defaults to flat voltages and mid-range dispatch."""
        if vars is not None:
            return self.vector_from_global(vars)
        lo, hi = self.bounds()
        x = np.r_[np.ones(self.nv), np.zeros(self.nv), np.zeros(2 * self.ng)]
        g = slice(2 * self.nv, self.n)
        x[g] = 0.5 * (lo[g] + hi[g])
        return x


# ---------------------------------------------------------------------------
# Evaluations on whole-network states
# ---------------------------------------------------------------------------


def power_flow_residual(case: NetworkCase, Y, vars: OpfVariables) -> np.ndarray:
    """Complex per-bus mismatch ``S_gen - S_load - V conj(Y V)`` (p.u.)."""
    Ybus = Y.Y if isinstance(Y, AdmittanceMatrix) else Y
    V = np.asarray(vars.V)
    sgen = np.zeros(case.n_bus, dtype=complex)
    if case.n_gen:
        np.add.at(sgen, case.gen_bus, vars.P + 1j * vars.Q)
    return sgen - case.load - V * np.conj(Ybus @ V)


def objective(case: NetworkCase, vars: OpfVariables) -> float:
    """Generation cost in $/h; dispatch is converted from p.u. to MW."""
    P = np.asarray(vars.P) * case.base_mva
    return float(np.sum(case.gen_array("cost_a") * P**2 + case.gen_array("cost_b") * P + case.gen_array("cost_c")))


def branch_flows(case: NetworkCase, adm: AdmittanceMatrix, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex power entering each branch at its from and to ends."""
    Sf = V[case.branch_from] * np.conj(adm.Yf @ V)
    St = V[case.branch_to] * np.conj(adm.Yt @ V)
    return Sf, St


# ---------------------------------------------------------------------------
# Newton power flow
# ---------------------------------------------------------------------------


def initial_state(case: NetworkCase, flat: bool = False) -> OpfVariables:
    if flat:
        V = np.ones(case.n_bus, dtype=complex)
    else:
        V = case.bus_array("v_mag") * np.exp(1j * case.bus_array("v_ang"))
    return OpfVariables(V, case.gen_array("p_gen"), case.gen_array("q_gen"))


def solve_power_flow(
    case: NetworkCase,
    Y=None,
    dispatch: np.ndarray | None = None,
    start: OpfVariables | None = None,
    tol: float = 1e-8,
    max_iter: int = 20,
) -> OpfVariables:
    """Polar Newton-Raphson power flow.

    Generator buses other than the reference are PV buses held at the
    generator voltage set-point; the reference bus absorbs the slack. Returns
    the state with slack/reactive generator outputs filled in.
    """
    adm = Y if isinstance(Y, AdmittanceMatrix) else None
    if Y is None:
        adm = build_admittance(case)
    Ybus = (adm.Y if adm is not None else Y).tocsr()
    n = case.n_bus
    P = case.gen_array("p_gen") if dispatch is None else np.asarray(dispatch, float)
    start = start or initial_state(case)
    V = np.array(start.V, dtype=complex)
    ref = case.reference_index
    gen_bus = case.gen_bus
    has_gen = np.zeros(n, dtype=bool)
    has_gen[gen_bus] = True
    vset = np.abs(V)
    for k, g in enumerate(case.generators):
        vset[gen_bus[k]] = g.v_set
    pv = np.flatnonzero(has_gen & (np.arange(n) != ref))
    pq = np.flatnonzero(~has_gen & (np.arange(n) != ref))
    volt_fixed = np.r_[pv, ref] if has_gen[ref] else pv
    V[volt_fixed] = vset[volt_fixed] * np.exp(1j * np.angle(V[volt_fixed]))

    sbus = -case.load.copy()
    np.add.at(sbus, gen_bus, P)
    pvpq = np.r_[pv, pq]

    def mismatch(Vc):
        m = Vc * np.conj(Ybus @ Vc) - sbus
        return np.r_[m[pvpq].real, m[pq].imag]

    F = mismatch(V)
    it = 0
    while np.max(np.abs(F), initial=0.0) > tol:
        if it >= max_iter:
            raise PowerFlowError(f"power flow did not converge in {max_iter} iterations (mismatch {np.max(np.abs(F)):.3e})")
        it += 1
        Vm = np.abs(V)
        I = Ybus @ V
        dV = sp.diags(V)
        dS_dVm = dV @ np.conj(Ybus @ sp.diags(V / Vm)) + np.conj(sp.diags(I)) @ sp.diags(V / Vm)
        dS_dVa = 1j * dV @ np.conj(sp.diags(I) - Ybus @ dV)
        dS_dVm, dS_dVa = sp.csr_matrix(dS_dVm), sp.csr_matrix(dS_dVa)
        J = sp.bmat(
            [
                [dS_dVa[pvpq][:, pvpq].real, dS_dVm[pvpq][:, pq].real],
                [dS_dVa[pq][:, pvpq].imag, dS_dVm[pq][:, pq].imag],
            ],
            format="csc",
        )
        dx = spla.spsolve(J, -F)
        Va = np.angle(V)
        Va[pvpq] += dx[: len(pvpq)]
        Vm[pq] += dx[len(pvpq) :]
        V = Vm * np.exp(1j * Va)
        F = mismatch(V)

    S = V * np.conj(Ybus @ V) + case.load
    Pout = P.copy()
    Qout = np.zeros(case.n_gen)
    for bus in np.unique(gen_bus):
        ks = np.flatnonzero(gen_bus == bus)
        if bus == ref:
            Pout[ks[0]] = S[bus].real - P[ks[1:]].sum()
        Qout[ks] = S[bus].imag / len(ks)
    return OpfVariables(V, Pout, Qout)


# ---------------------------------------------------------------------------
# Centralised OPF
# ---------------------------------------------------------------------------


@dataclass
class OpfOptions:
    line_limits: str | Sequence[int] = "none"  # "none" | "all" | explicit branch indices
    tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iter: int = 150

    def nlp_options(self) -> NlpOptions:
        return NlpOptions(tol=self.tol, feas_tol=self.feas_tol, max_iter=self.max_iter)


def limited_branches(case: NetworkCase, line_limits) -> np.ndarray:
    if isinstance(line_limits, str):
        if line_limits == "none":
            return np.zeros(0, dtype=int)
        if line_limits == "all":
            return np.array([k for k, br in enumerate(case.branches) if br.s_max > 0], dtype=int)
        raise ValueError(f"unknown line-limit mode {line_limits!r}")
    idx = np.asarray(list(line_limits), dtype=int)
    if np.any((idx < 0) | (idx >= case.n_branch)):
        raise ValueError("line-limit branch index out of range")
    return idx


@dataclass
class OpfSolution:
    variables: OpfVariables
    objective: float
    status: str
    lam: np.ndarray  # equality multipliers: P balance, Q balance, (reference)
    mu: np.ndarray  # nonlinear inequality multipliers: vmin, vmax, (line from, line to)
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    kkt_error: float
    iterations: int
    model: Optional[OpfModel] = field(default=None, repr=False)
    x: Optional[np.ndarray] = field(default=None, repr=False)
    solve_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status in ("optimal", "acceptable")

    @property
    def lam_p(self) -> np.ndarray:
        n = self.model.nown
        return self.lam[:n]

    @property
    def lam_q(self) -> np.ndarray:
        n = self.model.nown
        return self.lam[n : 2 * n]


def solution_from_result(model: OpfModel, res: NlpResult) -> OpfSolution:
    return OpfSolution(
        variables=model.variables(res.x),
        objective=model.cost(res.x),
        status=res.status,
        lam=res.lam,
        mu=res.mu,
        mu_lower=res.mu_lower,
        mu_upper=res.mu_upper,
        kkt_error=res.kkt_error,
        iterations=res.iterations,
        model=model,
        x=res.x,
        solve_time=res.solve_time,
    )


def solve_centralized_opf(
    case: NetworkCase,
    opts: OpfOptions | None = None,
    adm: AdmittanceMatrix | None = None,
    start: OpfVariables | None = None,
) -> OpfSolution:
    """Minimise generation cost subject to the full AC network model."""
    opts = opts or OpfOptions()
    model = OpfModel(case, adm, limit_branches=limited_branches(case, opts.line_limits))
    x0 = model.start_point(start)
    res = solve_nlp(model.problem(x0), opts.nlp_options())
    sol = solution_from_result(model, res)
    if not sol.converged:
        raise OpfError(f"centralised OPF ended with status {sol.status} after {res.iterations} iterations")
    return sol


# ---------------------------------------------------------------------------
# KKT Jacobian
# ---------------------------------------------------------------------------


@dataclass
class KktJacobian:
    """Jacobian ``H`` of the first-order conditions at a solution.

    ``var_bus[m]`` is the bus index that row/column ``m`` belongs to, and
    ``groups[i]`` lists the indices for bus index ``i``.
    """

    H: sp.csr_matrix
    var_bus: np.ndarray
    y: np.ndarray
    n_primal: int
    n_eq: int
    active_rows: np.ndarray  # indices into the model's full inequality vector
    n_bus: int = 0

    @property
    def groups(self) -> list[np.ndarray]:
        n_bus = self.n_bus
        order = np.argsort(self.var_bus, kind="stable")
        bounds = np.searchsorted(self.var_bus[order], np.arange(n_bus + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(n_bus)]


class KktSystem:
    """F(y) and its Jacobian for an OPF model with a fixed active set.

    ``y = [x, lam_eq, nu_active]`` and
    ``F = [grad f + Jg' lam + Ja' nu, g(x), h_active(x)]``.
    """

    def __init__(self, model: OpfModel, active_rows: np.ndarray):
        self.model = model
        lo, hi = model.bounds()
        self.ilo = np.flatnonzero(np.isfinite(lo))
        self.ihi = np.flatnonzero(np.isfinite(hi))
        self.lo, self.hi = lo, hi
        self.active = np.asarray(active_rows, dtype=int)
        n_nl = 2 * model.nv + 2 * model.nl
        self.n_nl = n_nl
        self.n = model.n
        self.neq = len(model.eq_bus)

    def full_inequality(self, x):
        h, J = self.model.inequality(x)
        hb = np.r_[self.lo[self.ilo] - x[self.ilo], x[self.ihi] - self.hi[self.ihi]]
        k = len(self.ilo) + len(self.ihi)
        Jb = sp.csr_matrix(
            (np.r_[-np.ones(len(self.ilo)), np.ones(len(self.ihi))], (np.arange(k), np.r_[self.ilo, self.ihi])),
            shape=(k, self.n),
        )
        return np.r_[h, hb], sp.vstack([J, Jb], format="csr")

    def row_bus(self) -> np.ndarray:
        m = self.model
        return np.r_[m.ineq_bus, m.var_bus[self.ilo], m.var_bus[self.ihi]].astype(int)

    def split(self, y):
        n, neq = self.n, self.neq
        return y[:n], y[n : n + neq], y[n + neq :]

    def residual(self, y: np.ndarray) -> np.ndarray:
        x, lam, nu = self.split(y)
        _, df = self.model.objective(x)
        g, Jg = self.model.equality(x)
        h, Jh = self.full_inequality(x)
        Ja = Jh[self.active]
        return np.r_[df + Jg.T @ lam + Ja.T @ nu, g, h[self.active]]

    def jacobian(self, y: np.ndarray) -> sp.csr_matrix:
        x, lam, nu = self.split(y)
        _, Jg = self.model.equality(x)
        _, Jh = self.full_inequality(x)
        Ja = Jh[self.active]
        mu_full = np.zeros(self.n_nl + len(self.ilo) + len(self.ihi))
        mu_full[self.active] = nu
        W = self.model.hessian(x, lam, mu_full[: self.n_nl])
        return sp.bmat(
            [[W, Jg.T, Ja.T], [Jg, None, None], [Ja, None, None]],
            format="csr",
        )


def kkt_jacobian(case: NetworkCase, solution: OpfSolution, active_tol: float = 1e-6) -> KktJacobian:
    """Jacobian of the optimality conditions at an optimal OPF solution.

    Inequalities within ``active_tol`` of their bound are treated as
    equalities; the rest are dropped.
    """
    if not solution.converged:
        raise OpfError("kkt_jacobian needs an optimal solution")
    model = solution.model
    x = solution.x
    mu_full_b = np.r_[solution.mu_lower[np.isfinite(model.bounds()[0])], solution.mu_upper[np.isfinite(model.bounds()[1])]]
    probe = KktSystem(model, np.zeros(0, int))
    h, _ = probe.full_inequality(x)
    active = np.flatnonzero(h >= -active_tol)
    sysk = KktSystem(model, active)
    mu_all = np.r_[solution.mu, mu_full_b]
    y = np.r_[x, solution.lam, mu_all[active]]
    H = sysk.jacobian(y)
    var_bus = np.r_[model.var_bus, model.eq_bus, sysk.row_bus()[active]].astype(int)
    return KktJacobian(H=H, var_bus=var_bus, y=y, n_primal=model.n, n_eq=len(model.eq_bus), active_rows=active, n_bus=case.n_bus)
