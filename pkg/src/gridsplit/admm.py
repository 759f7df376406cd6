"""Distributed AC OPF by boundary-voltage duplication and ADMM.

Each tie line (i, j) with i owned by region k contributes four coupling rows
to region k::

    beta_minus * Re(V_i - V_j), beta_minus * Im(V_i - V_j),
    beta_plus  * Re(V_i + V_j), beta_plus  * Im(V_i + V_j)

and the mirrored line (j, i) contributes the same four rows to the region
owning j. Consensus holds when the minus parts are opposite and the plus
parts equal across the pair.

Rounds are synchronous: every region solves its x-update, then messages
are exchanged and the z, lambda, residue and penalty updates run locally
from those messages only.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .acopf import (
    Coupling,
    OpfModel,
    OpfVariables,
    initial_state,
    limited_branches,
    objective,
    power_flow_residual,
    solve_power_flow,
)
from .network import AdmittanceMatrix, NetworkCase, build_admittance
from .nlp import NlpOptions, NlpError, solve_nlp
from .partitioning import Partition, PartitionError

log = logging.getLogger(__name__)

ROWS_PER_TIE = 4


class SubproblemError(RuntimeError):
    def __init__(self, region: int, iteration: int, reason: str):
        self.region = region
        self.iteration = iteration
        super().__init__(f"region {region} x-update failed at iteration {iteration}: {reason}")


@dataclass
class AdmmOptions:
    rho0: float = 1e7
    tau: float = 1.1
    gamma: float = 0.9
    beta_plus: float = 0.5
    beta_minus: float = 2.0
    tol_primal: float = 1e-4
    tol_mismatch_mva: float = 0.01
    max_iterations: int = 300
    start: str = "warm"  # warm | flat
    z_init: str = "start"  # start | zero
    line_limits: str | Sequence[int] = "none"
    sub_tol: float = 1e-7
    sub_feas_tol: float = 1e-8
    sub_max_iter: int = 200
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.tau > 1:
            raise ValueError("tau must be > 1")
        if not self.beta_minus > self.beta_plus > 0:
            raise ValueError("need beta_minus > beta_plus > 0")
        if self.rho0 <= 0:
            raise ValueError("rho0 must be positive")
        if self.start not in ("warm", "flat"):
            raise ValueError("start must be 'warm' or 'flat'")
        if self.z_init not in ("start", "zero"):
            raise ValueError("z_init must be 'start' or 'zero'")

    def nlp_options(self) -> NlpOptions:
        return NlpOptions(tol=self.sub_tol, feas_tol=self.sub_feas_tol, max_iter=self.sub_max_iter)


# Flat-start presets explored in the robustness experiments.
FLAT_START_PRESETS = {
    (rho0, tau): dict(rho0=rho0, tau=tau, start="flat") for rho0 in (1e4, 1e5) for tau in (1.05, 1.1)
}


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------


@dataclass
class RegionProblem:
    region: int
    own: np.ndarray  # bus indices in R_k
    dup: np.ndarray  # bus indices in V_k \ R_k
    ties: list[tuple[int, int]]  # (i, j), i in own, j in dup
    neighbor_of: dict[int, int]  # dup bus index -> owning region
    A: sp.csr_matrix
    model: OpfModel

    @property
    def vbus(self) -> np.ndarray:
        return self.model.vbus

    @property
    def n_ties(self) -> int:
        return len(self.ties)

    @property
    def boundary_buses(self) -> np.ndarray:
        """Own and duplicated buses incident to a tie line."""
        return np.unique([b for t in self.ties for b in t]).astype(int)

    def boundary_variable_mask(self) -> np.ndarray:
        """True for the e and f entries of boundary buses; generator outputs never couple."""
        m = self.model
        mask = np.isin(m.var_bus, self.boundary_buses)
        mask[2 * m.nv :] = False
        return mask


def coupling_matrix(model: OpfModel, ties: Sequence[tuple[int, int]], beta_minus: float, beta_plus: float) -> sp.csr_matrix:
    nv = model.nv
    rows, cols, vals = [], [], []
    for t, (i, j) in enumerate(ties):
        li, lj = int(model.loc[i]), int(model.loc[j])
        r = ROWS_PER_TIE * t
        for off, part in ((0, 0), (1, nv)):  # real (e) then imaginary (f) columns
            rows += [r + off, r + off, r + 2 + off, r + 2 + off]
            cols += [part + li, part + lj, part + li, part + lj]
            vals += [beta_minus, -beta_minus, beta_plus, beta_plus]
    return sp.csr_matrix((vals, (rows, cols)), shape=(ROWS_PER_TIE * len(ties), model.n))


def decompose(
    case: NetworkCase,
    partition: Partition,
    opts: AdmmOptions | None = None,
    adm: AdmittanceMatrix | None = None,
) -> list[RegionProblem]:
    """Build one local problem per region by duplicating boundary voltages."""
    opts = opts or AdmmOptions()
    try:
        partition.check(case)
    except PartitionError as exc:
        raise PartitionError(f"partition/case mismatch: {exc}") from None
    adm = adm or build_admittance(case)
    limits = limited_branches(case, opts.line_limits)
    ties_all = partition.tie_lines(case)
    labels = partition.labels
    regions = []
    for k in range(1, partition.K + 1):
        own = partition.region_buses(k)
        if len(own) == 0:
            raise PartitionError(f"region {k} is empty")
        ties = [(i, j) for i, j in ties_all if labels[i] == k]
        dup = np.array(sorted({j for _, j in ties}), dtype=int)
        model = OpfModel(case, adm, own=own, dup=dup, limit_branches=limits)
        A = coupling_matrix(model, ties, opts.beta_minus, opts.beta_plus)
        regions.append(
            RegionProblem(
                region=k,
                own=own,
                dup=dup,
                ties=ties,
                neighbor_of={int(j): int(labels[j]) for j in dup},
                A=A,
                model=model,
            )
        )
    return regions


# ---------------------------------------------------------------------------
# State, messages, and the local update formulas
# ---------------------------------------------------------------------------


@dataclass
class RegionState:
    x: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    rho: np.ndarray
    residue: float = np.inf
    prev_residue: float = np.inf
    solve_time: float = 0.0
    multipliers: object = None  # last NlpResult

    def copy(self) -> "RegionState":
        return RegionState(self.x.copy(), self.z.copy(), self.lam.copy(), self.rho.copy(), self.residue, self.prev_residue, self.solve_time, self.multipliers)


@dataclass
class Message:
    """Values ``A_k x_k`` sent by one region, one row of 4 per tie line."""

    sender: int
    ties: list[tuple[int, int]]
    values: np.ndarray  # shape (n_ties, 4): minus re/im, plus re/im
    rho_tilde: float | None = None

    def lookup(self) -> dict[tuple[int, int], int]:
        return {t: k for k, t in enumerate(self.ties)}


def make_message(rp: RegionProblem, x: np.ndarray, rho_tilde: float | None = None) -> Message:
    return Message(rp.region, list(rp.ties), (rp.A @ x).reshape(-1, ROWS_PER_TIE), rho_tilde)


def z_update(own: Message, neighbors: Sequence[Message]) -> np.ndarray:
    """Consensus projection: z- = (m-_k - m-_l)/2, z+ = (m+_k + m+_l)/2 per tie line."""
    index = {}
    for msg in neighbors:
        for t, tie in enumerate(msg.ties):
            index[tie] = (msg, t)
    z = np.empty_like(own.values)
    for t, (i, j) in enumerate(own.ties):
        try:
            msg, s = index[(j, i)]
        except KeyError:
            raise ValueError(f"no mirrored message for tie line {(i, j)} of region {own.sender}") from None
        mine, theirs = own.values[t], msg.values[s]
        z[t, :2] = 0.5 * (mine[:2] - theirs[:2])
        z[t, 2:] = 0.5 * (mine[2:] + theirs[2:])
    return z.ravel()


def lambda_update(lam: np.ndarray, rho: np.ndarray, Ax: np.ndarray, z: np.ndarray) -> np.ndarray:
    return lam + rho * (Ax - z)


def primal_residue(Ax: np.ndarray, z: np.ndarray) -> float:
    return float(np.max(np.abs(Ax - z), initial=0.0))


def rho_tilde(rho: np.ndarray, residue: float, prev_residue: float, gamma: float, tau: float, rho0: float) -> float:
    """Region-wide penalty proposal: keep ||rho||_inf if the residue fell enough, else scale by tau."""
    base = float(np.max(rho, initial=rho0))
    return base if residue <= gamma * prev_residue else tau * base


def rho_update(own: Message, neighbors: Sequence[Message]) -> np.ndarray:
    """Per tie line, take the larger of the two regions' proposals."""
    by_region = {m.sender: m.rho_tilde for m in neighbors}
    sender_of = {}
    for m in neighbors:
        for i, j in m.ties:
            sender_of[(i, j)] = m.sender
    out = np.empty(ROWS_PER_TIE * len(own.ties))
    for t, (i, j) in enumerate(own.ties):
        other = by_region[sender_of[(j, i)]]
        out[ROWS_PER_TIE * t : ROWS_PER_TIE * (t + 1)] = max(own.rho_tilde, other)
    return out


def x_update(rp: RegionProblem, st: RegionState, opts: AdmmOptions, iteration: int = 0):
    """Solve the region's augmented local OPF from the previous ``x``."""
    rp.model.coupling = Coupling(rp.A, st.z, st.lam, st.rho)
    try:
        res = solve_nlp(rp.model.problem(st.x), opts.nlp_options())
    except NlpError as exc:
        raise SubproblemError(rp.region, iteration, str(exc)) from exc
    log.debug(
        "region %d it %d: %s after %d IPM iterations, %d evaluations",
        rp.region, iteration, res.status, res.iterations, res.evaluations,
    )
    if not res.converged:
        log.warning("region %d: x-update ended with status %s (kkt %.2e)", rp.region, res.status, res.kkt_error)
    return res


def coupling_gradient_terms(rp: RegionProblem, st: RegionState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``A'lam``, ``A' diag(rho) A x`` and ``A' diag(rho) z`` of the x-update gradient."""
    A = rp.A
    return A.T @ st.lam, A.T @ (st.rho * (A @ st.x)), A.T @ (st.rho * st.z)


# ---------------------------------------------------------------------------
# Global views
# ---------------------------------------------------------------------------


def average_boundary_voltages(
    case: NetworkCase, regions: Sequence[RegionProblem], states: Sequence[RegionState]
) -> OpfVariables:
    """Whole-network state: duplicated voltages averaged over their copies."""
    Vsum = np.zeros(case.n_bus, dtype=complex)
    count = np.zeros(case.n_bus)
    P = np.zeros(case.n_gen)
    Q = np.zeros(case.n_gen)
    for rp, st in zip(regions, states):
        m = rp.model
        V = m.voltages(st.x)
        np.add.at(Vsum, m.vbus, V)
        np.add.at(count, m.vbus, 1)
        Pk, Qk = m.dispatch(st.x)
        P[m.gens] = Pk
        Q[m.gens] = Qk
    return OpfVariables(Vsum / count, P, Q)


@dataclass
class OwnedPoint:
    """Whole-network primal-dual point assembled from the regions' x-updates.

    Every bus takes its voltage, generator outputs and multipliers from the
    region that owns it; no averaging is done.
    """

    model: OpfModel
    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    boundary_buses: np.ndarray

    def lagrangian_gradient(self) -> np.ndarray:
        m = self.model
        _, df = m.objective(self.x)
        _, Jg = m.equality(self.x)
        _, Jh = m.inequality(self.x)
        return df + Jg.T @ self.lam + Jh.T @ self.mu - self.mu_lower + self.mu_upper

    def non_boundary_rows(self) -> np.ndarray:
        return ~np.isin(self.model.var_bus, self.boundary_buses)

    def stationarity(self, boundary: bool = False) -> float:
        """Largest centralized stationarity residual over non-boundary (or all) rows."""
        r = self.lagrangian_gradient()
        if not boundary:
            r = r[self.non_boundary_rows()]
        return float(np.max(np.abs(r), initial=0.0))


def owned_point(
    case: NetworkCase,
    regions: Sequence[RegionProblem],
    states: Sequence[RegionState],
    adm: AdmittanceMatrix | None = None,
    line_limits="none",
) -> OwnedPoint:
    """Map the regions' last primal and dual solutions onto the centralized problem."""
    adm = adm or build_admittance(case)
    cm = OpfModel(case, adm, limit_branches=limited_branches(case, line_limits))
    nb, ng = case.n_bus, case.n_gen
    V = np.zeros(nb, dtype=complex)
    P, Q = np.zeros(ng), np.zeros(ng)
    lam = np.zeros(len(cm.eq_bus))
    mu = np.zeros(len(cm.ineq_bus))
    mu_lower = np.zeros(cm.n)
    mu_upper = np.zeros(cm.n)
    lim_pos = {int(k): t for t, k in enumerate(cm.lim)}
    for rp, st in zip(regions, states):
        m, res = rp.model, st.multipliers
        if res is None:
            raise ValueError("regions have not been solved yet")
        own_loc = m.loc[rp.own]
        V[rp.own] = m.voltages(st.x)[own_loc]
        Pk, Qk = m.dispatch(st.x)
        P[m.gens], Q[m.gens] = Pk, Qk
        # equality rows: P and Q balance of own buses, then the reference row
        lam[rp.own] = res.lam[: m.nown]
        lam[nb + rp.own] = res.lam[m.nown : 2 * m.nown]
        if m.ref_local is not None:
            lam[2 * nb] = res.lam[2 * m.nown]
        # voltage bounds of own buses
        mu[rp.own] = res.mu[own_loc]
        mu[nb + rp.own] = res.mu[m.nv + own_loc]
        # line limits: the region owning the from-bus reports
        owned = set(rp.own.tolist())
        for t, k in enumerate(m.lim):
            if int(case.branch_from[k]) in owned and int(k) in lim_pos:
                c = lim_pos[int(k)]
                mu[2 * nb + c] = res.mu[2 * m.nv + t]
                mu[2 * nb + cm.nl + c] = res.mu[2 * m.nv + m.nl + t]
        gsl = slice(2 * m.nv, m.n)
        cols = np.r_[2 * nb + m.gens, 2 * nb + ng + m.gens]
        mu_lower[cols] = res.mu_lower[gsl]
        mu_upper[cols] = res.mu_upper[gsl]
    x = np.r_[V.real, V.imag, P, Q]
    boundary = np.unique([b for rp in regions for t in rp.ties for b in t]).astype(int)
    return OwnedPoint(cm, x, lam, mu, mu_lower, mu_upper, boundary)


def max_mismatch(case: NetworkCase, adm: AdmittanceMatrix, merged: OpfVariables) -> float:
    """Largest bus apparent-power mismatch in p.u."""
    return float(np.max(np.abs(power_flow_residual(case, adm, merged))))


def check_convergence(max_residue: float, mismatch_pu: float, opts: AdmmOptions, base_mva: float) -> bool:
    return max_residue < opts.tol_primal and mismatch_pu < opts.tol_mismatch_mva / base_mva


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------


TRACE_COLUMNS = ["iteration", "max_primal_residue", "max_mismatch_mva", "objective", "est_parallel_time_s", "max_rho"]


@dataclass
class TraceRow:
    iteration: int
    max_primal_residue: float
    max_mismatch_mva: float
    objective: float
    region_times: list[float]
    est_parallel_time_s: float
    max_rho: float
    min_rho: float


@dataclass
class AdmmTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path: str | Path, include_time: bool = True) -> None:
        cols = TRACE_COLUMNS if include_time else [c for c in TRACE_COLUMNS if c != "est_parallel_time_s"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r.iteration] + [repr(float(getattr(r, c))) for c in cols[1:]])


@dataclass
class AdmmResult:
    variables: OpfVariables
    objective: float
    converged: bool
    iterations: int
    trace: AdmmTrace
    regions: list[RegionProblem]
    states: list[RegionState]
    status: str = ""

    @property
    def est_parallel_time(self) -> float:
        return self.trace.rows[-1].est_parallel_time_s if self.trace.rows else 0.0


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def starting_point(case: NetworkCase, adm: AdmittanceMatrix, start: str) -> OpfVariables:
    if start == "warm":
        return solve_power_flow(case, adm, start=initial_state(case))
    v = initial_state(case, flat=True)
    v.P = np.clip(v.P, case.gen_array("p_min"), case.gen_array("p_max"))
    v.Q = np.clip(v.Q, case.gen_array("q_min"), case.gen_array("q_max"))
    return v


def run_admm(
    case: NetworkCase,
    partition: Partition,
    opts: AdmmOptions | None = None,
    adm: AdmittanceMatrix | None = None,
    start: OpfVariables | None = None,
    regions: list[RegionProblem] | None = None,
) -> AdmmResult:
    """Synchronous distributed OPF until both convergence tests pass."""
    opts = opts or AdmmOptions()
    adm = adm or build_admittance(case)
    regions = regions or decompose(case, partition, opts, adm)
    x0 = start or starting_point(case, adm, opts.start)

    states = []
    for rp in regions:
        x = rp.model.vector_from_global(x0)
        rows = ROWS_PER_TIE * rp.n_ties
        states.append(RegionState(x=x, z=np.zeros(rows), lam=np.zeros(rows), rho=np.full(rows, opts.rho0)))
    if opts.z_init == "start":
        msgs = [make_message(rp, st.x) for rp, st in zip(regions, states)]
        for rp, st, msg in zip(regions, states, msgs):
            st.z = z_update(msg, _neighbors(rp, msgs))

    trace = AdmmTrace()
    elapsed = 0.0
    converged = False
    status = "iteration-limit"
    pool = ThreadPoolExecutor(opts.workers) if opts.workers > 1 else None

    def solve(idx_it):
        idx, it = idx_it
        t0 = time.perf_counter()
        res = x_update(regions[idx], states[idx], opts, it)
        return res, time.perf_counter() - t0

    try:
        for it in range(1, opts.max_iterations + 1):
            jobs = [(k, it) for k in range(len(regions))]
            results = list(pool.map(solve, jobs)) if pool else [solve(j) for j in jobs]
            for st, (res, dt) in zip(states, results):
                st.x = res.x
                st.multipliers = res
                st.solve_time = dt

            msgs = [make_message(rp, st.x) for rp, st in zip(regions, states)]
            for rp, st, msg in zip(regions, states, msgs):
                Ax = msg.values.ravel()
                st.z = z_update(msg, _neighbors(rp, msgs))
                st.lam = lambda_update(st.lam, st.rho, Ax, st.z)
                st.prev_residue, st.residue = st.residue, primal_residue(Ax, st.z)

            merged = average_boundary_voltages(case, regions, states)
            mismatch = max_mismatch(case, adm, merged)
            max_res = max(st.residue for st in states)
            elapsed += max(st.solve_time for st in states)
            trace.rows.append(
                TraceRow(
                    iteration=it,
                    max_primal_residue=max_res,
                    max_mismatch_mva=mismatch * case.base_mva,
                    objective=objective(case, merged),
                    region_times=[st.solve_time for st in states],
                    est_parallel_time_s=elapsed,
                    max_rho=max((float(st.rho.max(initial=0.0)) for st in states), default=0.0),
                    min_rho=min((float(st.rho.min(initial=np.inf)) for st in states), default=np.inf),
                )
            )
            log.debug("iter %d residue %.3e mismatch %.3e MVA", it, max_res, mismatch * case.base_mva)
            if check_convergence(max_res, mismatch, opts, case.base_mva):
                converged = True
                status = "converged"
                break

            proposals = [
                rho_tilde(st.rho, st.residue, st.prev_residue, opts.gamma, opts.tau, opts.rho0) for st in states
            ]
            msgs = [Message(m.sender, m.ties, m.values, p) for m, p in zip(msgs, proposals)]
            for rp, st, msg in zip(regions, states, msgs):
                st.rho = rho_update(msg, _neighbors(rp, msgs))
    finally:
        if pool:
            pool.shutdown()

    return AdmmResult(
        variables=merged,
        objective=objective(case, merged),
        converged=converged,
        iterations=len(trace),
        trace=trace,
        regions=regions,
        states=states,
        status=status,
    )


def _neighbors(rp: RegionProblem, msgs: Sequence[Message]) -> list[Message]:
    wanted = set(rp.neighbor_of.values())
    return [m for m in msgs if m.sender in wanted]
