"""Primal-dual interior-point solver for smooth nonlinear programs.

Problems have the form::

    minimize    f(x)
    subject to  g(x) = 0
                h(x) <= 0
                lower <= x <= upper

Variable bounds are folded into ``h`` as linear rows. Each iteration solves
the reduced Newton system of the barrier problem twice with one sparse LU
factorisation (Mehrotra predictor-corrector), then backtracks on an exact
l1 penalty-barrier merit function.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

ObjectiveFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]
ConstraintFn = Callable[[np.ndarray], "tuple[np.ndarray, sp.spmatrix]"]
HessianFn = Callable[[np.ndarray, np.ndarray, np.ndarray], sp.spmatrix]


class NlpError(RuntimeError):
    pass


class SingularKktError(NlpError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"singular KKT system at iteration {iteration}")


@dataclass
class NlpProblem:
    """Evaluators for one NLP.

    ``hessian(x, lam, mu)`` returns the Hessian of
    ``f + lam @ g + mu @ h_nonlinear`` (bounds are linear and contribute
    nothing). ``equality``/``inequality`` return ``(values, jacobian)``.
    """

    x0: np.ndarray
    objective: ObjectiveFn
    hessian: HessianFn
    equality: Optional[ConstraintFn] = None
    inequality: Optional[ConstraintFn] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.x0)


@dataclass
class NlpOptions:
    tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iter: int = 150
    centering: str = "mehrotra"  # or "fixed"
    sigma: float = 0.1
    step_ratio: float = 0.99995
    max_backtracks: int = 12
    armijo: float = 1e-8
    sigma_min: float = 1e-3
    second_order: bool = True
    second_order_steps: int = 3
    recenter_alpha: float = 1e-2
    # Systems up to this order are factorised densely (less overhead).
    dense_max: int = 500
    recenter_sigma: float = 0.5
    # Hessian regularisation for directions of insufficient curvature.
    curvature_tol: float = 1e-8
    delta_first: float = 1e-4
    delta_min: float = 1e-20
    max_regularizations: int = 20
    # Stop as "acceptable" when the looser tolerances below hold and either
    # the last steps were all short or they have held for a while already.
    stall_iterations: int = 5
    acceptable_iterations: int = 10
    acceptable_tol: float = 1e-6
    acceptable_feas_tol: float = 1e-6


@dataclass
class NlpResult:
    x: np.ndarray
    objective: float
    lam: np.ndarray  # equality multipliers
    mu: np.ndarray  # nonlinear inequality multipliers
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    status: str  # optimal | acceptable | iteration-limit
    iterations: int
    kkt_error: float
    merit_steps: list[tuple[float, float]] = field(default_factory=list)
    evaluations: int = 0
    solve_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status in ("optimal", "acceptable")


class _Bounds:
    """Linear rows for finite variable bounds."""

    def __init__(self, n: int, lower, upper):
        lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, float)
        hi = np.full(n, np.inf) if upper is None else np.asarray(upper, float)
        self.ilo = np.flatnonzero(np.isfinite(lo))
        self.ihi = np.flatnonzero(np.isfinite(hi))
        self.lo = lo[self.ilo]
        self.hi = hi[self.ihi]
        k = len(self.ilo) + len(self.ihi)
        rows = np.arange(k)
        cols = np.r_[self.ilo, self.ihi]
        vals = np.r_[-np.ones(len(self.ilo)), np.ones(len(self.ihi))]
        self.J = sp.csr_matrix((vals, (rows, cols)), shape=(k, n))
        self.size = k

    def values(self, x: np.ndarray) -> np.ndarray:
        return np.r_[self.lo - x[self.ilo], x[self.ihi] - self.hi]


def _empty(n: int):
    return np.zeros(0), sp.csr_matrix((0, n))


class _DenseLU:
    """Dense LU with the ``solve`` interface of ``splu``; raises on a zero pivot."""

    def __init__(self, K: np.ndarray):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            self.lu, self.piv = sla.lu_factor(K, check_finite=False)
        d = np.abs(np.diag(self.lu))
        if not np.all(np.isfinite(d)) or d.min(initial=1.0) == 0.0:
            raise RuntimeError("singular matrix")

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.lu_solve((self.lu, self.piv), b, check_finite=False)


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _corrected_point(lu, n, Jh, mu, zinv, x, z, xt, zt, gt, ht, evaluate, opts):
    """Yield second-order corrected trial points (at most ``opts.second_order_steps``).

    Each correction re-linearises the constraints at the latest trial point
    with the factorisation already at hand; the combined step is shortened
    by the fraction-to-boundary rule so the slacks stay positive.
    """
    for _ in range(opts.second_order_steps):
        r = ht + zt
        rhs = np.r_[-(Jh.T @ (mu * r * zinv)), -gt] if len(r) else np.r_[np.zeros(n), -gt]
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            return
        c = sol[:n]
        dx = xt + c - x
        dz = -ht - Jh @ c - z
        a = opts.step_ratio * _max_step(z, dz) if len(z) else 1.0
        a = min(a, 1.0)
        xt, zt = x + a * dx, z + a * dz
        trial = evaluate(xt)
        yield xt, zt, trial
        gt, ht = trial[2], trial[4]


def solve_nlp(problem: NlpProblem, opts: NlpOptions | None = None) -> NlpResult:
    """Solve ``problem`` from ``problem.x0`` (projected into the bounds)."""
    opts = opts or NlpOptions()
    t0 = time.perf_counter()
    n = problem.n
    bounds = _Bounds(n, problem.lower, problem.upper)
    lo = problem.lower if problem.lower is not None else np.full(n, -np.inf)
    hi = problem.upper if problem.upper is not None else np.full(n, np.inf)
    x = np.clip(np.asarray(problem.x0, dtype=float).copy(), lo, hi)

    eq = problem.equality or (lambda _x: _empty(n))
    ineq = problem.inequality or (lambda _x: _empty(n))

    n_eval = 0

    def evaluate(xv):
        nonlocal n_eval
        n_eval += 1
        f, df = problem.objective(xv)
        g, Jg = eq(xv)
        hn, Jhn = ineq(xv)
        h = np.r_[hn, bounds.values(xv)]
        Jh = sp.vstack([Jhn, bounds.J], format="csr")
        return f, np.asarray(df, float), g, sp.csr_matrix(Jg), h, Jh, len(hn)

    f, df, g, Jg, h, Jh, n_nl = evaluate(x)
    neq, niq = len(g), len(h)
    dense = n + neq <= opts.dense_max

    # Slack/multiplier initialisation as in MATPOWER's PIPS.
    z0 = 1.0
    z = np.full(niq, z0)
    far = h < -z0
    z[far] = -h[far]
    gamma = 1.0
    mu = np.full(niq, z0)
    big = gamma / z > z0
    mu[big] = gamma / z[big]
    lam = np.zeros(neq)
    nu = 0.0
    f_prev = f
    merit_steps: list[tuple[float, float]] = []
    status = "iteration-limit"
    kkt_err = np.inf
    it = 0
    last_alpha = 1.0
    stalled = 0
    near = 0
    delta_last = 0.0

    def conditions(xv, fv, dfv, gv, Jgv, hv, Jhv, lamv, muv, zv, fprev):
        Lx = dfv + Jgv.T @ lamv + Jhv.T @ muv
        feas = max(np.max(np.abs(gv), initial=0.0), np.max(hv, initial=0.0))
        grad = np.max(np.abs(Lx), initial=0.0) / (1 + max(np.max(np.abs(lamv), initial=0.0), np.max(np.abs(muv), initial=0.0)))
        comp = float(zv @ muv) / (1 + np.max(np.abs(xv), initial=0.0))
        cost = abs(fv - fprev) / (1 + abs(fprev))
        return Lx, feas, grad, comp, cost

    for it in range(1, opts.max_iter + 1):
        Lx = df + Jg.T @ lam + Jh.T @ mu
        W = problem.hessian(x, lam, mu[:n_nl])
        zinv = 1.0 / z
        if dense:
            Jhd = Jh.toarray()
            M = W.toarray() + Jhd.T @ ((mu * zinv)[:, None] * Jhd)
            Jgd = Jg.toarray()
        else:
            M = (W + Jh.T @ (sp.diags(mu * zinv) @ Jh)).tocsc()

        def factor(Mm, reg):
            if dense:
                top = Mm + reg * np.eye(n)
                if neq:
                    top = np.block([[top, Jgd.T], [Jgd, -1e-12 * reg * np.eye(neq)]])
                return _DenseLU(top)
            top = Mm + reg * sp.eye(n)
            if neq == 0:
                return spla.splu(sp.csc_matrix(top))
            K = sp.bmat([[top, Jg.T], [Jg, -1e-12 * reg * sp.eye(neq)]], format="csc")
            return spla.splu(K)

        lu = None
        reg = 0.0
        for attempt in range(6):
            try:
                lu = factor(M, reg)
                break
            except RuntimeError:
                reg = 1e-8 if reg == 0 else reg * 100
        if lu is None:
            raise SingularKktError(it)

        def direction(target, corr, lu_=None):
            lu_ = lu_ or lu
            N = Lx + Jh.T @ ((target - corr + mu * h) * zinv)
            sol = lu_.solve(np.r_[-N, -g])
            if not np.all(np.isfinite(sol)):
                raise SingularKktError(it)
            dx, dlam = sol[:n], sol[n:]
            dz = -h - z - Jh @ dx
            dmu = -mu + (target - corr - mu * dz) * zinv
            return dx, dlam, dz, dmu

        mu_avg = float(z @ mu) / niq if niq else 0.0
        if niq and opts.centering == "mehrotra" and last_alpha < opts.recenter_alpha:
            # After a blocked step the predictor is unreliable: take a plain,
            # well-centred step instead.
            gamma = opts.recenter_sigma * mu_avg
            corr = 0.0
        elif niq and opts.centering == "mehrotra":
            dx_a, _, dz_a, dmu_a = direction(0.0, 0.0)
            ap = _max_step(z, dz_a)
            ad = _max_step(mu, dmu_a)
            mu_aff = float((z + ap * dz_a) @ (mu + ad * dmu_a)) / niq
            # Aggressive centering only pays off while steps are long and
            # feasibility is ahead of complementarity.
            infeas = max(np.max(np.abs(g), initial=0.0), np.max(h, initial=0.0))
            floor = opts.sigma_min if last_alpha >= 0.5 and infeas <= mu_avg else opts.sigma
            sigma = min(max((mu_aff / mu_avg) ** 3, floor), 0.5) if mu_avg > 0 else opts.sigma
            gamma = sigma * mu_avg
            corr = dz_a * dmu_a
        else:
            gamma = opts.sigma * mu_avg
            corr = 0.0
        dx, dlam, dz, dmu = direction(gamma, corr)

        # Inertia-free curvature test: without the inertia of the factorised
        # system, require dx'(M + delta I)dx >= kappa |dx|^2 and regularise
        # the Hessian block until it holds.
        curv = float(dx @ (M @ dx))
        if curv < opts.curvature_tol * float(dx @ dx):
            delta = max(opts.delta_min, delta_last / 3) if delta_last > 0 else opts.delta_first
            for _ in range(opts.max_regularizations):
                try:
                    lu = factor(M, delta)
                    dx, dlam, dz, dmu = direction(gamma, corr)
                except (RuntimeError, SingularKktError):
                    delta *= 8
                    continue
                curv = float(dx @ (M @ dx)) + delta * float(dx @ dx)
                if curv >= opts.curvature_tol * float(dx @ dx):
                    break
                delta *= 8
            delta_last = delta
            log.debug("   regularised with delta %.2e", delta)

        # Merit: f - gamma*sum(log z) + nu*(|g|_1 + |h+z|_1)
        cnorm = np.abs(g).sum() + np.abs(h + z).sum()
        barrier_slope = float(df @ dx) - (gamma * float(np.sum(dz * zinv)) if niq else 0.0)
        if cnorm > opts.feas_tol:
            nu_req = (barrier_slope + 0.5 * max(curv, 0.0)) / (0.9 * cnorm)
            # The penalty follows the current requirement; it may relax by at
            # most a factor of ten per iteration so that a single high-curvature
            # step does not lock in a weight that later blocks every step.
            nu = max(1.1 * nu_req, 0.1 * nu, 1e-6)
        elif cnorm > 0:
            # Nearly feasible: keep the l1 penalty exact, i.e. above the size
            # of the Newton multiplier estimates.
            nu_exact = max(np.max(np.abs(lam + dlam), initial=0.0), np.max(np.abs(mu + dmu), initial=0.0))
            nu = max(1.1 * nu_exact, 0.1 * nu, 1e-6)
        slope = barrier_slope - nu * cnorm

        def merit(fv, gv, hv, zv):
            val = fv + nu * (np.abs(gv).sum() + np.abs(hv + zv).sum())
            if niq and gamma > 0:
                val -= gamma * np.sum(np.log(zv))
            return val

        phi0 = merit(f, g, h, z)
        alpha_p = opts.step_ratio * _max_step(z, dz) if niq else 1.0
        alpha_d = opts.step_ratio * _max_step(mu, dmu) if niq else 1.0
        alpha_p = min(alpha_p, 1.0)
        # Differences below the merit's rounding level count as no change.
        noise = 1e2 * np.finfo(float).eps * (abs(f) + nu * (neq + np.abs(h).sum() + z.sum()))

        def acceptable(phit, alpha):
            return np.isfinite(phit) and phit <= phi0 + opts.armijo * alpha * min(slope, 0.0) + noise

        accepted = False
        alpha = alpha_p
        for k in range(opts.max_backtracks + 1):
            xt = x + alpha * dx
            zt = z + alpha * dz
            ft, dft, gt, Jgt, ht, Jht, _ = evaluate(xt)
            phit = merit(ft, gt, ht, zt)
            if acceptable(phit, alpha):
                accepted = True
                break
            if k == 0 and opts.second_order:
                soc = _corrected_point(lu, n, Jh, mu, zinv, x, z, xt, zt, gt, ht, evaluate, opts)
                for xs, zs, trial in soc:
                    phis = merit(trial[0], trial[2], trial[4], zs)
                    if acceptable(phis, alpha):
                        xt, zt = xs, zs
                        ft, dft, gt, Jgt, ht, Jht, _ = trial
                        accepted = True
                        break
                if accepted:
                    break
            alpha *= 0.5
        if not accepted:
            # Take the shortest trial step; no merit decrease was found along dx.
            log.debug("line search failed at iteration %d", it)

        x, f, df, g, Jg, h, Jh = xt, ft, dft, gt, Jgt, ht, Jht
        last_alpha = alpha if accepted else 0.0
        z = zt
        # Slack reset: z never needs to exceed the true constraint gap deficit.
        short = z < -h
        z[short] = -h[short]
        lam = lam + alpha_d * dlam
        mu = mu + alpha_d * dmu
        if niq:
            target = max(gamma, 1e-14)
            mu = np.clip(mu, target / (1e10 * z), 1e10 * target / z)
        if accepted:
            merit_steps.append((phi0, merit(f, g, h, z)))

        _, feas, grad, comp, cost = conditions(x, f, df, g, Jg, h, Jh, lam, mu, z, f_prev)
        kkt_err = max(grad, comp)
        log.debug(
            "it %3d f %.10g feas %.2e grad %.2e comp %.2e gamma %.2e alpha %.2e/%.2e %s",
            it, f, feas, grad, comp, gamma, alpha, alpha_d, "ok" if accepted else "ls-fail",
        )
        f_prev = f
        if feas < opts.feas_tol and grad < opts.tol and comp < opts.tol and cost < opts.tol:
            status = "optimal"
            break
        stalled = stalled + 1 if last_alpha < 1e-2 else 0
        good = feas < opts.acceptable_feas_tol and kkt_err < opts.acceptable_tol
        near = near + 1 if good else 0
        if good and (stalled >= opts.stall_iterations or near >= opts.acceptable_iterations):
            status = "acceptable"
            break
        if not np.all(np.isfinite(x)):
            raise NlpError(f"non-finite iterate at iteration {it}")

    n_lo = len(bounds.ilo)
    mu_b = mu[n_nl:]
    mu_lower = np.zeros(n)
    mu_upper = np.zeros(n)
    mu_lower[bounds.ilo] = mu_b[:n_lo]
    mu_upper[bounds.ihi] = mu_b[n_lo:]
    return NlpResult(
        x=x,
        objective=float(f),
        lam=lam,
        mu=mu[:n_nl],
        mu_lower=mu_lower,
        mu_upper=mu_upper,
        status=status,
        iterations=it,
        kkt_error=float(kkt_err),
        merit_steps=merit_steps,
        evaluations=n_eval,
        solve_time=time.perf_counter() - t0,
    )
