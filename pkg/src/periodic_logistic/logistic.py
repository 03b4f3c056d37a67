"""Positive periodic solutions of the logistic problem by monotone iteration.

Time stepping for ``u' + A u = mu u - b g(u) u``:

* theta = 1 (default): implicit Euler in the diffusion and the absorption,
  ``M u+ + dt (A u+ + M b g(u+) u+) = (1 + mu dt) M u``, solved by Newton
  from a lagged-coefficient guess.  The step map is monotone and positivity
  preserving for every dt, and a spatially constant equilibrium ``u = mu / b``
  is an exact fixed point.
* theta < 1: theta-weighted step with a midpoint predictor for the
  nonlinearity and ``mu`` inside the zero-order term (second order for
  theta = 1/2; used for accuracy studies).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

from .coeffs import Weight, truncate_weight
from .eigen import EigenPair, GammaSweep, mu_star_sweep, principal_pair
from .errors import (
    CannotDifferentiateError,
    DomainError,
    MonotonicityFailure,
    NoPositiveSolutionError,
    OutOfRangeError,
    RejectedInputError,
    SolverError,
    StepRejectedError,
    SupersolutionFailure,
)
from .evolution import Evolution, PeriodMap, Trajectory, solve_periodic_linear
from .mesh import assemble

__all__ = [
    "Nonlinearity",
    "power_nonlinearity",
    "LogisticProblem",
    "OrderedPair",
    "PeriodicSolution",
    "BifurcationCurve",
    "secant_slope",
    "solve_ivp",
    "build_subsolution",
    "build_supersolution",
    "monotone_iterate",
    "solve_logistic",
    "zero_solution_check",
    "ZeroCheck",
    "stability_margin",
    "mu_derivative",
    "bifurcation_sweep",
    "default_mu_ladder",
    "bifurcation_rows",
]

logger = logging.getLogger(__name__)

SANDWICH_SLACK = 1e-10


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """``g(x, y, t, xi)`` and its derivative in ``xi``, vectorized.

    ``growth = (c, p)`` certifies ``g >= c xi^(p-1)``.
    """

    g: Callable
    dg: Callable
    growth: tuple = None

    def values(self, x, y, t, xi):
        return np.broadcast_to(np.asarray(self.g(x, y, t, xi), dtype=float), np.shape(xi))

    def derivative(self, x, y, t, xi):
        return np.broadcast_to(np.asarray(self.dg(x, y, t, xi), dtype=float), np.shape(xi))

    def check(self, mesh, times, xi_grid=None, T: float = None) -> None:
        """Validate the structural assumptions on a test grid.

        Raises RejectedInputError naming the first violated property.
        """
        xi_grid = np.linspace(0.0, 10.0, 41)[1:] if xi_grid is None else np.asarray(xi_grid, dtype=float)
        x, y = mesh.x, mesh.y
        for t in np.atleast_1d(times):
            if np.max(np.abs(self.values(x, y, t, np.zeros_like(x)))) > 1e-14:
                raise RejectedInputError(f"g(x, t, 0) != 0 at t={t}")
            for xi in xi_grid:
                xv = np.full_like(x, xi)
                if np.any(self.derivative(x, y, t, xv) <= 0):
                    raise RejectedInputError(f"dg/dxi not positive at xi={xi}, t={t}")
                if self.growth is not None:
                    c, p = self.growth
                    if np.any(self.values(x, y, t, xv) < c * xi ** (p - 1) * (1 - 1e-12)):
                        raise RejectedInputError(f"growth bound g >= c xi^(p-1) fails at xi={xi}")
                if T is not None:
                    d = self.values(x, y, t + T, xv) - self.values(x, y, t, xv)
                    if np.max(np.abs(d)) > 1e-12 * (1 + np.max(np.abs(self.values(x, y, t, xv)))):
                        raise RejectedInputError("g is not T-periodic")


def power_nonlinearity(p: float = 2.0, c: float = 1.0) -> Nonlinearity:
    """``g(xi) = c xi^(p-1)`` with growth certificate ``(c, p)``."""
    if p <= 1:
        raise RejectedInputError("need p > 1")
    q = p - 1.0

    def g(x, y, t, xi):
        return c * np.power(np.maximum(xi, 0.0), q)

    def dg(x, y, t, xi):
        if q == 1.0:
            return np.full(np.shape(xi), c)
        return c * q * np.power(np.maximum(xi, 0.0), q - 1.0)

    return Nonlinearity(g, dg, (c, p))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def secant_slope(nl: Nonlinearity, xi1, xi2, x=0.0, y=0.0, t=0.0):
    """``int_0^1 dg(xi1 + s (xi2 - xi1)) ds`` by 8-point Gauss-Legendre.

    Raises DomainError for negative arguments.
    """
    xi1 = np.asarray(xi1, dtype=float)
    xi2 = np.asarray(xi2, dtype=float)
    if np.any(xi1 < 0) or np.any(xi2 < 0):
        raise DomainError("secant slope needs nonnegative arguments")
    s = 0.5 * (_GL_NODES + 1.0)
    wts = 0.5 * _GL_WEIGHTS
    total = 0.0
    for sj, wj in zip(s, wts):
        xi = xi1 + sj * (xi2 - xi1)
        total = total + wj * np.asarray(nl.dg(x, y, t, xi), dtype=float)
    return total


class LogisticProblem:
    """Operator, weight and nonlinearity on a common periodic time grid.

    The gamma sweep and the principal pair without weight are computed once
    and cached.
    """

    def __init__(self, evo: Evolution, weight: Weight, nl: Nonlinearity, gamma_ladder=None, threads: int = 1, seed: int = 0):
        if weight.values.shape != (evo.grid.K + 1, evo.n):
            raise RejectedInputError("weight lattice does not match the time grid")
        self.evo = evo
        self.mesh = evo.mesh
        self.grid = evo.grid
        self.weight = weight
        self.nl = nl
        self.gamma_ladder = gamma_ladder
        self.threads = threads
        self.seed = seed
        self._pair0 = None
        self._sweep = None
        self._lin = None

    @property
    def pair0(self) -> EigenPair:
        if self._pair0 is None:
            self._pair0 = principal_pair(self.evo, None, seed=self.seed)
        return self._pair0

    @property
    def mu1_0(self) -> float:
        return self.pair0.mu1

    def sweep(self) -> GammaSweep:
        if self._sweep is None:
            self._sweep = mu_star_sweep(
                self.evo, self.weight, self.gamma_ladder, threads=self.threads, keep_pairs=False, seed=self.seed
            )
        return self._sweep

    @property
    def mu_star(self) -> float:
        return self.sweep().mu_star_estimate

    # -- lattice helpers -------------------------------------------------
    def b(self, k: int) -> np.ndarray:
        return self.weight.values[k % self.grid.K]

    def t(self, k: int) -> float:
        return k * self.grid.dt

    def g(self, k: int, u: np.ndarray) -> np.ndarray:
        return self.nl.values(self.mesh.x, self.mesh.y, self.t(k), u)

    def dg(self, k: int, u: np.ndarray) -> np.ndarray:
        return self.nl.derivative(self.mesh.x, self.mesh.y, self.t(k), u)

    def potential(self, k_new: int, u_old: np.ndarray) -> np.ndarray:
        """Lagged zero-order coefficient ``b(t_new) g(t_new, u_old)``."""
        return self.b(k_new) * self.g(k_new, u_old)

    # -- stepping ----------------------------------------------------------
    def step(self, mu: float, u: np.ndarray, k: int, theta: float = None) -> np.ndarray:
        """One step from ``t_k`` to ``t_{k+1}``, with dt halving on positivity loss."""
        theta = self.grid.theta if theta is None else theta
        out = self._step(mu, u, k, theta)
        if np.min(out) >= -1e-13 * max(1.0, np.max(np.abs(out))):
            return np.maximum(out, 0.0)
        return self._substep(mu, u, k, theta)

    def _step(self, mu, u, k, theta):
        evo = self.evo
        dt = self.grid.dt
        if theta >= 1.0:
            rhs = (1.0 + mu * dt) * evo.w * u
            rhs[evo.dirichlet] = 0.0
            v = evo.solve(evo.lhs(k + 1, self.potential(k + 1, u), dt), rhs)
            return self._newton(k + 1, v, rhs)
        # predictor with the lagged implicit step, then a theta-weighted corrector
        pred = self._lagged(mu, u, k)
        umid = 0.5 * (u + np.maximum(pred, 0.0))
        bmid = 0.5 * (self.b(k) + self.b(k + 1))
        q = bmid * self.nl.values(self.mesh.x, self.mesh.y, self.t(k) + 0.5 * dt, umid) - mu
        if dt * np.max(np.abs(q)) >= 2.0:
            raise RejectedInputError("theta < 1 requires dt * max|zero-order term| < 2")
        lhs = evo.lhs(k + 1, q, theta * dt)
        rhs = evo.rhs(u, k, q, None, None, theta, dt)
        return evo.solve(lhs, rhs)

    def _lagged(self, mu, u, k):
        evo = self.evo
        rhs = (1.0 + mu * self.grid.dt) * evo.w * u
        rhs[evo.dirichlet] = 0.0
        return evo.solve(evo.lhs(k + 1, self.potential(k + 1, u), self.grid.dt), rhs)

    def _newton(self, k_new, v, rhs, max_iter: int = 200):
        """Solve ``M v + dt (A v + M b g(v) v) = rhs`` starting from ``v``."""
        evo = self.evo
        dt = self.grid.dt
        bk = self.b(k_new)
        free = self.mesh.free
        for _ in range(max_iter):
            gv = self.g(k_new, v)
            res = evo.w * v + dt * (evo.operator_matvec(k_new, v) + evo.w * bk * gv * v) - rhs
            res[~free] = 0.0
            jac = evo.lhs(k_new, bk * (gv + self.dg(k_new, v) * v), dt)
            dv = evo.solve(jac, res)
            v = v - dv
            if np.max(np.abs(dv)) <= 1e-13 * max(1.0, np.max(np.abs(v))):
                return v
        raise SolverError(f"Newton iteration for the implicit step did not converge (step to index {k_new})")

    def _substep(self, mu, u, k, theta, max_halvings: int = 10):
        """Retry a rejected step with 2^j substeps using interpolated coefficients."""
        t0 = self.t(k)
        dt = self.grid.dt
        w = self.evo.w
        free = self.mesh.free.astype(float)
        for j in range(1, max_halvings + 1):
            ns = 2**j
            h = dt / ns
            y = u.copy()
            ok = True
            for i in range(ns):
                s1 = (i + 1) / ns
                t1 = t0 + s1 * dt
                b1 = (1 - s1) * self.b(k) + s1 * self.b(k + 1)
                q = b1 * self.nl.values(self.mesh.x, self.mesh.y, t1, y) * free
                A1 = assemble(self.mesh, self.evo.coeffs, t1)
                lhs = (sp.diags(w * (1 + h * q)) + h * A1).tocsc()
                rhs = (1 + mu * h) * w * y
                rhs[self.evo.dirichlet] = 0.0
                y = spla.spsolve(lhs, rhs)
                if np.min(y) < -1e-13 * max(1.0, np.max(np.abs(y))):
                    ok = False
                    break
            if ok:
                return np.maximum(y, 0.0)
        raise StepRejectedError(f"positivity lost at step {k} after {max_halvings} halvings")

    def period(self, mu: float, u0: np.ndarray, k0: int = 0, theta: float = None) -> np.ndarray:
        """States over one period starting at ``t_{k0}``; shape ``(K + 1, n)``."""
        K = self.grid.K
        out = np.empty((K + 1, self.mesh.n))
        y = np.array(u0, dtype=float)
        y[self.evo.dirichlet] = 0.0
        out[0] = y
        for i in range(K):
            y = self.step(mu, y, k0 + i, theta)
            out[i + 1] = y
        return out

    def linear_map(self) -> PeriodMap:
        if self._lin is None:
            self._lin = PeriodMap(self.evo, None, theta=1.0)
        return self._lin


def solve_ivp(
    problem: LogisticProblem,
    mu: float,
    u0: np.ndarray,
    horizon: int = 1,
    check_barrier: bool = True,
    barrier_slack: float = 1e-10,
) -> Trajectory:
    """Integrate the logistic equation over ``horizon`` periods from ``u0 >= 0``.

    With ``check_barrier`` each state is compared with the linear majorant
    ``e^{mu t} U(t, 0) u0`` (theta = 1 only).
    """
    u0 = np.asarray(u0, dtype=float)
    if np.any(u0 < 0):
        raise DomainError("initial value must be nonnegative")
    K = problem.grid.K
    steps = horizon * K
    vals = np.empty((steps + 1, problem.mesh.n))
    y = u0.copy()
    y[problem.evo.dirichlet] = 0.0
    vals[0] = y
    lin = problem.linear_map() if (check_barrier and problem.grid.theta >= 1.0) else None
    z = y.copy()
    dt = problem.grid.dt
    for k in range(steps):
        y = problem.step(mu, y, k)
        vals[k + 1] = y
        if lin is not None:
            z = lin.step(z, k)
            bound = np.exp(mu * (k + 1) * dt) * z
            excess = np.max(y - bound)
            if excess > barrier_slack * max(1.0, np.max(np.abs(bound))):
                raise SolverError(f"linear barrier violated at step {k + 1} by {excess:.3e}")
    times = np.arange(steps + 1) * dt
    return Trajectory(vals, times, problem.mesh)


@dataclass(eq=False)
class OrderedPair:
    sub: Trajectory
    sup: Trajectory
    eps: float
    kappa: float
    delta: float
    gamma: float
    psi_pair: EigenPair = None


def _discrete_step_check(problem, mu, traj_vals, sign, slack=1e-12):
    """Worst violation of ``sign * (L(v_k) - v_{k+1}) >= 0`` over one period."""
    K = problem.grid.K
    worst = 0.0
    for k in range(K):
        nxt = problem.step(mu, traj_vals[k], k)
        diff = sign * (nxt - traj_vals[k + 1])
        scale = slack * max(1.0, np.max(np.abs(traj_vals[k + 1])))
        worst = min(worst, float(np.min(diff)) + scale)
    return worst


def subsolution_condition(problem: LogisticProblem, mu: float, eps: float) -> float:
    """Largest lattice value of ``mu1(0) - mu + b g(eps phi0)``."""
    phi = problem.pair0.phi.values
    K = problem.grid.K
    worst = -np.inf
    for k in range(K):
        v = problem.mu1_0 - mu + problem.b(k) * problem.g(k, eps * phi[k])
        worst = max(worst, float(np.max(v[problem.mesh.free])))
    return worst


def build_subsolution(problem: LogisticProblem, mu: float, eps0: float = 1.0, max_halvings: int = 80):
    """Scaled principal eigenfunction ``eps phi0`` below the positive solution.

    Bisects for the largest ``eps`` with the pointwise condition, halves it
    for margin and confirms the discrete one-step inequality
    ``L(eps phi0(t_k)) >= eps phi0(t_{k+1})``.

    Returns
    -------
    (eps, Trajectory)
    """
    mu1 = problem.mu1_0
    if mu <= mu1:
        raise OutOfRangeError(f"mu={mu} must exceed mu1(0)={mu1}")
    phi = problem.pair0.phi
    if subsolution_condition(problem, mu, eps0) < 0:
        eps = eps0
    else:
        lo, hi = 0.0, eps0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if subsolution_condition(problem, mu, mid) < 0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-6 * hi:
                break
        eps = 0.5 * lo
    for _ in range(max_halvings):
        if eps > 0 and _discrete_step_check(problem, mu, eps * phi.values, +1) >= 0:
            return eps, phi.scaled(eps)
        eps *= 0.5
    raise SolverError("could not confirm a sub-solution")


def _gamma_for(problem: LogisticProblem, mu: float):
    sweep = problem.sweep()
    mu_star = sweep.mu_star_estimate
    if np.isfinite(mu_star):
        if mu >= mu_star:
            raise OutOfRangeError(f"mu={mu} is not below the mu* estimate {mu_star}")
        target = mu + 0.1 * (mu_star - mu)
    else:
        target = mu
    idx = np.nonzero(sweep.mu_values > target)[0]
    if idx.size == 0:
        raise SupersolutionFailure(f"no ladder rung with mu1(gamma b) > {target}")
    return float(sweep.gammas[idx[0]])


def build_supersolution(
    problem: LogisticProblem,
    mu: float,
    sub: Trajectory = None,
    kappa0: float = 1.0,
    max_doublings: int = 1000,
) -> tuple:
    """Scaled principal eigenfunction ``kappa psi`` for a truncated weight.

    ``gamma`` is the smallest ladder rung with ``mu1(gamma b) > mu + 0.1 (mu* - mu)``
    (``> mu`` when the sweep is flagged infinite); ``delta`` halves from four
    cells until ``mu1(gamma b_delta) > mu``; ``kappa`` doubles from ``kappa0``
    until the pointwise super-solution inequality holds on the support of
    ``b_delta``, ``kappa psi >= sub`` and the discrete one-step inequality
    ``L(kappa psi(t_k)) <= kappa psi(t_{k+1})`` holds.

    Returns
    -------
    (kappa, delta, gamma, Trajectory, EigenPair)
    """
    gamma = _gamma_for(problem, mu)
    mesh = problem.mesh
    w = problem.weight
    if mesh.gamma0_nodes.size == 0:
        delta = 0.0
        wd = w
        pair = principal_pair(problem.evo, gamma * wd.values, seed=problem.seed)
    else:
        delta = 4.0 * min(mesh.spacing)
        for _ in range(60):
            wd = truncate_weight(w, mesh, delta)
            pair = principal_pair(problem.evo, gamma * wd.values, seed=problem.seed)
            if pair.mu1 > mu:
                break
            delta *= 0.5
        else:
            raise SupersolutionFailure("weight truncation never raised mu1(gamma b_delta) above mu")
    psi = pair.phi.values
    if np.any(psi[:, mesh.free] <= 0):
        raise SupersolutionFailure("principal eigenfunction is not positive on the lattice")
    K = problem.grid.K
    supp = wd.values[:K] > wd.threshold_eps
    kappa = kappa0
    last = "pointwise"
    for _ in range(max_doublings):
        ok = True
        for k in range(K):
            sk = supp[k]
            if sk.any():
                val = problem.b(k)[sk] * problem.g(k, kappa * psi[k])[sk] - gamma * wd.values[k][sk]
                if np.min(val) < 0:
                    ok = False
                    last = "pointwise"
                    break
        if ok and sub is not None and np.any(kappa * psi < sub.values - 1e-14):
            ok = False
            last = "ordering"
        if ok and _discrete_step_check(problem, mu, kappa * psi, -1) < 0:
            ok = False
            last = "discrete"
        if ok:
            return kappa, delta, gamma, pair.phi.scaled(kappa), pair
        kappa *= 2.0
        if not np.isfinite(kappa * np.max(psi)):
            break
    raise SupersolutionFailure(f"kappa growth cap exceeded (last failing check: {last})")


@dataclass(eq=False)
class PeriodicSolution:
    mu: float
    u: Trajectory
    periodic_residual: float
    pde_residual: float
    stability_margin: float
    iterations: int
    direction: str = "up"
    tol_fix: float = None
    rate: float = None
    sandwich_violations: int = 0
    min_sandwich_gap: float = None
    history: list = field(default_factory=list)

    @property
    def sup_norm(self) -> float:
        return self.u.sup()


def monotone_iterate(
    problem: LogisticProblem,
    mu: float,
    pair: OrderedPair,
    direction: str = "up",
    tol_fix: float = None,
    max_periods: int = 500,
    start: np.ndarray = None,
    compute_margin: bool = True,
    raise_on_violation: bool = True,
    stop: str = "increment",
) -> PeriodicSolution:
    """Iterate the period map from ``sub(0)`` (up) or ``sup(0)`` (down).

    Every stored slice of every period is checked against
    ``sub <= w_n <= w_{n+1} <= sup`` (reversed order for downward runs) with
    ``-1e-10`` absolute slack.  Stops when ``|w_{n+1}(0) - w_n(0)|_inf < tol_fix``;
    by default ``tol_fix = 1e-8 (1 + |w_n|_inf)`` with the sup norm taken over
    the current period (the super-solution can exceed the solution by many
    orders of magnitude, so it is not used for scaling).

    ``stop="estimate"`` instead requires the a posteriori error bound
    ``inc r / (1 - r)`` (``r`` the observed contraction of the increments) to
    fall below ``tol_fix``; this matters when the stability margin is small.
    Comparisons use ``1e-10`` absolute slack, widened to a few ulps for
    iterates large enough that rounding alone exceeds it.
    """
    sub = pair.sub.values
    sup = pair.sup.values
    relative = tol_fix is None
    if direction not in ("up", "down"):
        raise RejectedInputError("direction must be 'up' or 'down'")
    if start is not None:
        w0 = np.asarray(start, dtype=float).copy()
    else:
        w0 = (sub if direction == "up" else sup)[0].copy()
    prev = None
    violations = 0
    min_gap = np.inf
    incs = []
    for n in range(1, max_periods + 1):
        traj = problem.period(mu, w0)
        gaps = [np.min(traj - sub), np.min(sup - traj)]
        if prev is not None:
            gaps.append(np.min(traj - prev) if direction == "up" else np.min(prev - traj))
        gap = float(min(gaps))
        min_gap = min(min_gap, gap)
        slack = max(SANDWICH_SLACK, 8 * np.finfo(float).eps * float(np.max(np.abs(traj))))
        if gap < -slack:
            violations += 1
            if raise_on_violation:
                raise MonotonicityFailure(
                    f"sandwich violated by {gap:.3e} in period {n} (mu={mu}, direction={direction})"
                )
        inc = float(np.max(np.abs(traj[-1] - w0)))
        incs.append(inc)
        if relative:
            tol_fix = 1e-8 * (1.0 + float(np.max(traj)))
        prev = traj
        w0 = traj[-1].copy()
        err = inc
        if stop == "estimate":
            r = incs[-1] / incs[-2] if len(incs) >= 2 and incs[-2] > 0 else 1.0
            err = inc * max(1.0, r / max(1.0 - r, 1e-3)) if r < 1.0 else np.inf
        if err < tol_fix:
            break
    else:
        raise SolverError(f"monotone iteration did not converge in {max_periods} periods (last increment {inc:.3e})")
    rate = incs[-1] / incs[-2] if len(incs) >= 2 and incs[-2] > 0 else None
    u = Trajectory(traj, problem.grid.times.copy(), problem.mesh)
    sol = PeriodicSolution(
        mu=mu,
        u=u,
        periodic_residual=u.periodic_residual(),
        pde_residual=inc,
        stability_margin=np.nan,
        iterations=n,
        direction=direction,
        tol_fix=tol_fix,
        rate=rate,
        sandwich_violations=violations,
        min_sandwich_gap=min_gap,
        history=incs,
    )
    if compute_margin:
        sol.stability_margin = stability_margin(problem, sol)
    return sol


def _solution_lattice(problem, u, func):
    """Lattice ``m[k] = func(k, u[k])`` for ``k >= 1`` and ``m[0] = m[K]``."""
    K = problem.grid.K
    m = np.empty((K + 1, problem.mesh.n))
    for k in range(1, K + 1):
        m[k] = func(k, u[k])
    m[0] = m[K]
    return m


def linearized_potential(problem: LogisticProblem, sol: PeriodicSolution) -> np.ndarray:
    u = sol.u.values

    def f(k, uk):
        return problem.b(k) * (problem.g(k, uk) + problem.dg(k, uk) * uk)

    return _solution_lattice(problem, u, f)


def stability_margin(problem: LogisticProblem, sol: PeriodicSolution) -> float:
    """``mu1`` of the linearization ``A + b [g(u) + g'(u) u] - mu``."""
    m = linearized_potential(problem, sol)
    return principal_pair(problem.evo, m, with_trajectory=False, seed=problem.seed).mu1 - sol.mu


def discrete_growth_rate(problem: LogisticProblem, mu: float) -> float:
    """Growth rate per unit time of the explicit factor ``1 + mu dt`` (``theta = 1``)."""
    dt = problem.grid.dt
    if problem.grid.theta == 1.0:
        return float(np.log1p(mu * dt) / dt)
    return float(mu)


def logistic_eigen_consistency(problem: LogisticProblem, sol: PeriodicSolution) -> float:
    """Discrete form of ``mu1(b g(u)) - mu``.

    The periodic solution is the principal eigenvector of the unshifted
    period map with potential ``b g(u)``; its eigenvalue is
    ``(1 + mu dt)^(-K)``.  The returned value compares the growth rate of that
    map with :func:`discrete_growth_rate` and vanishes up to the eigen
    tolerance.  The shifted :func:`principal_pair` value of ``mu1(b g(u))``
    agrees with ``mu`` only up to ``O(dt)`` because the shift is taken out of
    the time stepping.
    """
    m = _solution_lattice(problem, sol.u.values, problem.potential)
    pair = principal_pair(problem.evo, m, with_trajectory=False, seed=problem.seed, shift=0.0)
    return pair.mu1 - discrete_growth_rate(problem, sol.mu)


@dataclass
class ZeroCheck:
    mu: float
    decayed: bool
    final_sup: float
    periods: int
    newton_steps: int
    tol_fix: float
    sup_history: list


def zero_solution_check(
    problem: LogisticProblem,
    mu: float,
    start: np.ndarray = None,
    tol_fix: float = None,
    max_periods: int = 500,
    newton_after: int = 50,
    max_newton: int = 80,
) -> ZeroCheck:
    """Confirm that iterates from a positive start decay to zero.

    Runs the period map; when the decay is slower than geometric after
    ``newton_after`` periods (the critical case ``mu = mu1(0)``), switches to a
    Newton-Krylov iteration on ``P(v) - v`` whose iterates stay nonnegative.
    """
    n = problem.mesh.n
    if start is None:
        phi0 = problem.pair0.vector
        start = phi0 / np.max(phi0)
    if tol_fix is None:
        tol_fix = 1e-8 * (1.0 + float(np.max(start)))
    w = np.asarray(start, dtype=float).copy()
    sups = [float(np.max(w))]
    periods = 0
    while periods < max_periods:
        w = problem.period(mu, w)[-1]
        periods += 1
        sups.append(float(np.max(w)))
        if sups[-1] < 10 * tol_fix:
            return ZeroCheck(mu, True, sups[-1], periods, 0, tol_fix, sups)
        if periods >= newton_after:
            r_now = sups[-1] / sups[-2]
            r_old = sups[-11] / sups[-10] if len(sups) > 11 else 0.0
            if r_now > 0.9 and r_now >= r_old:
                break
    newton = 0
    free = problem.mesh.free

    def P(v):
        return problem.period(mu, v)[-1]

    while newton < max_newton and periods < 100 * max_periods:
        Pw = P(w)
        F = Pw - w
        periods += 1

        def jv(d):
            nd = np.linalg.norm(d)
            if nd == 0:
                return np.zeros_like(d)
            h = 1e-7 * max(np.linalg.norm(w), 1e-30) / nd
            return (P(w + h * d) - Pw) / h - d

        op = spla.LinearOperator((n, n), matvec=jv, dtype=float)
        d, _ = spla.gmres(op, -F, rtol=1e-8, atol=0.0, restart=min(n, 30), maxiter=3)
        w_new = np.where(free, w + d, 0.0)
        if np.any(w_new < 0):
            w_new = np.maximum(w_new, 0.5 * w)
        w = w_new
        newton += 1
        sups.append(float(np.max(w)))
        if sups[-1] < 10 * tol_fix:
            return ZeroCheck(mu, True, sups[-1], periods, newton, tol_fix, sups)
    return ZeroCheck(mu, False, sups[-1], periods, newton, tol_fix, sups)


def solve_logistic(
    problem: LogisticProblem,
    mu: float,
    direction: str = "up",
    tol_fix: float = None,
    max_periods: int = 500,
    start: np.ndarray = None,
    stop: str = "increment",
) -> PeriodicSolution:
    """Positive periodic solution at ``mu`` or NoPositiveSolutionError.

    Outside the admissible range ``mu > mu1(0)`` the decay of the iterates
    is confirmed and reported through the exception's ``check`` attribute.
    """
    if mu <= problem.mu1_0:
        check = zero_solution_check(problem, mu, tol_fix=tol_fix, max_periods=max_periods)
        err = NoPositiveSolutionError(
            f"no positive periodic solution for mu={mu} <= mu1(0)={problem.mu1_0:.12g} "
            f"(iterates {'decayed' if check.decayed else 'did not decay'} to {check.final_sup:.3e})"
        )
        err.check = check
        raise err
    eps, sub = build_subsolution(problem, mu)
    kappa, delta, gamma, sup, psi_pair = build_supersolution(problem, mu, sub)
    pair = OrderedPair(sub, sup, eps, kappa, delta, gamma, psi_pair)
    sol = monotone_iterate(problem, mu, pair, direction, tol_fix, max_periods, start=start, stop=stop)
    sol.pair = pair
    return sol


def _tangent_factors(problem, sol):
    evo = problem.evo
    dt = problem.grid.dt
    m = linearized_potential(problem, sol)
    K = problem.grid.K
    facs = []
    for k in range(K):
        lhs = evo.lhs(k + 1, m[k + 1], dt)
        if evo.tridiagonal:
            dl, d, du, du2, ipiv, info = lapack.dgttrf(*lhs)
            facs.append(("tri", (dl, d, du, du2, ipiv)))
        else:
            facs.append(("lu", spla.splu(lhs)))
    return facs


def _fsolve(fac, rhs):
    kind, f = fac
    if kind == "tri":
        x, info = lapack.dgttrs(*f, rhs)
        return x
    return f.solve(rhs)


def mu_derivative(problem: LogisticProblem, sol: PeriodicSolution) -> Trajectory:
    """Derivative of the periodic solution with respect to ``mu``.

    For theta = 1 this is the exact derivative of the discrete scheme,
    ``J_{k+1} v_{k+1} = (1 + mu dt) M v_k + dt M u_k`` with ``J`` the step
    Jacobian, a linear periodic problem solved by GMRES on ``(I - Phi) v0 = c``.  For
    theta < 1 the continuous linearization with source ``u`` is solved.

    Raises
    ------
    CannotDifferentiateError
        If the stability margin is not positive.
    """
    margin = sol.stability_margin
    if not np.isfinite(margin):
        margin = stability_margin(problem, sol)
    if margin <= 0:
        raise CannotDifferentiateError(f"stability margin {margin:.3e} is not positive")
    mu = sol.mu
    if problem.grid.theta < 1.0:
        m = linearized_potential(problem, sol) - mu
        return solve_periodic_linear(problem.evo, m, sol.u.values)
    evo = problem.evo
    dt = problem.grid.dt
    u = sol.u.values
    K = problem.grid.K
    n = problem.mesh.n
    w = evo.w
    dirich = evo.dirichlet
    facs = _tangent_factors(problem, sol)
    growth = 1.0 + mu * dt

    def sweep(v0, with_source):
        v = np.array(v0, dtype=float)
        out = np.empty((K + 1,) + v.shape)
        out[0] = v
        for k in range(K):
            rhs = growth * w * v
            if with_source:
                rhs = rhs + dt * w * u[k]
            rhs[dirich] = 0.0
            v = _fsolve(facs[k], rhs)
            out[k + 1] = v
        return out

    cvec = sweep(np.zeros(n), True)[-1]
    op = spla.LinearOperator((n, n), matvec=lambda v: v - sweep(v, False)[-1], dtype=float)
    v0, info = spla.gmres(op, cvec, rtol=1e-13, atol=0.0, restart=min(n, 50), maxiter=200)
    vals = sweep(v0, True)
    return Trajectory(vals, problem.grid.times.copy(), problem.mesh)


def default_mu_ladder(mu1_0: float, mu_star: float, rungs: int = 8, closest: float = 0.02) -> np.ndarray:
    """Ladder from ``mu1(0) + 0.01 D`` towards ``mu*`` with geometric gaps (``D = mu* - mu1(0)``)."""
    if not np.isfinite(mu_star):
        raise RejectedInputError("a default mu ladder needs a finite mu* estimate")
    D = mu_star - mu1_0
    dist = 0.99 * D * (closest / 0.99) ** (np.arange(rungs) / (rungs - 1))
    return mu_star - dist


@dataclass(eq=False)
class BifurcationCurve:
    mus: np.ndarray
    sup_norms: np.ndarray
    margins: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    solutions: list
    failures: dict


def bifurcation_sweep(
    problem: LogisticProblem,
    mu_ladder=None,
    rungs: int = 8,
    tol_fix: float = None,
    max_periods: int = 500,
    compute_margin: bool = True,
) -> BifurcationCurve:
    """Warm-started sequence of periodic solutions along ``mu_ladder``.

    Each rung starts the upward iteration from ``max(sub(0), u_prev(0))``.
    Rung failures are recorded and the sweep continues.
    """
    if mu_ladder is None:
        mu_ladder = default_mu_ladder(problem.mu1_0, problem.mu_star, rungs)
    mu_ladder = np.asarray(mu_ladder, dtype=float)
    sols, failures = [], {}
    prev = None
    for mu in mu_ladder:
        try:
            eps, sub = build_subsolution(problem, mu)
            kappa, delta, gamma, sup, psi_pair = build_supersolution(problem, mu, sub)
            pair = OrderedPair(sub, sup, eps, kappa, delta, gamma, psi_pair)
            start = sub.values[0] if prev is None else np.maximum(sub.values[0], prev.u.values[0])
            if prev is not None and np.any(start > sup.values[0]):
                start = np.minimum(start, sup.values[0])
            sol = monotone_iterate(
                problem, mu, pair, "up", tol_fix, max_periods, start=start, compute_margin=compute_margin
            )
            sol.pair = pair
            sols.append(sol)
            prev = sol
        except Exception as exc:  # recorded, the sweep continues
            logger.warning("rung mu=%g failed: %s", mu, exc)
            failures[float(mu)] = f"{type(exc).__name__}: {exc}"
            sols.append(None)
    ok = [s for s in sols if s is not None]
    return BifurcationCurve(
        mus=np.array([s.mu for s in ok]),
        sup_norms=np.array([s.sup_norm for s in ok]),
        margins=np.array([s.stability_margin for s in ok]),
        iterations=np.array([s.iterations for s in ok]),
        residuals=np.array([s.pde_residual for s in ok]),
        solutions=ok,
        failures=failures,
    )


def bifurcation_rows(curve: BifurcationCurve):
    for mu, s, m, it, r in zip(curve.mus, curve.sup_norms, curve.margins, curve.iterations, curve.residuals):
        yield float(mu), float(s), float(m), int(it), float(r)
