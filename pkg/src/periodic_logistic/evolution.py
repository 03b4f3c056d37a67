"""Implicit theta-scheme time stepping and the discrete evolution system.

All state vectors live on the full node set; Dirichlet nodes are pinned to
zero.  In 1D the step matrices are tridiagonal and handled with LAPACK
``?gtsv``/``?gttrf``; in 2D sparse LU factorizations are used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

from .errors import NoPositiveSolutionError, NumericalBlowupError, RejectedInputError, SolverError
from .mesh import Mesh, assemble

__all__ = [
    "TimeGrid",
    "Trajectory",
    "Evolution",
    "PeriodMap",
    "Lattice",
    "step",
    "propagate",
    "solve_periodic_linear",
    "apriori_diagnostic",
    "AprioriReport",
    "period_map_bound",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int
    theta: float = 1.0

    def __post_init__(self):
        if self.K < 2:
            raise RejectedInputError("need at least two time steps per period")
        if not 0.5 <= self.theta <= 1.0:
            raise RejectedInputError("theta must lie in [1/2, 1]")
        if self.T <= 0:
            raise RejectedInputError("period must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)

    def with_steps(self, K: int) -> "TimeGrid":
        return TimeGrid(self.T, K, self.theta)


@dataclass(eq=False)
class Trajectory:
    """Space-time field: ``values[k]`` is the state at ``times[k]``."""

    values: np.ndarray
    times: np.ndarray
    mesh: Mesh = None

    @property
    def K(self) -> int:
        return self.values.shape[0] - 1

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    @property
    def h_norms(self) -> np.ndarray:
        w = self.mesh.mass_weights
        return np.sqrt(np.sum(w * self.values**2, axis=1))

    @property
    def v_norms(self) -> np.ndarray:
        return np.array([self.mesh.v_norm(v) for v in self.values])

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def scaled(self, c: float) -> "Trajectory":
        return Trajectory(c * self.values, self.times.copy(), self.mesh)

    def periodic_residual(self) -> float:
        return self.mesh.h_norm(self.values[-1] - self.values[0])


class Lattice:
    """Zero-order or source data on the node x time lattice.

    Accepts ``None``, a scalar, a node vector, a ``(K + 1, n)`` or ``(K, n)``
    array, or a callable ``f(x, y, t)``.  ``at(k)`` wraps periodically.
    """

    def __init__(self, value, mesh: Mesh, grid: TimeGrid):
        self.K = grid.K
        self.n = mesh.n
        self.const = True
        if value is None:
            self.data = np.zeros(mesh.n)
            self.zero = True
            return
        if callable(value):
            from .coeffs import sample_field

            arr = sample_field(value, mesh, grid.times)
        else:
            arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            self.data = np.full(mesh.n, float(arr))
        elif arr.ndim == 1:
            if arr.size != mesh.n:
                raise RejectedInputError("node vector has the wrong length")
            self.data = arr.copy()
        elif arr.ndim == 2:
            if arr.shape[1] != mesh.n or arr.shape[0] not in (grid.K, grid.K + 1):
                raise RejectedInputError(f"lattice shape {arr.shape} does not match ({grid.K + 1}, {mesh.n})")
            self.data = arr[: grid.K].copy()
            self.const = False
        else:
            raise RejectedInputError("unsupported lattice data")
        self.zero = not np.any(self.data)

    def at(self, k: int) -> np.ndarray:
        if self.const:
            return self.data
        return self.data[k % self.K]

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.data), initial=0.0))

    def min(self, nodes=None) -> float:
        """Minimum over the lattice, optionally restricted to a node mask."""
        d = self.data if nodes is None else self.data[..., nodes]
        return float(np.min(d))

    def full(self) -> np.ndarray:
        """``(K + 1, n)`` array with the first layer repeated at the end."""
        if self.const:
            return np.tile(self.data, (self.K + 1, 1))
        return np.vstack([self.data, self.data[:1]])


def _as_lattice(value, mesh, grid):
    return value if isinstance(value, Lattice) else Lattice(value, mesh, grid)


def _tri_parts(A: sp.csr_matrix):
    return A.diagonal(-1).copy(), A.diagonal(0).copy(), A.diagonal(1).copy()


def _tri_matvec(parts, y):
    dl, d, du = parts
    if y.ndim == 2:
        dl, d, du = dl[:, None], d[:, None], du[:, None]
    out = d * y
    out[1:] += dl * y[:-1]
    out[:-1] += du * y[1:]
    return out


class Evolution:
    """Assembled operator on a periodic time grid.

    Holds ``A_h(t_k)`` for ``k = 0 .. K-1`` (time index wraps at the period)
    and provides single steps of the theta scheme for

        ``M y' + A_h(t) y + M q(t) y = M f(t)``.
    """

    def __init__(self, mesh: Mesh, coeffs, grid: TimeGrid):
        self.mesh = mesh
        self.coeffs = coeffs
        self.grid = grid
        self.w = mesh.mass_weights
        self.dirichlet = mesh.dirichlet_mask
        self.tridiagonal = mesh.dim == 1
        self.time_constant = not any(callable(f) for f in coeffs.fields().values())
        times = grid.times[: grid.K]
        if self.time_constant:
            A0 = assemble(mesh, coeffs, 0.0)
            self._A = [A0] * grid.K
        else:
            self._A = [assemble(mesh, coeffs, t) for t in times]
        if self.tridiagonal:
            if self.time_constant:
                p = _tri_parts(self._A[0])
                self._tri = [p] * grid.K
            else:
                self._tri = [_tri_parts(A) for A in self._A]
        self._mask_free = (~self.dirichlet).astype(float)

    @property
    def n(self) -> int:
        return self.mesh.n

    def A(self, k: int):
        return self._A[k % self.grid.K]

    def with_grid(self, grid: TimeGrid) -> "Evolution":
        return Evolution(self.mesh, self.coeffs, grid)

    def operator_matvec(self, k: int, y: np.ndarray) -> np.ndarray:
        if self.tridiagonal:
            return _tri_matvec(self._tri[k % self.grid.K], y)
        return self._A[k % self.grid.K] @ y

    def lhs(self, k_new: int, q_new: np.ndarray, theta_dt: float):
        """Step matrix ``M + theta dt (A_h + M q)`` at time index ``k_new``."""
        q = q_new * self._mask_free
        diag_extra = self.w * (1.0 + theta_dt * q)
        if self.tridiagonal:
            dl, d, du = self._tri[k_new % self.grid.K]
            d_new = diag_extra + theta_dt * d
            if np.any(d_new <= 0):
                raise SolverError("step matrix lost diagonal positivity; reduce dt or shift the zero-order term")
            return theta_dt * dl, d_new, theta_dt * du
        M = (theta_dt * self._A[k_new % self.grid.K] + sp.diags(diag_extra)).tocsc()
        if np.any(M.diagonal() <= 0):
            raise SolverError("step matrix lost diagonal positivity; reduce dt or shift the zero-order term")
        return M

    def rhs(self, y, k_old, q_old, f_new, f_old, theta, dt):
        w = self.w if y.ndim == 1 else self.w[:, None]
        out = w * y
        if theta < 1.0:
            qo = q_old if y.ndim == 1 else q_old[:, None]
            out = out - (1.0 - theta) * dt * (self.operator_matvec(k_old, y) + w * qo * y)
        if f_new is not None:
            fsrc = theta * f_new + (1.0 - theta) * f_old
            out = out + dt * (w * (fsrc if y.ndim == 1 else fsrc[:, None]))
        out[self.dirichlet] = 0.0
        return out

    def solve(self, lhs, rhs):
        if self.tridiagonal:
            dl, d, du = lhs
            _, _, _, x, info = lapack.dgtsv(dl, d, du, rhs)
            if info != 0:
                raise SolverError(f"tridiagonal solve failed (info={info})")
            return x
        return spla.spsolve(lhs, rhs)


class PeriodMap:
    """Discrete evolution system for a fixed zero-order perturbation ``m``.

    Step factorizations are computed lazily and cached, so repeated
    applications (power iteration, Krylov solves) cost only triangular solves.
    ``theta`` defaults to the grid value.
    """

    def __init__(self, evo: Evolution, m=None, theta: float = None):
        self.evo = evo
        self.grid = evo.grid
        self.theta = self.grid.theta if theta is None else float(theta)
        self.m = _as_lattice(m, evo.mesh, evo.grid)
        dt = self.grid.dt
        if self.theta < 1.0 and dt * self.m.max_abs() >= 2.0:
            raise RejectedInputError("theta < 1 requires dt * max|m| < 2 for positivity")
        self._shared = evo.time_constant and self.m.const
        self._factors = {}

    @property
    def T(self) -> float:
        return self.grid.T

    def _factor(self, k: int):
        key = 0 if self._shared else k % self.grid.K
        fac = self._factors.get(key)
        if fac is None:
            lhs = self.evo.lhs(k + 1, self.m.at(k + 1), self.theta * self.grid.dt)
            if self.evo.tridiagonal:
                dl, d, du, du2, ipiv, info = lapack.dgttrf(*lhs)
                if info != 0:
                    raise SolverError(f"singular step matrix at step {k}")
                fac = (dl, d, du, du2, ipiv)
            else:
                fac = spla.splu(lhs)
            self._factors[key] = fac
        return fac

    def _solve(self, k, rhs):
        fac = self._factor(k)
        if self.evo.tridiagonal:
            x, info = lapack.dgttrs(*fac, rhs)
            if info != 0:
                raise SolverError(f"triangular solve failed at step {k}")
            return x
        return fac.solve(rhs)

    def step(self, y: np.ndarray, k: int, f: Lattice = None) -> np.ndarray:
        """Advance from ``t_k`` to ``t_{k+1}``."""
        th = self.theta
        f_new = f_old = None
        if f is not None and not f.zero:
            f_new, f_old = f.at(k + 1), f.at(k)
        rhs = self.evo.rhs(y, k, self.m.at(k), f_new, f_old, th, self.grid.dt)
        out = self._solve(k, rhs)
        if not np.all(np.isfinite(out)):
            raise NumericalBlowupError(f"non-finite values after step {k}", step=k)
        return out

    def run(self, v, f=None, k0: int = 0, k1: int = None, store: bool = True):
        """States from ``t_{k0}`` to ``t_{k1}``; returns the stack or the last state."""
        k1 = self.grid.K if k1 is None else k1
        y = np.array(v, dtype=float)
        y[self.evo.dirichlet] = 0.0
        fl = None if f is None else _as_lattice(f, self.evo.mesh, self.grid)
        if store:
            out = np.empty((k1 - k0 + 1,) + y.shape)
            out[0] = y
        for i, k in enumerate(range(k0, k1)):
            y = self.step(y, k, fl)
            if store:
                out[i + 1] = y
        return out if store else y

    def apply(self, v: np.ndarray) -> np.ndarray:
        """One full period ``v -> U(T, 0) v``; ``v`` may hold several columns."""
        return self.run(v, store=False)

    def trajectory(self, v: np.ndarray, f=None) -> Trajectory:
        vals = self.run(v, f)
        return Trajectory(vals, self.grid.times.copy(), self.evo.mesh)


def step(mesh: Mesh, coeffs, y, t: float, dt: float, m=0.0, f=0.0, theta: float = 1.0) -> np.ndarray:
    """One theta-scheme step from ``t`` to ``t + dt``.

    ``m`` and ``f`` are scalars, node vectors or callables ``g(x, y, t)``.

    Examples
    --------
    >>> from periodic_logistic.mesh import build_interval_mesh
    >>> from periodic_logistic.coeffs import laplacian_coefficients
    >>> mesh = build_interval_mesh(0.0, 1.0, 5, "robin", "robin")
    >>> y1 = step(mesh, laplacian_coefficients(), np.zeros(5), 0.0, 0.1, f=1.0)
    >>> bool(np.allclose(y1, 0.1))
    True
    """
    if dt <= 0:
        raise RejectedInputError("dt must be positive")

    def nodal(val, tt):
        if callable(val):
            from .coeffs import evaluate

            return evaluate(val, mesh.x, mesh.y, tt)
        return np.broadcast_to(np.asarray(val, dtype=float), (mesh.n,)).copy()

    w = mesh.mass_weights
    free = mesh.free.astype(float)
    y = np.array(y, dtype=float)
    A1 = assemble(mesh, coeffs, t + dt)
    m1, m0 = nodal(m, t + dt) * free, nodal(m, t) * free
    f1, f0 = nodal(f, t + dt), nodal(f, t)
    lhs = (sp.diags(w * (1.0 + theta * dt * m1)) + theta * dt * A1).tocsc()
    rhs = w * y + dt * w * (theta * f1 + (1 - theta) * f0)
    if theta < 1.0:
        A0 = assemble(mesh, coeffs, t)
        rhs -= (1 - theta) * dt * (A0 @ y + w * m0 * y)
    rhs[mesh.dirichlet_mask] = 0.0
    out = spla.spsolve(lhs, rhs)
    if not np.all(np.isfinite(out)):
        raise NumericalBlowupError("non-finite values after step", step=0)
    return out


def propagate(evo: Evolution, v, k0: int = 0, k1: int = None, m=None, f=None) -> Trajectory:
    """Discrete trajectory from ``t_{k0}`` to ``t_{k1}`` (indices may exceed K).

    With ``f`` absent this is the discrete evolution system applied to ``v``.
    """
    k1 = evo.grid.K if k1 is None else k1
    if k1 <= k0:
        raise RejectedInputError("need k0 < k1")
    pm = PeriodMap(evo, m)
    vals = pm.run(v, f, k0, k1)
    times = np.arange(k0, k1 + 1) * evo.grid.dt
    return Trajectory(vals, times, evo.mesh)


def solve_periodic_linear(
    evo: Evolution,
    m=None,
    f=None,
    tol: float = 1e-10,
    require_positive: bool = False,
    check_spectrum: bool = False,
    maxiter: int = 200,
) -> Trajectory:
    """Periodic solution of ``y' + A y + m y = f`` with ``y(0) = y(T)``.

    Solves ``(I - U_m(T, 0)) u0 = w(T)`` with ``w`` the trajectory from zero
    initial data, by restarted GMRES on the matrix-free operator; falls back
    to Picard iteration with Aitken extrapolation when GMRES stalls.

    Parameters
    ----------
    tol : float
        Relative endpoint tolerance, ``|u(T) - u(0)|_H <= tol |u(0)|_H``.
    require_positive : bool
        Raise NoPositiveSolutionError when the period map has spectral radius
        at least one and ``f >= 0`` (only checked with ``check_spectrum``).
    """
    pm = PeriodMap(evo, m)
    fl = _as_lattice(f, evo.mesh, evo.grid)
    n = evo.n
    if check_spectrum:
        from .eigen import principal_pair

        pair = principal_pair(evo, m)
        if pair.lam >= 1.0 and require_positive and fl.min() >= 0 and not fl.zero:
            raise NoPositiveSolutionError(
                f"spectral radius {pair.lam:.6g} >= 1: no positive periodic solution for a nonnegative source"
            )
    wT = pm.run(np.zeros(n), fl, store=False)
    scale = max(np.linalg.norm(wT), 1e-300)
    u0 = None
    if np.linalg.norm(wT) == 0.0:
        u0 = np.zeros(n)
    else:
        op = spla.LinearOperator((n, n), matvec=lambda v: v - pm.apply(v), dtype=float)
        x, info = spla.gmres(op, wT, rtol=1e-13, atol=1e-15 * scale, restart=min(n, 50), maxiter=maxiter)
        res = np.linalg.norm(x - pm.apply(x) - wT)
        if info == 0 or res <= 1e-11 * max(np.linalg.norm(x), scale):
            u0 = x
        else:
            logger.info("GMRES stalled (info=%s, residual %.3e); trying Picard-Aitken", info, res)
            u0 = _picard_aitken(pm, wT, tol)
    traj = pm.trajectory(u0, fl)
    # one step of iterative refinement if the endpoint mismatch is too large
    mismatch = evo.mesh.h_norm(traj.final - traj.initial)
    if mismatch > tol * max(evo.mesh.h_norm(traj.initial), 1e-300):
        r = wT - (u0 - pm.apply(u0))
        op = spla.LinearOperator((n, n), matvec=lambda v: v - pm.apply(v), dtype=float)
        dx, _ = spla.gmres(op, r, rtol=1e-13, atol=0.0, restart=min(n, 50), maxiter=maxiter)
        u0 = u0 + dx
        traj = pm.trajectory(u0, fl)
    return traj


def _picard_aitken(pm: PeriodMap, wT: np.ndarray, tol: float, maxiter: int = 5000) -> np.ndarray:
    x = wT.copy()
    for _ in range(maxiter):
        x1 = pm.apply(x) + wT
        x2 = pm.apply(x1) + wT
        d1 = x1 - x
        d2 = x2 - 2 * x1 + x
        denom = float(d2 @ d2)
        if denom > 0:
            x_new = x2 - float((x2 - x1) @ d2) / denom * (x2 - x1)
        else:
            x_new = x2
        if np.linalg.norm(x_new - x2) <= tol * max(np.linalg.norm(x2), 1e-300) and np.linalg.norm(
            x2 - x1
        ) <= tol * max(np.linalg.norm(x2), 1e-300):
            return x_new
        if np.linalg.norm(d1) <= tol * max(np.linalg.norm(x1), 1e-300):
            return x1
        x = x_new
    raise SolverError("periodic linear solve did not converge (spectral radius close to or above one?)")


@dataclass
class AprioriReport:
    lhs: float
    rhs: float
    ratio: float
    holds: bool
    omega: float
    alpha: float


def _dual_norms(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Discrete V' norms of nodal functions, via the H1 Gram matrix."""
    from .coeffs import laplacian_coefficients

    free = mesh.free
    w = mesh.mass_weights
    lap = assemble(mesh, laplacian_coefficients(mesh.dim), 0.0)[free][:, free]
    G = (lap + sp.diags(w[free])).tocsc()
    lu = spla.splu(G)
    loads = (w[free][None, :] * values[:, free]).T
    z = lu.solve(np.ascontiguousarray(loads))
    return np.sqrt(np.maximum(np.sum(loads * z, axis=0), 0.0))


def apriori_diagnostic(
    traj: Trajectory,
    f=None,
    omega: float = 0.5,
    alpha: float = 1.0,
    grid: TimeGrid = None,
    tol_quad: float = 1e-2,
) -> AprioriReport:
    """Compare both sides of the energy estimate along a trajectory.

    Left side: ``alpha * int |e^{-omega (tau - s)} u|_V^2 + |e^{-omega (t - s)} u(t)|_H^2``.
    Right side: ``|u(s)|_H^2 + (1/alpha) int |e^{-omega (tau - s)} f|_{V'}^2``.
    Time integrals use the right-endpoint rule, matching implicit Euler.
    The zero-order term does not enter either side.
    """
    mesh = traj.mesh
    times = traj.times
    s = times[0]
    decay = np.exp(-omega * (times - s))
    dts = np.diff(times)
    vn = traj.v_norms
    hn = traj.h_norms
    lhs = alpha * float(np.sum(dts * (decay[1:] * vn[1:]) ** 2)) + float((decay[-1] * hn[-1]) ** 2)
    rhs = float(hn[0] ** 2)
    if f is not None:
        if grid is None:
            grid = TimeGrid(times[-1] - s, len(times) - 1)
        fl = _as_lattice(f, mesh, grid)
        if not fl.zero:
            fvals = np.array([fl.at(k) for k in range(len(times))])
            dn = _dual_norms(mesh, fvals)
            rhs += float(np.sum(dts * (decay[1:] * dn[1:]) ** 2)) / alpha
    if rhs == 0.0:
        ratio = 0.0 if lhs == 0.0 else np.inf
    else:
        ratio = lhs / rhs
    return AprioriReport(lhs, rhs, ratio, lhs <= rhs * (1 + tol_quad), omega, alpha)


def period_map_bound(pm: PeriodMap, samples: int = 8, seed: int = 0) -> float:
    """Empirical sup-norm bound of ``U(t, 0)`` over the grid times.

    Estimated from random nonnegative vectors and the constant vector; since
    the evolution is positive the constant vector attains the sup norm of
    the operator in the maximum norm.
    """
    rng = np.random.default_rng(seed)
    V = np.column_stack([np.ones(pm.evo.n)] + [rng.random(pm.evo.n) for _ in range(samples - 1)])
    traj = pm.run(V)
    norms = np.max(np.abs(traj), axis=1) / np.max(np.abs(V), axis=0)[None, :]
    return float(norms.max())
