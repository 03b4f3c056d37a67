"""Principal periodic eigenvalue by power iteration on the period map.

The eigenvalue of the period map ``lam = spr U(T, 0)`` and the principal
eigenvalue are linked by ``mu1 = -log(lam) / T``.  Before stepping, the
zero-order term is shifted by a constant ``sigma`` (its lattice minimum,
lowered further when the form needs an H-coercivity shift); the constant is
added back to ``mu1`` afterwards.  This makes ``mu1(m + c) = mu1(m) + c`` an
exact discrete identity.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .coeffs import Weight
from .errors import DivisionGuardError, EigenIterationError, InsufficientLadderError, InvalidRequestError
from .evolution import Evolution, Lattice, PeriodMap, Trajectory

__all__ = [
    "EigenPair",
    "GammaSweep",
    "principal_pair",
    "h_coercivity_shift",
    "mu_star_sweep",
    "limit_eigenfunction",
    "LimitReport",
    "comparison_constant",
    "default_ladder",
    "sweep_rows",
]

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class EigenPair:
    mu1: float
    lam: float
    phi: Trajectory
    iterations: int
    residual: float
    shift: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return self.phi.initial


def h_coercivity_shift(evo: Evolution, samples: int = 8) -> float:
    """Smallest ``omega >= 0`` with ``A_h(t) + omega M`` positive semidefinite.

    Zero without computation for symmetric forms with nonnegative ``c0``;
    otherwise sampled over ``samples`` grid times with dense eigenproblems.
    """
    cached = getattr(evo, "_omega_h", None)
    if cached is not None:
        return cached
    omega = 0.0
    if not evo.coeffs.is_symmetric_nonnegative:
        free = evo.mesh.free
        wf = np.sqrt(evo.w[free])
        ks = np.unique(np.linspace(0, evo.grid.K - 1, samples).astype(int))
        for k in ks:
            A = evo.A(k)[free][:, free].toarray()
            S = 0.5 * (A + A.T) / np.outer(wf, wf)
            omega = max(omega, -float(np.linalg.eigvalsh(S)[0]))
    evo._omega_h = max(0.0, omega)
    return evo._omega_h


def _h_inner(w, a, b):
    return float(np.sum(w * a * b))


def _apply_scaled(pm: PeriodMap, v, w, K, every: int = 16):
    """One period with periodic renormalization; returns ``(y, log_scale)`` with ``P v = e^log_scale y``."""
    y = v
    logs = 0.0
    for k in range(K):
        y = pm.step(y, k)
        if (k + 1) % every == 0 or k == K - 1:
            s = np.sqrt(_h_inner(w, y, y))
            if s == 0 or not np.isfinite(s):
                return y, logs
            y = y / s
            logs += np.log(s)
    return y, logs


def principal_pair(
    evo: Evolution,
    m=None,
    v0: np.ndarray = None,
    tol_rayleigh: float = 1e-12,
    tol_residual: float = 1e-10,
    max_iter: int = 10000,
    seed: int = 0,
    with_trajectory: bool = True,
    shift: float = None,
) -> EigenPair:
    """Principal eigenpair for the zero-order perturbation ``m``.

    Power iteration with H-norm normalization; the period map is applied
    with intermediate rescaling so that strongly damped maps do not
    underflow.  Convergence requires the relative change of the Rayleigh
    quotient below ``tol_rayleigh`` and the relative residual
    ``|P v - lam v|_H / lam`` below ``tol_residual``.

    Raises
    ------
    EigenIterationError
        If ``max_iter`` iterations do not converge.
    """
    mesh = evo.mesh
    w = evo.w
    lat = m if isinstance(m, Lattice) else Lattice(m, mesh, evo.grid)
    if shift is None:
        # values at pinned Dirichlet nodes never enter the dynamics
        sigma = lat.min(mesh.free) - h_coercivity_shift(evo)
    else:
        sigma = float(shift)
    shifted = lat.data - sigma
    pm = PeriodMap(evo, shifted if lat.const else np.vstack([shifted, shifted[:1]]))
    free = mesh.free
    if v0 is None:
        rng = np.random.default_rng(seed)
        v = np.where(free, 1.0 + 0.1 * rng.random(mesh.n), 0.0)
    else:
        v = np.where(free, np.asarray(v0, dtype=float), 0.0)
    v /= np.sqrt(_h_inner(w, v, v))
    K = evo.grid.K
    T = evo.grid.T
    loglam_prev = None
    res = np.inf
    for it in range(1, max_iter + 1):
        y, logs = _apply_scaled(pm, v, w, K)
        rho = _h_inner(w, y, v)
        if rho <= 0:
            rho = np.sqrt(_h_inner(w, y, y))
        res = np.sqrt(_h_inner(w, y - rho * v, y - rho * v)) / rho
        ny = np.sqrt(_h_inner(w, y, y))
        if ny == 0 or not np.isfinite(ny):
            raise EigenIterationError("period map annihilated the iterate", residual=res)
        loglam = logs + np.log(rho)
        done = loglam_prev is not None and abs(loglam - loglam_prev) <= tol_rayleigh and res <= tol_residual
        v = y / ny
        loglam_prev = loglam
        if done:
            break
    else:
        raise EigenIterationError(
            f"power iteration did not converge in {max_iter} iterations (residual {res:.3e})", residual=res
        )
    # final Rayleigh quotient on the normalized vector
    y, logs = _apply_scaled(pm, v, w, K)
    rho = _h_inner(w, y, v)
    res = np.sqrt(_h_inner(w, y - rho * v, y - rho * v)) / rho
    if np.sum(v) < 0:
        v = -v
    mu_s = -(logs + np.log(rho)) / T
    mu1 = float(mu_s + sigma)
    lam_out = float(np.exp(-mu1 * T))
    if with_trajectory:
        vals = np.empty((K + 1, mesh.n))
        vals[0] = v
        y = v.copy()
        logs = 0.0
        for k in range(K):
            y = pm.step(y, k)
            s = np.sqrt(_h_inner(w, y, y))
            y = y / s
            logs += np.log(s)
            vals[k + 1] = np.exp(mu_s * evo.grid.times[k + 1] + logs) * y
        phi = Trajectory(vals, evo.grid.times.copy(), mesh)
    else:
        phi = Trajectory(v[None, :].copy(), evo.grid.times[:1].copy(), mesh)
    return EigenPair(mu1, lam_out, phi, it, float(res), float(sigma))


def default_ladder(kmax: int = 14) -> np.ndarray:
    return 2.0 ** np.arange(kmax + 1)


@dataclass(eq=False)
class GammaSweep:
    gammas: np.ndarray
    mu_values: np.ndarray
    lambdas: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    mu_star_estimate: float
    saturation_ratio: float
    slope: float
    saturated: bool
    infinite: bool
    weight: Weight = None
    pairs: list = field(default_factory=list)

    @property
    def flagged_infinite(self) -> bool:
        return self.infinite


def _fit_slope(g, mu):
    A = np.vstack([g, np.ones_like(g)]).T
    coef, *_ = np.linalg.lstsq(A, mu, rcond=None)
    return float(coef[0])


def mu_star_sweep(
    evo: Evolution,
    w: Weight,
    ladder=None,
    base_m=None,
    threads: int = 1,
    keep_pairs: bool = True,
    **eig_kwargs,
) -> GammaSweep:
    """Principal eigenvalues ``mu1(base_m + gamma b)`` along a gamma ladder.

    The estimate of the limit is the last rung when the increments decay
    geometrically (saturation ratio in [0, 1)) and the last increment is
    below ``1e-3 (1 + |mu|)``.  A least-squares slope over the top half of
    the ladder above half the minimum of ``b`` on its support flags the
    limit as infinite (a heuristic).
    """
    gammas = default_ladder() if ladder is None else np.asarray(ladder, dtype=float)
    if gammas.size < 3:
        raise InsufficientLadderError("the gamma ladder needs at least three rungs")
    if np.any(np.diff(gammas) <= 0):
        raise InsufficientLadderError("the gamma ladder must be strictly increasing")
    base = Lattice(base_m, evo.mesh, evo.grid).full()
    if w.values.shape != base.shape:
        raise InvalidRequestError("weight lattice does not match the time grid")

    def rung(g):
        return principal_pair(evo, base + g * w.values, with_trajectory=keep_pairs, **eig_kwargs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            pairs = list(ex.map(rung, gammas))
    else:
        pairs = [rung(g) for g in gammas]
    mu = np.array([p.mu1 for p in pairs])
    d1 = mu[-1] - mu[-2]
    d0 = mu[-2] - mu[-3]
    tol_sat = 1e-3 * (1 + abs(mu[-1]))
    if abs(d0) <= 1e-13 * (1 + abs(mu[-1])):
        ratio = 0.0 if abs(d1) <= 1e-13 * (1 + abs(mu[-1])) else np.inf
    else:
        ratio = d1 / d0
    half = gammas.size // 2
    top = slice(gammas.size - max(half, 2), None)
    slope = _fit_slope(gammas[top], mu[top])
    bmin = w.min_on_support()
    infinite = bool(bmin > 0 and slope > 0.5 * bmin)
    saturated = bool(0.0 <= ratio < 1.0 and abs(d1) < tol_sat) and not infinite
    estimate = np.inf if infinite else float(mu[-1])
    return GammaSweep(
        gammas=gammas,
        mu_values=mu,
        lambdas=np.array([p.lam for p in pairs]),
        iterations=np.array([p.iterations for p in pairs]),
        residuals=np.array([p.residual for p in pairs]),
        mu_star_estimate=estimate,
        saturation_ratio=float(ratio),
        slope=slope,
        saturated=saturated,
        infinite=infinite,
        weight=w,
        pairs=pairs if keep_pairs else [],
    )


@dataclass(eq=False)
class LimitReport:
    phi: Trajectory
    degeneracy: np.ndarray
    sup_ratio: float
    cauchy: np.ndarray


def degeneracy_functional(w: Weight, phi: Trajectory) -> float:
    """``int_0^T <b phi, phi> dt`` with the right-endpoint rule."""
    mesh = phi.mesh
    dt = np.diff(phi.times)
    vals = phi.values[1:]
    return float(np.sum(dt * np.sum(mesh.mass_weights * w.values[1:] * vals**2, axis=1)))


def limit_eigenfunction(sweep: GammaSweep) -> LimitReport:
    """Eigenfunction at the largest rung with ladder diagnostics.

    Reports the degeneracy functional per rung, the largest ratio
    ``|phi|_inf / |phi(0)|_2`` along the ladder and the successive sup-norm
    differences of the eigenfunctions (ladder Cauchy check).
    """
    if sweep.infinite:
        raise InvalidRequestError("the sweep is flagged infinite; no limit eigenfunction")
    if not sweep.pairs or sweep.pairs[0].phi.K == 0:
        raise InvalidRequestError("the sweep did not keep eigenfunctions")
    degen = np.array([degeneracy_functional(sweep.weight, p.phi) for p in sweep.pairs])
    ratios = [p.phi.sup() / p.phi.mesh.h_norm(p.phi.initial) for p in sweep.pairs]
    cauchy = np.array(
        [np.max(np.abs(b.phi.values - a.phi.values)) for a, b in zip(sweep.pairs[:-1], sweep.pairs[1:])]
    )
    return LimitReport(sweep.pairs[-1].phi, degen, float(max(ratios)), cauchy)


def comparison_constant(phi0: Trajectory, phi1: Trajectory) -> float:
    """Smallest ``c`` with ``phi0 <= c phi1`` on the non-Dirichlet lattice."""
    mesh = phi1.mesh
    free = mesh.free
    a = phi0.values[:, free]
    b = phi1.values[:, free]
    if np.any(b <= 0):
        k, i = np.argwhere(b <= 0)[0]
        raise DivisionGuardError(f"phi1 vanishes at a non-Dirichlet lattice point (time index {k})")
    return float(np.max(a / b))


def sweep_rows(sweep: GammaSweep):
    for g, mu, lam, it, res in zip(sweep.gammas, sweep.mu_values, sweep.lambdas, sweep.iterations, sweep.residuals):
        yield float(g), float(mu), float(lam), int(it), float(res)
