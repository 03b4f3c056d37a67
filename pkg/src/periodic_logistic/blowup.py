"""Where solutions blow up as mu approaches mu*, and where they stay bounded.

* torsion functions ``w' + A w + gamma b w + omega w = 1`` (periodic);
* per-lattice-point growth classification from a bifurcation curve;
* local bounds on space-time boxes inside the region where ``b > 0``: the sum
  of an elliptic boundary blow-up solution and a Bernoulli solution that is
  infinite at the start of the time window dominates every ``u_mu``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeffs import classify_sets
from .eigen import principal_pair
from .errors import CertificateFailure, DomainError, RejectedInputError, SolverError
from .evolution import Trajectory, solve_periodic_linear

__all__ = [
    "SubCylinder",
    "BlowupCertificate",
    "LocusReport",
    "SobolevReport",
    "torsion_solve",
    "blowup_locus",
    "bernoulli_z",
    "elliptic_blowup_w",
    "propose_cylinders",
    "certify_local_bound",
    "certify_all",
    "sobolev_diagnostic",
    "q_infinity_mask",
    "limit_equation_residual",
    "diffusion_bounds",
    "certificate_rows",
    "locus_rows",
]

logger = logging.getLogger(__name__)


def torsion_solve(evo, weight, gamma: float, omega: float = 0.0, auto_raise: bool = True):
    """Periodic solution of ``w' + A w + (gamma b + omega) w = 1``.

    ``omega`` is raised when needed so that ``mu1(gamma b + omega) >= 0.5``.

    Returns
    -------
    (Trajectory, omega)
    """
    m = gamma * weight.values
    mu = principal_pair(evo, m + omega, with_trajectory=False).mu1
    if mu <= 0:
        if not auto_raise:
            raise RejectedInputError(f"mu1(gamma b + omega) = {mu:.6g} is not positive")
        omega = omega - mu + 0.5
    return solve_periodic_linear(evo, m + omega, np.ones(evo.n)), omega


@dataclass(eq=False)
class LocusReport:
    grows: np.ndarray  # (K, n) bool
    slopes: np.ndarray  # (K, n)
    phi_fraction: float
    mu_star: float
    mus: np.ndarray

    def fraction_growing(self, mask: np.ndarray) -> float:
        sel = self.grows[mask]
        return float(sel.mean()) if sel.size else float("nan")


def blowup_locus(curve, mu_star: float, phi_inf: Trajectory = None, top: int = 3, threshold: float = -0.5, eps_phi: float = None):
    """Classify lattice points by the growth of ``u_mu`` over the top rungs.

    The slope of ``log u`` against ``log(mu* - mu)`` is fitted by least
    squares over the last ``top`` rungs; a point "grows" when the slope is
    below ``threshold``.  For an infinite ``mu*`` the slope against ``log mu``
    is reported and every point is bounded.  ``phi_fraction`` is the share of
    growing points where ``phi_inf > eps_phi`` (default ``1e-3 max phi_inf``).
    """
    sols = curve.solutions[-top:]
    if len(sols) < top:
        raise RejectedInputError(f"need at least {top} converged rungs")
    mus = np.array([s.mu for s in sols])
    K = sols[0].u.K
    U = np.stack([s.u.values[:K] for s in sols])  # (top, K, n)
    tiny = np.finfo(float).tiny
    logu = np.log(np.maximum(U, tiny))
    finite = np.isfinite(mu_star)
    xs = np.log(mu_star - mus) if finite else np.log(mus)
    xc = xs - xs.mean()
    slopes = np.tensordot(xc, logu - logu.mean(axis=0), axes=(0, 0)) / np.sum(xc**2)
    positive = np.all(U > 0, axis=0)
    slopes = np.where(positive, slopes, 0.0)
    grows = (slopes < threshold) if finite else np.zeros_like(positive)
    grows &= positive
    frac = float("nan")
    if phi_inf is not None and grows.any():
        ph = phi_inf.values[:K]
        eps_phi = 1e-3 * float(np.max(ph)) if eps_phi is None else eps_phi
        frac = float(np.mean(ph[grows] > eps_phi))
    return LocusReport(grows, slopes, frac, float(mu_star), mus)


def bernoulli_z(s: float, mu_star: float, cB: float, p: float, t):
    """Solution of ``z' = mu* z - cB z^p`` with ``z -> inf`` as ``t -> s+``.

    Examples
    --------
    >>> round(float(bernoulli_z(0.0, 1.0, 1.0, 2.0, np.log(2.0))), 12)
    2.0
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= s):
        raise DomainError("bernoulli_z needs t > s")
    if cB <= 0 or p <= 1:
        raise RejectedInputError("need cB > 0 and p > 1")
    q = p - 1.0
    tau = t - s
    if mu_star == 0:
        return (q * cB * tau) ** (-1.0 / q)
    return ((cB / mu_star) * (-np.expm1(-q * mu_star * tau))) ** (-1.0 / q)


@dataclass(frozen=True)
class SubCylinder:
    """Node index box (inclusive ranges per dimension) over steps ``s..t``.

    ``t`` may exceed ``K``; time indices are taken modulo ``K``.
    """

    box: tuple
    s: int
    t: int
    margin: int = 2

    def nodes(self, mesh) -> np.ndarray:
        return _box_nodes(mesh, self.box)

    def steps(self, K: int) -> np.ndarray:
        return np.arange(self.s, self.t + 1) % K


def _box_nodes(mesh, box):
    if mesh.dim == 1:
        (i0, i1), = box
        return np.arange(i0, i1 + 1)
    (i0, i1), (j0, j1) = box
    nx = mesh.shape[0]
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
    return (jj * nx + ii).ravel()


def _box_shape(box):
    return tuple(hi - lo + 1 for lo, hi in box)


def _expand(box, margin, mesh):
    shape = mesh.shape if mesh.dim == 2 else (mesh.n,)
    out = []
    for (lo, hi), n in zip(box, shape):
        if lo - margin < 0 or hi + margin > n - 1:
            return None
        out.append((lo - margin, hi + margin))
    return tuple(out)


def _box_inside(mask_nodes, box, margin, mesh):
    big = _expand(box, margin, mesh)
    return big is not None and bool(np.all(mask_nodes[_box_nodes(mesh, big)]))


def propose_cylinders(weight, mesh, margin: int = 2, windows: int = 4, min_interior: int = 3):
    """Greedy maximal boxes inside the ``b > 0`` set, with ``margin`` cells of clearance.

    Time windows of half a period start at ``windows`` equally spaced steps
    (they overlap and wrap around the period).
    """
    _, qb = classify_sets(weight, mesh)
    K = weight.K
    L = K // 2
    starts = [int(round(i * K / windows)) for i in range(windows)]
    shape = mesh.shape if mesh.dim == 2 else (mesh.n,)
    gidx = mesh.grid_indices()
    cyls = []
    for s in starts:
        ks = np.arange(s, s + L + 1) % K
        ok = np.all(qb.mask[ks], axis=0)
        covered = np.zeros(mesh.n, dtype=bool)
        for seed in np.nonzero(ok)[0]:
            if covered[seed]:
                continue
            idx = tuple(int(i) for i in gidx[seed])
            box = [(i, i) for i in idx]
            if not _box_inside(ok, tuple(box), margin, mesh):
                continue
            grew = True
            while grew:
                grew = False
                for d in range(len(box)):
                    for side in (0, 1):
                        trial = list(box)
                        lo, hi = trial[d]
                        trial[d] = (lo - 1, hi) if side == 0 else (lo, hi + 1)
                        if trial[d][0] < 0 or trial[d][1] > shape[d] - 1:
                            continue
                        if _box_inside(ok, tuple(trial), margin, mesh):
                            box = trial
                            grew = True
            box = tuple(box)
            if min(_box_shape(box)) - 2 < min_interior:
                continue
            covered[_box_nodes(mesh, box)] = True
            cyls.append(SubCylinder(box, s, s + L, margin))
    return cyls


def elliptic_blowup_w(
    mesh,
    box,
    mu_star: float,
    alpha0: float,
    alpha1: float,
    cB: float,
    p: float,
    ladder=None,
    rtol: float = 1e-6,
    max_newton: int = 100,
):
    """Large solution of ``-Lap w = (mu*/alpha0) w - (cB/alpha1) w^p`` on a node box.

    The infinite boundary value is replaced by a Dirichlet ladder
    ``V_big = 10^2 ... 10^6`` times the equilibrium; Newton with step halving
    is warm-started along the ladder.

    Returns
    -------
    (w, insensitive, last_change)
        ``w`` on the box nodes (row-major in the box), whether interior values
        changed by less than ``rtol`` between the last two rungs, and that change.
    """
    shape = _box_shape(box)
    if min(shape) - 2 < 3:
        raise RejectedInputError("the box needs at least three interior nodes per dimension")
    if p <= 1 or cB <= 0:
        raise RejectedInputError("need p > 1 and cB > 0")
    a = mu_star / alpha0
    c = cB / alpha1
    eq = (max(mu_star, 0.0) * alpha1 / (alpha0 * cB)) ** (1.0 / (p - 1.0))
    base = max(eq, 1.0)
    ladder = base * 10.0 ** np.arange(2, 7) if ladder is None else np.asarray(ladder, dtype=float)
    spacing = mesh.spacing
    # box grid ordering: first index fastest, as in the mesh
    dims = list(shape)
    n = int(np.prod(dims))
    interior = np.ones(dims[::-1], dtype=bool)
    if len(dims) == 1:
        interior[[0, -1]] = False
    else:
        interior[[0, -1], :] = False
        interior[:, [0, -1]] = False
    interior = interior.ravel()
    lap = _box_laplacian(dims, spacing)
    Li = lap[interior][:, interior].tocsc()
    Lb = lap[interior][:, ~interior].tocsc()
    w = np.full(n, eq if eq > 0 else 1.0)
    prev = None
    change = np.inf
    for V in ladder:
        w[~interior] = V
        wb = w[~interior]
        x = w[interior].copy()

        def resid(x):
            return -(Li @ x + Lb @ wb) - a * x + c * np.power(np.maximum(x, 0.0), p)

        r = resid(x)
        floor = 1e-13 * (np.linalg.norm(Lb @ wb) + 1.0)
        for _ in range(max_newton):
            if np.linalg.norm(r) <= floor:
                break
            J = -Li + sp.diags(-a + c * p * np.power(np.maximum(x, 0.0), p - 1.0))
            dx = spla.spsolve(J.tocsc(), -r)
            lam = 1.0
            nr = np.linalg.norm(r)
            while lam > 1e-8:
                xt = x + lam * dx
                if np.all(xt > 0):
                    rt = resid(xt)
                    if np.linalg.norm(rt) < (1 - 1e-4 * lam) * nr or np.linalg.norm(rt) <= floor:
                        break
                lam *= 0.5
            else:
                if nr <= 1e3 * floor:
                    break
                raise SolverError(f"Newton for the boundary blow-up problem stalled at V_big={V:.3g}")
            x, r = xt, rt
            if np.max(np.abs(lam * dx)) <= 1e-12 * max(1.0, np.max(np.abs(x))):
                break
        else:
            raise SolverError(f"Newton for the boundary blow-up problem did not converge at V_big={V:.3g}")
        w[interior] = x
        if prev is not None:
            change = float(np.max(np.abs(x - prev) / np.abs(x)))
            if change < rtol:
                return w, True, change
        prev = x.copy()
    return w, False, change


def _box_laplacian(dims, spacing):
    def lap1(m, h):
        e = np.ones(m)
        return sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1]) / h**2

    if len(dims) == 1:
        return lap1(dims[0], spacing[0]).tocsr()
    nx, ny = dims
    return (sp.kron(sp.identity(ny), lap1(nx, spacing[0])) + sp.kron(lap1(ny, spacing[1]), sp.identity(nx))).tocsr()


def diffusion_bounds(coeffs, mesh, times):
    """``(alpha0, alpha1)`` for coefficients of the form ``-alpha(t) Lap``.

    Raises RejectedInputError for drift, convection, cross diffusion,
    anisotropy or spatial dependence of ``alpha``.
    """
    if coeffs.alpha_bounds is not None:
        return tuple(coeffs.alpha_bounds)
    if coeffs.has_drift or coeffs.has_convection or coeffs.has_cross_diffusion:
        raise RejectedInputError("local bounds need a pure diffusion operator -alpha(t) Lap")
    vals = []
    for t in times:
        a11 = np.atleast_1d(coeffs.diffusion(0, 0, mesh.x, mesh.y, t))
        if np.ptp(a11) > 1e-12 * max(1.0, np.max(np.abs(a11))):
            raise RejectedInputError("alpha must not depend on x")
        if mesh.dim == 2:
            a22 = np.atleast_1d(coeffs.diffusion(1, 1, mesh.x, mesh.y, t))
            if np.max(np.abs(a22 - a11)) > 1e-12 * max(1.0, np.max(np.abs(a11))):
                raise RejectedInputError("diffusion must be isotropic")
        vals.append(float(a11[0]))
    return min(vals), max(vals)


@dataclass(eq=False)
class BlowupCertificate:
    cylinder: SubCylinder
    B: float
    z_profile: np.ndarray
    w_profile: np.ndarray
    bound: np.ndarray
    verified_mu: list
    verified: bool
    max_u: float
    max_v: float
    failure: str = None
    w_insensitive: bool = None


def certify_local_bound(
    cyl: SubCylinder,
    curve,
    problem,
    mu_bound: float = None,
    growth: tuple = None,
    raise_on_failure: bool = False,
) -> BlowupCertificate:
    """Check ``u_mu <= w + z`` on a sub-cylinder for every rung of ``curve``.

    ``mu_bound`` defaults to the mu* estimate, or to the largest rung when the
    estimate is infinite (each ``u_mu`` is a sub-solution for any
    ``mu_bound >= mu``).  The lattice slice at the window start, where ``z``
    is infinite, is skipped.
    """
    mesh = problem.mesh
    grid = problem.grid
    K = grid.K
    growth = problem.nl.growth if growth is None else growth
    if growth is None:
        raise RejectedInputError("local bounds need a growth certificate (c, p)")
    c, p = growth
    if mu_bound is None:
        mu_bound = problem.mu_star
        if not np.isfinite(mu_bound):
            mu_bound = float(max(s.mu for s in curve.solutions))
    alpha0, alpha1 = diffusion_bounds(problem.evo.coeffs, mesh, grid.times[:K])
    nodes = cyl.nodes(mesh)
    ks = cyl.steps(K)
    bvals = problem.weight.values[np.ix_(ks, nodes)]
    B = float(bvals.min())
    empty = np.zeros(0)
    if B <= 0:
        msg = "b vanishes on the cylinder (it is not inside the region where b > 0)"
        if raise_on_failure:
            raise CertificateFailure(msg)
        return BlowupCertificate(cyl, B, empty, empty, empty, [], False, np.nan, np.nan, msg)
    w, insensitive, _ = elliptic_blowup_w(mesh, cyl.box, mu_bound, alpha0, alpha1, c * B, p)
    tk = (np.arange(cyl.s + 1, cyl.t + 1) - cyl.s) * grid.dt
    z = bernoulli_z(0.0, mu_bound, c * B, p, tk)
    v = w[None, :] + z[:, None]
    verified, max_u, failure = [], 0.0, None
    for sol in curve.solutions:
        u = sol.u.values[np.ix_(ks[1:], nodes)]
        max_u = max(max_u, float(u.max()))
        viol = u - v
        if np.max(viol) > 0:
            k, i = np.unravel_index(np.argmax(viol), viol.shape)
            failure = (
                f"u > w + z at node {int(nodes[i])}, time index {int(ks[1 + k])}, mu={sol.mu:.10g} "
                f"(u={u[k, i]:.6g}, v={v[k, i]:.6g})"
            )
            if raise_on_failure:
                raise CertificateFailure(failure)
            break
        verified.append(float(sol.mu))
    ok = failure is None
    return BlowupCertificate(cyl, B, z, w, v, verified, ok, max_u, float(v.max()), failure, insensitive)


def certify_all(cylinders, curve, problem, threads: int = 1, **kwargs):
    def one(cyl):
        return certify_local_bound(cyl, curve, problem, **kwargs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, cylinders))
    return [one(cyl) for cyl in cylinders]


def q_infinity_mask(certs, weight, mesh) -> np.ndarray:
    """Lattice points with a local bound: the ``b > 0`` set plus certified cylinders."""
    _, qb = classify_sets(weight, mesh)
    mask = qb.mask.copy()
    K = weight.K
    for cert in certs:
        if cert.verified:
            cyl = cert.cylinder
            mask[np.ix_(cyl.steps(K)[1:], cyl.nodes(mesh))] = True
    return mask


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


@dataclass
class SobolevReport:
    lhs: float
    rhs: float
    C: float
    ratio: float
    holds: bool
    grad_norm: float
    cutoff_grad: float
    cutoff_dt: float


def sobolev_diagnostic(q1: SubCylinder, q2: SubCylinder, u: Trajectory, mu_star: float, alpha0: float, alpha1: float, tol_quad: float = 1e-2):
    """Compare the local H1 norm of ``u`` on ``q1`` with its L2 norm on ``q2``.

    The cut-off is a tensor product of cubic smoothsteps equal to one on
    ``q1`` and vanishing on the boundary of ``q2``; with it
    ``C = sqrt(mu* |v|_inf + |v_t v|_inf + alpha1 |grad v|_inf^2)`` and the
    check is ``|u|_{L2(H1(q1))} <= (C / alpha0) |u|_{L2(q2)} (1 + tol_quad)``.
    """
    mesh = u.mesh
    K = u.K
    dt = float(u.times[1] - u.times[0])
    spacing = mesh.spacing
    gv = 0.0
    for (a1, b1), (a2, b2), h in zip(q1.box, q2.box, spacing):
        if not (a2 < a1 and b1 < b2):
            raise RejectedInputError("q1 must lie strictly inside q2 in space")
        gap = min(a1 - a2, b2 - b1) * h
        gv = max(gv, 1.5 / gap)
    if not (q2.s < q1.s and q1.t < q2.t):
        raise RejectedInputError("q1 must lie strictly inside q2 in time")
    tgap = (q1.s - q2.s) * dt
    vt = 1.5 / tgap
    C = float(np.sqrt(max(mu_star, 0.0) * 1.0 + vt + alpha1 * gv**2))

    def l2(cyl):
        ks = cyl.steps(K)
        nodes = cyl.nodes(mesh)
        vals = u.values[np.ix_(ks, nodes)]
        return float(np.sqrt(dt * np.sum(mesh.mass_weights[nodes] * vals**2)))

    def grad2(cyl):
        ks = cyl.steps(K)
        total = 0.0
        for d, (lo, hi) in enumerate(cyl.box):
            box_a = list(cyl.box)
            box_b = list(cyl.box)
            box_a[d] = (lo, hi - 1)
            box_b[d] = (lo + 1, hi)
            na = _box_nodes(mesh, tuple(box_a))
            nb = _box_nodes(mesh, tuple(box_b))
            diff = (u.values[np.ix_(ks, nb)] - u.values[np.ix_(ks, na)]) / spacing[d]
            cell = np.prod([spacing[j] for j in range(mesh.dim)])
            total += dt * cell * float(np.sum(diff**2))
        return total

    g1 = grad2(q1)
    lhs = float(np.sqrt(l2(q1) ** 2 + g1))
    rhs = C / alpha0 * l2(q2)
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
    return SobolevReport(lhs, rhs, C, ratio, bool(lhs <= rhs * (1 + tol_quad)), float(np.sqrt(g1)), gv, vt)


def limit_equation_residual(problem, sol, mu_star: float, mask: np.ndarray) -> float:
    """Max residual of the implicit step at ``mu*`` for ``sol.u`` on ``mask`` (K, n).

    Reported only; the limit solution itself is never formed.
    """
    u = sol.u.values
    evo = problem.evo
    dt = problem.grid.dt
    K = problem.grid.K
    worst = 0.0
    for k in range(K):
        kn = k + 1
        r = (
            evo.w * (u[kn] - (1 + mu_star * dt) * u[k])
            + dt * (evo.operator_matvec(kn, u[kn]) + evo.w * problem.b(kn) * problem.g(kn, u[kn]) * u[kn])
        ) / (dt * evo.w)
        sel = mask[kn % K] & problem.mesh.free
        if sel.any():
            worst = max(worst, float(np.max(np.abs(r[sel]))))
    return worst


def certificate_rows(certs, mesh):
    for i, cert in enumerate(certs):
        box = cert.cylinder.box
        lo = mesh.nodes[_box_nodes(mesh, tuple((b[0], b[0]) for b in box))[0]]
        hi = mesh.nodes[_box_nodes(mesh, tuple((b[1], b[1]) for b in box))[0]]
        yield (
            i,
            " ".join(f"{v:.17g}" for v in np.atleast_1d(lo)),
            " ".join(f"{v:.17g}" for v in np.atleast_1d(hi)),
            cert.cylinder.s,
            cert.cylinder.t,
            cert.B,
            cert.max_u,
            cert.max_v,
            int(cert.verified),
        )


def locus_rows(report: LocusReport):
    K, n = report.grows.shape
    for i in range(n):
        for k in range(K):
            yield i, k, "grows" if report.grows[k, i] else "bounded", float(report.slopes[k, i])
