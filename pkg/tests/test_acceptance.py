"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.  This module runs last so that the sandwich
check sees every monotone iteration of the session.
"""

import time

import numpy as np
import pytest
from scipy.integrate import quad

from periodic_logistic.blowup import SubCylinder, blowup_locus, certify_all, certify_local_bound, propose_cylinders
from periodic_logistic.coeffs import CoefficientSet, Weight, classify_sets, laplacian_coefficients
from periodic_logistic.eigen import default_ladder, degeneracy_functional, mu_star_sweep, principal_pair
from periodic_logistic.errors import NoPositiveSolutionError
from periodic_logistic.evolution import Evolution, PeriodMap, TimeGrid
from periodic_logistic.logistic import LogisticProblem, bifurcation_sweep, mu_derivative, power_nonlinearity, solve_logistic
from periodic_logistic.mesh import build_interval_mesh

from conftest import MONOTONE_RUNS, moving_window, scalar_problem

criterion = pytest.mark.criterion


def _dirichlet_logistic(n=41, K=100):
    mesh = build_interval_mesh(0.0, np.pi, n, "dirichlet", "dirichlet")
    evo = Evolution(mesh, laplacian_coefficients(), TimeGrid(1.0, K))
    w = Weight.from_field(lambda x, y, t: 1 + 0.5 * np.sin(x) * np.cos(2 * np.pi * t), mesh, K, 1.0)
    return LogisticProblem(evo, w, power_nonlinearity(2), gamma_ladder=2.0 ** np.arange(4))


@criterion(1, "analytic Dirichlet eigenvalue")
def test_analytic_eigenvalue():
    t0 = time.perf_counter()
    mesh = build_interval_mesh(0.0, np.pi, 200, "dirichlet", "dirichlet")
    evo = Evolution(mesh, laplacian_coefficients(), TimeGrid(1.0, 200, 0.5))
    pair = principal_pair(evo)
    elapsed = time.perf_counter() - t0
    phi0 = pair.phi.values[0] / mesh.h_norm(pair.phi.values[0])
    s = np.sin(mesh.x) / mesh.h_norm(np.sin(mesh.x))
    err = mesh.h_norm(phi0 - s)
    print(f"mu1={pair.mu1:.10f} |mu1-1|={abs(pair.mu1 - 1):.3e} H-error={err:.3e} time={elapsed:.2f}s")
    assert abs(pair.mu1 - 1.0) < 1e-2
    assert err < 1e-2
    assert elapsed < 10


@criterion(2, "constant-shift identity")
@pytest.mark.parametrize("c", [-1.0, 0.5, 3.0])
def test_constant_shift(c):
    mesh = build_interval_mesh(0.0, 1.0, 21, "robin", "robin")
    co = CoefficientSet(a=((lambda x, y, t: 1 + 0.5 * np.sin(2 * np.pi * t) + 0 * x,),))
    evo = Evolution(mesh, co, TimeGrid(1.0, 50))
    m = lambda x, y, t: np.cos(2 * np.pi * t) * x + 2 * x**2
    a = principal_pair(evo, m).mu1
    b = principal_pair(evo, lambda x, y, t: m(x, y, t) + c).mu1
    print(f"c={c}: difference error {abs(b - a - c):.3e}")
    assert abs(b - a - c) < 1e-9


def _bernoulli_periodic(mu, b, times):
    # y = 1/u solves y' = -mu y + b; its periodic solution is a convolution over one period
    def y(t):
        val = quad(lambda s: np.exp(-mu * (t - s)) * b(s), t - 1, t, epsabs=1e-14, epsrel=1e-14)[0]
        return val / (1 - np.exp(-mu))

    return np.array([1 / y(t) for t in times])


@criterion(3, "periodic Bernoulli oracle")
def test_bernoulli_oracle():
    t0 = time.perf_counter()
    b = lambda s: 1 + 0.5 * np.sin(2 * np.pi * s)
    p = scalar_problem(K=1000, b=lambda x, y, t: b(t) + 0 * x, theta=0.5, ladder=2.0 ** np.arange(4))
    sol = solve_logistic(p, 1.0, tol_fix=1e-12)
    sel = slice(None, None, 10)
    exact = _bernoulli_periodic(1.0, b, p.grid.times[sel])
    err = float(np.max(np.abs(sol.u.values[sel, 1] - exact)))
    elapsed = time.perf_counter() - t0
    print(f"sup error {err:.3e} after {sol.iterations} periods, time={elapsed:.1f}s")
    assert err < 1e-4
    assert elapsed < 30


@criterion(4, "uniqueness: upward and downward limits agree")
def test_uniqueness(scalar, window):
    t0 = time.perf_counter()
    for name, p, mu in (("scalar", scalar, 1.0), ("window", window, 0.5 * (window.mu1_0 + window.mu_star))):
        up = solve_logistic(p, mu, "up", stop="estimate", max_periods=5000)
        down = solve_logistic(p, mu, "down", stop="estimate", max_periods=5000)
        diff = float(np.max(np.abs(up.u.values - down.u.values)))
        tol = max(up.tol_fix, down.tol_fix)
        print(f"{name} mu={mu:.4f}: |up-down|={diff:.3e} tol_fix={tol:.3e} periods {up.iterations}/{down.iterations}")
        assert diff < 10 * tol
    assert time.perf_counter() - t0 < 120


@criterion(6, "necessary range for positive solutions")
def test_necessary_range(scalar):
    mu1 = scalar.mu1_0
    for mu in (mu1, mu1 - 0.5):
        with pytest.raises(NoPositiveSolutionError) as err:
            solve_logistic(scalar, mu)
        chk = err.value.check
        print(f"mu={mu:.4f}: decayed={chk.decayed} final sup {chk.final_sup:.3e} (tol_fix {chk.tol_fix:.1e})")
        assert chk.decayed and chk.final_sup < 10 * chk.tol_fix
    sol = solve_logistic(scalar, mu1 + 0.05, max_periods=5000)
    print(f"mu={mu1 + 0.05:.4f}: sup {sol.sup_norm:.6f} margin {sol.stability_margin:.6f}")
    assert sol.u.values.min() > 0 and sol.stability_margin > 0


@criterion(7, "gamma monotonicity and saturation")
def test_gamma_saturation(window):
    sw = window.sweep()
    assert sw.gammas.size == 15 and sw.gammas[-1] == 2.0**14
    steps = np.diff(sw.mu_values)
    print(f"min increment along the gamma ladder {steps.min():.3e}; mu* estimate at K=200: {sw.mu_star_estimate:.8f}")
    assert np.all(steps >= -1e-9)
    coarse = moving_window(K=8000, ladder=2.0 ** np.arange(15)).mu_star
    fine = moving_window(K=16000, ladder=2.0 ** np.arange(16)).mu_star
    print(f"mu* K=8000 gmax=2^14: {coarse:.8f}; K=16000 gmax=2^15: {fine:.8f}; change {abs(fine - coarse):.2e}")
    assert abs(fine - coarse) < 1e-3
    flat = mu_star_sweep(window.evo, Weight(np.ones_like(window.weight.values), 1.0), default_ladder(14))
    print(f"b = 1: infinite={flat.flagged_infinite} slope={flat.slope:.6f}")
    assert flat.flagged_infinite and abs(flat.slope - 1.0) < 0.05


@criterion(8, "degeneracy of the limit eigenfunction")
def test_degeneracy(window):
    sw = mu_star_sweep(window.evo, window.weight, default_ladder(14), keep_pairs=True)
    degen = np.array([degeneracy_functional(window.weight, p.phi) for p in sw.pairs])
    x = window.mesh.x
    box = (np.abs(x) > 0.8) & (np.abs(x) < 1.6)
    _, qb = classify_sets(window.weight, window.mesh)
    assert np.all(qb.mask[:, box])
    peaks = np.array([p.phi.values[:, box].max() for p in sw.pairs])
    print(f"degeneracy ratio first/last {degen[0] / degen[-1]:.3e}; box max {peaks[0]:.3e} -> {peaks[-1]:.3e}")
    assert degen[0] / degen[-1] >= 100
    assert np.all(np.diff(peaks) <= 1e-9)


def _fd_ratio(p, mu, **kw):
    sol = solve_logistic(p, mu, **kw)
    v = mu_derivative(p, sol).values
    errs = []
    for h in (1e-2, 5e-3):
        u_h = solve_logistic(p, mu + h, **kw).u.values
        errs.append(float(np.max(np.abs((u_h - sol.u.values) / h - v))))
    return errs[0] / errs[1], errs


@criterion(9, "mu-derivative first-order finite differences")
def test_mu_derivative():
    scalar = scalar_problem(K=100, b=lambda x, y, t: 1 + 0.5 * np.sin(2 * np.pi * t) + 0 * x, ladder=2.0 ** np.arange(4))
    r1, e1 = _fd_ratio(scalar, 2.0, tol_fix=1e-13, stop="estimate", max_periods=5000)
    r2, e2 = _fd_ratio(_dirichlet_logistic(), 2.0, tol_fix=1e-13, stop="estimate", max_periods=5000)
    print(f"scalar: errors {e1[0]:.3e}, {e1[1]:.3e} ratio {r1:.3f}; Dirichlet: errors {e2[0]:.3e}, {e2[1]:.3e} ratio {r2:.3f}")
    assert r1 >= 1.8 and r2 >= 1.8


@criterion(10, "bifurcation curve endpoints")
def test_bifurcation_endpoints(window_curve):
    p = scalar_problem(K=10)
    curve = bifurcation_sweep(p, [p.mu1_0 + 1e-2, 0.5, 1.0, 3.0], tol_fix=1e-11, max_periods=20000)
    dev = np.abs(curve.sup_norms - curve.mus)
    print(f"scalar: max |sup - mu| = {dev.max():.3e}")
    assert not curve.failures and np.all(dev < 1e-6)
    sups = window_curve.sup_norms
    print(f"window: sup norms {sups[0]:.4g} ... {sups[-1]:.4g}, ratio {sups[-1] / sups[0]:.3g}")
    assert not window_curve.failures
    assert np.all(np.diff(sups) > 0) and sups[-1] / sups[0] > 10


@criterion(11, "blow-up localization")
def test_blowup_localization():
    t0 = time.perf_counter()
    p = moving_window()
    curve = bifurcation_sweep(p)
    rep = blowup_locus(curve, p.mu_star)
    q0, _ = classify_sets(p.weight, p.mesh)
    frac = rep.fraction_growing(q0.mask)
    certs = certify_all(propose_cylinders(p.weight, p.mesh, margin=2), curve, p)
    bad = certify_local_bound(SubCylinder(((15, 25),), 0, 100), curve, p)
    elapsed = time.perf_counter() - t0
    print(
        f"Q0 tube growing fraction {frac:.3f}; certificates verified {sum(c.verified for c in certs)}/{len(certs)}; "
        f"misplaced cylinder verified={bad.verified}; time {elapsed:.1f}s"
    )
    assert frac >= 0.9
    assert certs and all(c.verified for c in certs)
    assert not bad.verified
    assert elapsed < 300


@criterion(12, "positivity and comparison of the evolution")
def test_positivity_and_comparison(window):
    rng = np.random.default_rng(12)
    n, K = window.mesh.n, window.grid.K
    pm = PeriodMap(window.evo, window.weight.values)
    V = rng.random((n, 10000)) * rng.exponential(1.0, 10000)
    V[:, ::7] *= rng.random((n, 1)) < 0.3
    out = pm.run(V, store=False)
    np.testing.assert_allclose(out[:, :3], np.stack([pm.run(V[:, j], store=False) for j in range(3)], axis=1), rtol=1e-13)
    print(f"min entry after one period over 10000 starts: {out.min():.3e}")
    assert out.min() >= 0.0
    worst = np.inf
    for _ in range(50):
        b1 = rng.random((K + 1, n)) * 5
        b1[-1] = b1[0]
        b2 = b1 + rng.random((K + 1, n)) * 5
        b2[-1] = b2[0]
        W = rng.random((n, 20))
        u1 = PeriodMap(window.evo, b1).run(W)
        u2 = PeriodMap(window.evo, b2).run(W)
        worst = min(worst, float(np.min(u1 + 1e-12 - u2)))
    print(f"worst ordering margin over 50 weight pairs: {worst:.3e}")
    assert worst >= 0.0


@criterion(5, "sandwich invariant in every monotone run")
def test_sandwich_invariant():
    # collected from every monotone iteration of the session, so this runs last
    gaps = [r[2] for r in MONOTONE_RUNS]
    viol = sum(r[3] for r in MONOTONE_RUNS)
    print(f"{len(MONOTONE_RUNS)} monotone runs; smallest gap {min(gaps):.3e}; violations {viol}")
    assert MONOTONE_RUNS
    assert min(gaps) >= -1e-10 and viol == 0
