import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from periodic_logistic.coeffs import Weight, classify_sets, laplacian_coefficients
from periodic_logistic.errors import DomainError, NoPositiveSolutionError, OutOfRangeError, RejectedInputError
from periodic_logistic.evolution import Evolution, TimeGrid
from periodic_logistic.logistic import (
    LogisticProblem,
    Nonlinearity,
    bifurcation_rows,
    bifurcation_sweep,
    build_subsolution,
    build_supersolution,
    default_mu_ladder,
    logistic_eigen_consistency,
    mu_derivative,
    power_nonlinearity,
    secant_slope,
    solve_ivp,
    solve_logistic,
    stability_margin,
    subsolution_condition,
    zero_solution_check,
)
from periodic_logistic.eigen import principal_pair
from periodic_logistic.mesh import build_interval_mesh

from conftest import scalar_problem


def bernoulli_periodic(mu, b, times):
    """Periodic solution ``1 / y`` of ``u' = mu u - b u^2`` by adaptive quadrature."""

    def y(t):
        # periodic y solves y' = -mu y + b: y(t) = int_{t-1}^t e^{-mu (t-s)} b(s) ds / (1 - e^{-mu})
        val = quad(lambda s: np.exp(-mu * (t - s)) * b(s), t - 1, t, epsabs=1e-14, epsrel=1e-14)[0]
        return val / (1 - np.exp(-mu))

    return np.array([1 / y(t) for t in times])


def dirichlet_problem(n=41, K=100, p=2.0):
    mesh = build_interval_mesh(0.0, np.pi, n, "dirichlet", "dirichlet")
    evo = Evolution(mesh, laplacian_coefficients(), TimeGrid(1.0, K))
    w = Weight.from_field(lambda x, y, t: 1 + 0.5 * np.sin(x) * np.cos(2 * np.pi * t), mesh, K, 1.0)
    return LogisticProblem(evo, w, power_nonlinearity(p))


# -- nonlinearity ------------------------------------------------------------


def test_secant_slope_examples():
    lin = power_nonlinearity(2)
    assert secant_slope(lin, 0.3, 4.0) == pytest.approx(1.0)
    sq = power_nonlinearity(3)
    assert secant_slope(sq, 0.0, 2.0) == pytest.approx(2.0)
    assert secant_slope(sq, 1.5, 1.5) == pytest.approx(float(sq.derivative(0, 0, 0, 1.5)))
    with pytest.raises(DomainError):
        secant_slope(sq, -1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.sampled_from([2.0, 3.0, 4.0, 5.0]))
def test_secant_slope_is_difference_quotient(a, b, p):
    # polynomial dg: the 8-point rule is exact
    nl = power_nonlinearity(p)
    if abs(b - a) < 1e-3:
        return
    dq = (nl.values(0, 0, 0, b) - nl.values(0, 0, 0, a)) / (b - a)
    assert secant_slope(nl, a, b) == pytest.approx(float(dq), rel=1e-10)


def test_nonlinearity_checks():
    mesh = build_interval_mesh(0.0, 1.0, 5, "robin", "robin")
    power_nonlinearity(2).check(mesh, [0.0, 0.5], T=1.0)
    shifted = Nonlinearity(lambda x, y, t, xi: 1 + xi, lambda x, y, t, xi: np.ones_like(xi))
    with pytest.raises(RejectedInputError):
        shifted.check(mesh, [0.0])
    flat = Nonlinearity(lambda x, y, t, xi: 0 * xi, lambda x, y, t, xi: 0 * xi)
    with pytest.raises(RejectedInputError):
        flat.check(mesh, [0.0])
    with pytest.raises(RejectedInputError):
        power_nonlinearity(1.0)


# -- initial value problems --------------------------------------------------


def test_ivp_fixed_points(scalar):
    assert not solve_ivp(scalar, 2.0, np.zeros(3)).values.any()
    traj = solve_ivp(scalar, 2.0, np.full(3, 2.0), horizon=2)
    np.testing.assert_allclose(traj.values, 2.0, rtol=1e-13)


def test_ivp_matches_bernoulli():
    mu = 1.0
    K = 1000
    p = scalar_problem(K=K, b=lambda x, y, t: 1 + 0.5 * np.sin(2 * np.pi * t) + 0 * x, theta=0.5)
    u0 = 0.7
    traj = solve_ivp(p, mu, np.full(3, u0), check_barrier=False)
    b = lambda s: 1 + 0.5 * np.sin(2 * np.pi * s)

    def exact(t):
        integral = quad(lambda s: b(s) * np.exp(mu * s), 0, t, epsabs=1e-14, epsrel=1e-14)[0]
        return 1 / (np.exp(-mu * t) * (1 / u0 + integral))

    ex = np.array([exact(t) for t in traj.times[::10]])
    assert np.max(np.abs(traj.values[::10, 1] - ex)) < 1e-4


def test_ivp_rejects_negative_data(scalar):
    with pytest.raises(DomainError):
        solve_ivp(scalar, 1.0, -np.ones(3))


@settings(max_examples=15, deadline=None)
@given(arrays(float, 41, elements=st.floats(0, 20)), st.floats(-1, 5))
def test_ivp_positive_and_below_linear_barrier(u0, mu):
    p = dirichlet_problem(K=20)
    traj = solve_ivp(p, mu, u0, check_barrier=True)
    assert traj.values.min() >= 0


# -- ordered pairs -----------------------------------------------------------


def test_subsolution_bound_for_linear_g():
    p = dirichlet_problem()
    mu = p.mu1_0 + 1.0
    B = p.weight.values.max()
    Phi = p.pair0.phi.values.max()
    for frac in (0.1, 0.5, 0.99):
        assert subsolution_condition(p, mu, frac * (mu - p.mu1_0) / (B * Phi)) < 0
    eps, sub = build_subsolution(p, mu)
    assert 0 < eps < (mu - p.mu1_0) / (B * Phi) * 1.0001 * 2


def test_subsolution_with_zero_weight_keeps_initial_eps():
    mesh = build_interval_mesh(0.0, np.pi, 21, "dirichlet", "dirichlet")
    evo = Evolution(mesh, laplacian_coefficients(), TimeGrid(1.0, 20))
    p = LogisticProblem(evo, Weight(np.zeros((21, 21)), 1.0), power_nonlinearity(2))
    eps, _ = build_subsolution(p, p.mu1_0 + 0.5, eps0=3.0)
    assert eps == 3.0


def test_subsolution_out_of_range(scalar):
    with pytest.raises(OutOfRangeError):
        build_subsolution(scalar, scalar.mu1_0)


def test_supersolution_constant_case(scalar):
    mu = 2.0
    eps, sub = build_subsolution(scalar, mu)
    kappa, delta, gamma, sup, pair = build_supersolution(scalar, mu, sub)
    assert delta == 0.0
    np.testing.assert_allclose(sup.values, sup.values[0, 0], rtol=1e-9)
    assert sup.values.min() >= max(gamma, mu) * (1 - 1e-12)
    assert np.all(sup.values >= sub.values)


def test_supersolution_near_left_endpoint_is_above_subsolution():
    p = dirichlet_problem()
    mu = p.mu1_0 + 0.05
    eps, sub = build_subsolution(p, mu)
    kappa, delta, gamma, sup, pair = build_supersolution(p, mu, sub)
    assert np.all(sup.values >= sub.values)


def test_supersolution_cubic_g():
    p = dirichlet_problem(p=3.0)
    mu = p.mu1_0 + 1.0
    eps, sub = build_subsolution(p, mu)
    kappa, delta, gamma, sup, pair = build_supersolution(p, mu, sub)
    from periodic_logistic.coeffs import truncate_weight

    wd = truncate_weight(p.weight, p.mesh, delta)
    supp = wd.values > wd.threshold_eps
    # b (kappa psi)^2 >= gamma b_delta on the support of b_delta
    lhs = p.weight.values * sup.values**2
    assert np.all(lhs[supp] >= gamma * wd.values[supp] * (1 - 1e-12))
    # kappa is at most one doubling above the exact threshold
    psi = pair.phi.values
    exact = np.max(np.sqrt(gamma * wd.values[supp] / p.weight.values[supp]) / psi[supp])
    assert kappa < 2 * max(exact, 1.0) * 1.0001 or kappa <= 1.0


# -- periodic solutions ------------------------------------------------------


def test_scalar_equilibrium_and_uniqueness(scalar):
    up = solve_logistic(scalar, 2.0, tol_fix=1e-12)
    np.testing.assert_allclose(up.u.values, 2.0, atol=1e-8)
    down = solve_logistic(scalar, 2.0, direction="down", tol_fix=1e-12)
    assert np.max(np.abs(up.u.values - down.u.values)) < 1e-6
    assert up.stability_margin == pytest.approx(2.0, rel=1e-6)
    assert up.sandwich_violations == 0 and down.sandwich_violations == 0


def test_margin_is_shifted_eigenvalue_and_consistent():
    p = dirichlet_problem()
    sol = solve_logistic(p, 3.0, tol_fix=1e-11)
    assert stability_margin(p, sol) == pytest.approx(sol.stability_margin, abs=1e-9)
    assert sol.stability_margin > 0
    assert abs(logistic_eigen_consistency(p, sol)) < 1e-7


def _shifted_mismatch(K):
    p = dirichlet_problem(n=21, K=K)
    sol = solve_logistic(p, 3.0, tol_fix=1e-11)
    m = p.potential
    lat = np.array([m(k, sol.u.values[k]) for k in range(1, K + 1)])
    lat = np.vstack([lat[-1:], lat])
    return principal_pair(p.evo, lat).mu1 - 3.0


def test_shifted_consistency_is_first_order():
    e1, e2 = _shifted_mismatch(50), _shifted_mismatch(200)
    assert abs(e2) < abs(e1) / 3


def test_periodic_bernoulli_limit():
    K = 1000
    p = scalar_problem(K=K, b=lambda x, y, t: 1 + 0.5 * np.sin(2 * np.pi * t) + 0 * x, theta=0.5, ladder=2.0 ** np.arange(4))
    sol = solve_logistic(p, 1.0, tol_fix=1e-12)
    ex = bernoulli_periodic(1.0, lambda s: 1 + 0.5 * np.sin(2 * np.pi * s), p.grid.times[::20])
    assert np.max(np.abs(sol.u.values[::20, 1] - ex)) < 1e-4


def test_no_positive_solution_below_threshold(scalar):
    for mu in (scalar.mu1_0 - 0.5, scalar.mu1_0):
        with pytest.raises(NoPositiveSolutionError) as err:
            solve_logistic(scalar, mu)
        chk = err.value.check
        assert chk.decayed and chk.final_sup < 10 * chk.tol_fix


def test_zero_check_reports_no_decay_above_threshold(scalar):
    chk = zero_solution_check(scalar, 1.0, max_periods=30)
    assert not chk.decayed


def test_derivative_scalar(scalar):
    sol = solve_logistic(scalar, 2.0, tol_fix=1e-12)
    v = mu_derivative(scalar, sol)
    np.testing.assert_allclose(v.values, 1.0, atol=1e-7)


def test_derivative_positive_inside():
    p = dirichlet_problem()
    sol = solve_logistic(p, 2.0, tol_fix=1e-12)
    v = mu_derivative(p, sol)
    assert v.values[:, p.mesh.free].min() > 0


# -- bifurcation curves ------------------------------------------------------


def test_scalar_curve_is_identity():
    # the rung next to mu1(0) contracts by about exp(-0.01) per period
    scalar = scalar_problem(K=10)
    mus = [scalar.mu1_0 + 1e-2, 0.5, 1.0, 3.0]
    curve = bifurcation_sweep(scalar, mus, tol_fix=1e-11, max_periods=20000)
    assert not curve.failures
    np.testing.assert_allclose(curve.sup_norms, curve.mus, atol=1e-6)
    assert curve.sup_norms[0] == pytest.approx(1e-2, abs=1e-4)
    rows = list(bifurcation_rows(curve))
    assert len(rows) == 4 and rows[0][0] == pytest.approx(mus[0])


def test_default_ladder_shape():
    lad = default_mu_ladder(0.1, 2.1, 8)
    assert lad.size == 8 and np.all(np.diff(lad) > 0)
    assert lad[0] == pytest.approx(0.1 + 0.01 * 2.0)
    assert lad[-1] == pytest.approx(2.1 - 0.02 * 2.0)
    with pytest.raises(RejectedInputError):
        default_mu_ladder(0.0, np.inf)


@pytest.mark.slow
def test_window_curve_monotone_in_mu(window_curve):
    sols = window_curve.solutions
    assert not window_curve.failures
    for a, b in zip(sols, sols[1:]):
        assert np.all(b.u.values >= a.u.values - 1e-10 * (1 + np.abs(a.u.values)))


@pytest.mark.slow
def test_window_curve_grows_in_refuge_only(window):
    q0, qb = classify_sets(window.weight, window.mesh)
    gap = window.mu_star - window.mu1_0
    mus = window.mu_star - gap * np.array([0.06, 0.025, 0.012])
    curve = bifurcation_sweep(window, mus, max_periods=2000, compute_margin=False)
    assert not curve.failures
    top = curve.solutions
    tube = [s.u.values[:-1][q0.mask].max() for s in top]
    assert tube[-1] > 10 * tube[0]
    # a compact box well inside the b > 0 region, away from the boundary
    x = window.mesh.x
    box = (x > 0.8) & (x < 1.6)
    far = [s.u.values[:, box].max() for s in top]
    assert far[-1] < 2 * far[0]
