import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from periodic_logistic.coeffs import CoefficientSet, laplacian_coefficients
from periodic_logistic.errors import InvalidMeshError, NotEllipticError, RejectedInputError
from periodic_logistic.mesh import (
    assemble,
    build_interval_mesh,
    build_rectangle_mesh,
    check_ellipticity,
    discrete_form,
    is_m_matrix,
    mesh_rows,
)

floats = st.floats(-10, 10, allow_nan=False)


def test_interval_nodes_and_dirichlet_set():
    m = build_interval_mesh(0.0, np.pi, 5, "dirichlet", "dirichlet")
    np.testing.assert_allclose(m.x, np.pi * np.arange(5) / 4)
    assert m.gamma0_nodes.tolist() == [0, 4]
    assert m.free.tolist() == [False, True, True, True, False]


def test_all_robin_interval():
    m = build_interval_mesh(0.0, 1.0, 3, "robin", "robin")
    assert m.gamma0_nodes.size == 0
    assert sorted(m.boundary_faces[k].side for k in m.gamma1_faces) == ["left", "right"]
    assert list(m.tags) == ["gamma1", "interior", "gamma1"]


@pytest.mark.parametrize("n,a,b,kind", [(2, 0, 1, "dirichlet"), (5, 1, 1, "dirichlet"), (5, 0, 1, "neumann")])
def test_invalid_interval(n, a, b, kind):
    with pytest.raises(InvalidMeshError):
        build_interval_mesh(a, b, n, kind, kind)


def test_rectangle_corners_follow_dirichlet():
    m = build_rectangle_mesh((0, 1), (0, 2), 4, 5, {"left": "dirichlet", "right": "robin", "bottom": "robin", "top": "robin"})
    assert m.n == 20
    assert m.index(0, 0) in m.gamma0_nodes and m.index(0, 4) in m.gamma0_nodes
    assert m.index(3, 0) not in m.gamma0_nodes
    rows = list(mesh_rows(m))
    assert len(rows) == 20 and len(rows[0]) == 4


def test_laplacian_stencil_1d():
    n = 7
    m = build_interval_mesh(0.0, 1.0, n, "dirichlet", "dirichlet")
    h = 1.0 / (n - 1)
    A = assemble(m, laplacian_coefficients(), 0.0).toarray()
    inner = A[1:-1, 1:-1]
    expect = (2 * np.eye(n - 2) - np.eye(n - 2, k=1) - np.eye(n - 2, k=-1)) / h
    np.testing.assert_allclose(inner, expect, rtol=1e-13)
    assert np.all(A[0] == 0) and np.all(A[:, -1] == 0)


def test_zero_order_term_is_mass_weighted():
    m = build_interval_mesh(0.0, 1.0, 9, "robin", "dirichlet")
    A0 = assemble(m, laplacian_coefficients(), 0.0)
    A5 = assemble(m, laplacian_coefficients(c0=5.0), 0.0)
    M = np.diag(m.mass_weights * m.free)
    np.testing.assert_allclose((A5 - A0).toarray(), 5 * M, atol=1e-13)


def test_robin_coefficient_adds_boundary_weight():
    m = build_interval_mesh(0.0, 1.0, 6, "dirichlet", "robin")
    A0 = assemble(m, laplacian_coefficients(), 0.0).toarray()
    A1 = assemble(m, laplacian_coefficients(beta0=1.0), 0.0).toarray()
    D = A1 - A0
    assert D[5, 5] == pytest.approx(1.0, abs=1e-14)
    D[5, 5] = 0.0
    assert np.all(D == 0)


def test_negative_robin_rejected():
    m = build_interval_mesh(0.0, 1.0, 6, "robin", "robin")
    with pytest.raises(RejectedInputError):
        assemble(m, laplacian_coefficients(beta0=-1.0), 0.0)


def test_ellipticity_examples():
    m = build_interval_mesh(0.0, 1.0, 11, "robin", "robin")
    times = np.linspace(0, 1, 17)
    assert check_ellipticity(laplacian_coefficients(), m, times) == 1.0
    osc = CoefficientSet(a=((lambda x, y, t: 2 + np.sin(2 * np.pi * t) + 0 * x,),))
    assert check_ellipticity(osc, m, times) == pytest.approx(1.0)
    bad = CoefficientSet(a=((lambda x, y, t: np.where(x > 0.5, -1.0, 1.0),),))
    with pytest.raises(NotEllipticError) as err:
        check_ellipticity(bad, m, times)
    assert err.value.offending


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 3), st.floats(-0.9, 0.9), st.floats(0.1, 3), st.floats(0, 2 * np.pi))
def test_symmetric_part_bound(a11, r, a22, angle):
    # a12 = a21 = r sqrt(a11 a22) keeps the tensor positive definite
    a12 = r * np.sqrt(a11 * a22)
    co = CoefficientSet(dim=2, a=((a11, a12), (a12, a22)))
    m = build_rectangle_mesh((0, 1), (0, 1), 3, 3, "robin")
    alpha = check_ellipticity(co, m, [0.0])
    xi = np.array([np.cos(angle), np.sin(angle)])
    a = np.array([[a11, a12], [a12, a22]])
    assert xi @ a @ xi >= alpha * (1 - 1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(float, 9, elements=floats))
def test_form_matches_difference_energy_1d(u):
    m = build_interval_mesh(0.0, 2.0, 11, "dirichlet", "dirichlet")
    v = np.zeros(11)
    v[1:-1] = u
    A = assemble(m, laplacian_coefficients(), 0.3)
    h = m.spacing[0]
    energy = np.sum((np.diff(v) / h) ** 2) * h
    assert v @ A @ v == pytest.approx(energy, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(float, 9, elements=floats))
def test_form_matches_difference_energy_2d(u):
    m = build_rectangle_mesh((0, 1), (0, 2), 5, 5, "dirichlet")
    v = np.zeros(25)
    v[m.free] = u
    A = assemble(m, laplacian_coefficients(2), 0.0)
    hx, hy = m.spacing
    V = v.reshape(5, 5)
    energy = np.sum(np.diff(V, axis=1) ** 2) * hy / hx + np.sum(np.diff(V, axis=0) ** 2) * hx / hy
    assert v @ A @ v == pytest.approx(energy, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(float, 11, elements=floats))
def test_positive_negative_parts_decouple(u):
    m = build_interval_mesh(0.0, 1.0, 11, "robin", "dirichlet")
    A = assemble(m, laplacian_coefficients(c0=2.0), 0.0)
    assert is_m_matrix(A)
    up, um = np.maximum(u, 0), np.maximum(-u, 0)
    # only off-diagonal couplings survive; for an M-matrix they are <= 0
    cross = up @ A @ um
    assert cross <= 1e-12 * (1 + u @ u)


def test_discrete_form_constants():
    co = CoefficientSet(a=((1.0,),), c0=-3.0)
    times = np.linspace(0, 1, 3)
    # constants are admissible with Robin ends: omega = 3 + alpha / 2
    df = discrete_form(build_interval_mesh(0.0, 1.0, 21, "robin", "robin"), co, times)
    assert df.ellipticity_alpha == 1.0
    assert df.coercivity_shift == pytest.approx(3.5, rel=1e-10)
    # with Dirichlet ends the Poincare constant (about pi^2) absorbs c0
    df = discrete_form(build_interval_mesh(0.0, 1.0, 21, "dirichlet", "dirichlet"), co, times)
    assert df.coercivity_shift == 0.0
    assert 0 < df.bound_M < 4.0
