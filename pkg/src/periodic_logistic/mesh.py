"""Uniform finite-difference meshes and assembly of the discrete bilinear form.

The discrete form is built edge by edge with midpoint quadrature, which on a
uniform grid reproduces the classical second-order difference stencils (three
points in 1D, five points in 2D).  Mass is lumped, so the mass matrix is a
positive diagonal.  Rows and columns of Dirichlet nodes are eliminated: the
assembled matrix is zero there and time steppers pin those nodes to zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidMeshError, NotEllipticError, RejectedInputError

if TYPE_CHECKING:
    from .coeffs import CoefficientSet

__all__ = [
    "BoundaryFace",
    "Mesh",
    "DiscreteForm",
    "build_interval_mesh",
    "build_rectangle_mesh",
    "assemble",
    "check_ellipticity",
    "discrete_form",
    "mesh_rows",
]

logger = logging.getLogger(__name__)

BC_KINDS = ("dirichlet", "robin")
SIDES_2D = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class BoundaryFace:
    """Boundary facet: a node (1D) or a segment between two nodes (2D)."""

    nodes: tuple
    normal: tuple
    weight: float
    side: str


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    shape: tuple
    bounds: tuple
    spacing: tuple
    nodes: np.ndarray
    cells: np.ndarray
    boundary_faces: tuple
    gamma0_nodes: np.ndarray
    gamma1_faces: np.ndarray
    side_kinds: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        """Maximal cell diameter."""
        return float(np.sqrt(np.sum(np.square(self.spacing))))

    @property
    def x(self) -> np.ndarray:
        return self.nodes[:, 0]

    @property
    def y(self) -> np.ndarray:
        if self.dim == 1:
            return np.zeros(self.n)
        return self.nodes[:, 1]

    @property
    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.gamma0_nodes] = True
        return mask

    @property
    def free(self) -> np.ndarray:
        return ~self.dirichlet_mask

    @property
    def interior_mask(self) -> np.ndarray:
        """Nodes that are not on the boundary at all."""
        return np.asarray(self.tags == "interior")

    @property
    def tags(self) -> np.ndarray:
        tags = np.full(self.n, "interior", dtype=object)
        for k in self.gamma1_faces:
            for node in self.boundary_faces[k].nodes:
                tags[node] = "gamma1"
        tags[self.gamma0_nodes] = "gamma0"
        return tags

    @property
    def mass_weights(self) -> np.ndarray:
        """Lumped (trapezoidal) nodal quadrature weights."""
        ws = []
        for n_d, h_d in zip(self.shape, self.spacing):
            w = np.full(n_d, h_d)
            w[0] = w[-1] = 0.5 * h_d
            ws.append(w)
        if self.dim == 1:
            return ws[0]
        return np.outer(ws[1], ws[0]).ravel()

    def index(self, i: int, j: int = 0) -> int:
        """Flat node index of grid position (i, j); i runs along x."""
        return j * self.shape[0] + i

    def grid_indices(self) -> np.ndarray:
        """(n, dim) integer grid positions of all nodes."""
        if self.dim == 1:
            return np.arange(self.n)[:, None]
        nx = self.shape[0]
        ids = np.arange(self.n)
        return np.stack([ids % nx, ids // nx], axis=1)

    def dirichlet_distance(self) -> np.ndarray:
        """Distance of each node to the Dirichlet part of the boundary.

        Returns ``inf`` everywhere when no side carries a Dirichlet condition.
        """
        dist = np.full(self.n, np.inf)
        if self.dim == 1:
            (a, b), = self.bounds
            if self.side_kinds["left"] == "dirichlet":
                dist = np.minimum(dist, self.x - a)
            if self.side_kinds["right"] == "dirichlet":
                dist = np.minimum(dist, b - self.x)
            return dist
        (ax, bx), (ay, by) = self.bounds
        offsets = {
            "left": self.x - ax,
            "right": bx - self.x,
            "bottom": self.y - ay,
            "top": by - self.y,
        }
        for side, d in offsets.items():
            if self.side_kinds[side] == "dirichlet":
                dist = np.minimum(dist, d)
        return dist

    def boundary_distance(self) -> np.ndarray:
        """Distance of each node to the whole boundary of the box."""
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.min(np.minimum(self.nodes - lo, hi - self.nodes), axis=1)

    def h_norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.mass_weights * np.square(u))))

    def gradient_energy(self, u: np.ndarray) -> float:
        """Discrete Dirichlet energy sum over edges of ((u_q - u_p)/h)^2 times edge measure."""
        total = 0.0
        for d in range(self.dim):
            p, q, s = _edges(self, d)
            diff = (u[q] - u[p]) / self.spacing[d]
            total += float(np.sum(s * self.spacing[d] * diff**2))
        return total

    def v_norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(self.gradient_energy(u) + self.h_norm(u) ** 2))


def build_interval_mesh(a: float, b: float, n: int, bc_left: str, bc_right: str) -> Mesh:
    """Uniform grid with ``n`` nodes on ``[a, b]``.

    Examples
    --------
    >>> m = build_interval_mesh(0.0, 1.0, 3, "robin", "robin")
    >>> m.gamma0_nodes.size
    0
    """
    if n < 3 or not a < b:
        raise InvalidMeshError(f"need n >= 3 and a < b (got n={n}, a={a}, b={b})")
    for kind in (bc_left, bc_right):
        if kind not in BC_KINDS:
            raise InvalidMeshError(f"unknown boundary kind {kind!r}")
    x = np.linspace(a, b, n)
    h = (b - a) / (n - 1)
    faces = (
        BoundaryFace((0,), (-1.0,), 1.0, "left"),
        BoundaryFace((n - 1,), (1.0,), 1.0, "right"),
    )
    kinds = {"left": bc_left, "right": bc_right}
    gamma0 = [f.nodes[0] for f in faces if kinds[f.side] == "dirichlet"]
    gamma1 = [k for k, f in enumerate(faces) if kinds[f.side] == "robin"]
    cells = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return Mesh(
        dim=1,
        shape=(n,),
        bounds=((float(a), float(b)),),
        spacing=(h,),
        nodes=x[:, None],
        cells=cells,
        boundary_faces=faces,
        gamma0_nodes=np.array(sorted(gamma0), dtype=int),
        gamma1_faces=np.array(gamma1, dtype=int),
        side_kinds=kinds,
    )


def build_rectangle_mesh(
    xbounds: Sequence[float],
    ybounds: Sequence[float],
    nx: int,
    ny: int,
    bc: dict | str = "dirichlet",
) -> Mesh:
    """Uniform tensor grid on a rectangle, node index ``j * nx + i``.

    ``bc`` maps each of left/right/bottom/top to a boundary kind; a single
    string applies to all sides.  Corners touching a Dirichlet side are
    Dirichlet.
    """
    ax, bx = map(float, xbounds)
    ay, by = map(float, ybounds)
    if nx < 3 or ny < 3 or not (ax < bx and ay < by):
        raise InvalidMeshError("need nx, ny >= 3 and a non-degenerate rectangle")
    if isinstance(bc, str):
        bc = {s: bc for s in SIDES_2D}
    kinds = {s: bc.get(s, "dirichlet") for s in SIDES_2D}
    for kind in kinds.values():
        if kind not in BC_KINDS:
            raise InvalidMeshError(f"unknown boundary kind {kind!r}")
    hx = (bx - ax) / (nx - 1)
    hy = (by - ay) / (ny - 1)
    X, Y = np.meshgrid(np.linspace(ax, bx, nx), np.linspace(ay, by, ny))
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    def idx(i, j):
        return j * nx + i

    faces = []
    for j in range(ny - 1):
        faces.append(BoundaryFace((idx(0, j), idx(0, j + 1)), (-1.0, 0.0), hy, "left"))
        faces.append(BoundaryFace((idx(nx - 1, j), idx(nx - 1, j + 1)), (1.0, 0.0), hy, "right"))
    for i in range(nx - 1):
        faces.append(BoundaryFace((idx(i, 0), idx(i + 1, 0)), (0.0, -1.0), hx, "bottom"))
        faces.append(BoundaryFace((idx(i, ny - 1), idx(i + 1, ny - 1)), (0.0, 1.0), hx, "top"))
    gamma0 = set()
    gamma1 = []
    for k, f in enumerate(faces):
        if kinds[f.side] == "dirichlet":
            gamma0.update(f.nodes)
        else:
            gamma1.append(k)
    ii, jj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    ii, jj = ii.ravel(), jj.ravel()
    cells = np.stack([idx(ii, jj), idx(ii + 1, jj), idx(ii + 1, jj + 1), idx(ii, jj + 1)], axis=1)
    return Mesh(
        dim=2,
        shape=(nx, ny),
        bounds=((ax, bx), (ay, by)),
        spacing=(hx, hy),
        nodes=nodes,
        cells=cells,
        boundary_faces=tuple(faces),
        gamma0_nodes=np.array(sorted(gamma0), dtype=int),
        gamma1_faces=np.array(gamma1, dtype=int),
        side_kinds=kinds,
    )


def _edges(mesh: Mesh, d: int):
    """Edges along direction ``d``: (p, q, dual measure) with q = p + e_d."""
    if mesh.dim == 1:
        n = mesh.n
        return np.arange(n - 1), np.arange(1, n), np.ones(n - 1)
    nx, ny = mesh.shape
    hx, hy = mesh.spacing
    if d == 0:
        i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="xy")
        s = np.full(i.shape, hy)
        s[0, :] *= 0.5
        s[-1, :] *= 0.5
        p = j * nx + i
        return p.ravel(), (p + 1).ravel(), s.ravel()
    i, j = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="xy")
    s = np.full(i.shape, hx)
    s[:, 0] *= 0.5
    s[:, -1] *= 0.5
    p = j * nx + i
    return p.ravel(), (p + nx).ravel(), s.ravel()


def _midpoints(mesh: Mesh, p: np.ndarray, q: np.ndarray):
    mid = 0.5 * (mesh.nodes[p] + mesh.nodes[q])
    x = mid[:, 0]
    y = mid[:, 1] if mesh.dim == 2 else np.zeros_like(x)
    return x, y


def _cell_gradients(mesh: Mesh):
    """Cell-averaged gradient operators for 2D bilinear cells."""
    nx, ny = mesh.shape
    hx, hy = mesh.spacing
    c = mesh.cells
    nc = c.shape[0]
    rows = np.repeat(np.arange(nc), 4)
    gx = np.array([-1.0, 1.0, 1.0, -1.0]) / (2 * hx)
    gy = np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * hy)
    Gx = sp.csr_matrix((np.tile(gx, nc), (rows, c.ravel())), shape=(nc, mesh.n))
    Gy = sp.csr_matrix((np.tile(gy, nc), (rows, c.ravel())), shape=(nc, mesh.n))
    centers = mesh.nodes[c].mean(axis=1)
    return Gx, Gy, centers, hx * hy


def assemble(mesh: Mesh, coeffs: "CoefficientSet", t: float, eliminate: bool = True) -> sp.csr_matrix:
    """Matrix ``A`` of the discrete form at time ``t``.

    Row index is the test node, column index the trial node, so
    ``v @ A @ u`` approximates the form evaluated at (u, v).

    Parameters
    ----------
    mesh : Mesh
    coeffs : CoefficientSet
        Must have ``coeffs.dim == mesh.dim``.
    t : float
    eliminate : bool
        Zero the rows and columns of Dirichlet nodes (default).

    Raises
    ------
    RejectedInputError
        If the Robin coefficient is negative somewhere on the Robin boundary.
    """
    if coeffs.dim != mesh.dim:
        raise RejectedInputError("coefficient dimension does not match the mesh")
    n = mesh.n
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(np.asarray(r))
        cols.append(np.asarray(c))
        vals.append(np.asarray(v, dtype=float))

    for d in range(mesh.dim):
        p, q, s = _edges(mesh, d)
        hd = mesh.spacing[d]
        xm, ym = _midpoints(mesh, p, q)
        a = coeffs.diffusion(d, d, xm, ym, t) * s / hd
        add(p, p, a)
        add(q, q, a)
        add(p, q, -a)
        add(q, p, -a)
        if coeffs.has_drift:
            ad = 0.5 * s * coeffs.drift_at(d, xm, ym, t)
            add(q, p, ad)
            add(q, q, ad)
            add(p, p, -ad)
            add(p, q, -ad)
        if coeffs.has_convection:
            bd = 0.5 * s * coeffs.convection_at(d, xm, ym, t)
            add(p, q, bd)
            add(p, p, -bd)
            add(q, q, bd)
            add(q, p, -bd)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    if mesh.dim == 2 and coeffs.has_cross_diffusion:
        Gx, Gy, centers, area = _cell_gradients(mesh)
        a12 = coeffs.diffusion(0, 1, centers[:, 0], centers[:, 1], t) * area
        a21 = coeffs.diffusion(1, 0, centers[:, 0], centers[:, 1], t) * area
        A = A + Gy.T @ sp.diags(a12) @ Gx + Gx.T @ sp.diags(a21) @ Gy

    w = mesh.mass_weights
    c0 = coeffs.c0_values(mesh.x, mesh.y, t)
    diag = w * c0
    if mesh.gamma1_faces.size:
        robin = np.zeros(n)
        for k in mesh.gamma1_faces:
            face = mesh.boundary_faces[k]
            idx = np.array(face.nodes)
            beta = coeffs.beta0_values(mesh.x[idx], mesh.y[idx], t)
            if np.any(beta < 0):
                raise RejectedInputError(
                    f"negative Robin coefficient on side {face.side} at t={t}; normalize to beta0 >= 0"
                )
            robin[idx] += beta * face.weight / len(idx)
        diag = diag + robin
    A = (A + sp.diags(diag)).tocsr()
    if eliminate and mesh.gamma0_nodes.size:
        keep = sp.diags(mesh.free.astype(float))
        A = (keep @ A @ keep).tocsr()
        A.eliminate_zeros()
    return A


def check_ellipticity(coeffs: "CoefficientSet", mesh: Mesh, times: np.ndarray) -> float:
    """Smallest eigenvalue of the symmetric part of the diffusion tensor.

    The minimum runs over all nodes and the given sample times.

    Raises
    ------
    NotEllipticError
        When the minimum is not positive; ``offending`` lists (x, t) pairs.
    """
    alpha = np.inf
    offending = []
    x, y = mesh.x, mesh.y
    dim = coeffs.dim
    for t in np.atleast_1d(times):
        a = np.empty((x.size, dim, dim))
        for j in range(dim):
            for k in range(dim):
                a[:, j, k] = coeffs.diffusion(j, k, x, y, t)
        sym = 0.5 * (a + np.swapaxes(a, 1, 2))
        lam = np.linalg.eigvalsh(sym)[:, 0]
        alpha = min(alpha, float(lam.min()))
        bad = np.nonzero(lam <= 0)[0]
        offending.extend((tuple(mesh.nodes[i]), float(t)) for i in bad[:20])
    if alpha <= 0:
        raise NotEllipticError(f"diffusion tensor not elliptic (min eigenvalue {alpha:g})", offending)
    return alpha


@dataclass
class DiscreteForm:
    """Mass matrix, time-dependent form and its constants."""

    mesh: Mesh
    coeffs: "CoefficientSet"
    mass: sp.dia_matrix
    ellipticity_alpha: float
    bound_M: float
    coercivity_shift: float

    def form_at(self, t: float) -> sp.csr_matrix:
        return assemble(self.mesh, self.coeffs, t)

    def stiffness_gram(self) -> sp.csr_matrix:
        """Gram matrix of the discrete H1 norm (free nodes only)."""
        from .coeffs import laplacian_coefficients

        lap = assemble(self.mesh, laplacian_coefficients(self.mesh.dim), 0.0)
        keep = sp.diags(self.mesh.free.astype(float))
        return (lap + keep @ self.mass @ keep).tocsr()


def discrete_form(mesh: Mesh, coeffs: "CoefficientSet", times: np.ndarray) -> DiscreteForm:
    """Assemble the form constants by dense sampling over ``times``.

    The coercivity shift is the smallest ``omega >= 0`` with
    ``u A u + omega u M u >= (alpha/2) |u|_V^2`` at every sampled time; the
    bound is the norm of ``A`` from the discrete V norm to its dual.
    Intended for desk-scale meshes (dense eigenproblems).
    """
    alpha = check_ellipticity(coeffs, mesh, times)
    w = mesh.mass_weights
    mass = sp.diags(w)
    free = mesh.free
    from .coeffs import laplacian_coefficients

    lap = assemble(mesh, laplacian_coefficients(mesh.dim), 0.0).toarray()[np.ix_(free, free)]
    G = lap + np.diag(w[free])
    L = np.linalg.cholesky(G)
    Linv = np.linalg.inv(L)
    wf = w[free]
    omega0 = 0.0
    bound = 0.0
    for t in np.atleast_1d(times):
        A = assemble(mesh, coeffs, t).toarray()[np.ix_(free, free)]
        S = 0.5 * (A + A.T) - 0.5 * alpha * G
        Sm = S / np.sqrt(np.outer(wf, wf))
        lam_min = float(np.linalg.eigvalsh(Sm)[0])
        omega0 = max(omega0, -lam_min)
        bound = max(bound, float(np.linalg.norm(Linv @ A @ Linv.T, 2)))
    return DiscreteForm(mesh, coeffs, mass, alpha, bound, max(0.0, omega0))


def is_m_matrix(A: sp.spmatrix, tol: float = 0.0) -> bool:
    """Off-diagonal entries nonpositive and row sums of the diagonal part positive."""
    C = sp.csr_matrix(A, copy=True)
    C.setdiag(0.0)
    return bool(C.data.size == 0 or C.data.max() <= tol)


def mesh_rows(mesh: Mesh):
    """Rows ``(node_id, x[, y], boundary_tag)`` for the mesh dump."""
    tags = mesh.tags
    for i in range(mesh.n):
        yield (i, *mesh.nodes[i].tolist(), tags[i])
