"""Time-periodic coefficient fields, the logistic weight and its space-time sets."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

from .errors import PeriodicityError, RejectedInputError

__all__ = [
    "Field",
    "CoefficientSet",
    "Weight",
    "SpaceTimeSet",
    "laplacian_coefficients",
    "sample_field",
    "truncate_weight",
    "classify_sets",
    "periodic_path_exists",
    "moving_window_weight",
    "set_rows",
]

logger = logging.getLogger(__name__)

Field = Union[float, Callable]


def evaluate(f: Field, x, y, t) -> np.ndarray:
    """Evaluate a field given as a constant or as ``f(x, y, t)``."""
    x = np.asarray(x, dtype=float)
    if callable(f):
        val = f(x, np.asarray(y, dtype=float), t)
        return np.broadcast_to(np.asarray(val, dtype=float), x.shape).copy()
    return np.full(x.shape, float(f))


def _is_zero(f: Field) -> bool:
    return not callable(f) and float(f) == 0.0


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients of the operator, all T-periodic in time.

    ``a[j][k]`` is the diffusion tensor, ``drift[j]`` the lower-order term
    inside the divergence, ``convection[k]`` the transport term, ``c0`` the
    zero-order term and ``beta0`` the Robin coefficient.  Each entry is a
    constant or a callable ``f(x, y, t)`` (``y`` is zero in 1D).
    ``alpha_bounds`` records (alpha0, alpha1) when the diffusion is
    ``alpha(t)`` times the identity.
    """

    T: float = 1.0
    dim: int = 1
    a: tuple = None
    drift: tuple = None
    convection: tuple = None
    c0: Field = 0.0
    beta0: Field = 0.0
    alpha_bounds: tuple = None

    def __post_init__(self):
        if self.T <= 0:
            raise RejectedInputError("period must be positive")
        if self.a is None:
            eye = tuple(tuple(1.0 if j == k else 0.0 for k in range(self.dim)) for j in range(self.dim))
            object.__setattr__(self, "a", eye)
        if self.drift is None:
            object.__setattr__(self, "drift", (0.0,) * self.dim)
        if self.convection is None:
            object.__setattr__(self, "convection", (0.0,) * self.dim)

    def diffusion(self, j, k, x, y, t):
        return evaluate(self.a[j][k], x, y, t)

    def drift_at(self, j, x, y, t):
        return evaluate(self.drift[j], x, y, t)

    def convection_at(self, k, x, y, t):
        return evaluate(self.convection[k], x, y, t)

    def c0_values(self, x, y, t):
        return evaluate(self.c0, x, y, t)

    def beta0_values(self, x, y, t):
        return evaluate(self.beta0, x, y, t)

    @property
    def has_drift(self) -> bool:
        return not all(_is_zero(f) for f in self.drift)

    @property
    def has_convection(self) -> bool:
        return not all(_is_zero(f) for f in self.convection)

    @property
    def has_cross_diffusion(self) -> bool:
        return self.dim == 2 and not (_is_zero(self.a[0][1]) and _is_zero(self.a[1][0]))

    @property
    def is_symmetric_nonnegative(self) -> bool:
        """True when no first-order terms and ``c0`` is a nonnegative constant."""
        if self.has_drift or self.has_convection:
            return False
        return not callable(self.c0) and float(self.c0) >= 0.0

    def fields(self) -> dict:
        out = {"c0": self.c0, "beta0": self.beta0}
        for j in range(self.dim):
            out[f"drift{j + 1}"] = self.drift[j]
            out[f"convection{j + 1}"] = self.convection[j]
            for k in range(self.dim):
                out[f"a{j + 1}{k + 1}"] = self.a[j][k]
        return out

    def check_periodic(self, x, y, times, tol: float = 1e-12):
        """Raise PeriodicityError when a field differs at ``t`` and ``t + T``."""
        for name, f in self.fields().items():
            _check_field_periodic(name, f, x, y, times, self.T, tol)


def _check_field_periodic(name, f, x, y, times, T, tol):
    if not callable(f):
        return
    for t in np.atleast_1d(times):
        v0 = evaluate(f, x, y, t)
        v1 = evaluate(f, x, y, t + T)
        scale = 1.0 + np.max(np.abs(v0)) if v0.size else 1.0
        if not np.all(np.isfinite(v0)):
            raise PeriodicityError(f"field {name} is not finite at t={t}", field=name)
        if np.max(np.abs(v1 - v0), initial=0.0) > tol * scale:
            raise PeriodicityError(f"field {name} is not T-periodic (t={t})", field=name)


def laplacian_coefficients(dim: int = 1, T: float = 1.0, c0: Field = 0.0, beta0: Field = 0.0) -> CoefficientSet:
    return CoefficientSet(T=T, dim=dim, c0=c0, beta0=beta0)


def sample_field(f: Field, mesh, times: np.ndarray) -> np.ndarray:
    """Lattice of values, shape ``(len(times), n)``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out = np.empty((times.size, mesh.n))
    for k, t in enumerate(times):
        out[k] = evaluate(f, mesh.x, mesh.y, t)
    return out


@dataclass(eq=False)
class Weight:
    """Nonnegative weight sampled on the node x time lattice.

    ``values`` has shape ``(K + 1, n)`` for times ``k T / K``; the last layer
    repeats the first.  ``threshold_eps`` defaults to ``1e-10 * max(b)``.
    """

    values: np.ndarray
    T: float
    threshold_eps: float = None
    empty_support: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] < 3:
            raise RejectedInputError("weight lattice must have shape (K + 1, n) with K >= 2")
        if np.any(self.values < 0):
            raise RejectedInputError("weight must be nonnegative")
        if self.threshold_eps is None:
            self.threshold_eps = 1e-10 * float(self.values.max(initial=0.0))

    @classmethod
    def from_field(cls, b: Field, mesh, K: int, T: float, threshold_eps: float = None) -> "Weight":
        times = np.linspace(0.0, T, K + 1)
        vals = sample_field(b, mesh, times)
        vals[-1] = vals[0]
        return cls(vals, T, threshold_eps)

    @property
    def K(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def scaled(self, gamma: float) -> "Weight":
        return Weight(gamma * self.values, self.T, gamma * self.threshold_eps, self.empty_support)

    def min_on_support(self) -> float:
        pos = self.values[self.values > self.threshold_eps]
        return float(pos.min()) if pos.size else 0.0


@dataclass(eq=False)
class SpaceTimeSet:
    """Boolean mask over the lattice, shape ``(K, n)`` (time layers 0..K-1)."""

    mask: np.ndarray
    label: str

    def count(self) -> int:
        return int(self.mask.sum())


def truncate_weight(w: Weight, mesh, delta: float) -> Weight:
    """Zero the weight at nodes closer than ``delta`` to the Dirichlet boundary.

    Nodes at distance exactly ``delta`` keep their value.  Robin sides do
    not cut the support.  When no node survives the result carries
    ``empty_support=True``.
    """
    if delta < 0:
        raise RejectedInputError("delta must be nonnegative")
    if delta == 0:
        return Weight(w.values.copy(), w.T, w.threshold_eps, w.empty_support)
    dist = mesh.dirichlet_distance()
    keep = dist >= delta - 1e-12 * max(1.0, delta)
    vals = w.values * keep[None, :]
    empty = not bool(np.any(vals > w.threshold_eps)) and bool(np.any(w.values > w.threshold_eps))
    if not keep.any():
        empty = True
    if empty:
        logger.warning("weight truncation at delta=%g leaves an empty support", delta)
    return Weight(vals, w.T, w.threshold_eps, empty)


def _neighbour_offsets(mesh):
    if mesh.dim == 1:
        return [(-1,), (0,), (1,)]
    return [(di, dj) for dj in (-1, 0, 1) for di in (-1, 0, 1)]


def _neighbour_table(mesh):
    """(n, m) array of neighbour node indices (king moves incl. self); -1 if outside."""
    gi = mesh.grid_indices()
    offs = np.array(_neighbour_offsets(mesh))
    shape = np.array(mesh.shape)
    pos = gi[:, None, :] + offs[None, :, :]
    inside = np.all((pos >= 0) & (pos < shape), axis=2)
    if mesh.dim == 1:
        flat = pos[..., 0]
    else:
        flat = pos[..., 1] * mesh.shape[0] + pos[..., 0]
    return np.where(inside, flat, -1)


def classify_sets(w: Weight, mesh) -> tuple:
    """Zero set Q0 and positivity set Qb on the lattice.

    A point belongs to Qb when ``b > eps`` at every lattice point of its full
    space-time neighbourhood (3 x 3 in 1D, 3 x 3 x 3 in 2D, time periodic).
    Q0 uses ``b <= eps`` in the same neighbourhood.  Domain-boundary nodes
    have a truncated neighbourhood.
    """
    vals = w.values[:-1]
    eps = w.threshold_eps
    K = vals.shape[0]
    pos = vals > eps
    zero = ~pos
    nb = _neighbour_table(mesh)
    valid = nb >= 0
    nbi = np.where(valid, nb, 0)

    def spatial_all(m):
        g = m[:, nbi]
        g = np.where(valid[None, :, :], g, True)
        return g.all(axis=2)

    def time_all(m):
        return m & np.roll(m, 1, axis=0) & np.roll(m, -1, axis=0)

    qb = time_all(spatial_all(pos))
    q0 = time_all(spatial_all(zero))
    # Qb is open in the domain: boundary nodes are excluded
    qb[:, ~mesh.interior_mask] = False
    assert K == qb.shape[0]
    return SpaceTimeSet(q0, "Q0"), SpaceTimeSet(qb, "Qb")


def periodic_path_exists(q0: SpaceTimeSet, mesh) -> tuple:
    """Search a T-periodic path inside Q0 on the time-layered graph.

    Edges join a node in layer ``k`` to itself or a spatial neighbour in
    layer ``k + 1`` (king moves in 2D); layer ``K`` wraps to layer 0.
    Returns ``(found, path)`` where ``path[k]`` is the node at layer ``k``
    (``path[K] == path[0]``), or ``(False, None)``.
    """
    mask = np.asarray(q0.mask, dtype=bool)
    K, n = mask.shape
    nb = _neighbour_table(mesh)
    # candidate start nodes: those in layer 0; forward reachability sets per layer
    # run one BFS per connected layer-0 start component, cheap at desk scale
    starts = np.nonzero(mask[0])[0]
    if starts.size == 0:
        return False, None
    for s in starts:
        path = _layered_bfs(mask, nb, int(s))
        if path is not None:
            return True, path
    return False, None


def _layered_bfs(mask, nb, start):
    K, n = mask.shape
    parent = [dict() for _ in range(K + 1)]
    frontier = deque([start])
    parent[0][start] = -1
    for k in range(K):
        nxt_layer = (k + 1) % K
        new = []
        for node in frontier:
            for m in nb[node]:
                if m < 0 or not mask[nxt_layer, m] or m in parent[k + 1]:
                    continue
                parent[k + 1][m] = node
                new.append(m)
        frontier = deque(new)
        if not frontier:
            return None
    if start not in parent[K]:
        return None
    path = [start]
    node = start
    for k in range(K, 0, -1):
        node = parent[k][node]
        path.append(node)
    path.reverse()
    return np.array(path, dtype=int)


def moving_window_weight(
    center: Callable[[float], float], radius: float, ramp: float = 0.0
) -> Callable:
    """Weight that vanishes inside ``|x - center(t)| < radius`` and equals one outside.

    With ``ramp > 0`` the transition is a C1 quadratic-then-flat profile of
    width ``ramp`` starting at the window edge.
    """

    def b(x, y, t):
        d = np.abs(np.asarray(x) - center(t)) - radius
        if ramp <= 0:
            return (d >= 0).astype(float)
        s = np.clip(d / ramp, 0.0, 1.0)
        return np.where(s < 0.5, 2 * s**2, 1 - 2 * (1 - s) ** 2)

    return b


def set_rows(q0: SpaceTimeSet, qb: SpaceTimeSet):
    """Rows ``(node_id, time_index, label)`` for the set dump."""
    for s in (q0, qb):
        ks, ns = np.nonzero(s.mask)
        order = np.lexsort((ks, ns))
        for k, i in zip(ks[order], ns[order]):
            yield int(i), int(k), s.label
