"""Reference-element machinery and local assembly kernels.

Lagrange P^k bases on the reference triangle (0,0), (1,0), (0,1), Gauss rules
on triangles (collapsed Gauss-Jacobi) and segments, and dense assembly of the
Darcy form, source loads and multiplier face loads on a submesh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.special import roots_jacobi

from .errors import AssemblyError, DataError, InvalidPairError
from .mesh import Submesh


# ---------------------------------------------------------------- quadrature

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def segment_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for polynomials of ``degree``."""
    n = max(1, math.ceil((degree + 1) / 2))
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, degree)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Collapsed Gauss rule on the reference triangle, exact to ``degree``.

    Uses the Duffy map x = u (1 - v), y = v; the (1 - v) Jacobian is absorbed
    by a Gauss-Jacobi(1, 0) rule in v.
    """
    n = max(1, math.ceil((degree + 1) / 2))
    u, wu = np.polynomial.legendre.leggauss(n)
    u, wu = 0.5 * (u + 1.0), 0.5 * wu
    v, wv = roots_jacobi(n, 1.0, 0.0)
    v, wv = 0.5 * (v + 1.0), 0.25 * wv
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    pts = np.stack([(U * (1.0 - V)).ravel(), V.ravel()], axis=1)
    return QuadratureRule(pts, W.ravel(), degree)


# ---------------------------------------------------------------- basis

class ReferenceBasis:
    """Lagrange basis of degree ``k`` on the reference triangle.

    Nodes are the lattice points ``(p/k, q/k)``, ``p + q <= k``, ordered with
    ``q`` outermost.  Functions are expanded in monomials through the inverse
    Vandermonde matrix.
    """

    def __init__(self, degree: int):
        if degree < 1:
            raise ValueError("Lagrange degree must be >= 1")
        self.degree = k = int(degree)
        self.lattice = np.array([(p, q) for q in range(k + 1) for p in range(k + 1 - q)], dtype=np.int64)
        self.nodes = self.lattice / k
        self.exponents = np.array([(a, b) for s in range(k + 1) for b in range(s + 1) for a in [s - b]])
        V = self._monomials(self.nodes)
        self.coeffs = np.linalg.inv(V)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def _monomials(self, pts):
        pts = np.atleast_2d(pts)
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        return pts[:, :1] ** a * pts[:, 1:2] ** b

    def __call__(self, pts) -> np.ndarray:
        """Values, shape (n_points, n_basis)."""
        return self._monomials(pts) @ self.coeffs

    def grad(self, pts) -> np.ndarray:
        """Reference gradients, shape (n_points, n_basis, 2)."""
        pts = np.atleast_2d(pts)
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        x, y = pts[:, :1], pts[:, 1:2]
        with np.errstate(divide="ignore", invalid="ignore"):
            dx = np.where(a > 0, a * x ** np.maximum(a - 1, 0) * y ** b, 0.0)
            dy = np.where(b > 0, b * x ** a * y ** np.maximum(b - 1, 0), 0.0)
        return np.stack([dx @ self.coeffs, dy @ self.coeffs], axis=2)


@lru_cache(maxsize=None)
def lagrange_basis(degree: int) -> ReferenceBasis:
    return ReferenceBasis(degree)


# ---------------------------------------------------------------- problem data

@dataclass(frozen=True)
class ProblemData:
    """Diffusion coefficient, source and optional exact solution.

    All callables take coordinate arrays ``(x, y)`` and return arrays of the
    same shape.  They must be picklable (module-level functions or
    ``functools.partial`` of them) to travel to worker processes.
    """

    kappa: Callable
    f: Callable
    exact: Callable | None = None
    name: str = "custom"


def unit_kappa(x, y):
    return np.ones_like(np.asarray(x, dtype=float))


def zero_function(x, y):
    return np.zeros_like(np.asarray(x, dtype=float))


def one_function(x, y):
    return np.ones_like(np.asarray(x, dtype=float))


def sine_solution(x, y):
    return np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)


def sine_source(x, y):
    return 8 * np.pi**2 * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)


def bump_solution(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def bump_source(x, y):
    return 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)


def scaled(fn, factor, x, y):
    """``factor * fn(x, y)``; use via ``functools.partial(scaled, fn, factor)``."""
    return factor * fn(x, y)


PROBLEMS = {
    "sine": ProblemData(unit_kappa, sine_source, sine_solution, "sine"),
    # single positive bump: no symmetry forces face fluxes or element means to vanish
    "bump": ProblemData(unit_kappa, bump_source, bump_solution, "bump"),
    "zero": ProblemData(unit_kappa, zero_function, zero_function, "zero"),
}


def get_problem(name: str) -> ProblemData:
    try:
        return PROBLEMS[name]
    except KeyError:
        raise DataError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}") from None


# ---------------------------------------------------------------- local dofs

@dataclass(frozen=True, eq=False)
class DofMap:
    """Continuous P^k numbering of a submesh.

    ``coords`` are node positions, ``cells[s]`` the dofs of sub-triangle ``s``
    in reference-basis order.  Nodes are keyed by integer coordinates on the
    parent lattice of resolution ``k * 2**level`` and numbered
    lexicographically (second coordinate outermost).
    """

    coords: np.ndarray
    cells: np.ndarray
    keys: np.ndarray

    @property
    def size(self) -> int:
        return len(self.coords)


def dof_map(sub: Submesh, k: int) -> DofMap:
    basis = lagrange_basis(k)
    L = sub.lattice[sub.triangles]  # (S, 3, 2)
    p, q = basis.lattice[:, 0], basis.lattice[:, 1]
    node_keys = (k * L[:, None, 0, :]
                 + p[None, :, None] * (L[:, None, 1, :] - L[:, None, 0, :])
                 + q[None, :, None] * (L[:, None, 2, :] - L[:, None, 0, :]))
    flat = node_keys.reshape(-1, 2)
    M = k * sub.divisions
    scalar = flat[:, 1] * (M + 1) + flat[:, 0]
    uniq, inverse = np.unique(scalar, return_inverse=True)
    keys = np.stack([uniq % (M + 1), uniq // (M + 1)], axis=1)
    p0, p1, p2 = sub.parent_vertices
    coords = p0 + np.outer(keys[:, 0] / M, p1 - p0) + np.outer(keys[:, 1] / M, p2 - p0)
    cells = inverse.reshape(len(sub.triangles), basis.size)
    return DofMap(coords, cells, keys)


def _geometry(sub: Submesh):
    P = sub.vertices[sub.triangles]
    J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)  # columns are edges
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return P[:, 0], J, det


def _physical_points(sub: Submesh, ref_pts):
    origin, J, _ = _geometry(sub)
    return origin[:, None, :] + np.einsum("sij,qj->sqi", J, ref_pts)


# ---------------------------------------------------------------- assembly

# f*phi is not a polynomial for general f; 2k alone leaves O(1e-3) relative
# quadrature error in the sine load on a 0.25-wide sub-triangle, 2k+8 ~1e-11
LOAD_EXTRA_DEGREE = 8

def assemble_stiffness(sub: Submesh, data: ProblemData, basis: ReferenceBasis,
                       dofs: DofMap | None = None, quad_degree: int | None = None) -> np.ndarray:
    """Dense matrix of (kappa grad phi_j, grad phi_i) over the submesh."""
    k = basis.degree
    dofs = dofs or dof_map(sub, k)
    rule = triangle_rule(quad_degree if quad_degree is not None else 2 * k)
    origin, J, det = _geometry(sub)
    X = _physical_points(sub, rule.points)
    kap = np.asarray(data.kappa(X[..., 0], X[..., 1]), dtype=float)
    if np.any(~(kap > 0)):
        raise DataError("diffusion coefficient must be positive at all quadrature points")
    Jinv_T = np.linalg.inv(J).transpose(0, 2, 1)
    G = np.einsum("sij,qbj->sqbi", Jinv_T, basis.grad(rule.points))
    w = rule.weights[None, :] * np.abs(det)[:, None] * kap
    local = np.einsum("sq,sqai,sqbi->sab", w, G, G)
    D = dofs.size
    A = np.zeros((D, D))
    rows = np.repeat(dofs.cells[:, :, None], basis.size, axis=2)
    cols = np.repeat(dofs.cells[:, None, :], basis.size, axis=1)
    np.add.at(A, (rows, cols), local)
    return A


def load_quad_degree(k: int) -> int:
    """Exactness of the source rule: 2k plus a margin for non-polynomial f."""
    return 2 * k + LOAD_EXTRA_DEGREE


def assemble_load(sub: Submesh, f: Callable, basis: ReferenceBasis,
                  dofs: DofMap | None = None, quad_degree: int | None = None) -> np.ndarray:
    """Vector of (f, phi_j) over the submesh."""
    k = basis.degree
    dofs = dofs or dof_map(sub, k)
    rule = triangle_rule(quad_degree if quad_degree is not None else load_quad_degree(k))
    _, _, det = _geometry(sub)
    X = _physical_points(sub, rule.points)
    fx = np.asarray(f(X[..., 0], X[..., 1]), dtype=float) * np.ones(X.shape[:2])
    phi = basis(rule.points)
    local = np.einsum("sq,q,qa->sa", fx * np.abs(det)[:, None], rule.weights, phi)
    b = np.zeros(dofs.size)
    np.add.at(b, dofs.cells, local)
    return b


def mean_functional(sub: Submesh, basis: ReferenceBasis, dofs: DofMap | None = None) -> np.ndarray:
    """Row vector of integrals of the basis functions (so m @ u = integral of u)."""
    return assemble_load(sub, one_function, basis, dofs, quad_degree=basis.degree)


def assemble_face_load(sub: Submesh, e: int, psi, sign: int, basis: ReferenceBasis,
                       dofs: DofMap | None = None, quad_degree: int | None = None) -> np.ndarray:
    """Vector of -sign * (psi, phi_j) on parent face ``e``.

    ``psi`` is a callable of the face parameter s in [0, 1] (running from the
    lower to the higher global vertex) with attributes ``support`` (s0, s1)
    and ``degree``.  The face is integrated piecewise over the intersection of
    the submesh sub-edges with the support of ``psi``.
    """
    hits = np.flatnonzero(sub.parent_faces == e)
    if len(hits) == 0:
        raise InvalidPairError(f"face {e} is not on the boundary of element {sub.parent}")
    i = int(hits[0])
    k = basis.degree
    dofs = dofs or dof_map(sub, k)
    rule = segment_rule(quad_degree if quad_degree is not None else getattr(psi, "degree", 0) + k + 1)
    A, B = sub.face_endpoints(i)
    length = float(np.hypot(*(B - A)))
    lo, hi = getattr(psi, "support", (0.0, 1.0))
    origin, J, _ = _geometry(sub)

    out = np.zeros(dofs.size)
    for piece in sub.trace[i]:
        a, b = max(piece.s0, lo), min(piece.s1, hi)
        if b <= a:
            continue
        s = a + (b - a) * rule.points
        X = A + np.outer(s, B - A)
        tri = piece.triangle
        ref = np.linalg.solve(J[tri], (X - origin[tri]).T).T
        vals = psi(s) * rule.weights * (b - a) * length
        out_local = vals @ basis(ref)
        np.add.at(out, dofs.cells[tri], out_local)
    return -sign * out


# ---------------------------------------------------------------- zero-mean solves

class ZeroMeanFactorization:
    """Factorization of the bordered system [[A, m^T], [m, 0]].

    Solving with right-hand side ``[r; 0]`` yields the unique ``u`` with
    ``m @ u = 0`` and ``w @ A @ u = w @ r`` for every ``w`` with ``m @ w = 0``.
    """

    def __init__(self, A: np.ndarray, mean: np.ndarray, rcond: float = 1e-13):
        D = len(mean)
        K = np.zeros((D + 1, D + 1))
        K[:D, :D] = A
        K[D, :D] = mean
        K[:D, D] = mean
        self.size = D
        self.lu, self.piv = sla.lu_factor(K, check_finite=True)
        pivots = np.abs(np.diag(self.lu))
        if pivots.min() <= rcond * pivots.max():
            raise AssemblyError("bordered zero-mean system is singular")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        vec = rhs.ndim == 1
        R = rhs[:, None] if vec else rhs
        ext = np.vstack([R, np.zeros((1, R.shape[1]))])
        sol = sla.lu_solve((self.lu, self.piv), ext)[: self.size]
        return sol[:, 0] if vec else sol


def bordered_zero_mean_system(A: np.ndarray, mean: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``A u = rhs`` restricted to zero-mean test functions with mean(u) = 0."""
    return ZeroMeanFactorization(A, mean).solve(rhs)


__all__ = [
    "QuadratureRule", "segment_rule", "triangle_rule", "ReferenceBasis",
    "lagrange_basis", "ProblemData", "PROBLEMS", "get_problem", "DofMap", "dof_map",
    "assemble_stiffness", "assemble_load", "mean_functional", "assemble_face_load",
    "ZeroMeanFactorization", "bordered_zero_mean_system",
]
