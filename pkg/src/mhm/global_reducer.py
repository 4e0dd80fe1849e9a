"""Split, reduce and reconstruct: the global level of the two-level method.

The global unknowns are the multiplier coefficients ``L`` (one per skeleton
DoF) and one constant ``P[t]`` per element.  They solve the symmetric
saddle-point system

    [ A   B^T ] [L]   [E]
    [ B   0   ] [P] = [F]

scatter-added from the per-element blocks in ascending element order.  The
discrete field is ``u = P[t] + eta_f + sum_i L[i] eta_i`` inside element t.

Sign convention: the multiplier approximates the outward flux
``-kappa grad(u) . n`` with respect to each face's global normal, so the
second block row is the element balance tested in ``conservation_residuals``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import Discretization
from .errors import (ConfigurationError, ConsistencyError, FormulationError,
                     IncompleteReductionError, OracleScaleError)
from .femcore import (ProblemData, assemble_face_load, assemble_load, assemble_stiffness, dof_map,
                      lagrange_basis, load_quad_degree, mean_functional, triangle_rule)
from .local_solver import LocalProblem, LocalSolution
from .mesh import Mesh, Submesh, build_structured_mesh, refine_element
from .skeleton import SkeletonSpace, V0Space, build_skeleton_space, build_v0_space, count_local_multipliers

log = logging.getLogger(__name__)

DENSE_LIMIT = 5000
ORACLE_LIMIT = 20000
NULL_TOL = 1e-10
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Model:
    """Everything the global level needs to know about a discretized problem."""

    disc: Discretization
    mesh: Mesh
    skeleton: SkeletonSpace
    v0: V0Space
    data: ProblemData


def build_model(disc: Discretization, data: ProblemData) -> Model:
    disc.validate()
    mesh = build_structured_mesh(disc.n)
    return Model(disc, mesh, build_skeleton_space(mesh, disc.l, disc.m), build_v0_space(mesh), data)


# ---------------------------------------------------------------- split

def split_problem(model: Model, elements=None) -> list[LocalProblem]:
    """One LocalProblem per element (or per element of ``elements``)."""
    disc = model.disc
    if disc.k < disc.l + 1:
        raise ConfigurationError(f"k={disc.k} < l+1={disc.l + 1}")
    ts = range(model.mesh.n_elements) if elements is None else elements
    problems = []
    for t in ts:
        lm = count_local_multipliers(model.mesh, model.skeleton, t)
        problems.append(LocalProblem(
            t=int(t),
            submesh=refine_element(model.mesh, t, disc.r),
            data=model.data,
            k=disc.k,
            faces=model.mesh.element_faces[t].copy(),
            dofs=lm.dofs,
            signs=lm.signs,
        ))
    return problems


# ---------------------------------------------------------------- reduce

@dataclass(frozen=True, eq=False)
class GlobalSystem:
    matrix: sp.csr_matrix
    E: np.ndarray
    F: np.ndarray

    @property
    def n_multipliers(self) -> int:
        return len(self.E)

    @property
    def n_constants(self) -> int:
        return len(self.F)

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.E, self.F])


@dataclass(frozen=True, eq=False)
class GlobalSolution:
    L: np.ndarray
    P: np.ndarray
    residual: float = 0.0
    nullity: int = 0


def assemble_global_system(solutions, n_multipliers: int, n_elements: int) -> GlobalSystem:
    """Scatter-add element blocks in ascending element order."""
    by_t = {}
    for s in solutions:
        if s.t in by_t:
            raise ConsistencyError(f"duplicate contribution for element {s.t}")
        by_t[s.t] = s
    missing = sorted(set(range(n_elements)) - set(by_t))
    if missing:
        raise IncompleteReductionError(f"missing contributions for elements {missing[:10]}")
    if len(by_t) != n_elements:
        raise ConsistencyError("contribution for an element outside the mesh")

    rows, cols, vals = [], [], []
    E = np.zeros(n_multipliers)
    F = np.zeros(n_elements)
    for t in range(n_elements):
        s = by_t[t]
        d = np.asarray(s.dofs)
        if d.max(initial=-1) >= n_multipliers:
            raise ConsistencyError(f"element {t}: multiplier index out of range")
        rows.append(np.repeat(d, len(d)))
        cols.append(np.tile(d, len(d)))
        vals.append(np.asarray(s.A).ravel())
        p = n_multipliers + t
        rows += [d, np.full(len(d), p)]
        cols += [np.full(len(d), p), d]
        vals += [s.B, s.B]
        np.add.at(E, d, s.E)
        F[t] += s.F
    n = n_multipliers + n_elements
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return GlobalSystem(M.tocsr(), E, F)


def _ldl_solve(K: np.ndarray, b: np.ndarray):
    """Bunch-Kaufman LDL^T solve; returns (x, pivot eigenvalues)."""
    lu, d, perm = sla.ldl(K, lower=True)
    diag = np.diag(d).copy()
    off = np.diag(d, -1).copy()
    piv = sla.eigvalsh_tridiagonal(diag, off) if len(diag) > 1 else diag
    scale = np.abs(piv).max() if len(piv) else 0.0
    if scale == 0.0 or np.abs(piv).min() <= NULL_TOL * scale:
        return None, piv
    Lp = lu[perm]
    y = sla.solve_triangular(Lp, b[perm], lower=True, unit_diagonal=True)
    ab = np.zeros((3, len(diag)))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    z = sla.solve_banded((1, 1), ab, y)
    w = sla.solve_triangular(Lp.T, z, lower=False, unit_diagonal=True)
    x = np.empty_like(w)
    x[perm] = w
    return x, piv


def _min_norm_solve(K: np.ndarray, b: np.ndarray):
    w, V = sla.eigh(K)
    keep = np.abs(w) > NULL_TOL * np.abs(w).max()
    x = V[:, keep] @ ((V[:, keep].T @ b) / w[keep])
    return x, int((~keep).sum())


def solve_saddle_point(system: GlobalSystem, allow_singular: bool = True,
                       dense_limit: int = DENSE_LIMIT, context: str = ""):
    """Solve the symmetric indefinite global system.

    Returns ``(x, nullity)``.  Dense systems are factorized with Bunch-Kaufman
    LDL^T; a rank-deficient system (multiplier modes invisible to every
    local space) is reported and, if ``allow_singular``, solved in the
    minimum-norm sense.  Larger systems use a sparse LU and must be regular.
    """
    b = system.rhs
    n = len(b)
    if n <= dense_limit:
        K = system.matrix.toarray()
        x, piv = _ldl_solve(K, b)
        if x is not None:
            return x, 0
        x, nullity = _min_norm_solve(K, b)
        msg = (f"global saddle-point matrix is singular (nullity {nullity}){context}; "
               "the multiplier space is richer than the traces of the local spaces "
               "(raise k or r, or lower l or m)")
        if not allow_singular:
            raise FormulationError(msg)
        log.warning("%s; using the minimum-norm solution", msg)
        return x, nullity
    try:
        lu = spla.splu(system.matrix.tocsc())
    except RuntimeError as exc:
        raise FormulationError(f"global saddle-point matrix is singular{context}: {exc}") from exc
    return lu.solve(b), 0


def reduce_local_problems(solutions, skeleton: SkeletonSpace, v0: V0Space,
                          allow_singular: bool = True) -> GlobalSolution:
    system = assemble_global_system(list(solutions), skeleton.dimension, v0.dimension)
    ctx = f" (l={skeleton.l}, m={skeleton.m})"
    x, nullity = solve_saddle_point(system, allow_singular=allow_singular, context=ctx)
    b = system.rhs
    res = float(np.linalg.norm(system.matrix @ x - b))
    bnorm = float(np.linalg.norm(b))
    if res > RESIDUAL_TOL * max(bnorm, np.finfo(float).tiny) and res > 1e-300:
        raise FormulationError(f"global solve residual {res:.3e} exceeds tolerance (|rhs| = {bnorm:.3e}){ctx}")
    nL = skeleton.dimension
    return GlobalSolution(x[:nL], x[nL:], res / bnorm if bnorm else 0.0, nullity)


# ---------------------------------------------------------------- reconstruct

@dataclass(eq=False)
class ReconstructedSolution:
    """Piecewise field ``P[t] + sum_j coeff[t][j] phi_j`` on each element submesh."""

    mesh: Mesh
    r: int
    k: int
    constants: np.ndarray
    coefficients: list
    _subs: dict = field(default_factory=dict, repr=False)

    def submesh(self, t: int) -> Submesh:
        if t not in self._subs:
            sub = refine_element(self.mesh, t, self.r)
            self._subs[t] = (sub, dof_map(sub, self.k))
        return self._subs[t][0]

    def _dofmap(self, t: int):
        self.submesh(t)
        return self._subs[t][1]

    def locate_elements(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        V = self.mesh.vertices[self.mesh.elements]
        p0 = V[:, 0]
        J = np.stack([V[:, 1] - p0, V[:, 2] - p0], axis=2)
        Jinv = np.linalg.inv(J)
        lam = np.einsum("tij,ptj->pti", Jinv, pts[:, None, :] - p0[None])
        bary = np.concatenate([lam, 1.0 - lam.sum(axis=2, keepdims=True)], axis=2)
        inside = bary.min(axis=2) >= -1e-12
        if not inside.any(axis=1).all():
            raise ValueError("point outside the domain")
        return inside.argmax(axis=1)

    def evaluate_in_element(self, t: int, points) -> np.ndarray:
        sub = self.submesh(t)
        tri, ref = sub.locate(points)
        phi = lagrange_basis(self.k)(ref)
        cells = self._dofmap(t).cells[tri]
        coeff = self.coefficients[t]
        return self.constants[t] + np.einsum("pa,pa->p", phi, coeff[cells])

    def __call__(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        pts = np.stack([x.ravel(), y.ravel()], axis=1)
        owner = self.locate_elements(pts)
        out = np.empty(len(pts))
        for t in np.unique(owner):
            sel = owner == t
            out[sel] = self.evaluate_in_element(int(t), pts[sel])
        return out.reshape(x.shape)


def compute_solution(g: GlobalSolution, solutions, model: Model) -> ReconstructedSolution:
    by_t = {s.t: s for s in solutions}
    n_t = model.mesh.n_elements
    if len(g.P) != n_t or len(g.L) != model.skeleton.dimension or sorted(by_t) != list(range(n_t)):
        raise ConsistencyError("global solution and local solutions are indexed inconsistently")
    coeffs = []
    for t in range(n_t):
        s = by_t[t]
        coeffs.append(s.c + s.D.T @ g.L[np.asarray(s.dofs)])
    return ReconstructedSolution(model.mesh, model.disc.r, model.disc.k, np.asarray(g.P, float), coeffs)


def l2_error(u: ReconstructedSolution, exact, quad_degree: int | None = None) -> float:
    """L2 norm of ``u - exact`` by sub-triangle quadrature (exact to 2k+2)."""
    rule = triangle_rule(quad_degree if quad_degree is not None else 2 * u.k + 2)
    phi = lagrange_basis(u.k)(rule.points)
    total = 0.0
    for t in range(u.mesh.n_elements):
        sub = u.submesh(t)
        cells = u._dofmap(t).cells
        P = sub.vertices[sub.triangles]
        J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
        det = np.abs(J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0])
        X = P[:, 0][:, None, :] + np.einsum("sij,qj->sqi", J, rule.points)
        uh = u.constants[t] + np.einsum("qa,sa->sq", phi, u.coefficients[t][cells])
        ex = np.asarray(exact(X[..., 0], X[..., 1]), dtype=float)
        total += float(np.sum(det[:, None] * rule.weights[None, :] * (uh - ex) ** 2))
    return math.sqrt(total)


def conservation_residuals(L: np.ndarray, model: Model, source_quad_degree: int | None = None):
    """Per-element balance terms ``(flux, source, magnitude)``.

    ``flux[t]`` is the signed boundary integral of the multiplier field,
    evaluated face by face from ``L``.  ``source[t]`` integrates f over the
    element's submesh with the same rule the local loads use,
    so the discrete balance can be checked to round-off; ``magnitude[t]``
    integrates |f| with that rule and serves as the relative scale.
    """
    from .femcore import segment_rule

    mesh, skel, disc = model.mesh, model.skeleton, model.disc
    srule = segment_rule(skel.l + 2)
    face_int = np.zeros(mesh.n_faces)
    for e in range(mesh.n_faces):
        total = 0.0
        for q in range(skel.m):
            a, b = q / skel.m, (q + 1) / skel.m
            s = a + (b - a) * srule.points
            total += float(np.sum(srule.weights * skel.evaluate(L, e, s))) * (b - a)
        face_int[e] = total * skel.face_lengths[e]
    flux = np.einsum("ti,ti->t", mesh.element_face_signs, face_int[mesh.element_faces])

    trule = triangle_rule(source_quad_degree if source_quad_degree is not None else load_quad_degree(disc.k))
    source = np.zeros(mesh.n_elements)
    magnitude = np.zeros(mesh.n_elements)
    for t in range(mesh.n_elements):
        sub = refine_element(mesh, t, disc.r)
        P = sub.vertices[sub.triangles]
        J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
        det = np.abs(J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0])
        X = P[:, 0][:, None, :] + np.einsum("sij,qj->sqi", J, trule.points)
        fx = np.asarray(model.data.f(X[..., 0], X[..., 1]), dtype=float) * np.ones(X.shape[:2])
        source[t] = float(np.sum(det[:, None] * trule.weights * fx))
        magnitude[t] = float(np.sum(det[:, None] * trule.weights * np.abs(fx)))
    return flux, source, magnitude


# ---------------------------------------------------------------- oracle

@dataclass(frozen=True, eq=False)
class OracleSolution:
    L: np.ndarray
    P: np.ndarray
    fine: list
    nullity: int

    def reconstruction(self, model: Model) -> ReconstructedSolution:
        return ReconstructedSolution(model.mesh, model.disc.r, model.disc.k, self.P, self.fine)


def monolithic_oracle(model: Model, dense_limit: int = 6000) -> OracleSolution:
    """Solve the uncondensed hybrid system in one shot.

    Unknowns per element: zero-mean fine coefficients u_t and the multiplier
    mu_t of the zero-mean constraint; globally: multipliers L and constants P.

        A_t u_t + m_t mu_t + C_t^T L          = f_t
        m_t . u_t                             = 0
        sum_t C_t u_t            + G P        = 0
                          G^T L               = F

    with C_t rows (s psi_i, phi)_dK and G[i, t] = (s psi_i, 1)_dK.  No local
    elimination takes place, so agreement with the reduced pipeline checks
    the static condensation.
    """
    mesh, skel, disc = model.mesh, model.skeleton, model.disc
    basis = lagrange_basis(disc.k)
    n_t = mesh.n_elements
    nL = skel.dimension

    local = []
    offset = 0
    for t in range(n_t):
        sub = refine_element(mesh, t, disc.r)
        dm = dof_map(sub, disc.k)
        local.append((sub, dm, offset))
        offset += dm.size + 1
    n_fine = offset
    n = n_fine + nL + n_t
    if n > ORACLE_LIMIT:
        raise OracleScaleError(f"oracle system would have {n} unknowns (limit {ORACLE_LIMIT})")

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)

    def put(r, c, v):
        r, c, v = np.broadcast_arrays(np.asarray(r), np.asarray(c), np.asarray(v, float))
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())

    for t, (sub, dm, off) in enumerate(local):
        D = dm.size
        idx = off + np.arange(D)
        A = assemble_stiffness(sub, model.data, basis, dm)
        put(idx[:, None], idx[None, :], A)
        mvec = mean_functional(sub, basis, dm)
        put(idx, off + D, mvec)
        put(off + D, idx, mvec)
        rhs[idx] = assemble_load(sub, model.data.f, basis, dm)
        lm = count_local_multipliers(mesh, skel, t)
        for i, s, e in zip(lm.dofs, lm.signs, lm.faces):
            row = -assemble_face_load(sub, int(e), skel.basis(int(i)), int(s), basis, dm)  # (s psi, phi)
            li = n_fine + int(i)
            put(idx, li, row)
            put(li, idx, row)
            g = row.sum()
            put(li, n_fine + nL + t, g)
            put(n_fine + nL + t, li, g)
        rhs[n_fine + nL + t] = rhs[idx].sum()

    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    if n <= dense_limit:
        x, _, rank, _ = sla.lstsq(M.toarray(), rhs, cond=NULL_TOL, lapack_driver="gelsd")
        nullity = n - int(rank)
    else:
        x = spla.splu(M.tocsc()).solve(rhs)
        nullity = 0

    fine = [x[off: off + dm.size].copy() for _, dm, off in local]
    return OracleSolution(x[n_fine: n_fine + nL].copy(), x[n_fine + nL:].copy(), fine, nullity)


# ---------------------------------------------------------------- accounting and export

def dof_counts(model: Model) -> dict:
    """Dimensions of the global and local spaces.

    ``galerkin_equivalent_dofs`` counts P^k Lagrange nodes over the union of
    all submeshes with shared nodes counted once, i.e. the size of a
    single-level continuous Galerkin discretization on the same fine mesh.
    """
    mesh, disc = model.mesh, model.disc
    fine_total = 0
    coords = []
    for t in range(mesh.n_elements):
        dm = dof_map(refine_element(mesh, t, disc.r), disc.k)
        fine_total += dm.size
        coords.append(dm.coords)
    scale = disc.k * 2 ** disc.r * disc.n
    keys = np.rint(np.concatenate(coords) * scale).astype(np.int64)
    galerkin = len(np.unique(keys, axis=0))
    return {
        "L_l": int(model.skeleton.dimension),
        "N_t": int(mesh.n_elements),
        "N_e": int(mesh.n_faces),
        "fine_total": int(fine_total),
        "galerkin_equivalent_dofs": int(galerkin),
    }


def write_solution_vtk(u: ReconstructedSolution, path, exact=None) -> None:
    """Legacy ASCII VTK with one point value per submesh vertex (discontinuous)."""
    pts, cells, vals, exact_vals = [], [], [], []
    offset = 0
    for t in range(u.mesh.n_elements):
        sub = u.submesh(t)
        v = u.evaluate_in_element(t, sub.vertices)
        pts.append(sub.vertices)
        cells.append(sub.triangles + offset)
        vals.append(v)
        if exact is not None:
            exact_vals.append(exact(sub.vertices[:, 0], sub.vertices[:, 1]))
        offset += len(sub.vertices)
    pts = np.concatenate(pts)
    cells = np.concatenate(cells)
    vals = np.concatenate(vals)
    lines = ["# vtk DataFile Version 3.0", "mhm solution", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in pts]
    lines.append(f"CELLS {len(cells)} {4 * len(cells)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += ["5"] * len(cells)
    lines.append(f"POINT_DATA {len(pts)}")
    lines += ["SCALARS u double 1", "LOOKUP_TABLE default"]
    lines += [f"{v:.17g}" for v in vals]
    if exact is not None:
        lines += ["SCALARS u_exact double 1", "LOOKUP_TABLE default"]
        lines += [f"{v:.17g}" for v in np.concatenate(exact_vals)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_global_csv(g: GlobalSolution, path) -> None:
    """Two-block CSV: ``block,index,value`` rows for L then P."""
    with open(path, "w") as fh:
        fh.write("block,index,value\n")
        for name, vec in (("L", g.L), ("P", g.P)):
            for i, v in enumerate(vec):
                fh.write(f"{name},{i},{v:.17g}\n")
