"""The per-element solve: one factorization, 1 + N_I right-hand sides.

For element t with local multiplier functions s_i psi_i (s_i the orientation
sign), the zero-mean responses satisfy

    a(eta_f, w) = (f, w)_K            for all zero-mean w
    a(eta_i, w) = -(s_i psi_i, w)_dK  for all zero-mean w

and the element contributes to the global saddle-point system through

    A_t[j, i] = (s_j psi_j, eta_i)_dK   (= -a(eta_j, eta_i), symmetric)
    B_t[i]    = (s_i psi_i, 1)_dK
    E_t[j]    = -(s_j psi_j, eta_f)_dK
    F_t       = (f, 1)_K

With lambda = -kappa grad(u) . n this makes the second block row the
element balance  sum of signed face fluxes = integral of f.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import AssemblyError
from .femcore import (ProblemData, ZeroMeanFactorization, assemble_face_load, assemble_load,
                      assemble_stiffness, dof_map, lagrange_basis, mean_functional)
from .mesh import Submesh
from .skeleton import SkeletonSpace

SYMMETRY_TOL = 1e-9


class FactorizationCounter:
    """Thread-safe count of local factorizations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def reset(self) -> None:
        with self._lock:
            self._count = 0

    @property
    def value(self) -> int:
        with self._lock:
            return self._count


_COUNTER = FactorizationCounter()


def factorization_count() -> int:
    """Number of local factorizations performed since the last reset."""
    return _COUNTER.value


def reset_factorization_count() -> None:
    _COUNTER.reset()


def record_factorizations(n: int) -> None:
    """Credit factorizations performed elsewhere (e.g. in worker processes)."""
    _COUNTER.add(n)


@dataclass(frozen=True, eq=False)
class LocalProblem:
    """One element's share of the work: the pair (K_t, its faces)."""

    t: int
    submesh: Submesh
    data: ProblemData
    k: int
    faces: np.ndarray
    dofs: np.ndarray
    signs: np.ndarray

    @property
    def n_multipliers(self) -> int:
        return len(self.dofs)


@dataclass(frozen=True, eq=False)
class LocalSolution:
    """Coefficients of eta_f (``c``) and eta_i (rows of ``D``) plus global blocks."""

    t: int
    c: np.ndarray
    D: np.ndarray
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    F: float
    dofs: np.ndarray
    signs: np.ndarray
    factorization: ZeroMeanFactorization | None = field(default=None, repr=False)

    def without_factorization(self) -> "LocalSolution":
        if self.factorization is None:
            return self
        return LocalSolution(self.t, self.c, self.D, self.A, self.B, self.E, self.F, self.dofs, self.signs)


def face_loads(problem: LocalProblem, skeleton: SkeletonSpace, dofs=None) -> np.ndarray:
    """Rows -(s_i psi_i, phi)_dK for each local multiplier, shape (N_I, D)."""
    basis = lagrange_basis(problem.k)
    dofs = dofs or dof_map(problem.submesh, problem.k)
    rows = [assemble_face_load(problem.submesh, int(e), skeleton.basis(int(i)), int(s), basis, dofs)
            for i, s, e in zip(problem.dofs, problem.signs, _dof_faces(problem, skeleton))]
    return np.array(rows).reshape(len(rows), dofs.size)


def _dof_faces(problem: LocalProblem, skeleton: SkeletonSpace):
    return [skeleton.locate(int(i))[0] for i in problem.dofs]


def solve_local_problem(problem: LocalProblem, skeleton: SkeletonSpace,
                        keep_factorization: bool = False) -> LocalSolution:
    """Assemble, factorize once and solve all local subproblems of one element."""
    basis = lagrange_basis(problem.k)
    sub = problem.submesh
    dofs = dof_map(sub, problem.k)
    A = assemble_stiffness(sub, problem.data, basis, dofs)
    mean = mean_functional(sub, basis, dofs)
    try:
        fact = ZeroMeanFactorization(A, mean)
    except AssemblyError as exc:
        raise AssemblyError(f"element {problem.t}: {exc}") from exc
    _COUNTER.add(1)

    load = assemble_load(sub, problem.data.f, basis, dofs)
    N = face_loads(problem, skeleton, dofs)
    sol = fact.solve(np.column_stack([load, N.T]))
    c = sol[:, 0]
    D = sol[:, 1:].T.copy()

    At = -N @ D.T
    scale = max(np.abs(At).max(), np.finfo(float).tiny)
    asym = np.abs(At - At.T).max() / scale
    if asym > SYMMETRY_TOL:
        raise AssemblyError(f"element {problem.t}: local block asymmetric (rel. {asym:.2e})")
    Bt = -N.sum(axis=1)
    Et = N @ c
    Ft = float(load.sum())
    return LocalSolution(
        t=problem.t, c=c, D=D, A=At, B=Bt, E=Et, F=Ft,
        dofs=np.asarray(problem.dofs), signs=np.asarray(problem.signs),
        factorization=fact if keep_factorization else None,
    )
