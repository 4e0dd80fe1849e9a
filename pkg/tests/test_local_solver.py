import functools

import numpy as np
import pytest

from mhm.config import Discretization
from mhm.errors import AssemblyError
from mhm.femcore import (ProblemData, ZeroMeanFactorization, assemble_stiffness, dof_map,
                         get_problem, lagrange_basis, mean_functional, scaled, sine_source,
                         triangle_rule, unit_kappa, zero_function)
from mhm.global_reducer import build_model, split_problem
from mhm.local_solver import (LocalProblem, face_loads, factorization_count,
                              reset_factorization_count, solve_local_problem)

from conftest import cached_model


def _mass(sub, k):
    basis = lagrange_basis(k)
    dm = dof_map(sub, k)
    rule = triangle_rule(2 * k)
    phi = basis(rule.points)
    M = np.zeros((dm.size, dm.size))
    for s, cell in enumerate(dm.cells):
        P = sub.vertices[sub.triangles[s]]
        det = abs(np.linalg.det(np.column_stack([P[1] - P[0], P[2] - P[0]])))
        M[np.ix_(cell, cell)] += det * (phi.T * rule.weights) @ phi
    return M


def _null_space_solve(A, m, rhs):
    """Independent zero-mean solve: restrict to an explicit basis of ker(m)."""
    q, _ = np.linalg.qr(np.column_stack([m, np.eye(len(m))]))
    Z = q[:, 1:]
    return Z @ np.linalg.solve(Z.T @ A @ Z, Z.T @ rhs)


def _scratch_face_rows(problem, mesh):
    """Closed-form face loads for l=0, m=1, k=2: Simpson weights on each sub-edge."""
    dm = dof_map(problem.submesh, 2)
    rows = []
    for d, s, e in zip(problem.dofs, problem.signs, problem.faces):
        lo, hi = mesh.faces[e]
        A, B = mesh.vertices[lo], mesh.vertices[hi]
        length = np.hypot(*(B - A))
        psi = 1.0 / np.sqrt(length)
        row = np.zeros(dm.size)
        N = problem.submesh.divisions
        for a in range(N):
            p0, p1 = A + a / N * (B - A), A + (a + 1) / N * (B - A)
            for x, w in ((p0, 1 / 6), ((p0 + p1) / 2, 2 / 3), (p1, 1 / 6)):
                j = np.flatnonzero(np.all(np.isclose(dm.coords, x, atol=1e-13), axis=1))[0]
                row[j] += w * length / N
        rows.append(-s * psi * row)
    return np.array(rows)


def _scratch_load(problem):
    basis = lagrange_basis(2)
    dm = dof_map(problem.submesh, 2)
    rule = triangle_rule(24)
    b = np.zeros(dm.size)
    sub = problem.submesh
    for s, cell in enumerate(dm.cells):
        P = sub.vertices[sub.triangles[s]]
        J = np.column_stack([P[1] - P[0], P[2] - P[0]])
        X = P[0] + rule.points @ J.T
        b[cell] += abs(np.linalg.det(J)) * (rule.weights * sine_source(X[:, 0], X[:, 1])) @ basis(rule.points)
    return b


@pytest.mark.parametrize("t", range(8))
def test_matches_from_scratch_oracle(t):
    model = cached_model(2, 1, 0, 1)
    problem = split_problem(model, [t])[0]
    sol = solve_local_problem(problem, model.skeleton)
    sub = problem.submesh
    basis = lagrange_basis(2)
    dm = dof_map(sub, 2)
    A = assemble_stiffness(sub, model.data, basis, dm, quad_degree=8)
    m = mean_functional(sub, basis, dm)
    c = _null_space_solve(A, m, _scratch_load(problem))
    D = _null_space_solve(A, m, _scratch_face_rows(problem, model.mesh).T).T
    assert np.allclose(sol.c, c, atol=1e-9 * np.abs(c).max())
    assert np.allclose(sol.D, D, atol=1e-9 * np.abs(D).max())


@pytest.fixture(scope="module")
def solved():
    model = cached_model(2, 1, 1, 2)
    problem = split_problem(model, [5])[0]
    return model, problem, solve_local_problem(problem, model.skeleton, keep_factorization=True)


def test_zero_mean_and_residual(solved, rng):
    model, problem, sol = solved
    sub = problem.submesh
    basis = lagrange_basis(2)
    dm = dof_map(sub, 2)
    A = assemble_stiffness(sub, model.data, basis, dm)
    m = mean_functional(sub, basis, dm)
    M = _mass(sub, 2)
    N = face_loads(problem, model.skeleton, dm)
    from mhm.femcore import assemble_load
    load = assemble_load(sub, model.data.f, basis, dm)
    q, _ = np.linalg.qr(np.column_stack([m, np.eye(len(m))]))
    W = q[:, 1:] @ rng.standard_normal((len(m) - 1, 20))
    for eta, rhs in [(sol.c, load)] + [(sol.D[i], N[i]) for i in range(len(sol.D))]:
        l2 = np.sqrt(eta @ M @ eta)
        assert abs(m @ eta) <= 1e-10 * l2
        res = W.T @ (A @ eta) - W.T @ rhs
        scale = np.sqrt(eta @ A @ eta) * np.sqrt(np.einsum("ij,ik,kj->j", W, A, W)) + np.abs(W.T @ rhs)
        assert np.all(np.abs(res) <= 1e-9 * (scale + np.linalg.norm(W, axis=0)))


def test_block_consistency(solved):
    model, problem, sol = solved
    sub = problem.submesh
    A = assemble_stiffness(sub, model.data, lagrange_basis(2))
    volumetric = -sol.D @ A @ sol.D.T
    assert np.allclose(sol.A, volumetric, atol=1e-8 * np.abs(volumetric).max())
    assert np.allclose(sol.A, sol.A.T, atol=1e-9 * np.abs(sol.A).max())


def test_multi_rhs_matches_refactorized(solved):
    model, problem, sol = solved
    sub = problem.submesh
    basis = lagrange_basis(2)
    dm = dof_map(sub, 2)
    N = face_loads(problem, model.skeleton, dm)
    for i in range(len(N)):
        A = assemble_stiffness(sub, model.data, basis, dm)
        fresh = ZeroMeanFactorization(A, mean_functional(sub, basis, dm))
        one = fresh.solve(N[i])
        assert np.allclose(one, sol.D[i], atol=1e-12 * max(1.0, np.abs(one).max()), rtol=0)
    assert sol.factorization is not None
    assert sol.without_factorization().factorization is None


def test_zero_source():
    model = cached_model(2, 1, 0, 1, problem="zero")
    ref = cached_model(2, 1, 0, 1)
    for p, q in zip(split_problem(model), split_problem(ref)):
        s0 = solve_local_problem(p, model.skeleton)
        s1 = solve_local_problem(q, ref.skeleton)
        assert np.all(s0.c == 0) and np.all(s0.E == 0) and s0.F == 0
        assert np.allclose(s0.D, s1.D, atol=0, rtol=0)


@pytest.mark.parametrize("c", [0.1, 3.0, 250.0])
def test_kappa_scaling(c):
    model = cached_model(2, 1, 1, 1)
    p = split_problem(model, [2])[0]
    data = ProblemData(functools.partial(scaled, unit_kappa, c), model.data.f)
    q = LocalProblem(p.t, p.submesh, data, p.k, p.faces, p.dofs, p.signs)
    s1 = solve_local_problem(p, model.skeleton)
    sc = solve_local_problem(q, model.skeleton)
    assert np.allclose(sc.c * c, s1.c, rtol=1e-12, atol=1e-12 * np.abs(s1.c).max())
    assert np.allclose(sc.D * c, s1.D, rtol=1e-12, atol=1e-12 * np.abs(s1.D).max())


def test_factorization_counter():
    model = cached_model(2, 0, 0, 1)
    reset_factorization_count()
    problems = split_problem(model)
    for p in problems:
        solve_local_problem(p, model.skeleton)
    assert factorization_count() == model.mesh.n_elements == 8
    solve_local_problem(problems[3], model.skeleton)
    assert factorization_count() == 9
    reset_factorization_count()
    assert factorization_count() == 0


def test_degenerate_element_rejected():
    model = build_model(Discretization(1, 0, 0, 1, 1), get_problem("zero"))
    p = split_problem(model, [0])[0]
    sub = p.submesh
    flat = type(sub)(**{**sub.__dict__, "vertices": np.zeros_like(sub.vertices)})
    bad = LocalProblem(p.t, flat, ProblemData(unit_kappa, zero_function), 1, p.faces, p.dofs, p.signs)
    with pytest.raises((AssemblyError, np.linalg.LinAlgError)):
        solve_local_problem(bad, model.skeleton)
