import logging

import numpy as np
import pytest
import scipy.sparse as sp

from mhm.config import Discretization
from mhm.errors import (ConfigurationError, ConsistencyError, FormulationError,
                        IncompleteReductionError, OracleScaleError)
from mhm.femcore import ProblemData, get_problem, sine_solution, unit_kappa
from mhm.global_reducer import (ReconstructedSolution, assemble_global_system, build_model,
                                compute_solution, conservation_residuals, dof_counts, l2_error,
                                monolithic_oracle, reduce_local_problems, solve_saddle_point,
                                split_problem, write_global_csv, write_solution_vtk)
from mhm.local_solver import solve_local_problem

from conftest import cached_model, cached_pipeline


def test_split_counts():
    model = cached_model(1, 0, 0, 1)
    problems = split_problem(model)
    assert len(problems) == 2 and all(len(p.faces) == 3 for p in problems)
    shared = set(problems[0].faces) & set(problems[1].faces)
    assert len(shared) == 1
    problems = split_problem(cached_model(2, 1, 0, 1))
    assert len(problems) == 8 and all(p.submesh.n_triangles == 4 for p in problems)


def test_split_face_coverage():
    model = cached_model(3, 0, 0, 1)
    hits = np.zeros(model.mesh.n_faces, dtype=int)
    for p in split_problem(model):
        np.add.at(hits, p.faces, 1)
    for e in range(model.mesh.n_faces):
        assert hits[e] == (1 if model.mesh.is_boundary_face(e) else 2)


def test_split_rejects_low_degree():
    model = build_model(Discretization(1, 0, 0, 1, 1), get_problem("sine"))
    object.__setattr__(model, "disc", Discretization(1, 0, 1, 1, 1))
    with pytest.raises(ConfigurationError):
        split_problem(model)


def test_zero_source_gives_zero():
    model, sols, g = cached_pipeline(2, 1, 0, 1, problem="zero")
    assert np.all(g.L == 0) and np.all(g.P == 0)
    u = compute_solution(g, sols, model)
    pts = np.random.default_rng(1).random((100, 2))
    assert np.all(u(pts[:, 0], pts[:, 1]) == 0)
    oracle = monolithic_oracle(model)
    assert np.allclose(oracle.L, 0, atol=1e-14) and np.allclose(oracle.P, 0, atol=1e-14)


def test_system_size_and_structure():
    model, sols, _ = cached_pipeline(2, 1, 0, 1)
    system = assemble_global_system(sols, model.skeleton.dimension, model.mesh.n_elements)
    M = system.matrix.toarray()
    assert M.shape == (24, 24)
    assert np.all(M[16:, 16:] == 0)
    assert np.abs(M - M.T).max() <= 1e-9 * np.abs(M).max()


def test_residual_invariant():
    model, sols, g = cached_pipeline(2, 1, 1, 2)
    system = assemble_global_system(sols, model.skeleton.dimension, model.mesh.n_elements)
    x = np.concatenate([g.L, g.P])
    assert np.linalg.norm(system.matrix @ x - system.rhs) <= 1e-10 * np.linalg.norm(system.rhs)


@pytest.mark.parametrize("n, r, l, m", [(1, 0, 0, 1), (1, 1, 1, 2), (2, 1, 0, 1), (2, 1, 1, 1), (2, 0, 1, 1)])
def test_matches_oracle(n, r, l, m):
    model, sols, g = cached_pipeline(n, r, l, m, problem="bump")
    o = monolithic_oracle(model)
    x, y = np.concatenate([g.L, g.P]), np.concatenate([o.L, o.P])
    assert np.linalg.norm(x - y) <= 1e-8 * np.linalg.norm(y)
    assert g.nullity == o.nullity


def test_oracle_conservation_self_check():
    model = cached_model(1, 0, 0, 1)
    o = monolithic_oracle(model)
    flux, source, mag = conservation_residuals(o.L, model)
    assert np.all(np.abs(flux - source) <= 1e-10 * np.maximum(mag, 1e-300))


def test_conservation_on_pipeline():
    model, _, g = cached_pipeline(4, 1, 1, 2, problem="bump")
    flux, source, mag = conservation_residuals(g.L, model)
    assert np.all(np.abs(flux - source) <= 1e-10 * mag)


def test_linearity():
    model, sols, g = cached_pipeline(2, 1, 1, 1)
    base = model.data
    doubled = ProblemData(unit_kappa, lambda x, y: 2.0 * base.f(x, y))
    m2 = build_model(model.disc, doubled)
    s2 = [solve_local_problem(p, m2.skeleton) for p in split_problem(m2)]
    g2 = reduce_local_problems(s2, m2.skeleton, m2.v0)
    assert np.allclose(g2.L, 2 * g.L, rtol=1e-13, atol=1e-15)
    assert np.allclose(g2.P, 2 * g.P, rtol=1e-13, atol=1e-15)
    pts = np.random.default_rng(3).random((50, 2))
    u1 = compute_solution(g, sols, model)(pts[:, 0], pts[:, 1])
    u2 = compute_solution(g2, s2, m2)(pts[:, 0], pts[:, 1])
    assert np.allclose(u2, 2 * u1, rtol=1e-13, atol=1e-15)


def test_determinism_and_order_independence():
    model, sols, g = cached_pipeline(2, 1, 1, 1)
    a = assemble_global_system(sols, model.skeleton.dimension, 8)
    b = assemble_global_system(sols[::-1], model.skeleton.dimension, 8)
    assert (a.matrix != b.matrix).nnz == 0
    assert np.array_equal(a.E, b.E) and np.array_equal(a.F, b.F)
    g2 = reduce_local_problems(sols[::-1], model.skeleton, model.v0)
    assert np.array_equal(g.L, g2.L) and np.array_equal(g.P, g2.P)


def test_incomplete_and_duplicate_contributions():
    model, sols, _ = cached_pipeline(2, 1, 0, 1)
    with pytest.raises(IncompleteReductionError):
        reduce_local_problems(sols[:-1], model.skeleton, model.v0)
    with pytest.raises(ConsistencyError):
        reduce_local_problems(sols + sols[:1], model.skeleton, model.v0)


def test_singular_configuration(caplog):
    model, sols, g = cached_pipeline(1, 0, 0, 2)
    assert g.nullity == 1
    with pytest.raises(FormulationError, match="l=0, m=2"):
        reduce_local_problems(sols, model.skeleton, model.v0, allow_singular=False)
    with caplog.at_level(logging.WARNING, logger="mhm"):
        reduce_local_problems(sols, model.skeleton, model.v0)
    assert "singular" in caplog.text
    assert monolithic_oracle(model).nullity == 1


def test_sparse_path_matches_dense():
    model, sols, g = cached_pipeline(2, 1, 1, 1)
    system = assemble_global_system(sols, model.skeleton.dimension, 8)
    x, nullity = solve_saddle_point(system, dense_limit=0)
    assert nullity == 0
    assert np.allclose(x, np.concatenate([g.L, g.P]), rtol=0, atol=1e-12 * np.abs(x).max())


def test_reconstruction_piecewise_constant_when_fine_zeroed(rng):
    model, sols, g = cached_pipeline(2, 1, 0, 1)
    u = compute_solution(g, sols, model)
    flat = ReconstructedSolution(u.mesh, u.r, u.k, u.constants, [0 * c for c in u.coefficients])
    pts = rng.random((100, 2))
    owner = flat.locate_elements(pts)
    assert np.array_equal(flat(pts[:, 0], pts[:, 1]), g.P[owner])


def test_reconstruction_index_mismatch():
    model, sols, g = cached_pipeline(2, 1, 0, 1)
    with pytest.raises(ConsistencyError):
        compute_solution(g, sols[:-1], model)
    other = cached_model(2, 1, 1, 1)
    with pytest.raises(ConsistencyError):
        compute_solution(g, sols, other)


def test_l2_error_closed_forms():
    model, sols, g = cached_pipeline(2, 1, 0, 1)
    u = compute_solution(g, sols, model)
    zero = ReconstructedSolution(u.mesh, u.r, u.k, 0 * u.constants, [0 * c for c in u.coefficients])
    assert l2_error(zero, sine_solution, quad_degree=16) == pytest.approx(0.5, abs=1e-12)
    assert l2_error(u, lambda x, y: u(x, y)) <= 1e-12


def test_error_decreases_with_n():
    errs = []
    for n in (4, 8, 16):
        model, sols, g = cached_pipeline(n, 1, 1, 1)
        errs.append(l2_error(compute_solution(g, sols, model), sine_solution))
    assert errs[0] > errs[1] > errs[2]


@pytest.mark.parametrize("n, r, k", [(1, 0, 1), (2, 1, 2), (3, 2, 2), (4, 1, 3)])
def test_dof_counts_brute_force(n, r, k):
    model = build_model(Discretization(n, r, 0, 1, k), get_problem("zero"))
    counts = dof_counts(model)
    nodes = set()
    fine = 0
    from mhm.femcore import dof_map
    from mhm.mesh import refine_element
    for t in range(model.mesh.n_elements):
        dm = dof_map(refine_element(model.mesh, t, r), k)
        fine += dm.size
        nodes |= {(round(x, 9), round(y, 9)) for x, y in dm.coords}
    assert counts["galerkin_equivalent_dofs"] == len(nodes) == (k * 2 ** r * n + 1) ** 2
    assert counts["fine_total"] == fine
    assert counts["L_l"] == model.mesh.n_faces and counts["N_t"] == 2 * n * n


def test_oracle_size_guard():
    model = build_model(Discretization(16, 3, 0, 1, 2), get_problem("zero"))
    with pytest.raises(OracleScaleError):
        monolithic_oracle(model)


def test_exports(tmp_path):
    model, sols, g = cached_pipeline(1, 1, 0, 1)
    u = compute_solution(g, sols, model)
    write_solution_vtk(u, tmp_path / "u.vtk", exact=sine_solution)
    text = (tmp_path / "u.vtk").read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    n_pts = int(text[4].split()[1])
    assert n_pts == 2 * 6 and "SCALARS u_exact double 1" in text
    write_global_csv(g, tmp_path / "g.csv")
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "block,index,value" and len(rows) == 1 + len(g.L) + len(g.P)
    assert float(rows[1].split(",")[2]) == g.L[0]
