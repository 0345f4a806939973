import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from dwrflow import euler
from dwrflow.io import load_mesh
from dwrflow.linsolve import BlockSGS, BlockSystem, LinearSolveError, symmetric_bsr, solve_linear
from dwrflow.mesh import MeshError, mirror_map, uniform_refine
from dwrflow.parallel import ElementLoop
from dwrflow.primal import (
    NewtonError, SolverOptions, assemble_jacobian, assemble_residual, cell_update, edge_fluxes,
    compute_traces, freestream_field, history_rows, newton_solve,
)
from dwrflow.reconstruction import build_patch_cache

from conftest import perturbed, square_text

FIRST = SolverOptions(order=1)


def test_single_triangle_freestream(tmp_path, subsonic):
    p = tmp_path / "one.mesh"
    p.write_text("NODES 3\n0 0\n1 0\n0 1\nTRIANGLES 1\n0 1 2\nBOUNDARY 3\n0 1 2\n1 2 2\n2 0 2\n")
    m = load_mesh(p)
    # one element cannot carry a gradient, so this runs with cell-average traces
    R = assemble_residual(freestream_field(m, subsonic), m, None, subsonic, FIRST)
    assert np.abs(R).max() <= 1e-13
    with pytest.raises(MeshError):
        build_patch_cache(m)


@pytest.mark.parametrize("opts", [SolverOptions(), FIRST, SolverOptions(scheme="llf")])
def test_freestream_preservation(grid_mesh, transonic, opts):
    m = uniform_refine(grid_mesh, 1)
    R = assemble_residual(freestream_field(m, transonic), m, None, transonic, opts)
    assert np.abs(R).max() <= 1e-13


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), scheme=st.sampled_from(["hllc", "llf"]))
def test_conservation_equals_boundary_flux(small_omesh, subsonic, seed, scheme):
    opts = SolverOptions(scheme=scheme)
    u = perturbed(small_omesh, subsonic, 0.05, seed)
    cache = build_patch_cache(small_omesh)
    R, tr = assemble_residual(u, small_omesh, cache, subsonic, opts, return_traces=True)
    F = edge_fluxes(tr, small_omesh, subsonic, opts)
    bnd = small_omesh.edges.right < 0
    np.testing.assert_allclose(R.sum(axis=0), F[bnd].sum(axis=0), atol=1e-12 * (1 + np.abs(F).sum()))


def test_interior_patch_telescoping(small_omesh, subsonic):
    u = perturbed(small_omesh, subsonic, 0.05, 4)
    cache = build_patch_cache(small_omesh)
    R, tr = assemble_residual(u, small_omesh, cache, subsonic, return_traces=True)
    F = edge_fluxes(tr, small_omesh, subsonic, SolverOptions())
    patch = np.zeros(small_omesh.n_active, dtype=bool)
    patch[small_omesh.n_active // 2: small_omesh.n_active // 2 + 40] = True
    E = small_omesh.edges
    right = np.where(E.right >= 0, E.right, 0)
    inL, inR = patch[E.left], patch[right] & (E.right >= 0)
    net = F[inL & ~inR].sum(axis=0) - F[inR & ~inL].sum(axis=0)
    np.testing.assert_allclose(R[patch].sum(axis=0), net, atol=1e-12)


def test_inadmissible_trace_falls_back(small_omesh, subsonic):
    u = freestream_field(small_omesh, subsonic)
    u[7] = (1e-3, 0.0, 0.0, 1e-3)  # near-vacuum cell drives neighbour reconstructions negative
    R, tr = assemble_residual(u, small_omesh, None, subsonic, SolverOptions(limiter=False), return_traces=True)
    assert tr.fallbacks > 0 and np.isfinite(R).all()


def test_inadmissible_state_rejected(small_omesh, subsonic):
    u = freestream_field(small_omesh, subsonic)
    u[0, 0] = -1.0
    with pytest.raises(euler.InadmissibleStateError):
        assemble_residual(u, small_omesh, None, subsonic)


def _fd_check(u, mesh, cfg, opts, stencil, phi=None, seed=0):
    cache = build_patch_cache(mesh)
    J = assemble_jacobian(u, mesh, cache, cfg, alpha_reg=0.0, opts=opts, stencil=stencil, phi=phi)
    rng = np.random.default_rng(seed)
    h = 1e-6
    for _ in range(3):
        v = rng.standard_normal(u.shape) * np.abs(u)
        Jv = J.matvec(v)
        fd = (assemble_residual(u + h * v, mesh, cache, cfg, opts, phi=phi)
              - assemble_residual(u - h * v, mesh, cache, cfg, opts, phi=phi)) / (2 * h)
        assert np.linalg.norm(Jv - fd) <= 1e-5 * np.linalg.norm(Jv)


@pytest.mark.parametrize("scheme", ["hllc", "llf"])
def test_first_order_jacobian_fd(small_omesh, transonic, scheme):
    assert small_omesh.n_active >= 100
    opts = SolverOptions(order=1, limiter=False, scheme=scheme)
    _fd_check(perturbed(small_omesh, transonic, 0.05), small_omesh, transonic, opts, "first")


def test_full_stencil_jacobian_fd_frozen_limiter(small_omesh, transonic):
    u = perturbed(small_omesh, transonic, 0.05, 2)
    opts = SolverOptions()
    _, tr = assemble_residual(u, small_omesh, None, transonic, opts, return_traces=True)
    _fd_check(u, small_omesh, transonic, opts, "full", phi=tr.phi)


def test_shift_is_alpha_times_residual_norm(small_omesh, subsonic):
    u = perturbed(small_omesh, subsonic, 0.05, 1)
    cache = build_patch_cache(small_omesh)
    R = assemble_residual(u, small_omesh, cache, subsonic)
    A0 = assemble_jacobian(u, small_omesh, cache, subsonic, alpha_reg=0.0)
    A1 = assemble_jacobian(u, small_omesh, cache, subsonic, alpha_reg=1.0)
    diff = (A1.matrix - A0.matrix).toarray()
    np.testing.assert_allclose(np.diag(diff), np.abs(R).sum(), rtol=1e-12)
    assert np.abs(diff - np.diag(np.diag(diff))).max() == 0.0
    assert A1.shift == pytest.approx(np.abs(R).sum(), rel=1e-15)
    np.testing.assert_array_equal(A0.rhs, -R)


def test_first_order_sparsity(small_omesh, subsonic):
    A = assemble_jacobian(perturbed(small_omesh, subsonic), small_omesh, None, subsonic)
    E = small_omesh.edges
    inner = E.right >= 0
    adj = {(int(a), int(b)) for a, b in zip(E.left[inner], E.right[inner])}
    adj |= {(b, a) for a, b in adj}
    n = small_omesh.n_active
    pattern = A.block_pattern()
    assert {(i, i) for i in range(n)} <= pattern
    assert pattern - {(i, i) for i in range(n)} == adj
    assert pattern == {(j, i) for i, j in pattern}


def test_identity_like_system(small_omesh, subsonic):
    u = perturbed(small_omesh, subsonic, 0.02)
    A = assemble_jacobian(u, small_omesh, None, subsonic, alpha_reg=1e8)
    D = A.diagonal_blocks()
    guess = np.linalg.solve(D, A.rhs[..., None])[..., 0]
    for method in ("gmres", "multilevel"):
        du, _ = solve_linear(A, method, 1e-10)
        np.testing.assert_allclose(du, guess, rtol=1e-3, atol=1e-12)
        assert np.abs(du - A.rhs / A.shift).max() <= 1e-3 * np.abs(A.rhs / A.shift).max()


def test_linear_methods_agree(subsonic, grid_mesh):
    m = uniform_refine(grid_mesh, 1)
    assert m.n_active >= 100
    u = perturbed(m, subsonic, 0.05, 3)
    A = assemble_jacobian(u, m, None, subsonic)
    exact, _ = solve_linear(A, "direct")
    tol = 1e-6
    scale = np.linalg.norm(exact)
    sols = {k: solve_linear(A, k, tol)[0] for k in ("gmres", "multilevel")}
    # both residuals are <= tol relative; the condition number bounds the error
    cond = np.linalg.cond(A.matrix.toarray())
    for du in sols.values():
        assert np.linalg.norm(du - exact) <= 2 * tol * cond * scale
    assert np.linalg.norm(sols["gmres"] - sols["multilevel"]) <= 2 * 2 * tol * cond * scale


def test_multilevel_uses_hierarchy(grid_mesh, subsonic):
    m = uniform_refine(grid_mesh, 2)
    A = assemble_jacobian(perturbed(m, subsonic, 0.05), m, None, subsonic)
    du, info = solve_linear(A, "multilevel", 1e-8)
    assert np.linalg.norm(A.matvec(du) - A.rhs) <= 1e-8 * np.linalg.norm(A.rhs)
    assert info["iterations"] > 1


def test_sgs_monotone_on_spd(grid_mesh):
    m = uniform_refine(grid_mesh, 1)
    n = m.n_active
    E = m.edges
    inner = E.right >= 0
    L = sp.coo_matrix((-np.ones(inner.sum()), (E.left[inner], E.right[inner])), shape=(n, n)).tocsr()
    L = L + L.T
    L = L - sp.diags(np.asarray(L.sum(axis=1)).ravel()) + 0.1 * sp.identity(n)
    A = sp.kron(L, np.eye(4), format="csr")
    b = np.random.default_rng(0).standard_normal(4 * n)
    sgs = BlockSGS(A, n)
    x = np.zeros_like(b)
    res = [np.linalg.norm(b)]
    for _ in range(20):
        x = sgs.sweep(x, b)
        res.append(np.linalg.norm(b - A @ x))
    assert all(r1 < r0 for r0, r1 in zip(res, res[1:]))


def test_stagnation_error_carries_best():
    n = 50
    rng = np.random.default_rng(0)
    # skew, indefinite matrix with zero diagonal blocks replaced by tiny ones: Jacobi is useless
    M = rng.standard_normal((4 * n, 4 * n))
    M = M - M.T + 1e-9 * np.eye(4 * n)
    A = BlockSystem(symmetric_bsr(sp.csr_matrix(M), n), rng.standard_normal((n, 4)))
    with pytest.raises(LinearSolveError) as err:
        solve_linear(A, "gmres", tol=1e-14, max_iter=60, restart=5, stall_window=20)
    assert err.value.best is not None and err.value.best.shape == (n, 4)


def test_newton_freestream_zero_iterations(grid_mesh, subsonic):
    st_ = newton_solve(freestream_field(grid_mesh, subsonic), grid_mesh, subsonic)
    assert st_.iteration == 0 and st_.converged and st_.residual_norm_l1 <= 1e-13


def test_newton_subsonic(small_omesh, subsonic_state):
    st_ = subsonic_state
    assert st_.converged and st_.residual_norm_l1 <= 1e-3
    h = np.array([r["residual_l1"] for r in st_.history])
    assert np.isfinite(h).all() and h[-1] <= 1e-3
    assert st_.history[-1]["shift"] <= st_.alpha_reg * 1e-3
    assert euler.admissible(st_.u).all()
    mm = mirror_map(small_omesh)
    assert (mm >= 0).all()
    assert np.abs(st_.u[:, 0] - st_.u[mm, 0]).max() <= 1e-3
    rows = history_rows(st_.history)
    assert len(rows[0]) == 4 and rows[-1][0] == st_.iteration


def test_newton_max_iter(small_omesh, subsonic):
    with pytest.raises(NewtonError) as err:
        newton_solve(freestream_field(small_omesh, subsonic) * 1.0, small_omesh, subsonic,
                     opts=SolverOptions(max_iter=2), tol_residual=1e-12)
    assert len(err.value.history) == 3


def test_newton_line_search_exhaustion(small_omesh, subsonic):
    with pytest.raises(NewtonError, match="line search"):
        newton_solve(freestream_field(small_omesh, subsonic), small_omesh, FlowConfigHelper.shocked(),
                     opts=SolverOptions(line_search=0, alpha_reg=0.0, order=1), tol_residual=1e-12)


class FlowConfigHelper:
    @staticmethod
    def shocked():
        # impulsive start far from the initial state: the unshifted full step overshoots
        return euler.FlowConfig(mach=3.0, alpha=30.0)


def test_cell_update_thread_independent(small_omesh, subsonic):
    u = perturbed(small_omesh, subsonic)
    du = np.random.default_rng(1).standard_normal(u.shape)
    outs = []
    for n in (1, 2, 4):
        eng = ElementLoop(n, chunk=64)
        outs.append(cell_update(u, du, 0.25, eng))
        eng.close()
    for out, ok in outs:
        assert np.array_equal(out, outs[0][0]) and ok == outs[0][1]
    bad, ok = cell_update(u, -10 * np.abs(u), 1.0)
    assert not ok


def test_residual_thread_independent(subsonic, grid_mesh):
    m = uniform_refine(grid_mesh, 1)
    u = perturbed(m, subsonic, 0.05)
    outs = []
    for n in (1, 3):
        eng = ElementLoop(n, chunk=16)
        outs.append(assemble_residual(u, m, None, subsonic, engine=eng))
        eng.close()
    assert np.array_equal(outs[0], outs[1])
