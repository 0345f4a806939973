import numpy as np
import pytest

from dwrflow.dual import DualField, DualSolveError, assemble_dual_system, solve_dual
from dwrflow.functional import FunctionalSpec, linearize
from dwrflow.mesh import WALL, generate_naca_omesh, mirror_map
from dwrflow.primal import SolverOptions, assemble_jacobian, freestream_field, newton_solve
from dwrflow.reconstruction import build_patch_cache

from adjoint_audit import check
from conftest import perturbed


@pytest.fixture(scope="module")
def tiny():
    m = generate_naca_omesh("0012", n_around=16, n_radial=4, farfield_radius=10.0)
    assert m.n_active <= 128  # small enough for a dense oracle
    return m


@pytest.mark.parametrize("stencil", ["first", "full"])
def test_dual_blocks_are_transposed_primal_blocks(small_omesh, subsonic, stencil):
    u = perturbed(small_omesh, subsonic, 0.03)
    cache = build_patch_cache(small_omesh)
    spec = FunctionalSpec.for_flow("drag", subsonic)
    A = assemble_jacobian(u, small_omesh, cache, subsonic, stencil=stencil)
    D = assemble_dual_system(u, small_omesh, cache, subsonic, spec, stencil=stencil)
    assert D.shift == A.shift
    assert D.block_pattern() == {(j, i) for i, j in A.block_pattern()}
    for i, j in list(A.block_pattern())[::7]:
        np.testing.assert_array_equal(D.block(j, i), A.block(i, j).T)
    np.testing.assert_array_equal(D.rhs, linearize(u, small_omesh, spec, subsonic, cache=cache))
    check(D)


def test_explicit_shift_is_used(small_omesh, subsonic):
    u = perturbed(small_omesh, subsonic, 0.03)
    spec = FunctionalSpec.for_flow("drag", subsonic)
    D = assemble_dual_system(u, small_omesh, None, subsonic, spec, shift=0.125)
    assert D.shift == 0.125


def test_preconditioner_pair(small_omesh, subsonic):
    u = perturbed(small_omesh, subsonic, 0.03)
    spec = FunctionalSpec.for_flow("drag", subsonic)
    D, low = assemble_dual_system(u, small_omesh, None, subsonic, spec, with_preconditioner=True)
    assert low.shift == D.shift
    np.testing.assert_array_equal(low.rhs, D.rhs)
    assert low.block_pattern() <= D.block_pattern()
    check(low)


def test_rhs_local_to_wall(subsonic_state, small_omesh, subsonic):
    spec = FunctionalSpec.for_flow("drag", subsonic)
    cache = build_patch_cache(small_omesh)
    D = assemble_dual_system(subsonic_state.u, small_omesh, cache, subsonic, spec, alpha_reg=0.0,
                             phi=subsonic_state.phi)
    E = small_omesh.edges
    cells = set(np.unique(E.left[E.marker == WALL]).tolist())
    for i in list(cells):
        cells |= set(cache.patch(i))
    support = set(np.nonzero(np.abs(D.rhs).sum(axis=1))[0].tolist())
    assert support and support <= cells


@pytest.mark.parametrize("opts", [SolverOptions(order=1), SolverOptions(limiter=False)])
def test_duality_against_dense_oracle(tiny, subsonic, opts):
    u = perturbed(tiny, subsonic, 0.03, 9)
    spec = FunctionalSpec.for_flow("drag", subsonic)
    zf = solve_dual(u, tiny, None, subsonic, spec, opts, method="gmres", tol=1e-13)
    A = assemble_jacobian(u, tiny, None, subsonic, opts=opts, stencil="full").matrix.toarray()
    g = linearize(u, tiny, spec, subsonic, opts).ravel()
    rng = np.random.default_rng(2)
    for _ in range(3):
        s = rng.standard_normal(A.shape[0])
        w = np.linalg.solve(A, s)
        lhs, rhs = zf.z.ravel() @ s, w @ g
        assert abs(lhs - rhs) <= 1e-8 * (abs(rhs) + 1e-12 * np.abs(w).max() * np.abs(g).max())


def test_gmres_matches_direct(subsonic_state, small_omesh, subsonic):
    spec = FunctionalSpec.for_flow("drag", subsonic)
    kw = dict(shift=subsonic_state.shift, phi=subsonic_state.phi)
    zg = solve_dual(subsonic_state.u, small_omesh, None, subsonic, spec, method="gmres", tol=1e-10, **kw)
    zd = solve_dual(subsonic_state.u, small_omesh, None, subsonic, spec, method="direct", **kw)
    np.testing.assert_allclose(zg.z, zd.z, atol=1e-7 * np.abs(zd.z).max())
    assert zg.stamp == small_omesh.stamp and zg.info["shift"] == subsonic_state.shift
    assert len(zg) == small_omesh.n_active


def test_symmetric_case_mirror_symmetry(subsonic_state, small_omesh, subsonic):
    spec = FunctionalSpec.for_flow("drag", subsonic)
    zf = solve_dual(subsonic_state.u, small_omesh, None, subsonic, spec,
                    shift=subsonic_state.shift, phi=subsonic_state.phi)
    mm = mirror_map(small_omesh)
    sign = np.array([1.0, 1.0, -1.0, 1.0])
    defect = np.abs(zf.z - zf.z[mm] * sign).max() / np.abs(zf.z).max()
    assert defect <= 1e-2


def test_nonfinite_dual_rejected():
    with pytest.raises(DualSolveError):
        DualField(np.array([[np.nan, 0, 0, 0]]), 0)


def test_unreachable_tolerance_raises(small_omesh, subsonic):
    spec = FunctionalSpec.for_flow("drag", subsonic)
    u = perturbed(small_omesh, subsonic, 0.03)
    with pytest.raises(DualSolveError):
        solve_dual(u, small_omesh, None, subsonic, spec, tol=1e-30)
