import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwrflow.io import load_mesh
from dwrflow.mesh import uniform_refine
from dwrflow.parallel import ElementLoop
from dwrflow.reconstruction import CacheMismatchError, build_patch_cache, limit, limiter_factors, reconstruct

from conftest import SQUARE


@pytest.fixture(scope="module")
def cache(small_omesh):
    return build_patch_cache(small_omesh)


def test_patch_sizes(small_omesh, cache):
    assert np.all(cache.sizes >= 3)
    interior = np.all(small_omesh.edges.right[small_omesh.elem_edges] >= 0, axis=1)
    assert np.all(cache.sizes[interior] == 3)


def test_corner_element_vertex_extension(tmp_path):
    p = tmp_path / "sq.mesh"
    p.write_text(SQUARE)
    m = uniform_refine(load_mesh(p), 1)
    c = build_patch_cache(m)
    edge_nb = (m.edges.right[m.elem_edges] >= 0) & (m.edges.left[m.elem_edges] >= 0)
    few = edge_nb.sum(axis=1) < 3
    assert few.any()
    assert np.all(c.sizes >= 3)


def test_rebuild_after_uniform_refine(small_omesh):
    fine = uniform_refine(small_omesh, 1)
    assert len(build_patch_cache(fine).neighbors) == 4 * small_omesh.n_active


def test_constant_field_zero_gradient(small_omesh, cache):
    g = reconstruct(np.full((small_omesh.n_active, 4), 3.7), cache, small_omesh)
    assert np.all(g == 0.0)


def test_affine_exactness(small_omesh, cache):
    x, y = small_omesh.barycenter.T
    u = np.column_stack([2 * x + 3 * y, -x + 0.5 * y + 1, 4 * y, x])
    g = reconstruct(u, cache, small_omesh)
    want = np.array([[2, 3], [-1, 0.5], [0, 4], [1, 0]], dtype=float)
    np.testing.assert_allclose(g, np.broadcast_to(want, g.shape), atol=1e-10 * np.abs(u).max())


def test_dense_normal_equations_oracle(small_omesh, cache):
    rng = np.random.default_rng(0)
    u = rng.standard_normal((small_omesh.n_active, 4))
    g = reconstruct(u, cache, small_omesh)
    c = small_omesh.barycenter
    for i in rng.choice(small_omesh.n_active, 40, replace=False):
        nb = cache.patch(i)
        D = c[nb] - c[i]
        sol = np.linalg.solve(D.T @ D, D.T @ (u[nb] - u[i]))
        np.testing.assert_allclose(g[i], sol.T, rtol=1e-12, atol=1e-12)


def test_cache_mismatch(small_omesh, cache):
    fine = uniform_refine(small_omesh, 1)
    with pytest.raises(CacheMismatchError):
        reconstruct(np.zeros(fine.n_active), cache, fine)


def test_affine_not_clipped_in_interior(grid_mesh):
    c = build_patch_cache(grid_mesh)
    x, y = grid_mesh.barycenter.T
    u = 2 * x - y
    phi = limiter_factors(u, reconstruct(u, c, grid_mesh), c, grid_mesh)
    E = grid_mesh.edges
    # elements whose patch surrounds them on all sides; faces stay inside the patch hull
    interior = np.all(E.right[grid_mesh.elem_edges] >= 0, axis=1)
    centred = interior & (x > 0.2) & (x < 0.8) & (y > 0.2) & (y < 0.8)
    assert centred.any()
    np.testing.assert_allclose(phi[centred], 1.0)


def test_step_zero_factor(grid_mesh):
    c = build_patch_cache(grid_mesh)
    x = grid_mesh.barycenter[:, 0]
    u = np.column_stack([np.where(x < 0.5, 1.0, 2.0), np.ones_like(x)])
    phi = limiter_factors(u, reconstruct(u, c, grid_mesh), c, grid_mesh)
    straddle = np.array([np.ptp(u[c.patch(i) + [i], 0]) > 0 for i in range(grid_mesh.n_active)])
    assert straddle.any()
    np.testing.assert_array_equal(phi[straddle, 0], 0.0)
    np.testing.assert_array_equal(phi[:, 1], 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_limited_faces_within_patch_extrema(small_omesh, cache, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((small_omesh.n_active, 4))
    g = limit(u, reconstruct(u, cache, small_omesh), small_omesh, cache)
    faces = u[:, None, :] + np.einsum("ncd,nfd->nfc", g, cache.face_offsets)
    vals = np.concatenate([u[cache.neighbors], u[:, None, :]], axis=1)
    hi, lo = vals.max(axis=1), vals.min(axis=1)
    tol = 1e-12 * (1 + np.abs(u).max())
    assert np.all(faces <= hi[:, None, :] + tol)
    assert np.all(faces >= lo[:, None, :] - tol)


def test_thread_count_independence():
    from dwrflow.mesh import generate_naca_omesh

    m = uniform_refine(generate_naca_omesh("0012", 32, 6), 2)  # > one chunk of elements
    c = build_patch_cache(m)
    rng = np.random.default_rng(3)
    u = rng.standard_normal((m.n_active, 4))
    outs = []
    for n in (1, 3, 4):
        eng = ElementLoop(n, chunk=512)
        g = reconstruct(u, c, m, eng)
        outs.append((g, limiter_factors(u, g, c, m, eng)))
        eng.close()
    for g, p in outs[1:]:
        assert np.array_equal(g, outs[0][0]) and np.array_equal(p, outs[0][1])
