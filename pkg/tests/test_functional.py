import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwrflow import euler
from dwrflow.mesh import WALL
from dwrflow.functional import FunctionalSpec, beta_vector, evaluate, linearize
from dwrflow.primal import SolverOptions, freestream_field
from dwrflow.reconstruction import build_patch_cache

from conftest import perturbed


def test_beta_examples():
    np.testing.assert_allclose(beta_vector(FunctionalSpec("drag", 0.0, 1.0)), [1.0, 0.0])
    np.testing.assert_allclose(beta_vector(FunctionalSpec("lift", 0.0, 1.0)), [0.0, 1.0])


@given(alpha=st.floats(-90, 90), c=st.floats(0.1, 10))
def test_beta_orthogonal(alpha, c):
    d = beta_vector(FunctionalSpec("drag", alpha, c))
    lft = beta_vector(FunctionalSpec("lift", alpha, c))
    assert abs(d @ lft) <= 1e-15 * (d @ d)
    assert np.linalg.norm(d) == pytest.approx(1.0 / c)


def test_normalization_is_dynamic_pressure(transonic):
    s = FunctionalSpec.for_flow("drag", transonic)
    assert s.c_norm == pytest.approx(0.5 * 1.0 * 0.8 ** 2, rel=1e-14)


@pytest.mark.parametrize("bad", [dict(kind="moment"), dict(c_norm=0.0), dict(pressure="wall")])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        FunctionalSpec(**bad)


def test_no_wall_is_error(grid_mesh, subsonic):
    with pytest.raises(ValueError, match="no wall"):
        evaluate(freestream_field(grid_mesh, subsonic), grid_mesh, FunctionalSpec(), subsonic)


@settings(max_examples=25, deadline=None)
@given(rho=st.floats(0.2, 3), vx=st.floats(-1, 1), vy=st.floats(-1, 1), p=st.floats(0.1, 3),
       kind=st.sampled_from(["lift", "drag"]), alpha=st.floats(-10, 10),
       pressure=st.sampled_from(["trace", "cell"]))
def test_closed_wall_constant_pressure(small_omesh, subsonic, rho, vx, vy, p, kind, alpha, pressure):
    state = np.array([rho, rho * vx, rho * vy, euler.total_energy(rho, p, np.array([vx, vy]))])
    u = np.tile(state, (small_omesh.n_active, 1))
    J = evaluate(u, small_omesh, FunctionalSpec(kind, alpha, 1.0, pressure), subsonic)
    assert abs(J) <= 1e-12 * max(1.0, p)


def test_symmetric_flow_has_no_lift(small_omesh, subsonic, subsonic_state):
    st_ = subsonic_state
    lift = FunctionalSpec.for_flow("lift", subsonic)
    assert abs(evaluate(st_.u, small_omesh, lift, subsonic, phi=st_.phi)) <= 1e-3


@pytest.mark.parametrize("opts,pressure", [(SolverOptions(limiter=False), "trace"),
                                           (SolverOptions(order=1), "trace"),
                                           (SolverOptions(), "cell")])
def test_linearize_matches_fd(small_omesh, transonic, opts, pressure):
    spec = FunctionalSpec.for_flow("drag", transonic, pressure=pressure)
    cache = build_patch_cache(small_omesh)
    u = perturbed(small_omesh, transonic, 0.05, 5)
    g = linearize(u, small_omesh, spec, transonic, opts, cache)
    rng = np.random.default_rng(0)
    wall_adj = np.nonzero(np.abs(g).sum(axis=1) > 0)[0]
    h = 1e-6
    for _ in range(3):
        v = np.zeros_like(u)
        v[wall_adj] = rng.standard_normal((len(wall_adj), 4)) * u[wall_adj]
        fd = (evaluate(u + h * v, small_omesh, spec, transonic, opts, cache)
              - evaluate(u - h * v, small_omesh, spec, transonic, opts, cache)) / (2 * h)
        assert abs(np.sum(g * v) - fd) <= 1e-6 * abs(fd)


def test_linearize_frozen_limiter_fd(small_omesh, transonic):
    from dwrflow.primal import compute_traces

    spec = FunctionalSpec.for_flow("lift", transonic)
    opts = SolverOptions()
    cache = build_patch_cache(small_omesh)
    u = perturbed(small_omesh, transonic, 0.05, 6)
    phi = compute_traces(u, small_omesh, cache, opts).phi
    g = linearize(u, small_omesh, spec, transonic, opts, cache, phi=phi)
    v = np.random.default_rng(1).standard_normal(u.shape) * u
    h = 1e-6
    fd = (evaluate(u + h * v, small_omesh, spec, transonic, opts, cache, phi)
          - evaluate(u - h * v, small_omesh, spec, transonic, opts, cache, phi)) / (2 * h)
    assert abs(np.sum(g * v) - fd) <= 1e-6 * abs(fd)


def test_linearize_local_to_wall_stencils(small_omesh, subsonic):
    spec = FunctionalSpec.for_flow("drag", subsonic)
    cache = build_patch_cache(small_omesh)
    g = linearize(perturbed(small_omesh, subsonic), small_omesh, spec, subsonic, cache=cache)
    E = small_omesh.edges
    wall_cells = np.unique(E.left[E.marker == WALL])
    stencil = set(wall_cells.tolist())
    for i in wall_cells:
        stencil |= set(cache.patch(i))
    outside = np.setdiff1d(np.arange(small_omesh.n_active), sorted(stencil))
    assert len(outside) > 0
    assert np.all(g[outside] == 0.0)


def test_linearize_scales_with_c_norm(small_omesh, subsonic):
    u = perturbed(small_omesh, subsonic)
    g1 = linearize(u, small_omesh, FunctionalSpec("drag", 0.0, 1.0), subsonic)
    g2 = linearize(u, small_omesh, FunctionalSpec("drag", 0.0, 2.0), subsonic)
    np.testing.assert_array_equal(g2 * 2.0, g1)
