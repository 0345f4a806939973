"""
Finite-volume residual, its block Jacobian and the regularized Newton solver.

The residual of element i is the sum over its edges of the numerical flux
times the edge length, with one midpoint quadrature point per edge.  Edge
traces come from the limited linear reconstruction.  Wall edges use the
slip-wall flux of the interior trace; far-field edges use the numerical
flux against the freestream.
"""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import euler
from .linsolve import BS, BlockSystem, LinearSolveError, solve_linear, symmetric_bsr
from .mesh import FARFIELD, WALL
from .parallel import get_engine
from .reconstruction import build_patch_cache, limiter_factors, reconstruct

log = logging.getLogger(__name__)


class NewtonError(RuntimeError):
    def __init__(self, msg, history=None, state=None):
        super().__init__(msg)
        self.history = history or []
        self.state = state


@dataclass
class SolverOptions:
    """Discretization and Newton settings.

    ``order`` 1 uses cell averages as traces; 2 uses the linear
    reconstruction, limited when ``limiter`` is set.  ``jacobian`` selects
    the Newton matrix: ``"first"`` keeps only the edge-neighbour coupling
    (defect correction), ``"full"`` differentiates through the
    reconstruction with frozen limiter factors.  ``freeze_window`` is the
    number of Newton steps without a halving of the residual after which
    the limiter factors are frozen (0 never freezes).
    """

    scheme: str = "hllc"
    order: int = 2
    limiter: bool = True
    alpha_reg: float = 0.002
    tol_residual: float = 1e-3
    max_iter: int = 500
    jacobian: str = "first"
    linear_method: str = "multilevel"
    linear_tol: float = 1e-2
    line_search: int = 10
    freeze_window: int = 10

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if self.jacobian not in ("first", "full"):
            raise ValueError("jacobian must be 'first' or 'full'")
        if self.scheme not in euler.SCHEMES:
            raise ValueError(f"unknown flux scheme {self.scheme!r}")
        if self.alpha_reg < 0:
            raise ValueError("alpha_reg must be >= 0")


@dataclass
class Traces:
    """Edge traces and the reconstruction data that produced them."""

    left: np.ndarray
    right: np.ndarray
    phi: np.ndarray
    fallback_left: np.ndarray
    fallback_right: np.ndarray

    @property
    def fallbacks(self):
        return int(self.fallback_left.sum() + self.fallback_right.sum())


@dataclass
class NewtonState:
    u: np.ndarray
    residual_norm_l1: float
    iteration: int
    alpha_reg: float
    history: list = field(default_factory=list)
    converged: bool = True
    phi: np.ndarray = None

    @property
    def shift(self):
        """Diagonal shift used in the last assembled Jacobian."""
        return self.history[-1]["shift"] if self.history else 0.0


def _options(opts, **kw):
    opts = opts or SolverOptions()
    return replace(opts, **kw) if kw else opts


def compute_traces(u, mesh, cache, opts, engine=None, gamma=euler.GAMMA, phi=None):
    """Left/right edge traces.  ``phi`` overrides the limiter factors."""
    E = mesh.edges
    n = mesh.n_active
    interior = E.right >= 0
    R = np.where(interior, E.right, 0)
    if opts.order == 1:
        phi = np.zeros((n, BS))
        uL = u[E.left].copy()
        uR = np.where(interior[:, None], u[R], 0.0)
        no = np.zeros(len(E), dtype=bool)
        return Traces(uL, uR, phi, no, no.copy())
    g = reconstruct(u, cache, mesh, engine)
    if phi is None:
        phi = limiter_factors(u, g, cache, mesh, engine) if opts.limiter else np.ones((n, BS))
    g = g * phi[..., None]
    c = mesh.barycenter
    uL = u[E.left] + np.einsum("mcd,md->mc", g[E.left], E.midpoint - c[E.left])
    uR = u[R] + np.einsum("mcd,md->mc", g[R], E.midpoint - c[R])
    uR[~interior] = 0.0
    badL = ~euler.admissible(uL, gamma)
    badR = interior & ~euler.admissible(np.where(interior[:, None], uR, 1.0), gamma)
    if badL.any():
        uL[badL] = u[E.left[badL]]
    if badR.any():
        uR[badR] = u[E.right[badR]]
    return Traces(uL, uR, phi, badL, badR)


def edge_fluxes(traces, mesh, cfg, opts, engine=None):
    """Numerical flux times length for every edge, shape ``(m, 4)``."""
    E = mesh.edges
    m = len(E)
    out = np.empty((m, BS))
    uinf = euler.freestream_state(cfg)
    flux = euler.SCHEMES[opts.scheme]
    uL, uR = traces.left, traces.right

    def kernel(lo, hi):
        s = slice(lo, hi)
        mk = E.marker[s]
        n = E.normal[s]
        right = np.where((mk == FARFIELD)[:, None], uinf, uR[s])
        right = np.where((mk == WALL)[:, None], uL[s], right)
        F = flux(uL[s], right, n, cfg.gamma)
        wall = mk == WALL
        if wall.any():
            F[wall] = euler.wall_flux(uL[s][wall], n[wall], cfg.gamma)
        out[s] = F * E.length[s, None]

    (engine or get_engine()).run(kernel, m)
    return out


def gather(edge_values, mesh, engine=None):
    """Per-element signed sum of edge values, in fixed local-edge order."""
    n = mesh.n_active
    out = np.empty((n,) + edge_values.shape[1:])
    ee, sg = mesh.elem_edges, mesh.elem_sign

    def kernel(lo, hi):
        v = edge_values[ee[lo:hi]]
        s = sg[lo:hi]
        out[lo:hi] = s[:, 0, None] * v[:, 0] + s[:, 1, None] * v[:, 1] + s[:, 2, None] * v[:, 2]

    (engine or get_engine()).run(kernel, n)
    return out


def assemble_residual(u, mesh, cache, cfg, opts=None, engine=None, return_traces=False, phi=None):
    """Residual per active element, shape ``(n, 4)``.

    Inadmissible reconstructed traces fall back to the cell average; the
    count is available through ``return_traces=True``.  ``phi`` freezes
    the limiter factors.
    """
    opts = opts or SolverOptions()
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_active, BS):
        raise ValueError(f"state has shape {u.shape}, expected ({mesh.n_active}, 4)")
    if not euler.admissible(u, cfg.gamma).all():
        raise euler.InadmissibleStateError("cell averages are not admissible")
    if cache is None and opts.order == 2:
        cache = build_patch_cache(mesh)
    tr = compute_traces(u, mesh, cache, opts, engine, cfg.gamma, phi)
    R = gather(edge_fluxes(tr, mesh, cfg, opts, engine), mesh, engine)
    return (R, tr) if return_traces else R


# ---------------------------------------------------------------- Jacobian
def edge_flux_jacobians(traces, mesh, cfg, opts):
    """d(flux * length)/d(left trace) and d/d(right trace), shape ``(m, 4, 4)``."""
    E = mesh.edges
    uinf = euler.freestream_state(cfg)
    m = len(E)
    dL = np.zeros((m, BS, BS))
    dR = np.zeros((m, BS, BS))
    inner = E.right >= 0
    far = E.marker == FARFIELD
    wall = E.marker == WALL
    if inner.any():
        a, b = euler.flux_jacobians(traces.left[inner], traces.right[inner], E.normal[inner], cfg.gamma,
                                    opts.scheme)
        dL[inner], dR[inner] = a, b
    if far.any():
        dL[far] = euler.flux_jacobians(traces.left[far], np.broadcast_to(uinf, (far.sum(), BS)),
                                       E.normal[far], cfg.gamma, opts.scheme)[0]
    if wall.any():
        dL[wall] = euler.wall_flux_jacobian(traces.left[wall], E.normal[wall], cfg.gamma)
    s = E.length[:, None, None]
    return dL * s, dR * s


def trace_operator(mesh, cache, traces, side, stencil):
    """Sparse ``(4m, 4n)`` derivative of one side's edge traces w.r.t. cell averages.

    With ``stencil="first"`` each trace depends on its own cell only.  With
    ``"full"`` the linear reconstruction is differentiated with the limiter
    factors held fixed.
    """
    E = mesh.edges
    m, n = len(E), mesh.n_active
    if side == "left":
        edges = np.arange(m)
        owner = E.left
        fb = traces.fallback_left
    else:
        edges = np.nonzero(E.right >= 0)[0]
        owner = E.right[edges]
        fb = traces.fallback_right[edges]
    comp = np.arange(BS)
    if stencil == "first":
        rows = (BS * edges[:, None] + comp).ravel()
        cols = (BS * owner[:, None] + comp).ravel()
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(BS * m, BS * n))
    d = E.midpoint[edges] - mesh.barycenter[owner]
    a = np.einsum("ekd,ed->ek", cache.weights[owner], d)
    a[fb] = 0.0
    phi = traces.phi[owner]
    nb = cache.neighbors[owner]
    coef = phi[:, None, :] * a[:, :, None]
    self_coef = 1.0 - coef.sum(axis=1)
    k = nb.shape[1]
    rows = np.concatenate([np.repeat(BS * edges[:, None] + comp, k, axis=0).reshape(len(edges), k, BS).ravel(),
                           (BS * edges[:, None] + comp).ravel()])
    cols = np.concatenate([(BS * nb[:, :, None] + comp).ravel(), (BS * owner[:, None] + comp).ravel()])
    vals = np.concatenate([coef.ravel(), self_coef.ravel()])
    return sp.csr_matrix((vals, (rows, cols)), shape=(BS * m, BS * n))


def _block_diag(blocks):
    m = len(blocks)
    return sp.bsr_matrix((blocks, np.arange(m), np.arange(m + 1)), shape=(BS * m, BS * m)).tocsr()


def scatter_matrix(mesh):
    """``(4n, 4m)`` map from edge values to signed per-element sums."""
    E = mesh.edges
    m, n = len(E), mesh.n_active
    inner = np.nonzero(E.right >= 0)[0]
    rows = np.concatenate([E.left, E.right[inner]])
    cols = np.concatenate([np.arange(m), inner])
    vals = np.concatenate([np.ones(m), -np.ones(len(inner))])
    B = sp.csr_matrix((vals, (rows, cols)), shape=(n, m))
    return sp.kron(B, sp.identity(BS), format="csr")


def assemble_jacobian(u, mesh, cache, cfg, alpha_reg=None, opts=None, residual=None, stencil=None,
                      traces=None, phi=None, shift=None):
    """Regularized Jacobian ``dR/du + alpha ||R||_1 I`` as a :class:`BlockSystem`.

    The right-hand side is ``-R``.  ``stencil`` defaults to
    ``opts.jacobian``; an explicit ``shift`` replaces ``alpha ||R||_1``.
    """
    opts = opts or SolverOptions()
    alpha = opts.alpha_reg if alpha_reg is None else float(alpha_reg)
    stencil = stencil or opts.jacobian
    u = np.asarray(u, dtype=float)
    if cache is None and opts.order == 2:
        cache = build_patch_cache(mesh)
    if residual is None or traces is None:
        residual, traces = assemble_residual(u, mesh, cache, cfg, opts, return_traces=True, phi=phi)
    if stencil == "full" and opts.order == 1:
        stencil = "first"
    dL, dR = edge_flux_jacobians(traces, mesh, cfg, opts)
    TL = trace_operator(mesh, cache, traces, "left", stencil)
    TR = trace_operator(mesh, cache, traces, "right", stencil)
    dF = _block_diag(dL) @ TL + _block_diag(dR) @ TR
    J = (scatter_matrix(mesh) @ dF).tocsr()
    if shift is None:
        shift = alpha * float(np.abs(residual).sum())
    J = J + shift * sp.identity(J.shape[0], format="csr")
    n = mesh.n_active
    return BlockSystem(symmetric_bsr(J, n), -residual, shift, mesh,
                       {"stencil": stencil, "fallbacks": traces.fallbacks})


# ---------------------------------------------------------------- Newton
def newton_solve(u0, mesh, cfg, tol_residual=None, opts=None, cache=None, engine=None, callback=None,
                 phi=None):
    """Regularized Newton iteration to ``||R||_1 <= tol_residual``.

    Each step solves ``(dR/du + alpha ||R||_1 I) du = -R`` inexactly and
    halves ``du`` up to ``opts.line_search`` times while any cell state
    is inadmissible.  When the limited residual stops decreasing the
    limiter factors are frozen; the returned state carries them in
    ``phi`` so later evaluations can reuse the same discrete operator.
    """
    opts = opts or SolverOptions()
    tol = opts.tol_residual if tol_residual is None else tol_residual
    if cache is None and opts.order == 2:
        cache = build_patch_cache(mesh)
    u = np.array(u0, dtype=float)
    if not euler.admissible(u, cfg.gamma).all():
        raise euler.InadmissibleStateError("initial state is not admissible")
    history = []
    t0 = time.perf_counter()
    for it in range(opts.max_iter + 1):
        R, tr = assemble_residual(u, mesh, cache, cfg, opts, engine, return_traces=True, phi=phi)
        norm = float(np.abs(R).sum())
        if not np.isfinite(norm):
            raise NewtonError(f"non-finite residual at iteration {it}", history)
        row = {"iteration": it, "residual_l1": norm, "linear_iters": 0,
               "wall_seconds": time.perf_counter() - t0, "shift": opts.alpha_reg * norm,
               "fallbacks": tr.fallbacks, "frozen": phi is not None}
        history.append(row)
        if callback is not None:
            callback(it, u, norm)
        if norm <= tol:
            return NewtonState(u, norm, it, opts.alpha_reg, history, True, phi)
        if it == opts.max_iter:
            break
        w = opts.freeze_window
        if (phi is None and w and opts.order == 2 and opts.limiter and it >= w
                and norm > 0.5 * history[-1 - w]["residual_l1"]):
            log.info("freezing limiter at Newton step %d (||R||_1 = %.3e)", it, norm)
            phi = tr.phi.copy()
        system = assemble_jacobian(u, mesh, cache, cfg, opts.alpha_reg, opts, residual=R, traces=tr)
        try:
            du, info = solve_linear(system, opts.linear_method, opts.linear_tol)
        except LinearSolveError as err:
            if err.best is None:
                raise
            log.warning("linear solve at Newton step %d: %s; using best iterate", it, err)
            du, info = err.best, {"iterations": len(err.history)}
        row["linear_iters"] = info["iterations"]
        step = 1.0
        for _ in range(opts.line_search + 1):
            trial, ok = cell_update(u, du, step, engine, cfg.gamma)
            if ok:
                break
            step *= 0.5
        else:
            raise NewtonError(f"line search exhausted at iteration {it}", history,
                              NewtonState(u, norm, it, opts.alpha_reg, history, False, phi))
        u = trial
    raise NewtonError(f"no convergence in {opts.max_iter} iterations (||R||_1 = {history[-1]['residual_l1']:.3e})",
                      history, NewtonState(u, history[-1]["residual_l1"], opts.max_iter, opts.alpha_reg,
                                           history, False, phi))


def cell_update(u, du, step, engine=None, gamma=euler.GAMMA):
    """``u + step * du`` element by element; also reports whether every state is admissible."""
    out = np.empty_like(u)
    ok = np.empty(len(u), dtype=bool)

    def kernel(lo, hi):
        out[lo:hi] = u[lo:hi] + step * du[lo:hi]
        ok[lo:hi] = euler.admissible(out[lo:hi], gamma)

    (engine or get_engine()).run(kernel, len(u))
    return out, bool(ok.all())


HISTORY_COLUMNS = ("iteration", "residual_l1", "linear_iters", "wall_seconds")


def history_rows(history):
    return [[h[c] for c in HISTORY_COLUMNS] for h in history]


def freestream_field(mesh, cfg):
    return np.tile(euler.freestream_state(cfg), (mesh.n_active, 1))
