"""
Dual-weighted residual error estimation and mesh adaptation.

The coarse solution is prolongated onto the uniformly refined mesh, where
its residual is weighted by the discrete adjoint.  The weighted residuals
give a correction to the functional and per-element indicators; a
quantile-based tolerance picks the elements to refine.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import euler
from .dual import solve_dual
from .functional import evaluate
from .mesh import transfer_field
from .primal import SolverOptions, Traces, assemble_residual, edge_fluxes, gather, newton_solve
from .reconstruction import build_patch_cache, limiter_factors, reconstruct

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("round", "elements_before", "elements_after", "refined_fraction", "TOL", "J_coarse",
                  "correction", "J_estimate", "dual_wall_seconds", "total_wall_seconds", "J_fine",
                  "flagged_fraction")


@dataclass
class AdaptConfig:
    """``proportion`` of elements flagged per round by the dynamic
    tolerance; ``tol_mode`` is ``"dynamic"`` or ``"constant"`` with
    ``tol_value``; ``coarsen_fraction`` of lowest indicators are coarsened.
    """

    proportion: float = 0.7
    coarsen_fraction: float = 0.0
    max_rounds: int = 3
    tol_mode: str = "dynamic"
    tol_value: float = 0.0
    fine_solve: bool = True

    def __post_init__(self):
        if not 0 < self.proportion < 1:
            raise ValueError("proportion must lie in (0, 1)")
        if not 0 <= self.coarsen_fraction < 1:
            raise ValueError("coarsen_fraction must lie in [0, 1)")
        if self.proportion + self.coarsen_fraction >= 1:
            raise ValueError("proportion + coarsen_fraction must be < 1")
        if self.tol_mode not in ("dynamic", "constant"):
            raise ValueError("tol_mode must be 'dynamic' or 'constant'")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")


class EmbeddedPair:
    """A mesh and its uniform refinement with the parent-to-children map.

    ``children[i]`` holds the fine positions of the four children of coarse
    element i; ``parent_of[j]`` is the coarse position of fine element j.
    """

    def __init__(self, coarse, fine=None):
        self.coarse = coarse
        self.fine = fine if fine is not None else coarse.uniform_refine(1)
        kids = np.empty((coarse.n_active, 4), dtype=np.int64)
        for i, e in enumerate(coarse.active_ids):
            ch = self.fine.children(int(e))
            if len(ch) != 4:
                raise ValueError(f"coarse element {e} has {len(ch)} children on the fine mesh, expected 4")
            kids[i] = self.fine.position[ch]
        if np.any(kids < 0):
            raise ValueError("fine mesh is not the uniform refinement of the coarse mesh")
        self.children = kids
        self.parent_of = np.empty(self.fine.n_active, dtype=np.int64)
        self.parent_of[kids.ravel()] = np.repeat(np.arange(coarse.n_active), 4)

    def restrict(self, values):
        """Area-weighted mean over each element's children."""
        v = np.asarray(values, dtype=float)
        w = self.fine.area[self.children]
        return np.einsum("nk,nk...->n...", w, v[self.children]) / w.sum(axis=1).reshape(
            (-1,) + (1,) * (v.ndim - 1))


def prolongate(u_H, pair, cache=None, opts=None, gamma=euler.GAMMA):
    """Evaluate each coarse element's reconstruction at its children's barycenters.

    The limiter follows ``opts``.  If any child of an element would be
    inadmissible, all its children take the parent average.
    """
    opts = opts or SolverOptions()
    coarse, fine = pair.coarse, pair.fine
    u_H = np.asarray(u_H, dtype=float)
    if opts.order == 1:
        return u_H[pair.parent_of].copy()
    cache = cache or build_patch_cache(coarse)
    g = reconstruct(u_H, cache, coarse)
    if opts.limiter:
        g = g * limiter_factors(u_H, g, cache, coarse)[..., None]
    par = pair.parent_of
    d = fine.barycenter - coarse.barycenter[par]
    out = u_H[par] + np.einsum("ncd,nd->nc", g[par], d)
    bad = ~euler.admissible(out, gamma)
    if bad.any():
        parents = np.unique(par[bad])
        for i in parents:
            out[pair.children[i]] = u_H[i]
        log.info("prolongation fell back to parent averages on %d elements", len(parents))
    return out


def fine_residual(u_hH, pair, cfg, opts=None, cache=None):
    return assemble_residual(u_hH, pair.fine, cache, cfg, opts)


ROUNDOFF = 16 * np.finfo(float).eps


def roundoff_floor(edge_values, mesh):
    """Cancellation bound of the per-element edge sums that form a residual."""
    return ROUNDOFF * np.abs(edge_values)[mesh.elem_edges].sum(axis=1)


def without_roundoff(residual, floor):
    """Residual with entries at the level of summation roundoff set to zero.

    A state that solves the discrete equations exactly (freestream) leaves
    only cancellation noise, which would otherwise be ranked and refined.
    """
    return np.where(np.abs(residual) <= floor, 0.0, residual)


def _fine_residual_clean(u_hH, pair, cfg, opts, cache):
    opts = opts or SolverOptions()
    R, tr = assemble_residual(u_hH, pair.fine, cache, cfg, opts, return_traces=True)
    return without_roundoff(R, roundoff_floor(edge_fluxes(tr, pair.fine, cfg, opts), pair.fine))


def error_correction(z, residual):
    z = np.asarray(z, dtype=float)
    r = np.asarray(residual, dtype=float)
    if z.shape != r.shape:
        raise ValueError(f"dual shape {z.shape} does not match residual shape {r.shape}")
    return -float(np.sum(z * r))


def indicators(z, residual, pair):
    """``eta_i = sum over the children c of i of |z_c . R_c|``."""
    z = np.asarray(z, dtype=float)
    r = np.asarray(residual, dtype=float)
    if z.shape != r.shape or len(z) != pair.fine.n_active:
        raise ValueError("dual and residual must both live on the fine mesh of the pair")
    local = np.abs(np.sum(z * r, axis=1))
    return local[pair.children].sum(axis=1)


def dynamic_tolerance(eta, proportion):
    """Tolerance at rank ``floor(proportion * n)`` of the descending indicators.

    Returns ``(TOL, flags)`` with ``flags = eta > TOL``.
    """
    eta = np.asarray(eta, dtype=float)
    n = len(eta)
    if n < 1:
        raise ValueError("need at least one indicator")
    if not 0 < proportion < 1:
        raise ValueError("proportion must lie in (0, 1)")
    if np.any(eta < 0):
        raise ValueError("indicators must be nonnegative")
    k = int(np.floor(proportion * n))
    tol = float(np.sort(eta)[::-1][k])
    flags = eta > tol
    if not flags.any():
        log.warning("dynamic tolerance flagged nothing (TOL = %g, %s)", tol,
                    "all indicators zero" if tol == 0 else "ties at the threshold")
    return tol, flags


def coarsen_flags(eta, fraction, refine_flags=None):
    """Flag the ``fraction`` of elements with the smallest indicators."""
    eta = np.asarray(eta, dtype=float)
    flags = np.zeros(len(eta), dtype=bool)
    k = int(np.floor(fraction * len(eta)))
    if k:
        flags[np.argsort(eta, kind="stable")[:k]] = True
    if refine_flags is not None:
        flags &= ~np.asarray(refine_flags, dtype=bool)
    return flags


def distribution_diagnostic(eta):
    """Maximum-likelihood Weibull and gamma fits with Kolmogorov-Smirnov statistics.

    Advisory only.  Returns ``{"available": False, "reason": ...}`` when
    fewer than 20 positive values exist or the fit degenerates.
    """
    x = np.asarray(eta, dtype=float)
    x = x[x > 0]
    if len(x) < 20:
        return {"available": False, "reason": f"only {len(x)} positive indicators"}
    if np.ptp(x) <= 1e-14 * np.max(x):
        return {"available": False, "reason": "indicators have zero variance"}
    out = {"available": True, "n": int(len(x))}
    for name, dist in (("weibull", stats.weibull_min), ("gamma", stats.gamma)):
        with np.errstate(all="ignore"):
            params = dist.fit(x, floc=0.0)
        ks = stats.kstest(x, dist.cdf, args=params)
        out[f"{name}_params"] = {"shape": float(params[0]), "scale": float(params[2])}
        out[f"ks_stat_{name}"] = float(ks.statistic)
        out[f"ks_pvalue_{name}"] = float(ks.pvalue)
    return out


@dataclass
class StepResult:
    mesh: object
    report: dict
    fields: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.mesh, self.report))


def _apply_flags(mesh, refine, coarsen=None):
    new = mesh.refine(refine) if refine.any() else mesh
    if coarsen is not None and coarsen.any():
        pos = new.position[mesh.active_ids[coarsen]]
        keep = pos[pos >= 0]
        cf = np.zeros(new.n_active, dtype=bool)
        cf[keep] = True
        new = new.coarsen(cf)
    return new


def _select(eta, adapt_cfg):
    if adapt_cfg.tol_mode == "dynamic":
        tol, flags = dynamic_tolerance(eta, adapt_cfg.proportion)
    else:
        tol = float(adapt_cfg.tol_value)
        flags = eta > tol
    cflags = coarsen_flags(eta, adapt_cfg.coarsen_fraction, flags) if adapt_cfg.coarsen_fraction else None
    return tol, flags, cflags


def _finish(mesh, new, u_H, flags, cflags, tol, report, t0):
    n0, n1 = mesh.n_active, new.n_active
    report.update(elements_before=n0, elements_after=n1, refined_fraction=(n1 / n0 - 1.0) / 3.0,
                  TOL=tol, flagged_fraction=float(flags.mean()), flagged=int(flags.sum()),
                  coarsened=int(cflags.sum()) if cflags is not None else 0,
                  total_wall_seconds=time.perf_counter() - t0)
    return transfer_field(u_H, mesh, new) if new is not mesh else u_H


def adapt_step_exact(mesh, u_H, cfg, spec, adapt_cfg, opts=None, cache=None, fine_solve=None):
    """One round of adjoint-weighted adaptation with the dual solved on the refined mesh.

    Returns a :class:`StepResult` (unpacks as ``(new_mesh, report)``) whose
    ``fields`` hold the coarse solution, the fine dual, the indicators and
    the solution transferred to the new mesh.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    cache = cache or (build_patch_cache(mesh) if opts.order == 2 else None)
    st = newton_solve(u_H, mesh, cfg, opts=opts, cache=cache)
    t_primal = time.perf_counter() - t0
    J_H = evaluate(st.u, mesh, spec, cfg, opts, cache, phi=st.phi)
    pair = EmbeddedPair(mesh)
    fcache = build_patch_cache(pair.fine) if opts.order == 2 else None
    u_hH = prolongate(st.u, pair, cache, opts, cfg.gamma)
    R_h = _fine_residual_clean(u_hH, pair, cfg, opts, fcache)
    J_hH = evaluate(u_hH, pair.fine, spec, cfg, opts, fcache)
    do_fine = adapt_cfg.fine_solve if fine_solve is None else fine_solve
    J_fine = float("nan")
    if do_fine:
        fine_state = newton_solve(u_hH, pair.fine, cfg, opts=opts, cache=fcache)
        J_fine = evaluate(fine_state.u, pair.fine, spec, cfg, opts, fcache, phi=fine_state.phi)
    t1 = time.perf_counter()
    dual = solve_dual(u_hH, pair.fine, fcache, cfg, spec, opts, shift=st.shift)
    t_dual = time.perf_counter() - t1
    corr = error_correction(dual.z, R_h)
    eta = indicators(dual.z, R_h, pair)
    tol, flags, cflags = _select(eta, adapt_cfg)
    new = _apply_flags(mesh, flags, cflags)
    report = {"J_coarse": J_H, "J_prolongated": J_hH, "correction": corr, "J_estimate": J_hH + corr,
              "J_fine": J_fine, "dual_wall_seconds": t_dual, "primal_wall_seconds": t_primal,
              "newton_iterations": st.iteration, "fine_residual_l1": float(np.abs(R_h).sum()),
              "eta_sum": float(eta.sum()), "diagnostic": distribution_diagnostic(eta)}
    u_new = _finish(mesh, new, st.u, flags, cflags, tol, report, t0)
    return StepResult(new, report, {"u": st.u, "z_fine": dual.z, "z": pair.restrict(dual.z), "eta": eta,
                                    "flags": flags, "u_next": u_new, "pair": pair, "state": st})


def relaxed_residual(u, mesh, cfg, opts=None, cache=None):
    """Current-mesh residual with unlimited traces and two-point edge quadrature.

    The converged solution zeroes the midpoint-quadrature limited residual;
    this variant keeps a consistency-error-sized remainder that marks where
    the discretization is inaccurate, without any work on a refined mesh.
    """
    opts = opts or SolverOptions()
    cache = cache or build_patch_cache(mesh)
    u = np.asarray(u, dtype=float)
    g = reconstruct(u, cache, mesh)
    E = mesh.edges
    a, b = mesh.nodes[E.nodes[:, 0]], mesh.nodes[E.nodes[:, 1]]
    inner = E.right >= 0
    R = np.where(inner, E.right, 0)
    c = mesh.barycenter
    uinf = euler.freestream_state(cfg)
    total = np.zeros((len(E), 4))
    for s in (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)):
        x = a + s * (b - a)
        uL = u[E.left] + np.einsum("mcd,md->mc", g[E.left], x - c[E.left])
        uR = u[R] + np.einsum("mcd,md->mc", g[R], x - c[R])
        badL = ~euler.admissible(uL, cfg.gamma)
        uL[badL] = u[E.left[badL]]
        uR[~inner] = uinf
        badR = ~euler.admissible(uR, cfg.gamma)
        uR[badR] = u[R[badR]]
        tr = Traces(uL, uR, None, badL, badR)
        total += 0.5 * edge_fluxes(tr, mesh, cfg, opts)
    return without_roundoff(gather(total, mesh), roundoff_floor(total, mesh))


def surrogate_indicators(z, residual):
    """Current-mesh indicators ``eta_i = |z_i . R_i|``."""
    z = np.asarray(z, dtype=float)
    r = np.asarray(residual, dtype=float)
    if z.shape != r.shape:
        raise ValueError(f"dual shape {z.shape} does not match residual shape {r.shape}")
    return np.abs(np.sum(z * r, axis=1))


def adapt_step_surrogate(mesh, u_H, cfg, spec, adapt_cfg, model, opts=None, cache=None, state=None):
    """One adaptation round with the dual predicted on the current mesh.

    ``model`` is a :class:`~dwrflow.surrogate.SurrogateModel` or any
    callable ``(mesh, u, R, cfg) -> z``.  ``state`` skips the primal solve
    when a converged :class:`NewtonState` is already at hand.
    """
    from .surrogate import predict_field

    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    cache = cache or build_patch_cache(mesh)
    st = state if state is not None else newton_solve(u_H, mesh, cfg, opts=opts, cache=cache)
    t_primal = time.perf_counter() - t0
    J_H = evaluate(st.u, mesh, spec, cfg, opts, cache, phi=st.phi)
    R = assemble_residual(st.u, mesh, cache, cfg, opts, phi=st.phi)
    t1 = time.perf_counter()
    if callable(model) and not hasattr(model, "layers"):
        z = np.asarray(model(mesh, st.u, R, cfg), dtype=float)
    else:
        z = predict_field(model, mesh, st.u, R, cfg).z
    t_dual = time.perf_counter() - t1
    R_relax = relaxed_residual(st.u, mesh, cfg, opts, cache)
    eta = surrogate_indicators(z, R_relax)
    tol, flags, cflags = _select(eta, adapt_cfg)
    if not flags.any():
        log.warning("surrogate indicators flagged no elements; mesh unchanged")
    new = _apply_flags(mesh, flags, cflags)
    corr = error_correction(z, R_relax)
    report = {"J_coarse": J_H, "correction": corr, "J_estimate": J_H + corr, "J_fine": float("nan"),
              "dual_wall_seconds": t_dual, "primal_wall_seconds": t_primal, "newton_iterations": st.iteration,
              "eta_sum": float(eta.sum()), "diagnostic": distribution_diagnostic(eta)}
    u_new = _finish(mesh, new, st.u, flags, cflags, tol, report, t0)
    return StepResult(new, report, {"u": st.u, "z": z, "eta": eta, "flags": flags, "u_next": u_new,
                                    "state": st, "R": R, "R_relax": R_relax})


def report_row(round_index, report):
    r = dict(report, round=round_index)
    return [r.get(c, float("nan")) for c in REPORT_COLUMNS]
