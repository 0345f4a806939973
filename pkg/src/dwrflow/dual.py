"""Discrete adjoint: the transposed, regularized Jacobian system."""
import time
from dataclasses import dataclass, field

import numpy as np

from .functional import linearize
from .linsolve import LinearSolveError, solve_linear
from .primal import SolverOptions, assemble_jacobian, assemble_residual
from .reconstruction import build_patch_cache


class DualSolveError(RuntimeError):
    pass


@dataclass
class DualField:
    """Dual variables per active element of the mesh with ``stamp``."""

    z: np.ndarray
    stamp: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.z)):
            raise DualSolveError("dual field has non-finite entries")

    def __len__(self):
        return len(self.z)


def assemble_dual_system(u, mesh, cache, cfg, spec, alpha_reg=None, opts=None, shift=None, phi=None,
                         stencil="full", with_preconditioner=False):
    """Transposed Jacobian with ``dJ/du`` as right-hand side.

    The diagonal shift is ``alpha_reg * ||R(u)||_1`` unless ``shift`` is
    given, e.g. the final shift of the primal solve.  With
    ``with_preconditioner`` the transposed edge-neighbour Jacobian is
    returned as well, as ``(system, approximation)``.
    """
    opts = opts or SolverOptions()
    if cache is None and opts.order == 2:
        cache = build_patch_cache(mesh)
    alpha = opts.alpha_reg if alpha_reg is None else alpha_reg
    R, tr = assemble_residual(u, mesh, cache, cfg, opts, return_traces=True, phi=phi)
    primal = assemble_jacobian(u, mesh, cache, cfg, alpha, opts, residual=R, stencil=stencil, traces=tr,
                               shift=shift)
    rhs = linearize(u, mesh, spec, cfg, opts, cache, phi=tr.phi)
    system = primal.transpose(rhs)
    if not with_preconditioner:
        return system
    if stencil == "first" or opts.order == 1:
        return system, system
    low = assemble_jacobian(u, mesh, cache, cfg, alpha, opts, residual=R, stencil="first", traces=tr,
                            shift=primal.shift)
    return system, low.transpose(rhs)


# the sparse LU of the first-order preconditioner needs about 2.3 GB at 92k elements
PRECOND_LU_MAX = 100_000


def solve_dual(u, mesh, cache, cfg, spec, opts=None, alpha_reg=None, shift=None, phi=None, method="gmres",
               tol=1e-8, stencil="full"):
    """Solve ``A^T z = dJ/du`` to relative residual ``tol``.

    ``method="gmres"`` runs GMRES on the full transposed system with the
    transposed edge-neighbour Jacobian as preconditioner; ``"direct"``
    factorizes the full system.
    """
    t0 = time.perf_counter()
    system, low = assemble_dual_system(u, mesh, cache, cfg, spec, alpha_reg, opts, shift, phi, stencil,
                                       with_preconditioner=True)
    try:
        if method == "gmres":
            z, info = solve_linear(system, "gmres", tol, max_iter=3000, restart=50, precond=low,
                                   lu_max=PRECOND_LU_MAX)
        else:
            z, info = solve_linear(system, method, tol)
    except LinearSolveError as err:
        raise DualSolveError(f"dual solve failed: {err}") from err
    if info["residual"] > tol:
        raise DualSolveError(f"dual residual {info['residual']:.3e} above {tol:g}")
    info = dict(info, shift=system.shift, seconds=time.perf_counter() - t0)
    return DualField(z, mesh.stamp, info)
