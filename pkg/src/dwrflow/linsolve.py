"""
Block-sparse systems and their linear solvers.

``solve_linear`` offers three methods:

* ``gmres``: restarted GMRES with block-Jacobi preconditioning;
* ``multilevel``: V-cycles over the refinement tree with block symmetric
  Gauss-Seidel smoothing and piecewise-constant transfer;
* ``direct``: sparse LU, used as the coarse solver and as a fallback.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .parallel import get_engine

BS = 4


class LinearSolveError(RuntimeError):
    """Raised on stagnation; ``best`` holds the iterate with the smallest residual."""

    def __init__(self, msg, best=None, history=None):
        super().__init__(msg)
        self.best = best
        self.history = history or []


@dataclass
class BlockSystem:
    """Sparse matrix of 4x4 blocks over active elements plus a block right-hand side.

    ``matrix`` is a scipy BSR matrix whose block pattern is structurally
    symmetric and contains every diagonal block.  ``shift`` is the scalar
    added to the diagonal (regularization); ``mesh`` is kept for solvers
    that need the refinement tree.
    """

    matrix: sp.bsr_matrix
    rhs: np.ndarray
    shift: float = 0.0
    mesh: object = None
    info: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.matrix.shape[0] // BS

    def block(self, i, j):
        A = self.matrix
        lo, hi = A.indptr[i], A.indptr[i + 1]
        hit = np.nonzero(A.indices[lo:hi] == j)[0]
        if len(hit) == 0:
            return None
        return A.data[lo + hit[0]].copy()

    def block_pattern(self):
        """Set of (i, j) block coordinates."""
        A = self.matrix
        rows = np.repeat(np.arange(self.n), np.diff(A.indptr))
        return set(zip(rows.tolist(), A.indices.tolist()))

    def diagonal_blocks(self):
        A = self.matrix
        rows = np.repeat(np.arange(self.n), np.diff(A.indptr))
        pos = np.nonzero(rows == A.indices)[0]
        D = np.empty((self.n, BS, BS))
        D[rows[pos]] = A.data[pos]
        return D

    def matvec(self, v):
        v = np.asarray(v, dtype=float).reshape(-1)
        return (self.matrix @ v).reshape(-1, BS)

    def transpose(self, rhs=None):
        """Block transpose: block (i, j) of the result is block (j, i) transposed."""
        At = self.matrix.T.tobsr(blocksize=(BS, BS))
        At.sort_indices()
        return BlockSystem(At, self.rhs if rhs is None else rhs, self.shift, self.mesh, dict(self.info))


def symmetric_bsr(A, n):
    """BSR copy of ``A`` whose block pattern is the union of its own and its transpose's."""
    Ab = sp.bsr_matrix(A, blocksize=(BS, BS))
    Ab.sort_indices()
    rows = np.repeat(np.arange(n), np.diff(Ab.indptr))
    P = sp.csr_matrix((np.ones(len(rows)), (rows, Ab.indices)), shape=(n, n))
    U = (abs(P) + abs(P.T) + sp.identity(n, format="csr")).tocsr()
    U.sort_indices()
    urows = np.repeat(np.arange(n), np.diff(U.indptr))
    ukey = urows * n + U.indices
    pos = np.searchsorted(ukey, rows * n + Ab.indices)
    data = np.zeros((len(ukey), BS, BS))
    data[pos] = Ab.data
    out = sp.bsr_matrix((data, U.indices.copy(), U.indptr.copy()), shape=(BS * n, BS * n))
    return out


def block_inverse(D):
    return np.linalg.inv(D)


# ---------------------------------------------------------------- smoothers
class BlockSGS:
    """Block symmetric Gauss-Seidel in element order.

    The forward sweep solves ``(D + L) x = b - U x`` one block row at a
    time; that recurrence is inherently sequential.  The triangular solves
    are done on the block-Jacobi-scaled matrix, whose strict triangles are
    scalar triangular with a unit diagonal.
    """

    def __init__(self, A, n):
        A = sp.csr_matrix(A)
        self.A = A
        self.n = n
        Ab = sp.bsr_matrix(A, blocksize=(BS, BS))
        Ab.sort_indices()
        rows = np.repeat(np.arange(n), np.diff(Ab.indptr))
        diag = rows == Ab.indices
        D = np.zeros((n, BS, BS))
        D[rows[diag]] = Ab.data[diag]
        self.Dinv = block_inverse(D)
        blk = np.arange(BS * n) // BS
        S = (_block_diag(self.Dinv) @ A).tocoo()
        off = blk[S.row] != blk[S.col]
        self.lower = _unit_triangle(S, off & (S.col < S.row))
        self.upper = _unit_triangle(S, off & (S.col > S.row))
        C = A.tocoo()
        off = blk[C.row] != blk[C.col]
        self.L = _select(C, off & (C.col < C.row))
        self.U = _select(C, off & (C.col > C.row))

    def _dinv(self, r):
        return np.einsum("nij,nj->ni", self.Dinv, r.reshape(-1, BS)).reshape(-1)

    def forward(self, x, b):
        rhs = self._dinv(b - self.U @ x)
        return spla.spsolve_triangular(self.lower, rhs, lower=True)

    def backward(self, x, b):
        rhs = self._dinv(b - self.L @ x)
        return spla.spsolve_triangular(self.upper, rhs, lower=False)

    def sweep(self, x, b, times=1):
        for _ in range(times):
            x = self.forward(x, b)
            x = self.backward(x, b)
        return x


def _block_diag(blocks):
    n = len(blocks)
    indptr = np.arange(n + 1)
    indices = np.arange(n)
    return sp.bsr_matrix((blocks, indices, indptr), shape=(BS * n, BS * n)).tocsr()


def _select(M, keep):
    return sp.csr_matrix((M.data[keep], (M.row[keep], M.col[keep])), shape=M.shape)


def _unit_triangle(M, keep):
    n = M.shape[0]
    rows = np.concatenate([M.row[keep], np.arange(n)])
    cols = np.concatenate([M.col[keep], np.arange(n)])
    vals = np.concatenate([M.data[keep], np.ones(n)])
    return sp.csr_matrix((vals, (rows, cols)), shape=M.shape)


# ---------------------------------------------------------------- multilevel
def _aggregation_levels(mesh, min_size=64, max_levels=12):
    """Piecewise-constant aggregation maps from the refinement tree.

    Each level maps every element to its parent where one exists, so the
    coarse spaces are the ancestors of the current active elements.
    """
    if mesh is None:
        return []
    ids = np.asarray(mesh.active_ids)
    parents = np.asarray(mesh._parent, dtype=np.int64)
    maps = []
    for _ in range(max_levels):
        par = parents[ids]
        up = np.where(par >= 0, par, ids)
        uniq, agg = np.unique(up, return_inverse=True)
        if len(uniq) == len(ids) or len(ids) <= min_size:
            break
        maps.append(agg)
        ids = uniq
    return maps


class Multilevel:
    def __init__(self, A, mesh, n, pre=3, post=3, coarse_max=4000):
        self.pre, self.post = pre, post
        self.levels = []
        maps = _aggregation_levels(mesh)
        A = sp.csr_matrix(A)
        m = n
        for agg in maps:
            if self.levels and m <= coarse_max:
                break
            P = sp.kron(sp.csr_matrix((np.ones(m), (np.arange(m), agg)), shape=(m, agg.max() + 1)),
                        sp.identity(BS), format="csr")
            self.levels.append((A, BlockSGS(A, m), P))
            A = (P.T @ A @ P).tocsr()
            m = agg.max() + 1
        self.coarse = spla.splu(A.tocsc())
        self.coarse_A = A

    def vcycle(self, b, level=0):
        if level == len(self.levels):
            return self.coarse.solve(b)
        A, smoother, P = self.levels[level]
        x = smoother.sweep(np.zeros_like(b), b, self.pre)
        r = b - A @ x
        x = x + P @ self.vcycle(P.T @ r, level + 1)
        return smoother.sweep(x, b, self.post)


# ---------------------------------------------------------------- drivers
def _rel(A, x, b):
    nb = np.linalg.norm(b)
    return np.linalg.norm(b - A @ x) / nb if nb > 0 else np.linalg.norm(A @ x)


def solve_linear(system, method="gmres", tol=1e-2, max_iter=1000, restart=30, stall_window=200, precond=None,
                 lu_max=60000):
    """Solve ``system.matrix @ x = system.rhs``.

    Returns ``(x, info)`` with ``x`` shaped ``(n, 4)`` and ``info`` holding
    the iteration count and the final relative residual.  Raises
    :class:`LinearSolveError` carrying the best iterate when the residual
    fails to drop tenfold over ``stall_window`` iterations.

    GMRES is preconditioned by block Jacobi, or, when ``precond`` is an
    approximating :class:`BlockSystem`, by its sparse LU (up to ``lu_max``
    elements) or one multilevel V-cycle on it.
    """
    A = system.matrix.tocsr()
    b = np.asarray(system.rhs, dtype=float).reshape(-1)
    n = system.n
    if not np.any(b):
        return np.zeros((n, BS)), {"iterations": 0, "residual": 0.0, "method": method}
    if method == "direct":
        x = spla.splu(A.tocsc()).solve(b)
        return x.reshape(n, BS), {"iterations": 1, "residual": _rel(A, x, b), "method": method}
    if method == "gmres":
        return _gmres(A, b, system, tol, max_iter, restart, stall_window, precond, lu_max)
    if method == "multilevel":
        return _multilevel(A, b, system, tol, max_iter, stall_window)
    raise ValueError(f"unknown linear method {method!r}")


def _watch(history, x, it, best, window, method):
    if best[0] is None or history[-1] < best[1]:
        best[0], best[1] = x.copy(), history[-1]
    if it >= window:
        back = history[-1 - window] if len(history) > window else history[0]
        if min(history[-window:]) > 0.1 * back:
            raise LinearSolveError(
                f"{method} stagnated: residual {history[-1]:.3e} after {it} iterations",
                best=best[0].reshape(-1, BS), history=list(history))


def _approximate_inverse(P, lu_max):
    B = P.matrix.tocsr()
    if P.n <= lu_max:
        return spla.splu(B.tocsc()).solve
    return Multilevel(B, P.mesh, P.n).vcycle


def _gmres(A, b, system, tol, max_iter, restart, window, precond=None, lu_max=60000):
    engine = get_engine()
    n = system.n
    method = "gmres"
    if precond is None:
        Dinv = block_inverse(system.diagonal_blocks())

    def jacobi(r):
        r = r.reshape(n, BS)
        out = np.empty_like(r)

        def kernel(lo, hi):
            out[lo:hi] = np.einsum("nij,nj->ni", Dinv[lo:hi], r[lo:hi])

        engine.run(kernel, n)
        return out.reshape(-1)

    M = spla.LinearOperator(A.shape, matvec=jacobi if precond is None else _approximate_inverse(precond, lu_max))
    history = [1.0]
    best = [None, np.inf]
    count = [0]

    def cb(xk):
        count[0] += restart
        history.extend([_rel(A, xk, b)] * restart)
        if history[-1] > tol:
            _watch(history, xk, count[0], best, window, method)

    x, code = spla.gmres(A, b, rtol=tol, atol=0.0, restart=restart, maxiter=max(1, max_iter // restart),
                         M=M, callback=cb, callback_type="x")
    res = _rel(A, x, b)
    if res > tol:
        if res > history[-1] and best[0] is not None:
            x, res = best[0], best[1]
        raise LinearSolveError(f"{method} did not reach {tol:g} (residual {res:.3e})", best=x.reshape(n, BS),
                               history=history)
    return x.reshape(n, BS), {"iterations": max(count[0], 1), "residual": res, "method": method}


def _multilevel(A, b, system, tol, max_iter, window):
    n = system.n
    ml = Multilevel(A, system.mesh, n)
    x = np.zeros_like(b)
    history = [1.0]
    best = [None, np.inf]
    for it in range(1, max_iter + 1):
        x = x + ml.vcycle(b - A @ x)
        history.append(_rel(A, x, b))
        if history[-1] <= tol:
            return x.reshape(n, BS), {"iterations": it, "residual": history[-1], "method": "multilevel"}
        if not np.isfinite(history[-1]):
            break
        _watch(history, x, it, best, window, "multilevel")
    bx = best[0] if best[0] is not None else x
    raise LinearSolveError(f"multilevel did not reach {tol:g} in {max_iter} cycles", best=bx.reshape(n, BS),
                           history=history)
