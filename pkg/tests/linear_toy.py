"""Linear upwind advection-reaction system on a triangle mesh.

Residual ``R(u) = A u - f`` and functional ``J(u) = g . u`` are both
linear, so the adjoint-weighted correction has no Taylor remainder.
"""
import numpy as np
import scipy.sparse as sp

from dwrflow.linsolve import BlockSystem, symmetric_bsr

VELOCITY = np.array([1.0, 0.4])
COUPLING = np.array([[2.0, 0.3, 0.0, 0.1],
                     [0.3, 1.5, 0.2, 0.0],
                     [0.0, 0.2, 1.0, 0.3],
                     [0.1, 0.0, 0.3, 2.5]])
INFLOW = np.array([1.0, 0.5, 0.1, 1.9])


def weight(x):
    return np.column_stack([np.exp(-((x[:, 0] - 0.5) ** 2 + (x[:, 1] - 0.5) ** 2) / 0.05),
                            x[:, 0], x[:, 1] ** 2, np.ones(len(x))])


def source(x):
    return np.column_stack([np.sin(3 * x[:, 0]), np.cos(2 * x[:, 1]), x[:, 0] * x[:, 1], 1.0 + x[:, 0]])


def operator(mesh):
    """Sparse ``A`` (4x4 blocks) and load ``f``."""
    n = mesh.n_active
    E = mesh.edges
    an = E.normal @ VELOCITY * E.length
    inner = E.right >= 0
    L, R = E.left, E.right
    rows, cols, vals = [], [], []
    f = source(mesh.barycenter) * mesh.area[:, None]
    up, dn = np.maximum(an, 0.0), np.minimum(an, 0.0)
    # outflow part of every edge on the left cell, inflow part on whichever cell receives it
    rows += [L, L[inner], R[inner], R[inner]]
    cols += [L, R[inner], L[inner], R[inner]]
    vals += [up, dn[inner], -up[inner], -dn[inner]]
    np.subtract.at(f, L[~inner], (dn[~inner])[:, None] * INFLOW)
    S = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    A = sp.kron(S, sp.identity(4)) + sp.kron(sp.diags(mesh.area), COUPLING)
    return A.tocsr(), f


def residual(mesh, u):
    A, f = operator(mesh)
    return (A @ u.reshape(-1)).reshape(-1, 4) - f


def functional(mesh, u):
    return float(np.sum(weight(mesh.barycenter) * mesh.area[:, None] * u))


def functional_gradient(mesh):
    return weight(mesh.barycenter) * mesh.area[:, None]


def system(mesh, rhs):
    A, _ = operator(mesh)
    return BlockSystem(symmetric_bsr(A, mesh.n_active), rhs, 0.0, mesh)


def solve(mesh):
    A, f = operator(mesh)
    return np.linalg.solve(A.toarray(), f.reshape(-1)).reshape(-1, 4) if A.shape[0] <= 4000 else \
        sp.linalg.spsolve(A.tocsc(), f.reshape(-1)).reshape(-1, 4)
