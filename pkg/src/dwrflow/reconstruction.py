"""Least-squares linear reconstruction with Barth-Jespersen limiting."""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError
from .parallel import get_engine


class CacheMismatchError(RuntimeError):
    pass


@dataclass
class PatchCache:
    """Reconstruction patches and gradient weights for one mesh topology.

    ``neighbors[i, k]`` is the k-th patch member of element i, padded with
    ``i`` itself (``mask`` False, zero weight) up to the widest patch.
    ``weights[i, k]`` is the 2-vector multiplying ``u[nb] - u[i]`` in the
    least-squares gradient; ``face_offsets[i, f]`` is the vector from the
    barycenter to the midpoint of local edge f.
    """

    stamp: int
    neighbors: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    face_offsets: np.ndarray

    @property
    def sizes(self):
        return self.mask.sum(axis=1)

    def patch(self, i):
        return self.neighbors[i, self.mask[i]].tolist()


def _vertex_neighbors(mesh):
    n = mesh.n_active
    rows = np.repeat(np.arange(n), 3)
    inc = sp.csr_matrix((np.ones(3 * n), (rows, mesh.tri.ravel())), shape=(n, len(mesh.nodes)))
    return (inc @ inc.T).tocsr()


def build_patch_cache(mesh):
    n = mesh.n_active
    E = mesh.edges
    other = np.where(mesh.elem_sign > 0, E.right[mesh.elem_edges], E.left[mesh.elem_edges])
    patches = [sorted(int(j) for j in row if j >= 0) for row in other]
    short = [i for i, p in enumerate(patches) if len(p) < 3]
    if short:
        V = _vertex_neighbors(mesh)
        for i in short:
            extra = [int(j) for j in V.indices[V.indptr[i]:V.indptr[i + 1]] if j != i and j not in patches[i]]
            patches[i] = sorted(set(patches[i]) | set(extra))
    width = max(len(p) for p in patches)
    nb = np.repeat(np.arange(n)[:, None], width, axis=1)
    mask = np.zeros((n, width), dtype=bool)
    for i, p in enumerate(patches):
        nb[i, :len(p)] = p
        mask[i, :len(p)] = True
    c = mesh.barycenter
    D = np.where(mask[:, :, None], c[nb] - c[:, None, :], 0.0)
    M = np.einsum("nki,nkj->nij", D, D)
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    scale = np.einsum("nii->n", M) ** 2
    bad = (mask.sum(axis=1) < 3) | (det <= 1e-12 * scale)
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise MeshError(f"element {mesh.active_ids[i]} has fewer than 3 usable reconstruction neighbours")
    Minv = np.empty_like(M)
    Minv[:, 0, 0] = M[:, 1, 1] / det
    Minv[:, 1, 1] = M[:, 0, 0] / det
    Minv[:, 0, 1] = -M[:, 0, 1] / det
    Minv[:, 1, 0] = -M[:, 1, 0] / det
    W = np.einsum("nij,nkj->nki", Minv, D)
    mids = mesh.edges.midpoint[mesh.elem_edges]
    offsets = mids - c[:, None, :]
    return PatchCache(mesh.stamp, nb, mask, W, offsets)


def _check(cache, mesh):
    if cache.stamp != mesh.stamp:
        raise CacheMismatchError("patch cache was built for a different mesh; rebuild it")


def reconstruct(field, cache, mesh, engine=None):
    """Least-squares gradients, shape ``(n, ncomp, 2)``."""
    _check(cache, mesh)
    u = np.asarray(field, dtype=float)
    squeeze = u.ndim == 1
    if squeeze:
        u = u[:, None]
    n = len(u)
    out = np.empty((n, u.shape[1], 2))
    nb, W = cache.neighbors, cache.weights

    def kernel(lo, hi):
        du = u[nb[lo:hi]] - u[lo:hi, None, :]
        out[lo:hi] = np.einsum("nkc,nkd->ncd", du, W[lo:hi])

    (engine or get_engine()).run(kernel, n)
    return out[:, 0, :] if squeeze else out


def limiter_factors(field, gradients, cache, mesh, engine=None):
    """Barth-Jespersen factors in [0, 1], shape ``(n, ncomp)``."""
    _check(cache, mesh)
    u = np.asarray(field, dtype=float)
    g = np.asarray(gradients, dtype=float)
    squeeze = u.ndim == 1
    if squeeze:
        u = u[:, None]
        g = g[:, None, :]
    n = len(u)
    phi = np.empty(u.shape)
    nb, off = cache.neighbors, cache.face_offsets

    def kernel(lo, hi):
        vals = u[nb[lo:hi]]
        ui = u[lo:hi]
        umax = np.maximum(vals.max(axis=1), ui) - ui
        umin = np.minimum(vals.min(axis=1), ui) - ui
        d = np.einsum("ncd,nfd->nfc", g[lo:hi], off[lo:hi])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(d > 0, umax[:, None, :] / d, np.where(d < 0, umin[:, None, :] / d, 1.0))
        phi[lo:hi] = np.clip(r, 0.0, 1.0).min(axis=1)

    (engine or get_engine()).run(kernel, n)
    return phi[:, 0] if squeeze else phi


def limit(field, gradients, mesh, cache, engine=None):
    """Barth-Jespersen limited gradients."""
    phi = limiter_factors(field, gradients, cache, mesh, engine)
    return np.asarray(gradients) * phi[..., None]
