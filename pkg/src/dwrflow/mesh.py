"""
Hierarchical triangular meshes with red refinement and derived closure.

The refinement tree holds *red* elements (level-0 roots and 4-way midpoint
children).  Hanging midpoints left by red refinement are removed by *closure*
pieces: a leaf with one refined neighbour is bisected (green), a leaf with
two is split into three (blue), and a leaf with three is refined red.  Closure
pieces are regenerated after every mutation, so they never persist into a
later refinement of their region.  ``uniform_refine`` freezes the current
closure pieces into permanent elements so that every active element receives
exactly four children.

Field arrays are ordered by ascending element id of the active elements
(``mesh.active_ids``).
"""
import itertools
import logging
from collections import Counter

import numpy as np

log = logging.getLogger(__name__)

INTERIOR, WALL, FARFIELD = 0, 1, 2
MARKER_NAMES = {INTERIOR: "interior", WALL: "wall", FARFIELD: "farfield"}

ROOT, RED, GREEN, FROZEN = 0, 1, 2, 3

_stamps = itertools.count(1)


class MeshError(ValueError):
    pass


def _key(a, b):
    return (a, b) if a < b else (b, a)


def signed_area(p0, p1, p2):
    return 0.5 * ((p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
                  - (p2[..., 0] - p0[..., 0]) * (p1[..., 1] - p0[..., 1]))


class Edges:
    """Edge table of the active mesh (arrays indexed by edge)."""

    def __init__(self, nodes, left, right, normal, length, marker, midpoint):
        self.nodes = nodes
        self.left = left
        self.right = right
        self.normal = normal
        self.length = length
        self.marker = marker
        self.midpoint = midpoint

    def __len__(self):
        return len(self.left)

    @property
    def interior(self):
        return self.right >= 0


class MeshHierarchy:
    """Unstructured triangular mesh with a refinement tree.

    Build one with :func:`dwrflow.io.load_mesh`, :func:`generate_naca_omesh`
    or the constructor; every mutation returns a new hierarchy.
    """

    def __init__(self, nodes, triangles, boundary, curve=None, wall_param=None, level_cap=25):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 2 or not np.all(np.isfinite(nodes)):
            raise MeshError("nodes must be a finite (N, 2) array")
        self._nodes = [tuple(p) for p in nodes.tolist()]
        self._tri = []
        for t in np.asarray(triangles, dtype=int).tolist():
            self._tri.append(tuple(t))
        n = len(self._tri)
        self._parent = [-1] * n
        self._level = [0] * n
        self._kind = [ROOT] * n
        self._alive = [True] * n
        self._children = [[] for _ in range(n)]
        self._mid = {}
        self._bmark = {_key(a, b): int(m) for (a, b), m in dict(boundary).items()}
        self.curve = curve
        self._wall_param = dict(wall_param or {})
        self.level_cap = level_cap
        self.last_op = {"op": "create"}
        self.projection_fallbacks = 0
        self._finalize()

    # ------------------------------------------------------------------ copy
    def copy(self):
        new = object.__new__(MeshHierarchy)
        new._nodes = list(self._nodes)
        new._tri = list(self._tri)
        new._parent = list(self._parent)
        new._level = list(self._level)
        new._kind = list(self._kind)
        new._alive = list(self._alive)
        new._children = [list(c) for c in self._children]
        new._mid = dict(self._mid)
        new._bmark = dict(self._bmark)
        new.curve = self.curve
        new._wall_param = dict(self._wall_param)
        new.level_cap = self.level_cap
        new.last_op = {}
        new.projection_fallbacks = self.projection_fallbacks
        return new

    # ------------------------------------------------------------- tree info
    @property
    def n_elements_total(self):
        return len(self._tri)

    def parent(self, eid):
        return self._parent[eid]

    def children(self, eid):
        return list(self._children[eid])

    def level(self, eid):
        return self._level[eid]

    def kind(self, eid):
        return ("root", "red", "green", "frozen")[self._kind[eid]]

    def is_active(self, eid):
        return 0 <= eid < len(self._tri) and self._alive[eid] and not self._children[eid]

    @property
    def level_count(self):
        return int(max(self._level[e] for e in self.active_ids)) + 1

    def _is_base_leaf(self, e):
        ch = self._children[e]
        return self._alive[e] and self._kind[e] != GREEN and (not ch or self._kind[ch[0]] == GREEN)

    def _base_leaves(self):
        return [e for e in range(len(self._tri)) if self._is_base_leaf(e)]

    # ------------------------------------------------------------ primitives
    def _add_element(self, tri, parent, kind):
        eid = len(self._tri)
        self._tri.append(tri)
        self._parent.append(parent)
        self._level.append(self._level[parent] + 1 if parent >= 0 else 0)
        self._kind.append(kind)
        self._alive.append(True)
        self._children.append([])
        if parent >= 0:
            self._children[parent].append(eid)
        return eid

    def _kill(self, e):
        for c in self._children[e]:
            self._kill(c)
        self._children[e] = []
        self._alive[e] = False

    def _midpoint(self, a, b):
        k = _key(a, b)
        m = self._mid.get(k)
        if m is not None:
            return m, False
        pa, pb = self._nodes[a], self._nodes[b]
        pos = (0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]))
        marker = self._bmark.get(k)
        projected = False
        theta = None
        if (marker == WALL and self.curve is not None
                and a in self._wall_param and b in self._wall_param):
            ta, tb = self._wall_param[a], self._wall_param[b]
            if abs(ta - tb) > np.pi:
                if ta < tb:
                    ta += 2 * np.pi
                else:
                    tb += 2 * np.pi
            theta = float(np.mod(0.5 * (ta + tb), 2 * np.pi))
            pos = tuple(float(v) for v in self.curve.point(theta))
            projected = True
        m = len(self._nodes)
        self._nodes.append(pos)
        self._mid[k] = m
        if marker is not None:
            self._bmark[_key(a, m)] = marker
            self._bmark[_key(m, b)] = marker
        if theta is not None:
            self._wall_param[m] = theta
        return m, projected

    def _red_refine(self, e):
        if self._level[e] + 1 > self.level_cap:
            raise MeshError(f"refining element {e} exceeds the level cap {self.level_cap}")
        for c in [c for c in self._children[e] if self._kind[c] == GREEN]:
            self._kill(c)
        self._children[e] = [c for c in self._children[e] if self._alive[c]]
        a, b, c = self._tri[e]
        mab, pab = self._midpoint(a, b)
        mbc, pbc = self._midpoint(b, c)
        mca, pca = self._midpoint(c, a)
        kids = [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]
        if pab or pbc or pca:
            for m, proj, (p, q) in ((mab, pab, (a, b)), (mbc, pbc, (b, c)), (mca, pca, (c, a))):
                if proj and any(self._tri_area(t) <= 0 for t in kids if m in t):
                    pp, pq = self._nodes[p], self._nodes[q]
                    self._nodes[m] = (0.5 * (pp[0] + pq[0]), 0.5 * (pp[1] + pq[1]))
                    self.projection_fallbacks += 1
                    log.warning("wall projection of node %d would invert a child; kept straight midpoint", m)
        for t in kids:
            self._add_element(t, e, RED)

    def _tri_area(self, t):
        p0, p1, p2 = (self._nodes[i] for i in t)
        return 0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))

    def _leaf_edges(self, leaves=None):
        S = Counter()
        for e in (self._base_leaves() if leaves is None else leaves):
            a, b, c = self._tri[e]
            S[_key(a, b)] += 1
            S[_key(b, c)] += 1
            S[_key(c, a)] += 1
        return S

    def _split(self, p, q, S):
        """Whether edge (p, q) is subdivided by some leaf edge below it."""
        m = self._mid.get(_key(p, q))
        if m is None:
            return False
        return any(S.get(_key(r, s), 0) or self._split(r, s, S) for r, s in ((p, m), (m, q)))

    def _edge_status(self, e, S):
        """Local indices of hanging edges of leaf ``e`` and 1-irregularity violation."""
        a, b, c = self._tri[e]
        hang = []
        viol = False
        for k, (p, q) in enumerate(((a, b), (b, c), (c, a))):
            if not self._split(p, q, S):
                continue
            hang.append(k)
            m = self._mid[_key(p, q)]
            if self._split(p, m, S) or self._split(m, q, S):
                viol = True
        return hang, viol

    def _close(self):
        while True:
            leaves = self._base_leaves()
            S = self._leaf_edges(leaves)
            todo = []
            for e in leaves:
                hang, viol = self._edge_status(e, S)
                if viol or len(hang) == 3:
                    todo.append(e)
            if not todo:
                return
            for e in todo:
                self._red_refine(e)

    def _closure_pieces(self, e, hang):
        a, b, c = self._tri[e]
        verts = (a, b, c)
        if len(hang) == 1:
            k = hang[0]
            p, q, r = verts[k], verts[(k + 1) % 3], verts[(k + 2) % 3]
            m = self._mid[_key(p, q)]
            return [(p, m, r), (m, q, r)]
        if len(hang) == 2:
            # rotate so the hanging edges are (p,q) and (q,r)
            k = ({0, 1, 2} - set(hang)).pop()
            r, p, q = verts[k], verts[(k + 1) % 3], verts[(k + 2) % 3]
            # unsplit edge is (r, p); hanging edges (p, q), (q, r)
            m1 = self._mid[_key(p, q)]
            m2 = self._mid[_key(q, r)]
            P = np.array(self._nodes[p])
            R = np.array(self._nodes[r])
            M1 = np.array(self._nodes[m1])
            M2 = np.array(self._nodes[m2])
            corner = (m1, q, m2)
            if np.linalg.norm(P - M2) <= np.linalg.norm(M1 - R):
                return [corner, (p, m1, m2), (p, m2, r)]
            return [corner, (p, m1, r), (m1, m2, r)]
        return []

    def _rebuild_closure(self):
        leaves = self._base_leaves()
        S = self._leaf_edges(leaves)
        for e in leaves:
            hang, _ = self._edge_status(e, S)
            pieces = self._closure_pieces(e, hang)
            existing = [c for c in self._children[e] if self._kind[c] == GREEN]
            if [self._tri[c] for c in existing] == pieces:
                continue
            for c in existing:
                self._kill(c)
            self._children[e] = [c for c in self._children[e] if self._alive[c]]
            for t in pieces:
                self._add_element(t, e, GREEN)

    # -------------------------------------------------------------- finalize
    def _finalize(self):
        self.stamp = next(_stamps)
        nodes = np.array(self._nodes, dtype=float)
        self.nodes = nodes
        alive = np.array(self._alive, dtype=bool)
        has_children = np.array([bool(c) for c in self._children], dtype=bool)
        self.active_ids = np.nonzero(alive & ~has_children)[0]
        self.position = np.full(len(self._tri), -1, dtype=np.int64)
        self.position[self.active_ids] = np.arange(len(self.active_ids))
        tri = np.array([self._tri[e] for e in self.active_ids], dtype=np.int64).reshape(-1, 3)
        self.tri = tri
        p0, p1, p2 = nodes[tri[:, 0]], nodes[tri[:, 1]], nodes[tri[:, 2]]
        self.area = signed_area(p0, p1, p2)
        if np.any(self.area <= 0):
            bad = self.active_ids[np.argmin(self.area)]
            raise MeshError(f"active element {bad} has nonpositive area {self.area.min():.3e}")
        self.barycenter = (p0 + p1 + p2) / 3.0
        self._build_edges()

    def _build_edges(self):
        tri = self.tri
        n = len(tri)
        nn = len(self.nodes)
        a = tri[:, [0, 1, 2]].ravel()
        b = tri[:, [1, 2, 0]].ravel()
        owner = np.repeat(np.arange(n), 3)
        local = np.tile(np.arange(3), n)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        key = lo * nn + hi
        order = np.argsort(key, kind="stable")
        skey = key[order]
        uniq, first, counts = np.unique(skey, return_index=True, return_counts=True)
        if np.any(counts > 2):
            k = uniq[np.argmax(counts)]
            raise MeshError(f"duplicate edge ({k // nn}, {k % nn}) shared by more than two triangles")
        m = len(uniq)
        h1 = order[first]
        h2 = np.where(counts == 2, order[np.minimum(first + 1, len(order) - 1)], -1)
        o1 = owner[h1]
        o2 = np.where(h2 >= 0, owner[np.maximum(h2, 0)], -1)
        swap = (h2 >= 0) & (o2 < o1)
        hl = np.where(swap, h2, h1)
        hr = np.where(swap, h1, h2)
        left = owner[hl]
        right = np.where(hr >= 0, owner[np.maximum(hr, 0)], -1)
        pa = self.nodes[a[hl]]
        pb = self.nodes[b[hl]]
        d = pb - pa
        length = np.hypot(d[:, 0], d[:, 1])
        normal = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
        marker = np.zeros(m, dtype=np.int64)
        for i in np.nonzero(right < 0)[0]:
            k = (int(lo[hl[i]]), int(hi[hl[i]]))
            mk = self._bmark.get(k)
            if mk is None:
                raise MeshError(f"boundary edge {k} has no boundary marker")
            marker[i] = mk
        self.edges = Edges(np.stack([a[hl], b[hl]], axis=1), left, right, normal, length,
                           marker, 0.5 * (pa + pb))
        elem_edges = np.empty(3 * n, dtype=np.int64)
        elem_sign = np.empty(3 * n)
        inv = np.empty(3 * n, dtype=np.int64)
        inv[order] = np.repeat(np.arange(m), counts)
        elem_edges[:] = inv
        is_left = np.zeros(3 * n, dtype=bool)
        is_left[hl] = True
        elem_sign[:] = np.where(is_left, 1.0, -1.0)
        self.elem_edges = elem_edges.reshape(n, 3)
        self.elem_sign = elem_sign.reshape(n, 3)
        del local

    # ------------------------------------------------------------ properties
    @property
    def n_active(self):
        return len(self.active_ids)

    def __len__(self):
        return self.n_active

    def __repr__(self):
        return (f"MeshHierarchy(active={self.n_active}, nodes={len(self.nodes)}, "
                f"edges={len(self.edges)}, levels={self.level_count})")

    @property
    def wall_param(self):
        return dict(self._wall_param)

    def is_closure(self):
        """Mask over active elements marking derived closure pieces."""
        return np.array([self._kind[e] == GREEN for e in self.active_ids], dtype=bool)

    def checksum(self):
        """Stable hash of the active geometry and topology."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.active_ids).tobytes())
        h.update(np.ascontiguousarray(self.tri).tobytes())
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        return h.hexdigest()[:16]

    def hanging_nodes(self):
        """Nodes lying strictly inside an active edge (should always be empty)."""
        used = set(self.tri.ravel().tolist())
        out = []
        for (a, b) in self.edges.nodes.tolist():
            m = self._mid.get(_key(a, b))
            if m is not None and m in used:
                out.append(m)
        return out

    def active_ancestor(self, eid, old):
        """Nearest ancestor-or-self of ``eid`` that is active in ``old``."""
        e = eid
        while e >= 0:
            if e < len(old._tri) and old.is_active(e):
                return e
            e = self._parent[e]
        return -1

    def descendants_active(self, eid):
        out = []
        stack = [eid]
        while stack:
            e = stack.pop()
            if not self._alive[e]:
                continue
            ch = self._children[e]
            if not ch:
                out.append(e)
            else:
                stack.extend(ch)
        return sorted(out)

    # ------------------------------------------------------------ mutations
    def _check_flags(self, flags):
        flags = np.asarray(flags, dtype=bool)
        if flags.shape != (self.n_active,):
            raise ValueError(f"expected {self.n_active} flags, got shape {flags.shape}")
        return flags

    def refine(self, flags):
        flags = self._check_flags(flags)
        targets = set()
        for i in np.nonzero(flags)[0]:
            e = int(self.active_ids[i])
            if self._kind[e] == GREEN:
                e = self._parent[e]
            targets.add(e)
        new = self.copy()
        for e in sorted(targets):
            new._red_refine(e)
        new._close()
        new._rebuild_closure()
        new._finalize()
        new.last_op = {"op": "refine", "flagged": int(flags.sum()), "red": len(targets)}
        return new

    def coarsen(self, flags):
        flags = self._check_flags(flags)
        flagged = set()
        green_flags = {}
        for i, f in enumerate(flags):
            e = int(self.active_ids[i])
            if self._kind[e] == GREEN:
                green_flags.setdefault(self._parent[e], []).append(bool(f))
            elif f:
                flagged.add(e)
        flagged.update(p for p, fl in green_flags.items() if all(fl))
        new = self.copy()
        S = new._leaf_edges()

        def edges_of(e):
            a, b, c = new._tri[e]
            return (_key(a, b), _key(b, c), _key(c, a))

        cand = []
        for P in sorted({new._parent[e] for e in flagged if new._kind[e] == RED}):
            kids = [c for c in new._children[P] if new._kind[c] == RED]
            if len(kids) == 4 and all(new._is_base_leaf(c) and c in flagged for c in kids):
                cand.append((P, kids))
        # merge all candidates at once, then drop those left with a hanging node
        for P, kids in cand:
            for c in kids:
                for k in edges_of(c):
                    S[k] -= 1
            for k in edges_of(P):
                S[k] += 1
        keep = dict(cand)
        changed = True
        while changed:
            changed = False
            for P in sorted(keep):
                hang, viol = new._edge_status(P, S)
                if hang or viol:
                    for k in edges_of(P):
                        S[k] -= 1
                    for c in keep.pop(P):
                        for k in edges_of(c):
                            S[k] += 1
                    changed = True
        for P in sorted(keep):
            for c in list(new._children[P]):
                new._kill(c)
            new._children[P] = []
        merged = len(keep)
        new._close()
        new._rebuild_closure()
        new._finalize()
        ignored = int(flags.sum()) - 4 * merged
        new.last_op = {"op": "coarsen", "merged": merged, "ignored": max(ignored, 0)}
        if ignored > 0:
            log.info("coarsen: %d merges, %d flags not mergeable", merged, ignored)
        return new

    def uniform_refine(self, times=1):
        if int(times) < 1:
            raise ValueError("uniform_refine requires times >= 1")
        new = self.copy()
        for _ in range(int(times)):
            for e in range(len(new._tri)):
                if new._alive[e] and new._kind[e] == GREEN:
                    new._kind[e] = FROZEN
            leaves = [e for e in range(len(new._tri)) if new._alive[e] and not new._children[e]]
            for e in leaves:
                new._red_refine(e)
            new._close()
            new._rebuild_closure()
        new._finalize()
        new.last_op = {"op": "uniform_refine", "times": int(times)}
        return new

    # ------------------------------------------------------------- geometry
    def geometry(self, eid):
        """Barycenter and area of active element ``eid`` (a global id)."""
        if not self.is_active(eid):
            raise MeshError(f"element {eid} is not active")
        i = self.position[eid]
        return self.barycenter[i].copy(), float(self.area[i])

    def element_area(self, eid):
        return abs(self._tri_area(self._tri[eid]))

    def total_area(self):
        return float(self.area.sum())


def refine(mesh, flags):
    return mesh.refine(flags)


def coarsen(mesh, flags):
    return mesh.coarsen(flags)


def uniform_refine(mesh, times):
    return mesh.uniform_refine(times)


def geometry(mesh, element_id):
    return mesh.geometry(element_id)


def _point_in_triangle(p, a, b, c, tol=1e-12):
    d = signed_area(a, b, c)
    l0 = signed_area(p, b, c) / d
    l1 = signed_area(a, p, c) / d
    l2 = 1.0 - l0 - l1
    return l0 >= -tol and l1 >= -tol and l2 >= -tol


def transfer_field(u, old, new):
    """Map a per-element field from ``old`` onto ``new`` (same hierarchy).

    New children copy their old ancestor's value; merged parents take the
    area-weighted mean of their former children; elements that replace
    closure pieces take the value of the old piece containing their
    barycenter.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty((new.n_active,) + u.shape[1:])
    nold = len(old._tri)
    for i, e in enumerate(new.active_ids):
        e = int(e)
        if e < nold and old.is_active(e):
            out[i] = u[old.position[e]]
            continue
        if e < nold and old._alive[e]:
            desc = old.descendants_active(e)
            if desc:
                pos = old.position[desc]
                w = old.area[pos]
                out[i] = np.tensordot(w, u[pos], axes=1) / w.sum()
                continue
        a = e
        while a >= nold or not old._alive[a]:
            a = new._parent[a]
        if old.is_active(a):
            out[i] = u[old.position[a]]
            continue
        desc = old.descendants_active(a)
        pos = old.position[desc]
        x = new.barycenter[i]
        hit = None
        for d, p in zip(desc, pos):
            t = old.tri[p]
            if _point_in_triangle(x, old.nodes[t[0]], old.nodes[t[1]], old.nodes[t[2]]):
                hit = p
                break
        if hit is None:
            w = old.area[pos]
            out[i] = np.tensordot(w, u[pos], axes=1) / w.sum()
        else:
            out[i] = u[hit]
    return out


def generate_naca_omesh(profile="0012", n_around=64, n_radial=16, farfield_radius=20.0,
                        first_height=None, level_cap=25):
    """Algebraic O-mesh around a NACA 4-digit section.

    Quadrilateral rings between the wall and a circular far field centred at
    mid-chord are split into two triangles each; the diagonal direction is
    mirrored between upper and lower halves so a symmetric profile gives a
    mesh symmetric about y = 0.
    """
    from scipy.optimize import brentq

    from .naca import NacaProfile

    if n_around < 16 or n_around % 2:
        raise ValueError("n_around must be an even number >= 16")
    if n_radial < 4:
        raise ValueError("n_radial must be >= 4")
    if farfield_radius < 10:
        raise ValueError("farfield_radius must be at least 10 chords")
    curve = NacaProfile(profile)
    theta = 2 * np.pi * np.arange(n_around) / n_around
    wall = curve.point(theta)
    center = np.array([0.5, 0.0])
    outer = center + farfield_radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)

    if first_height is None:
        first_height = max(curve.perimeter(), 2.0) / n_around
    first_height = min(first_height, farfield_radius / n_radial)
    if np.isclose(first_height * n_radial, farfield_radius):
        s = np.linspace(0.0, 1.0, n_radial + 1)
    else:
        f = lambda r: first_height * (r**n_radial - 1) / (r - 1) - farfield_radius
        ratio = brentq(f, 1.0 + 1e-9, 10.0)
        s = first_height * (ratio ** np.arange(n_radial + 1) - 1) / (ratio - 1) / farfield_radius
    s[-1] = 1.0
    # blend from the wall point outwards along the ray to the far-field point
    pts = wall[None, :, :] + s[:, None, None] * (outer - wall)[None, :, :]
    nodes = pts.reshape(-1, 2)

    def nid(j, k):
        return j * n_around + (k % n_around)

    def flat(*t):
        p = nodes[list(t)]
        return abs(signed_area(p[0], p[1], p[2])) <= 1e-14 * farfield_radius**2

    tris = []
    half = n_around // 2
    for j in range(n_radial):
        # a zero-thickness profile makes wall and ray collinear at the leading edge;
        # flip the diagonal there, in mirror pairs so the mesh stays symmetric
        swap = set()
        for k in range(half):
            a, b, c, d = nid(j, k), nid(j, k + 1), nid(j + 1, k + 1), nid(j + 1, k)
            if flat(a, b, c) or flat(a, c, d):
                swap.update((k, n_around - 1 - k))
        for k in range(n_around):
            a, b, c, d = nid(j, k), nid(j, k + 1), nid(j + 1, k + 1), nid(j + 1, k)
            if (k < half) != (k in swap):
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                tris.append((a, b, d))
                tris.append((b, c, d))
    tris = np.array(tris)
    area = signed_area(nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]])
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    area = np.abs(area)
    if np.any(area <= 1e-14 * farfield_radius**2):
        raise MeshError("degenerate (zero-area) cell near the trailing edge; use a larger n_around")
    boundary = {}
    for k in range(n_around):
        boundary[(nid(0, k), nid(0, k + 1))] = WALL
        boundary[(nid(n_radial, k), nid(n_radial, k + 1))] = FARFIELD
    wall_param = {nid(0, k): float(theta[k]) for k in range(n_around)}
    return MeshHierarchy(nodes, tris, boundary, curve=curve, wall_param=wall_param, level_cap=level_cap)


def mirror_map(mesh, tol=1e-9):
    """Index of the mirror image (y -> -y) of each active element, or -1."""
    from scipy.spatial import cKDTree

    c = mesh.barycenter
    tree = cKDTree(c)
    d, j = tree.query(c * np.array([1.0, -1.0]))
    scale = np.sqrt(mesh.area)
    return np.where(d <= tol + 1e-6 * scale, j, -1)
