"""Mesh text files, legacy VTK output and CSV helpers."""
import csv
import logging
import os

import numpy as np

from .mesh import MeshError, MeshHierarchy, signed_area

log = logging.getLogger(__name__)


class MeshParseError(MeshError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def _lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_mesh(path, level_cap=25):
    """Read the ``NODES / TRIANGLES / BOUNDARY`` text format.

    Clockwise triangles are reoriented with a warning; an edge listed twice
    in BOUNDARY or shared by three triangles is an error.
    """
    it = _lines(path)

    def header(name):
        try:
            lineno, tok = next(it)
        except StopIteration:
            raise MeshParseError(path, "EOF", f"missing {name} section") from None
        if len(tok) != 2 or tok[0].upper() != name:
            raise MeshParseError(path, lineno, f"expected '{name} <count>'")
        try:
            count = int(tok[1])
        except ValueError:
            raise MeshParseError(path, lineno, f"bad {name} count {tok[1]!r}") from None
        if count < 0:
            raise MeshParseError(path, lineno, f"negative {name} count")
        return count

    def rows(count, width, conv, what):
        out = []
        for _ in range(count):
            try:
                lineno, tok = next(it)
            except StopIteration:
                raise MeshParseError(path, "EOF", f"expected {count} {what} rows") from None
            if len(tok) != width:
                raise MeshParseError(path, lineno, f"expected {width} values for {what}, got {len(tok)}")
            try:
                out.append((lineno, [conv(t) for t in tok]))
            except ValueError:
                raise MeshParseError(path, lineno, f"cannot parse {what} row {' '.join(tok)!r}") from None
        return out

    n_nodes = header("NODES")
    nodes = np.array([r for _, r in rows(n_nodes, 2, float, "node")], dtype=float).reshape(-1, 2)
    n_tri = header("TRIANGLES")
    tri_rows = rows(n_tri, 3, int, "triangle")
    tris = []
    for lineno, t in tri_rows:
        if min(t) < 0 or max(t) >= n_nodes:
            raise MeshParseError(path, lineno, f"triangle references node out of range 0..{n_nodes - 1}")
        if len(set(t)) != 3:
            raise MeshParseError(path, lineno, "triangle repeats a node")
        p = nodes[t]
        a = signed_area(p[0], p[1], p[2])
        if a == 0:
            raise MeshParseError(path, lineno, "zero-area triangle")
        if a < 0:
            log.warning("%s:%s: clockwise triangle reoriented", path, lineno)
            t = [t[0], t[2], t[1]]
        tris.append(t)
    n_b = header("BOUNDARY")
    boundary = {}
    for lineno, (i, j, m) in rows(n_b, 3, int, "boundary"):
        if min(i, j) < 0 or max(i, j) >= n_nodes:
            raise MeshParseError(path, lineno, "boundary edge references node out of range")
        if m not in (1, 2):
            raise MeshParseError(path, lineno, f"unknown boundary marker {m} (1=wall, 2=farfield)")
        k = (min(i, j), max(i, j))
        if k in boundary:
            raise MeshParseError(path, lineno, f"duplicate boundary edge {k}")
        boundary[k] = m
    extra = next(it, None)
    if extra is not None:
        raise MeshParseError(path, extra[0], "unexpected content after BOUNDARY section")
    mesh = MeshHierarchy(nodes, np.array(tris, dtype=int).reshape(-1, 3), boundary, level_cap=level_cap)
    on_boundary = {tuple(sorted(e)) for e in mesh.edges.nodes[mesh.edges.right < 0].tolist()}
    stray = set(boundary) - on_boundary
    if stray:
        raise MeshError(f"{path}: BOUNDARY lists interior or unknown edges {sorted(stray)[:5]}")
    return mesh


def save_mesh(mesh, path):
    """Write the active level of ``mesh`` in the text format read by :func:`load_mesh`."""
    used = np.unique(mesh.tri)
    remap = np.full(len(mesh.nodes), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    b = mesh.edges.right < 0
    with open(path, "w") as fh:
        fh.write(f"NODES {len(used)}\n")
        for x, y in mesh.nodes[used]:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"TRIANGLES {mesh.n_active}\n")
        for t in remap[mesh.tri]:
            fh.write(f"{t[0]} {t[1]} {t[2]}\n")
        fh.write(f"BOUNDARY {int(b.sum())}\n")
        for (i, j), m in zip(remap[mesh.edges.nodes[b]], mesh.edges.marker[b]):
            fh.write(f"{i} {j} {m}\n")


def write_vtk(mesh, fields, path, title="dwrflow"):
    """Legacy ASCII unstructured grid with one SCALARS block per component.

    ``fields`` maps names to arrays of shape (n,) or (n, k); multi-component
    fields are split into ``name_0 .. name_{k-1}``.
    """
    n = mesh.n_active
    blocks = []
    for name, values in fields.items():
        v = np.asarray(values, dtype=float)
        if v.shape[0] != n:
            raise ValueError(f"field {name!r} has {v.shape[0]} rows, mesh has {n} active elements")
        if v.ndim == 1:
            blocks.append((name, v))
        else:
            v = v.reshape(n, -1)
            if v.shape[1] == 1:
                blocks.append((name, v[:, 0]))
            else:
                blocks.extend((f"{name}_{k}", v[:, k]) for k in range(v.shape[1]))
    used = np.unique(mesh.tri)
    remap = np.full(len(mesh.nodes), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    tri = remap[mesh.tri]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(used)} double\n")
        np.savetxt(fh, np.column_stack([mesh.nodes[used], np.zeros(len(used))]), fmt="%.17g")
        fh.write(f"CELLS {n} {4 * n}\n")
        np.savetxt(fh, np.column_stack([np.full(n, 3), tri]), fmt="%d")
        fh.write(f"CELL_TYPES {n}\n")
        np.savetxt(fh, np.full(n, 5), fmt="%d")
        fh.write(f"CELL_DATA {n}\n")
        for name, v in blocks:
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, v, fmt="%.17g")
    return path


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]
