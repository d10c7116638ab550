"""Triangle meshes: normals, adjacency, Laplacian smoothing, sampling and OBJ I/O."""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np
from scipy import sparse

from pialnn._rng import make_rng

logger = logging.getLogger(__name__)


class MeshFormatError(ValueError):
    """Raised for invalid mesh data or malformed mesh files."""


class TriMesh:
    """Triangle mesh with counter-clockwise oriented faces.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
        Vertex positions in world units.
    faces : array_like, shape (m, 3)
        Zero-based vertex indices per triangle.
    """

    def __init__(self, vertices, faces):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= nv:
                raise MeshFormatError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshFormatError("face repeats a vertex index")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity, new positions."""
        return TriMesh(vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (e, 2)."""
        return mesh_edges(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def __repr__(self):
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def compute_vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals.

    Each face adds its unnormalized cross product (twice its area times the
    unit normal) to its three corners. Vertices whose accumulated normal is
    zero keep the zero vector.
    """
    return vertex_normals(mesh.vertices, mesh.faces)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v = vertices
    f = faces
    nv = len(v)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros((nv, 3))
    for k in range(3):
        for d in range(3):
            acc[:, d] += np.bincount(f[:, k], weights=fn[:, d], minlength=nv)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.zeros_like(acc)
    nz = norm[:, 0] > 0
    out[nz] = acc[nz] / norm[nz]
    return out


def build_adjacency(mesh: TriMesh) -> list[np.ndarray]:
    """Sorted, deduplicated neighbor indices for every vertex."""
    return adjacency_from_faces(mesh.faces, mesh.n_vertices)


def adjacency_from_faces(faces: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    e = mesh_edges(faces) if len(faces) else np.zeros((0, 2), dtype=np.int64)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    splits = np.searchsorted(rows, np.arange(1, n_vertices))
    return np.split(cols, splits)


def smoothing_operator(adj: list[np.ndarray], lam: float) -> sparse.csr_matrix:
    """Sparse matrix ``S`` with ``S @ v`` equal to one Laplacian smoothing pass.

    Row ``i`` is ``(1 - lam) e_i + lam * mean_{j in N(i)} e_j``; rows of
    isolated vertices are the identity.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    n = len(adj)
    deg = np.array([len(a) for a in adj], dtype=np.int64)
    rows = np.repeat(np.arange(n), deg)
    cols = np.concatenate(adj) if n else np.zeros(0, dtype=np.int64)
    iso = deg == 0
    w_nb = np.repeat(lam / np.maximum(deg, 1), deg)
    w_self = np.where(iso, 1.0, 1.0 - lam)
    data = np.concatenate([w_self, w_nb])
    rr = np.concatenate([np.arange(n), rows])
    cc = np.concatenate([np.arange(n), cols.astype(np.int64)])
    return sparse.csr_matrix((data, (rr, cc)), shape=(n, n))


def laplacian_smooth(vertices: np.ndarray, adj: list[np.ndarray], lam: float) -> np.ndarray:
    """One pass of ``v_i <- (1 - lam) v_i + lam * mean(v_j, j in N(i))``."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(adj) != len(vertices):
        raise ValueError("adjacency does not match vertex count")
    return smoothing_operator(adj, lam) @ vertices


def sample_surface_points(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points uniformly on the surface.

    Faces are picked with probability proportional to area, then a point
    is placed uniformly inside the face via the square-root barycentric map.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros((0, 3))
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MeshFormatError("cannot sample a surface with zero total area")
    rng = make_rng(seed)
    cdf = np.cumsum(areas) / total
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    idx = np.minimum(idx, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    f = mesh.faces[idx]
    a, b, c = (mesh.vertices[f[:, k]] for k in range(3))
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * a + w1[:, None] * b + w2[:, None] * c


def icosahedron() -> TriMesh:
    """Regular icosahedron inscribed in the unit sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return TriMesh(v, f)


def icosphere(level: int) -> TriMesh:
    """Unit icosphere with ``10 * 4**level + 2`` vertices.

    Every subdivision splits each triangle into four through edge midpoints,
    which are pushed back onto the sphere.
    """
    mesh = icosahedron()
    v, f = mesh.vertices, mesh.faces
    for _ in range(level):
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate(
            [
                np.stack([a, m01, m20], 1),
                np.stack([b, m12, m01], 1),
                np.stack([c, m20, m12], 1),
                np.stack([m01, m12, m20], 1),
            ]
        )
        v = np.concatenate([v, mid])
    return TriMesh(v, f)


def read_mesh(path) -> TriMesh:
    """Read a triangle-only ASCII OBJ file (``v`` and ``f`` lines only)."""
    verts = []
    faces = []
    path = Path(path)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "v":
                if len(tok) != 4:
                    raise MeshFormatError(f"{path}: line {lineno}: malformed vertex line")
                try:
                    verts.append([float(x) for x in tok[1:]])
                except ValueError:
                    raise MeshFormatError(f"{path}: line {lineno}: malformed vertex line") from None
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise MeshFormatError(f"{path}: line {lineno}: non-triangle face")
                try:
                    idx = [int(x) for x in tok[1:]]
                except ValueError:
                    raise MeshFormatError(f"{path}: line {lineno}: malformed face line") from None
                faces.append((lineno, idx))
            else:
                raise MeshFormatError(f"{path}: line {lineno}: unsupported directive {tok[0]!r}")
    nv = len(verts)
    out = np.zeros((len(faces), 3), dtype=np.int64)
    for k, (lineno, idx) in enumerate(faces):
        if any(i < 1 or i > nv for i in idx):
            raise MeshFormatError(f"{path}: line {lineno}: face index out of range (1..{nv})")
        if len(set(idx)) != 3:
            raise MeshFormatError(f"{path}: line {lineno}: face repeats a vertex index")
        out[k] = idx
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), out - 1)


def write_mesh(mesh: TriMesh, path) -> None:
    """Write ``mesh`` as ASCII OBJ; positions use 17 significant digits."""
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)
