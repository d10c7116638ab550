"""Surface distance metrics: Chamfer, average absolute and Hausdorff distance.

Nearest-neighbor distances come from a uniform spatial hash grid with an
expanding-shell search that is exact; :func:`nearest_distances_brute` is the
O(nm) reference it is tested against.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from pialnn.geometry import TriMesh, sample_surface_points

DEFAULT_SAMPLES = 10_000


def _as_points(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
    return a


def nearest_distances_brute(A, B, chunk: int = 2048) -> np.ndarray:
    A, B = _as_points(A), _as_points(B)
    if len(B) == 0:
        raise ValueError("nearest_distances needs a nonempty target set")
    out = np.empty(len(A))
    for s in range(0, len(A), chunk):
        d = A[s : s + chunk, None, :] - B[None, :, :]
        sq = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        out[s : s + chunk] = np.sqrt(sq.min(axis=1))
    return out


class SpatialHashGrid:
    """Points of ``B`` bucketed into cubic cells of side ``cell`` over their bounding box.

    The cell is doubled until the table has at most ``max(8 m, 4096)`` cells.
    """

    def __init__(self, B, cell: float | None = None):
        B = _as_points(B)
        if len(B) == 0:
            raise ValueError("nearest_distances needs a nonempty target set")
        self.points = B
        self.origin = B.min(axis=0)
        extent = B.max(axis=0) - self.origin
        if cell is None:
            span = extent.max()
            # ~ m^(1/3) cells along the longest axis
            cell = span / max(1.0, np.cbrt(len(B))) if span > 0 else 1.0
        # the cell table is dense, so very fine cells are coarsened
        max_cells = max(8 * len(B), 4096)
        while np.prod(np.floor(extent / cell) + 1) > max_cells:
            cell *= 2.0
        self.cell = float(cell)
        self.shape = (np.floor(extent / self.cell).astype(np.int64) + 1).clip(1)
        ijk = np.floor((B - self.origin) / self.cell).astype(np.int64)
        ijk = np.minimum(ijk, self.shape - 1)
        key = (ijk[:, 0] * self.shape[1] + ijk[:, 1]) * self.shape[2] + ijk[:, 2]
        self.order = np.argsort(key, kind="stable")
        ncell = int(np.prod(self.shape))
        counts = np.bincount(key, minlength=ncell)
        self.start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.sorted_points = np.ascontiguousarray(B[self.order])

    def query(self, A) -> np.ndarray:
        A = _as_points(A)
        out = np.empty(len(A))
        _grid_query(A, self.sorted_points, self.start, self.origin, self.cell, self.shape, out)
        return out


@numba.njit(cache=True)
def _grid_query(A, pts, start, origin, cell, shape, out):
    nx, ny, nz = shape[0], shape[1], shape[2]
    rmax = max(nx, max(ny, nz))
    for q in range(A.shape[0]):
        ax, ay, az = A[q, 0], A[q, 1], A[q, 2]
        ci = min(max(int(np.floor((ax - origin[0]) / cell)), 0), nx - 1)
        cj = min(max(int(np.floor((ay - origin[1]) / cell)), 0), ny - 1)
        ck = min(max(int(np.floor((az - origin[2]) / cell)), 0), nz - 1)
        best = np.inf
        r = 0
        while r <= rmax:
            for i in range(max(ci - r, 0), min(ci + r, nx - 1) + 1):
                di = abs(i - ci)
                for j in range(max(cj - r, 0), min(cj + r, ny - 1) + 1):
                    dj = abs(j - cj)
                    for k in range(max(ck - r, 0), min(ck + r, nz - 1) + 1):
                        if max(di, max(dj, abs(k - ck))) != r:
                            continue
                        c = (i * ny + j) * nz + k
                        for p in range(start[c], start[c + 1]):
                            dx = ax - pts[p, 0]
                            dy = ay - pts[p, 1]
                            dz = az - pts[p, 2]
                            s = dx * dx + dy * dy + dz * dz
                            if s < best:
                                best = s
            # unvisited cells lie at least r * cell away
            if best < np.inf and np.sqrt(best) <= r * cell:
                break
            r += 1
        out[q] = np.sqrt(best)


def nearest_distances(A, B, method: str = "grid") -> np.ndarray:
    """Euclidean distance from every point of ``A`` to its nearest point in ``B``."""
    if method == "brute":
        return nearest_distances_brute(A, B)
    if method != "grid":
        raise ValueError(f"unknown method {method!r}")
    return SpatialHashGrid(B).query(A)


def _check_nonempty(*sets):
    for s in sets:
        if len(s) == 0:
            raise ValueError("point sets must be nonempty")


def chamfer(A, B, method: str = "grid") -> float:
    """Average of the two directional mean nearest-neighbor distances."""
    A, B = _as_points(A), _as_points(B)
    _check_nonempty(A, B)
    return 0.5 * (nearest_distances(A, B, method).mean() + nearest_distances(B, A, method).mean())


def _sampled_pair(A_mesh: TriMesh, B_mesh: TriMesh, n_samples: int, seed: int):
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return sample_surface_points(A_mesh, n_samples, seed), sample_surface_points(B_mesh, n_samples, seed)


def _directional(pa, pb, method):
    return nearest_distances(pa, pb, method), nearest_distances(pb, pa, method)


def average_abs_distance(A_mesh, B_mesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0, method: str = "grid") -> float:
    """Mean of both directional mean distances between surface samples.

    Both meshes are sampled with the same seed, which keeps the metric
    symmetric in its arguments.
    """
    da, db = _directional(*_sampled_pair(A_mesh, B_mesh, n_samples, seed), method)
    return 0.5 * (da.mean() + db.mean())


def hausdorff(A_mesh, B_mesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0, method: str = "grid") -> float:
    da, db = _directional(*_sampled_pair(A_mesh, B_mesh, n_samples, seed), method)
    return float(max(da.max(), db.max()))


def error_map(pred_mesh: TriMesh, gt_mesh: TriMesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0, method: str = "grid") -> np.ndarray:
    """Per predicted vertex: distance to the nearest ground-truth surface sample.

    Ground-truth vertices are always included among the samples, so a
    prediction equal to the ground truth maps to exactly zero.
    """
    gt_pts = np.concatenate([gt_mesh.vertices, sample_surface_points(gt_mesh, n_samples, seed)])
    return nearest_distances(pred_mesh.vertices, gt_pts, method)


@dataclass
class MetricsReport:
    chamfer: float
    average_abs: float
    hausdorff: float
    n_vertices_pred: int
    n_vertices_gt: int
    n_samples: int
    seed: int
    per_vertex: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_vertex")
        return d


def evaluate(pred_mesh: TriMesh, gt_mesh: TriMesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> MetricsReport:
    """Vertex-set Chamfer distance plus sampled AD/HD and the error map."""
    pa, pb = _sampled_pair(pred_mesh, gt_mesh, n_samples, seed)
    da, db = _directional(pa, pb, "grid")
    return MetricsReport(
        chamfer=float(chamfer(pred_mesh.vertices, gt_mesh.vertices)),
        average_abs=float(0.5 * (da.mean() + db.mean())),
        hausdorff=float(max(da.max(), db.max())),
        n_vertices_pred=pred_mesh.n_vertices,
        n_vertices_gt=gt_mesh.n_vertices,
        n_samples=n_samples,
        seed=seed,
        per_vertex=error_map(pred_mesh, gt_mesh, n_samples, seed),
    )


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def write_error_map(distances, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_index", "distance"])
        for i, d in enumerate(distances):
            w.writerow([i, repr(float(d))])
