"""Dense scalar volumes, 3-level pyramids and per-vertex intensity cubes.

Volumes are indexed ``data[x, y, z]``. On disk the payload is stored with x
varying fastest. Sampling works in continuous voxel coordinates where voxel
``(i, j, k)`` sits at integer position ``(i, j, k)``; the affine in the
header maps world positions to these coordinates.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np


class VolumeFormatError(ValueError):
    """Raised for invalid volume headers or payloads."""


N_LEVELS = 3

# evaluations performed by the cube sampler since import; tests reset it
SAMPLE_COUNTER = {"evaluations": 0}


@dataclass
class Volume:
    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise VolumeFormatError("volume data must be 3-dimensional")
        if min(self.data.shape) < 1:
            raise VolumeFormatError("volume dims must be positive")
        if not np.all(np.isfinite(self.data)):
            raise VolumeFormatError("volume contains non-finite values")
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        a = self.affine
        return np.asarray(points, dtype=np.float64) @ a[:3, :3].T + a[:3, 3]


@dataclass
class VolumePyramid:
    """Volume at scales 1, 1/2 and 1/4; level 0 carries the world affine."""

    levels: list

    @property
    def affine(self) -> np.ndarray:
        return self.levels[0].affine

    @property
    def dims(self):
        return self.levels[0].dims


def avg_pool2(data: np.ndarray) -> np.ndarray:
    """2x2x2 average pooling; odd trailing slabs average the voxels that exist."""
    data = np.asarray(data, dtype=np.float64)
    pad = [(0, d % 2) for d in data.shape]
    s = np.pad(data, pad)
    c = np.pad(np.ones_like(data), pad)
    shp = []
    for d in s.shape:
        shp += [d // 2, 2]
    s = s.reshape(shp).sum(axis=(1, 3, 5))
    c = c.reshape(shp).sum(axis=(1, 3, 5))
    return s / c


def build_pyramid(vol: Volume) -> VolumePyramid:
    if min(vol.dims) < 4:
        raise VolumeFormatError(f"pyramid needs all dims >= 4, got {vol.dims}")
    levels = [vol]
    for _ in range(N_LEVELS - 1):
        levels.append(Volume(avg_pool2(levels[-1].data)))
    return VolumePyramid(levels)


def trilinear_sample(vol: Volume, p) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates ``p``.

    Points outside ``[0, dim - 1]`` along any axis give 0. Accepts a single
    coordinate or an ``(n, 3)`` array.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    data = vol.data
    dims = np.array(data.shape)
    inside = np.all((p >= 0) & (p <= dims - 1), axis=1)
    q = np.where(inside[:, None], p, 0.0)
    i0 = np.minimum(np.floor(q).astype(np.int64), np.maximum(dims - 2, 0))
    i1 = np.minimum(i0 + 1, dims - 1)
    f = q - i0
    out = np.zeros(len(p))
    for cx in (0, 1):
        wx = f[:, 0] if cx else 1.0 - f[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = f[:, 1] if cy else 1.0 - f[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = f[:, 2] if cz else 1.0 - f[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                out += wx * wy * wz * data[ix, iy, iz]
    out = np.where(inside, out, 0.0)
    return out[0] if single else out


@numba.njit(cache=True, inline="always")
def _corner(x, n):
    i0 = int(x)
    if i0 > n - 2:
        i0 = max(n - 2, 0)
    i1 = min(i0 + 1, n - 1)
    return i0, i1, x - i0


@numba.njit(cache=True)
def _sample_cubes(data, q, offsets, scale, out):
    # out: (n, K, K, K); grid = (q + offset) * scale
    L, W, H = data.shape
    K = offsets.shape[0]
    for v in range(q.shape[0]):
        for a in range(K):
            x = (q[v, 0] + offsets[a]) * scale
            inx = 0.0 <= x <= L - 1
            for b in range(K):
                y = (q[v, 1] + offsets[b]) * scale
                iny = 0.0 <= y <= W - 1
                for c in range(K):
                    z = (q[v, 2] + offsets[c]) * scale
                    if not (inx and iny and 0.0 <= z <= H - 1):
                        out[v, a, b, c] = 0.0
                        continue
                    x0, x1, fx = _corner(x, L)
                    y0, y1, fy = _corner(y, W)
                    z0, z1, fz = _corner(z, H)
                    c00 = data[x0, y0, z0] * (1 - fz) + data[x0, y0, z1] * fz
                    c01 = data[x0, y1, z0] * (1 - fz) + data[x0, y1, z1] * fz
                    c10 = data[x1, y0, z0] * (1 - fz) + data[x1, y0, z1] * fz
                    c11 = data[x1, y1, z0] * (1 - fz) + data[x1, y1, z1] * fz
                    c0 = c00 * (1 - fy) + c01 * fy
                    c1 = c10 * (1 - fy) + c11 * fy
                    out[v, a, b, c] = c0 * (1 - fx) + c1 * fx


@numba.njit(cache=True)
def _cube_position_grad(data, q, offsets, scale, upstream, gq):
    # accumulates d(sum upstream * cube)/dq into gq, chain factor `scale`
    L, W, H = data.shape
    K = offsets.shape[0]
    for v in range(q.shape[0]):
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for a in range(K):
            x = (q[v, 0] + offsets[a]) * scale
            inx = 0.0 <= x <= L - 1
            for b in range(K):
                y = (q[v, 1] + offsets[b]) * scale
                iny = 0.0 <= y <= W - 1
                for c in range(K):
                    u = upstream[v, a, b, c]
                    if u == 0.0:
                        continue
                    z = (q[v, 2] + offsets[c]) * scale
                    if not (inx and iny and 0.0 <= z <= H - 1):
                        continue
                    x0, x1, fx = _corner(x, L)
                    y0, y1, fy = _corner(y, W)
                    z0, z1, fz = _corner(z, H)
                    d000 = data[x0, y0, z0]
                    d001 = data[x0, y0, z1]
                    d010 = data[x0, y1, z0]
                    d011 = data[x0, y1, z1]
                    d100 = data[x1, y0, z0]
                    d101 = data[x1, y0, z1]
                    d110 = data[x1, y1, z0]
                    d111 = data[x1, y1, z1]
                    c00 = d000 * (1 - fz) + d001 * fz
                    c01 = d010 * (1 - fz) + d011 * fz
                    c10 = d100 * (1 - fz) + d101 * fz
                    c11 = d110 * (1 - fz) + d111 * fz
                    c0 = c00 * (1 - fy) + c01 * fy
                    c1 = c10 * (1 - fy) + c11 * fy
                    dx = c1 - c0
                    dy = (c01 - c00) * (1 - fx) + (c11 - c10) * fx
                    e0 = (d001 - d000) * (1 - fy) + (d011 - d010) * fy
                    e1 = (d101 - d100) * (1 - fy) + (d111 - d110) * fy
                    dz = e0 * (1 - fx) + e1 * fx
                    gx += u * dx
                    gy += u * dy
                    gz += u * dz
        gq[v, 0] += gx * scale
        gq[v, 1] += gy * scale
        gq[v, 2] += gz * scale


def cube_offsets(K: int) -> np.ndarray:
    if K < 1 or K % 2 == 0:
        raise ValueError(f"cube size K must be odd and >= 1, got {K}")
    h = (K - 1) // 2
    return np.arange(-h, h + 1, dtype=np.float64)


def cube_sample(pyr: VolumePyramid, vertices: np.ndarray, K: int, channels: int = N_LEVELS) -> np.ndarray:
    """Sample a ``K^3`` intensity cube around each vertex on each pyramid level.

    The grid is the vertex's native voxel coordinate plus integer offsets in
    ``-(K-1)/2 .. (K-1)/2``; pyramid level ``c`` is read at those same
    coordinates divided by ``2**c``, so coarser channels cover a wider region.

    Returns
    -------
    np.ndarray, shape (n, channels, K, K, K)
    """
    if not 1 <= channels <= len(pyr.levels):
        raise ValueError(f"channels must be in 1..{len(pyr.levels)}")
    off = cube_offsets(K)
    q = np.ascontiguousarray(pyr.levels[0].world_to_voxel(np.asarray(vertices).reshape(-1, 3)))
    out = np.empty((len(q), channels, K, K, K))
    for c in range(channels):
        buf = np.empty((len(q), K, K, K))
        _sample_cubes(pyr.levels[c].data, q, off, 0.5**c, buf)
        out[:, c] = buf
    SAMPLE_COUNTER["evaluations"] += len(q) * channels * K**3
    return out


def cube_sample_vjp(pyr: VolumePyramid, vertices: np.ndarray, K: int, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * cube_sample(...))`` with respect to world vertex positions."""
    off = cube_offsets(K)
    q = np.ascontiguousarray(pyr.levels[0].world_to_voxel(np.asarray(vertices).reshape(-1, 3)))
    upstream = np.asarray(upstream, dtype=np.float64)
    gq = np.zeros_like(q)
    for c in range(upstream.shape[1]):
        _cube_position_grad(pyr.levels[c].data, q, off, 0.5**c, np.ascontiguousarray(upstream[:, c]), gq)
    return gq @ pyr.affine[:3, :3]


def point_sample(pyr: VolumePyramid, vertices: np.ndarray) -> np.ndarray:
    """Intensity at each vertex on the three pyramid levels, shape (n, 3)."""
    return cube_sample(pyr, vertices, 1).reshape(-1, len(pyr.levels))


def read_volume(path) -> Volume:
    """Read a JSON header plus its raw little-endian float32 payload.

    The payload sits next to the header, named by the header's ``payload``
    field or, when absent, by the header's stem with a ``.raw`` suffix.
    """
    path = Path(path)
    try:
        hdr = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: bad header: {exc}") from None
    try:
        dims = [int(d) for d in hdr["dims"]]
    except (KeyError, TypeError, ValueError):
        raise VolumeFormatError(f"{path}: header needs integer 'dims'") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: dims must be three positive integers, got {dims}")
    if hdr.get("dtype", "f32") != "f32" or hdr.get("byte_order", "little") != "little":
        raise VolumeFormatError(f"{path}: only little-endian f32 payloads are supported")
    affine = np.asarray(hdr.get("affine", np.eye(4).tolist()), dtype=np.float64)
    if affine.shape != (4, 4):
        raise VolumeFormatError(f"{path}: affine must be 4x4")
    payload = path.with_name(hdr.get("payload", path.stem + ".raw"))
    raw = payload.read_bytes()
    expected = math.prod(dims) * 4
    if len(raw) != expected:
        raise VolumeFormatError(f"{payload}: payload has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{payload}: non-finite values in payload")
    return Volume(data.astype(np.float64), affine)


def write_volume(vol: Volume, path) -> None:
    path = Path(path)
    payload = path.with_name(path.stem + ".raw")
    hdr = {
        "dims": list(vol.dims),
        "dtype": "f32",
        "byte_order": "little",
        "affine": vol.affine.tolist(),
        "payload": payload.name,
    }
    raw = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    _atomic_write(payload, raw)
    _atomic_write(path, (json.dumps(hdr, indent=2) + "\n").encode())


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
