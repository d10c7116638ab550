"""End-to-end finite-difference check of the full deformation model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pialnn._rng import make_rng
from pialnn.geometry import adjacency_from_faces, icosphere
from pialnn.model import DeformationModel, ModelConfig, model_backward, model_forward, mse_loss, normalization_affine
from pialnn.nn import grad_check_report
from pialnn.volume import Volume, build_pyramid, cube_offsets

# central differences must not straddle a trilinear cell face or a ReLU kink
LATTICE_MARGIN = 1e-4
ACTIVATION_MARGIN = 2e-5


@dataclass
class GradCheckResult:
    max_error: float
    per_mode: dict
    worst: dict
    n_vertices: int
    n_params: int
    attempts: int


def level_for_vertices(n: int) -> int:
    for level in range(9):
        if 10 * 4**level + 2 == n:
            return level
    raise ValueError(f"no icosphere has {n} vertices (valid: 12, 42, 162, 642, ...)")


def _kink_margin(model, pyr, v0, faces, adj):
    cfg = model.config
    res = model_forward(v0, faces, adj, pyr, model)
    off = cube_offsets(cfg.cube_size)
    grid = np.stack(np.meshgrid(off, off, off, indexing="ij"), -1).reshape(-1, 3)
    lattice = activation = np.inf
    for act in res.tape.blocks:
        q = pyr.levels[0].world_to_voxel(act.v)
        for c in range(cfg.scales):
            g = (q[:, None, :] + grid[None]) * 0.5**c
            lattice = min(lattice, np.abs(g - np.round(g)).min())
        for cache in (act.point, act.local, act.head):
            for x in cache[1:]:
                activation = min(activation, np.abs(x).min())
    return min(lattice / LATTICE_MARGIN, activation / ACTIVATION_MARGIN)


def model_grad_check(
    K: int = 3,
    L: int = 3,
    n_vertices: int = 12,
    dims: int = 16,
    seed: int = 0,
    eps: float = 1e-5,
    max_coords: int | None = 50,
    config: ModelConfig | None = None,
) -> GradCheckResult:
    """Check parameter and input-vertex gradients of an L-block model.

    Two modes are checked: the default truncated normal gradient against
    differences taken with the per-block normals held fixed, and the full
    normal Jacobian against plain differences. All layers, including the
    fusion head's last one, get random weights so no gradient is trivially
    zero.
    """
    rng = make_rng(seed, 1)
    sphere = icosphere(level_for_vertices(n_vertices))
    x, y, z = np.meshgrid(*[np.arange(dims, dtype=float)] * 3, indexing="ij")
    c = (dims - 1) / 2
    r = np.sqrt((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2)
    data = 1.0 / (1.0 + np.exp(r - dims / 4)) + 0.3 * np.sin(0.7 * x + 0.3) * np.cos(0.5 * y - 0.4 * z)
    vol = Volume(data)
    pyr = build_pyramid(vol)
    faces = sphere.faces
    adj = adjacency_from_faces(faces, sphere.n_vertices)

    per_mode = {}
    worst = {}
    attempts = 0
    n_params = 0
    for normal_grad in (False, True):
        base = config or ModelConfig()
        cfg = ModelConfig.from_dict({**base.to_dict(), "K": K, "L": L, "normal_grad": normal_grad, "zero_init_head": False})
        model = DeformationModel.create(cfg, seed, normalization_affine(vol))
        n_params = model.params.n_params()
        best, best_v0 = -1.0, None
        for _ in range(50):
            attempts += 1
            v0 = c + (dims / 4) * sphere.vertices + rng.normal(scale=0.3, size=sphere.vertices.shape)
            m = _kink_margin(model, pyr, v0, faces, adj)
            if m > best:
                best, best_v0 = m, v0
            if m > 1.0:
                break
        v0 = best_v0
        target = v0 + rng.normal(size=v0.shape)
        frozen = None
        if not normal_grad:
            res = model_forward(v0, faces, adj, pyr, model)
            frozen = [a.n for a in res.tape.blocks]

        def f(arrays):
            for k in model.params:
                model.params.values[k][...] = arrays[k]
            model.params.zero_grad()
            res = model_forward(arrays["v0"], faces, adj, pyr, model, normals=frozen)
            loss, g = mse_loss(res.vertices, target)
            gv = model_backward(g, res.tape, pyr, model)
            grads = {k: model.params.grads[k].copy() for k in model.params}
            grads["v0"] = gv
            return loss, grads

        def loss_only(arrays):
            for k in model.params:
                model.params.values[k][...] = arrays[k]
            res = model_forward(arrays["v0"], faces, adj, pyr, model, record=False, normals=frozen)
            return mse_loss(res.vertices, target)[0]

        arrays = {k: model.params[k].copy() for k in model.params}
        arrays["v0"] = v0
        rep = grad_check_report(f, arrays, eps=eps, max_coords=max_coords, seed=seed, loss_fn=loss_only)
        mode = "full_normals" if normal_grad else "truncated_normals"
        per_mode[mode] = max(rep.values())
        worst[mode] = max(rep, key=rep.get)
    return GradCheckResult(max(per_mode.values()), per_mode, worst, sphere.n_vertices, n_params, attempts)
