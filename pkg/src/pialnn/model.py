"""Deformation blocks and the full L-block surface deformation model.

Each block maps per-vertex features to a displacement: a point feature
from normalized coordinates and normals, a local feature from a multi-scale
intensity cube around the vertex, and a fusion head on their concatenation.
Blocks are chained by ``v_l = v_{l-1} + block_l(v_{l-1}, n_{l-1})`` and the
result is passed through one Laplacian smoothing step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from pialnn.geometry import smoothing_operator, vertex_normals
from pialnn.nn import (
    CheckpointError,
    LayerSpec,
    NumericalError,
    ParamStore,
    Sequential,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from pialnn.volume import Volume, VolumePyramid, cube_sample, cube_sample_vjp

CHECKPOINT_FORMAT = "pialnn-checkpoint/1"


@dataclass
class ModelConfig:
    L: int = 3
    K: int = 5
    lam: float = 1.0
    slope: float = 0.2
    scales: int = 3
    sampling: str = "cube"
    point_widths: tuple = (128, 128)
    conv_channels: int = 64
    local_width: int = 128
    head_widths: tuple = (128, 64)
    normal_grad: bool = False
    zero_init_head: bool = True

    def __post_init__(self):
        self.point_widths = tuple(int(w) for w in self.point_widths)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError("K must be odd and >= 1")
        if self.scales not in (1, 3):
            raise ValueError("scales must be 1 or 3")
        if self.sampling not in ("cube", "point"):
            raise ValueError("sampling must be 'cube' or 'point'")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")

    @property
    def cube_size(self) -> int:
        return 1 if self.sampling == "point" else self.K

    def to_dict(self) -> dict:
        d = asdict(self)
        d["point_widths"] = list(self.point_widths)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def block_specs(cfg: ModelConfig, prefix: str):
    """Layer specs of one block: (point MLP, local branch, fusion head)."""
    s = cfg.slope

    def mlp(name, widths, n_in, final_act):
        out = []
        for i, w in enumerate(widths):
            out.append(LayerSpec(f"{prefix}.{name}{i}", "dense", n_in, w))
            if final_act or i < len(widths) - 1:
                out.append(LayerSpec(f"{prefix}.{name}{i}.act", "leaky_relu", w, w, slope=s))
            n_in = w
        return out

    k = cfg.cube_size
    c_in = cfg.scales * k**3
    local = [
        LayerSpec(f"{prefix}.conv", "cube_conv", c_in, cfg.conv_channels, channels=cfg.scales, K=k),
        LayerSpec(f"{prefix}.conv.act", "leaky_relu", cfg.conv_channels, cfg.conv_channels, slope=s),
    ] + mlp("local", (cfg.local_width,), cfg.conv_channels, True)
    point = mlp("point", cfg.point_widths, 6, True)
    head = mlp("head", cfg.head_widths + (3,), cfg.point_widths[-1] + cfg.local_width, False)
    return point, local, head


def normalization_affine(vol: Volume) -> np.ndarray:
    """World -> [-1, 1]^3 over the volume's voxel extent."""
    dims = np.array(vol.dims, dtype=np.float64)
    s = 2.0 / np.maximum(dims - 1.0, 1.0)
    D = np.eye(4)
    D[:3, :3] = np.diag(s)
    D[:3, 3] = -1.0
    return D @ vol.affine


class DeformationModel:
    """L deformation blocks sharing one architecture, plus smoothing settings."""

    def __init__(self, config: ModelConfig, params: ParamStore, norm_affine=None):
        self.config = config
        self.params = params
        self.norm_affine = np.eye(4) if norm_affine is None else np.asarray(norm_affine, dtype=np.float64)
        self.blocks = []
        for l in range(config.L):
            p, loc, h = block_specs(config, f"block{l}")
            self.blocks.append((Sequential(p), Sequential(loc), Sequential(h)))
        missing = [s.name for b in self.blocks for seq in b for s in seq.specs if s.kind != "leaky_relu" and s.name + ".W" not in params.values]
        if missing:
            raise CheckpointError(f"parameters missing for layers {missing[:3]}")

    @classmethod
    def create(cls, config: ModelConfig, seed: int, norm_affine=None) -> "DeformationModel":
        specs = []
        for l in range(config.L):
            p, loc, h = block_specs(config, f"block{l}")
            specs += p + loc + h
        params = init_params(specs, seed)
        if config.zero_init_head:
            last = f"block{{}}.head{len(config.head_widths)}"
            for l in range(config.L):
                params.values[last.format(l) + ".W"][:] = 0.0
        return cls(config, params, norm_affine)

    def layer_specs(self) -> list[LayerSpec]:
        return [s for b in self.blocks for seq in b for s in seq.specs]

    def zero_params(self) -> None:
        for v in self.params.values.values():
            v.fill(0.0)

    def manifest(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "model": self.config.to_dict(),
            "seed": self.params.seed,
            "normalization_affine": self.norm_affine.tolist(),
            "pyramid_scales": self.config.scales,
            "normal_gradient": "full" if self.config.normal_grad else "truncated",
            "layers": [asdict(s) for s in self.layer_specs()],
        }


@dataclass
class BlockActivations:
    v: np.ndarray
    n: np.ndarray
    point: list
    local: list
    head: list


@dataclass
class Tape:
    faces: np.ndarray
    smoother: object
    blocks: list = field(default_factory=list)

    def clear(self):
        self.blocks = []
        self.smoother = None


def block_forward(v, n, pyr: VolumePyramid, model: DeformationModel, l: int, record: bool = False):
    """Displacement predicted by block ``l``; per-vertex, no cross-vertex mixing.

    Returns ``dv`` or ``(dv, BlockActivations)`` when ``record`` is set.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if v.shape != n.shape or v.ndim != 2 or v.shape[1] != 3:
        raise ValueError(f"vertex/normal shape mismatch: {v.shape} vs {n.shape}")
    cfg = model.config
    P = model.params
    point, local, head = model.blocks[l]
    N = model.norm_affine
    x = np.concatenate([v @ N[:3, :3].T + N[:3, 3], n], axis=1)
    pf, pc = point.forward(P, x)
    cubes = cube_sample(pyr, v, cfg.cube_size, channels=cfg.scales)
    lf, lc = local.forward(P, cubes)
    dv, hc = head.forward(P, np.concatenate([pf, lf], axis=1))
    if not record:
        return dv
    return dv, BlockActivations(v, n, pc, lc, hc)


def block_backward(g_dv, act: BlockActivations, pyr: VolumePyramid, model: DeformationModel, l: int):
    """Accumulate parameter gradients of block ``l``; return ``(grad_v, grad_n)``."""
    cfg = model.config
    P = model.params
    point, local, head = model.blocks[l]
    gh = head.backward(P, act.head, g_dv)
    wp = cfg.point_widths[-1]
    g_cubes = local.backward(P, act.local, gh[:, wp:])
    g_v = cube_sample_vjp(pyr, act.v, cfg.cube_size, g_cubes)
    gx = point.backward(P, act.point, gh[:, :wp])
    g_v += gx[:, :3] @ model.norm_affine[:3, :3]
    return g_v, gx[:, 3:]


def normals_vjp(v: np.ndarray, faces: np.ndarray, g_n: np.ndarray) -> np.ndarray:
    """Pull a cotangent on area-weighted unit normals back to vertex positions."""
    f = faces
    nv = len(v)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    fn = np.cross(e1, e2)
    acc = np.zeros((nv, 3))
    for k in range(3):
        np.add.at(acc, f[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    n = acc / safe
    g_a = np.where(norm > 0, (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / safe, 0.0)
    g_c = g_a[f[:, 0]] + g_a[f[:, 1]] + g_a[f[:, 2]]
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    g_v = np.zeros_like(v)
    np.add.at(g_v, f[:, 1], g_e1)
    np.add.at(g_v, f[:, 2], g_e2)
    np.add.at(g_v, f[:, 0], -(g_e1 + g_e2))
    return g_v


@dataclass
class ForwardResult:
    vertices: np.ndarray
    intermediates: list
    tape: Tape | None


def model_forward(
    v0, faces, adj, pyr: VolumePyramid, model: DeformationModel, record: bool = True, normals=None
) -> ForwardResult:
    """Run all blocks, recomputing normals before each, then smooth once.

    ``normals`` optionally pins the per-block normals (a list of L arrays)
    instead of recomputing them; finite-difference checks of the truncated
    normal gradient rely on this.
    """
    v = np.array(v0, dtype=np.float64)
    faces = np.asarray(faces)
    S = smoothing_operator(adj, model.config.lam)
    tape = Tape(faces, S) if record else None
    inter = []
    for l in range(model.config.L):
        n = vertex_normals(v, faces) if normals is None else normals[l]
        out = block_forward(v, n, pyr, model, l, record=record)
        dv, act = out if record else (out, None)
        if not np.all(np.isfinite(dv)):
            raise NumericalError(f"block {l} produced a non-finite displacement")
        if record:
            tape.blocks.append(act)
        v = v + dv
        inter.append(v)
    return ForwardResult(S @ v, inter, tape)


def model_backward(g_out, tape: Tape | None, pyr: VolumePyramid, model: DeformationModel) -> np.ndarray:
    """Backpropagate ``dLoss/dv_out`` through smoothing and every block.

    Parameter gradients are added to ``model.params.grads``; the gradient
    with respect to the input vertices is returned. The tape is consumed.
    """
    if tape is None or tape.smoother is None or len(tape.blocks) != model.config.L:
        raise RuntimeError("model_backward needs the tape of a recorded forward pass")
    g = tape.smoother.T @ np.asarray(g_out, dtype=np.float64)
    for l in reversed(range(model.config.L)):
        act = tape.blocks[l]
        g_v, g_n = block_backward(g, act, pyr, model, l)
        g = g + g_v
        if model.config.normal_grad:
            g = g + normals_vjp(act.v, tape.faces, g_n)
    tape.clear()
    return g


def mse_loss(v_pred, v_target):
    """Mean squared coordinate difference over all ``3 |V|`` entries, and its gradient."""
    v_pred = np.asarray(v_pred, dtype=np.float64)
    v_target = np.asarray(v_target, dtype=np.float64)
    if v_pred.shape != v_target.shape:
        raise ValueError(f"vertex count mismatch: {v_pred.shape} vs {v_target.shape}")
    d = v_pred - v_target
    return float(np.mean(d * d)), 2.0 * d / d.size


def save_model(path, model: DeformationModel, extra_manifest: dict | None = None, extra_arrays: dict | None = None) -> None:
    man = model.manifest()
    man.update(extra_manifest or {})
    arrays = dict(model.params.values)
    arrays.update(extra_arrays or {})
    save_checkpoint(path, man, arrays)


def load_model(path) -> tuple[DeformationModel, dict, dict]:
    """Returns the model, the raw manifest, and non-parameter arrays."""
    man, arrays = load_checkpoint(path)
    if man.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {man.get('format')!r}")
    cfg = ModelConfig.from_dict(man["model"])
    params = ParamStore(man.get("seed", 0))
    extra = {}
    names = {s["name"] + sfx for s in man["layers"] if s["kind"] != "leaky_relu" for sfx in (".W", ".b")}
    for k, v in arrays.items():
        if k in names:
            params.add(k, v)
        else:
            extra[k] = v
    model = DeformationModel(cfg, params, man["normalization_affine"])
    return model, man, extra
