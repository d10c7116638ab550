"""Synthetic white/pial surface pairs with a matching intensity volume.

The white surface is an icosphere with a smooth radial perturbation. The
pial surface moves every white vertex outward along its normal by a smooth,
strictly positive thickness built from random Gaussian lobes on the sphere.
The volume is bright inside the pial surface and dark outside, with a
sigmoid ramp of width ``sharpness`` across the boundary.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from pialnn._rng import make_rng
from pialnn.geometry import TriMesh, icosphere, mesh_edges, read_mesh, vertex_normals, write_mesh
from pialnn.training import Case
from pialnn.volume import Volume, read_volume, write_volume


@dataclass
class SynthConfig:
    seed: int = 0
    level: int = 4
    radius: float = 18.0
    white_amp: float = 1.5
    white_lobes: int = 8
    disp_min: float = 1.0
    disp_amp: float = 4.0
    n_lobes: int = 6
    lobe_width: float = 0.6
    dims: int = 64
    inner: float = 1.0
    outer: float = 0.0
    sharpness: float = 1.0
    lipschitz: float = 1.0

    def __post_init__(self):
        if not self.disp_amp > 0:
            raise ValueError("disp_amp must be positive")
        if not self.disp_min > 0:
            raise ValueError("disp_min must be positive")
        if self.level < 0 or self.dims < 4:
            raise ValueError("level must be >= 0 and dims >= 4")
        if self.radius + self.white_amp + self.disp_min + self.disp_amp + 3 * self.sharpness > (self.dims - 1) / 2:
            raise ValueError("surfaces do not fit inside the volume")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)


class _LobeField:
    """Sum of Gaussian lobes ``w_k exp((u . c_k - 1) / width**2)`` on the unit sphere."""

    def __init__(self, rng, n, width, signed):
        c = rng.normal(size=(n, 3))
        self.centers = c / np.linalg.norm(c, axis=1, keepdims=True)
        w = rng.uniform(0.5, 1.0, size=n)
        if signed:
            w *= rng.choice([-1.0, 1.0], size=n)
        self.weights = w
        self.width = width
        self.scale = 1.0

    def __call__(self, u):
        return (np.exp((u @ self.centers.T - 1.0) / self.width**2) @ self.weights) * self.scale


def _profile(cfg: SynthConfig, signed_depth):
    return cfg.outer + (cfg.inner - cfg.outer) / (1.0 + np.exp(-signed_depth / cfg.sharpness))


def generate_case(cfg: SynthConfig, case_index: int) -> tuple[TriMesh, TriMesh, Volume]:
    """Deterministic ``(white, pial, volume)`` for ``(cfg.seed, case_index)``."""
    rng = make_rng(cfg.seed, case_index)
    sphere = icosphere(cfg.level)
    u = sphere.vertices
    center = np.full(3, (cfg.dims - 1) / 2.0)

    wf = _LobeField(rng, cfg.white_lobes, cfg.lobe_width, signed=True)
    wf.scale = 1.0 / max(np.abs(wf(u)).max(), 1e-12)
    tf = _LobeField(rng, cfg.n_lobes, cfg.lobe_width, signed=False)
    tf.scale = 1.0 / tf(u).max()

    r_white = cfg.radius + cfg.white_amp * wf(u)
    white_v = center + r_white[:, None] * u
    thick = cfg.disp_min + cfg.disp_amp * tf(u)
    n = vertex_normals(white_v, sphere.faces)
    pial_v = white_v + thick[:, None] * n

    e = mesh_edges(sphere.faces)
    jump = np.abs(thick[e[:, 0]] - thick[e[:, 1]]).max()
    if jump >= cfg.lipschitz:
        raise ValueError(f"thickness field too rough: adjacent jump {jump:.3g} >= {cfg.lipschitz}")

    g = np.arange(cfg.dims, dtype=np.float64) - center[0]
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    p = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    r = np.linalg.norm(p, axis=1)
    d = p / np.maximum(r, 1e-12)[:, None]
    rho = cfg.radius + cfg.white_amp * wf(d) + cfg.disp_min + cfg.disp_amp * tf(d)
    data = _profile(cfg, rho - r).reshape(x.shape).astype(np.float32)

    return TriMesh(white_v, sphere.faces), TriMesh(pial_v, sphere.faces.copy()), Volume(data.astype(np.float64))


def generate_dataset(cfg: SynthConfig, n_train: int, n_val: int, n_test: int, out_dir) -> Path:
    """Write one directory per case and a ``dataset.json`` manifest; returns the manifest path."""
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split counts must be >= 0")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {}
    idx = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        entries = []
        for _ in range(count):
            name = f"case_{idx:04d}"
            cdir = out_dir / name
            cdir.mkdir(exist_ok=True)
            white, pial, vol = generate_case(cfg, idx)
            write_mesh(white, cdir / "white.obj")
            write_mesh(pial, cdir / "pial.obj")
            write_volume(vol, cdir / "volume.json")
            meta = {
                "seed": cfg.seed,
                "case_index": idx,
                "disp_min": cfg.disp_min,
                "profile": {"inner": cfg.inner, "outer": cfg.outer, "sharpness": cfg.sharpness},
            }
            (cdir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
            entries.append({"index": idx, "dir": name})
            idx += 1
        splits[split] = entries
    manifest = out_dir / "dataset.json"
    manifest.write_text(json.dumps({"config": asdict(cfg), "splits": splits}, indent=2) + "\n")
    return manifest


def load_case(case_dir, case_id=None) -> Case:
    case_dir = Path(case_dir)
    return Case(
        case_id or case_dir.name,
        read_mesh(case_dir / "white.obj"),
        read_mesh(case_dir / "pial.obj"),
        read_volume(case_dir / "volume.json"),
    )


def load_dataset(manifest) -> dict[str, list[Case]]:
    manifest = Path(manifest)
    man = json.loads(manifest.read_text())
    return {
        split: [load_case(manifest.parent / e["dir"]) for e in entries]
        for split, entries in man["splits"].items()
    }


def dataset_config(manifest) -> SynthConfig:
    return SynthConfig.from_dict(json.loads(Path(manifest).read_text())["config"])
