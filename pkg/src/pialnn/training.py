"""Adam training loop over (white mesh, pial mesh, volume) cases, and prediction."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from pialnn._rng import make_rng
from pialnn.geometry import TriMesh, adjacency_from_faces, laplacian_smooth
from pialnn.model import (
    DeformationModel,
    ModelConfig,
    load_model,
    model_backward,
    model_forward,
    mse_loss,
    normalization_affine,
    save_model,
)
from pialnn.nn import CheckpointError, NumericalError, ParamStore
from pialnn.volume import Volume, build_pyramid

logger = logging.getLogger(__name__)


class ConnectivityError(ValueError):
    """White and pial meshes of a case do not share connectivity."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    lam: float = 1.0
    K: int = 5
    L: int = 3
    scales: int = 3
    sampling: str = "cube"
    checkpoint_interval: int = 50
    normal_grad: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError("K must be odd")
        if self.scales not in (1, 3):
            raise ValueError("scales must be 1 or 3")
        if self.sampling not in ("cube", "point"):
            raise ValueError("sampling must be 'cube' or 'point'")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            L=self.L, K=self.K, lam=self.lam, scales=self.scales, sampling=self.sampling, normal_grad=self.normal_grad
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.values.items()}, {k: np.zeros_like(a) for k, a in params.values.items()})


def adam_step(params: ParamStore, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.values.items():
        g = params.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    params.zero_grad()


@dataclass
class Case:
    case_id: str
    white: TriMesh
    pial: TriMesh
    volume: Volume


def check_connectivity(case: Case) -> None:
    if case.white.n_vertices != case.pial.n_vertices or not np.array_equal(case.white.faces, case.pial.faces):
        raise ConnectivityError(f"case {case.case_id}: white and pial meshes differ in connectivity")


@dataclass
class TrainResult:
    model: DeformationModel
    adam: AdamState
    log: list = field(default_factory=list)  # (epoch, case_id, loss)


class _Prepared:
    def __init__(self, case: Case):
        self.case = case
        self.pyr = build_pyramid(case.volume)
        self.adj = adjacency_from_faces(case.white.faces, case.white.n_vertices)


def train_step(model: DeformationModel, prep: _Prepared, adam: AdamState, cfg: TrainConfig) -> float:
    c = prep.case
    res = model_forward(c.white.vertices, c.white.faces, prep.adj, prep.pyr, model)
    loss, g = mse_loss(res.vertices, c.pial.vertices)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss on case {c.case_id}")
    model_backward(g, res.tape, prep.pyr, model)
    adam_step(model.params, adam, cfg)
    return loss


def _ckpt_extra(cfg: TrainConfig, adam: AdamState, epoch: int):
    man = {"train_config": cfg.to_dict(), "epoch": epoch, "adam_step": adam.step}
    arrays = {f"adam.m.{k}": a for k, a in adam.m.items()}
    arrays.update({f"adam.v.{k}": a for k, a in adam.v.items()})
    return man, arrays


def save_training_checkpoint(path, model: DeformationModel, adam: AdamState, cfg: TrainConfig, epoch: int) -> None:
    man, arrays = _ckpt_extra(cfg, adam, epoch)
    save_model(path, model, man, arrays)


def write_loss_log(path, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "case", "loss"])
        for e, c, loss in rows:
            w.writerow([e, c, repr(float(loss))])
    os.replace(tmp, path)


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), r["case"], float(r["loss"])) for r in csv.DictReader(fh)]


def train(dataset: list[Case], cfg: TrainConfig, out_dir=None, resume=None, max_epochs: int | None = None) -> TrainResult:
    """Train a model on ``dataset`` for ``cfg.epochs`` epochs.

    Case order is reshuffled every epoch from ``(seed, epoch)``, so a run
    resumed from a checkpoint continues exactly as an uninterrupted one.
    With ``out_dir`` set, ``loss.csv``, ``checkpoints/epoch_XXXX.json`` every
    ``checkpoint_interval`` epochs, and ``model.json`` at the end are
    written. ``max_epochs`` stops early (after that epoch number), which is
    how interruptions are simulated.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for c in dataset:
        check_connectivity(c)
    prepared = [_Prepared(c) for c in dataset]
    start = 1
    log = []
    if resume is not None:
        model, man, extra = load_model(resume)
        if "train_config" not in man:
            raise CheckpointError(f"{resume}: not a training checkpoint")
        ckcfg = TrainConfig.from_dict(man["train_config"])
        if ckcfg.model_config() != cfg.model_config():
            raise CheckpointError(f"{resume}: model configuration differs from the requested one")
        adam = AdamState(
            {k: extra[f"adam.m.{k}"] for k in model.params.values},
            {k: extra[f"adam.v.{k}"] for k in model.params.values},
            int(man["adam_step"]),
        )
        start = int(man["epoch"]) + 1
        prior = Path(resume).parent.parent / "loss.csv"
        if out_dir is not None and (Path(out_dir) / "loss.csv").exists():
            prior = Path(out_dir) / "loss.csv"
        if prior.exists():
            log = [r for r in read_loss_log(prior) if r[0] < start]
    else:
        model = DeformationModel.create(cfg.model_config(), cfg.seed, normalization_affine(dataset[0].volume))
        adam = AdamState.zeros(model.params)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    last = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    for epoch in range(start, last + 1):
        order = make_rng(cfg.seed, epoch).permutation(len(prepared))
        for i in order:
            loss = train_step(model, prepared[i], adam, cfg)
            log.append((epoch, prepared[i].case.case_id, loss))
        if epoch % 10 == 0 or epoch == last:
            ep = [r[2] for r in log if r[0] == epoch]
            logger.info("epoch %d mean loss %.6g", epoch, float(np.mean(ep)))
        if out_dir is not None and (epoch % cfg.checkpoint_interval == 0 or epoch == last):
            save_training_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:04d}.json", model, adam, cfg, epoch)
            write_loss_log(out_dir / "loss.csv", log)
    if out_dir is not None:
        save_training_checkpoint(out_dir / "model.json", model, adam, cfg, last)
        write_loss_log(out_dir / "loss.csv", log)
    return TrainResult(model, adam, log)


def predict(model, white: TriMesh, volume: Volume, extra_smooth: int = 0) -> TriMesh:
    """Deform ``white`` with a trained model (or a checkpoint path).

    ``extra_smooth`` additional Laplacian passes at ``lambda = 1`` run after
    the model's own smoothing. The face list is always the input's.
    """
    if not isinstance(model, DeformationModel):
        model, _, _ = load_model(model)
    if extra_smooth < 0:
        raise ValueError("extra_smooth must be >= 0")
    pyr = build_pyramid(volume)
    if len(pyr.levels) < model.config.scales:
        raise CheckpointError("checkpoint needs more pyramid scales than available")
    adj = adjacency_from_faces(white.faces, white.n_vertices)
    v = model_forward(white.vertices, white.faces, adj, pyr, model, record=False).vertices
    for _ in range(extra_smooth):
        v = laplacian_smooth(v, adj, 1.0)
    return TriMesh(v, white.faces.copy())
