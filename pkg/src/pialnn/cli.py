"""Command-line entry point: ``pialnn {generate,train,predict,eval,gradcheck,ablate}``.

Exit codes are 0 on success, 1 for usage or configuration errors, 2 for
unreadable or malformed data, and 3 for numerical failures (non-finite
values or a failed gradient check). Every run writes a ``config.json``
snapshot of its resolved settings next to its outputs and refuses to
overwrite existing outputs unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from pialnn import __version__
from pialnn.geometry import MeshFormatError, read_mesh, write_mesh
from pialnn.metrics import DEFAULT_SAMPLES, chamfer, evaluate, write_error_map, write_report
from pialnn.nn import CheckpointError, NumericalError
from pialnn.synthetic import SynthConfig, generate_dataset, load_dataset
from pialnn.training import ConnectivityError, TrainConfig, predict, train
from pialnn.volume import VolumeFormatError, read_volume

logger = logging.getLogger("pialnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# the smoothing weight is spelled out on the command line
_FLAG_NAMES = {"lam": "lambda"}

ABLATION_VARIANTS = {"full": {}, "single": {"scales": 1}, "point": {"sampling": "point"}}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_dataclass_flags(p, cls, skip=()):
    g = p.add_argument_group(f"{cls.__name__} overrides")
    for f in fields(cls):
        if f.name in skip:
            continue
        flag = "--" + _FLAG_NAMES.get(f.name, f.name).replace("_", "-")
        kw = {"dest": f.name, "default": argparse.SUPPRESS, "help": f"default {f.default!r}"}
        if f.type in (bool, "bool"):
            kw["action"] = argparse.BooleanOptionalAction
        else:
            kw["type"] = {"int": int, "float": float, "str": str}.get(f.type, f.type)
            kw["metavar"] = f.name.upper()
        if f.name == "sampling":
            kw["choices"] = ["cube", "point"]
        g.add_argument(flag, **kw)


def _resolve(cls, args, extra=None):
    """Defaults, then ``--config`` JSON, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a flat JSON object")
        values.update(loaded)
    for f in fields(cls):
        if f.name in vars(args):
            values[f.name] = getattr(args, f.name)
    values.update(extra or {})
    try:
        return cls.from_dict(values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def _prepare_dir(path: Path, force: bool, keep: bool = False) -> Path:
    if path.exists() and not (path.is_dir() and not any(path.iterdir())):
        if keep:
            return path
        if not force:
            raise UsageError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(path: Path, command: str, settings: dict) -> None:
    doc = {"command": command, "version": __version__, **settings}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _file_snapshot(out: Path) -> Path:
    return out.with_name(out.stem + ".config.json")


def cmd_generate(args) -> int:
    cfg = _resolve(SynthConfig, args)
    out = _prepare_dir(Path(args.out), args.force)
    counts = {"n_train": args.n_train, "n_val": args.n_val, "n_test": args.n_test}
    if min(counts.values()) < 0:
        raise UsageError("split counts must be >= 0")
    _snapshot(out / "config.json", "generate", {"synth": cfg.__dict__, **counts})
    try:
        man = generate_dataset(cfg, args.n_train, args.n_val, args.n_test, out)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print(man)
    return EXIT_OK


def _load_split(manifest, split):
    ds = load_dataset(manifest)
    if split not in ds:
        raise UsageError(f"{manifest}: no split {split!r} (have {sorted(ds)})")
    return ds[split]


def cmd_train(args) -> int:
    cfg = _resolve(TrainConfig, args)
    out = _prepare_dir(Path(args.out), args.force, keep=args.resume is not None)
    data = _load_split(args.data, args.split)
    _snapshot(out / "config.json", "train", {"train": cfg.to_dict(), "data": str(args.data), "split": args.split, "resume": args.resume})
    t0 = time.perf_counter()
    train(data, cfg, out, resume=args.resume)
    logger.info("trained %d epochs on %d cases in %.1f s", cfg.epochs, len(data), time.perf_counter() - t0)
    print(out / "model.json")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.extra_smooth < 0:
        raise UsageError("--extra-smooth must be >= 0")
    out = _prepare_file(Path(args.out), args.force)
    white = read_mesh(args.white)
    vol = read_volume(args.volume)
    pial = predict(args.checkpoint, white, vol, extra_smooth=args.extra_smooth)
    write_mesh(pial, out)
    _snapshot(
        _file_snapshot(out),
        "predict",
        {"checkpoint": str(args.checkpoint), "white": str(args.white), "volume": str(args.volume), "extra_smooth": args.extra_smooth},
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    pred, gt = read_mesh(args.pred), read_mesh(args.gt)
    rep = evaluate(pred, gt, args.samples, args.seed)
    if args.out:
        out = _prepare_file(Path(args.out), args.force)
        write_report(rep, out)
        _snapshot(_file_snapshot(out), "eval", {"pred": str(args.pred), "gt": str(args.gt), "samples": args.samples, "seed": args.seed})
    if args.error_map:
        write_error_map(rep.per_vertex, _prepare_file(Path(args.error_map), args.force))
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from pialnn.diagnostics import level_for_vertices, model_grad_check

    try:
        level_for_vertices(args.vertices)
    except ValueError as e:
        raise UsageError(str(e)) from e
    t0 = time.perf_counter()
    res = model_grad_check(
        K=args.K, L=args.L, n_vertices=args.vertices, dims=args.dims, seed=args.seed, eps=args.eps, max_coords=args.coords or None
    )
    doc = {
        "max_error": res.max_error,
        "per_mode": res.per_mode,
        "worst": res.worst,
        "n_vertices": res.n_vertices,
        "n_params": res.n_params,
        "seconds": time.perf_counter() - t0,
        "tolerance": args.tol,
        "passed": bool(res.max_error < args.tol),
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        out = _prepare_file(Path(args.out), args.force)
        out.write_text(text + "\n")
        _snapshot(
            _file_snapshot(out),
            "gradcheck",
            {k: getattr(args, k) for k in ("K", "L", "vertices", "dims", "coords", "seed", "eps", "tol")},
        )
    print(text)
    return EXIT_OK if doc["passed"] else EXIT_NUMERICAL


def run_ablation(data_path, base: TrainConfig, out: Path, variants, extra_smooth: int = 1, samples: int = DEFAULT_SAMPLES, seed: int = 0):
    """Train each variant on the train split and score it on the test split.

    Returns one row per variant with mean Chamfer, AD and HD over the test
    cases, the undeformed baseline Chamfer and the training time.
    """
    ds = load_dataset(data_path)
    train_set, test_set = ds["train"], ds.get("test", [])
    if not test_set:
        raise UsageError(f"{data_path}: empty test split")
    base_cd = float(np.mean([chamfer(c.white.vertices, c.pial.vertices) for c in test_set]))
    rows = []
    for name in variants:
        cfg = TrainConfig.from_dict({**base.to_dict(), **ABLATION_VARIANTS[name]})
        t0 = time.perf_counter()
        res = train(train_set, cfg, out / name)
        seconds = time.perf_counter() - t0
        reps = [evaluate(predict(res.model, c.white, c.volume, extra_smooth), c.pial, samples, seed) for c in test_set]
        row = {
            "variant": name,
            "chamfer": float(np.mean([r.chamfer for r in reps])),
            "average_abs": float(np.mean([r.average_abs for r in reps])),
            "hausdorff": float(np.mean([r.hausdorff for r in reps])),
            "baseline_chamfer": base_cd,
            "train_seconds": seconds,
        }
        per_case = [{"case": c.case_id, **r.to_dict()} for c, r in zip(test_set, reps)]
        (out / name / "test_metrics.json").write_text(json.dumps({"mean": row, "cases": per_case}, indent=2) + "\n")
        logger.info("%s: CD %.4f (baseline %.4f)", name, row["chamfer"], base_cd)
        rows.append(row)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows)
    return rows


def cmd_ablate(args) -> int:
    base = _resolve(TrainConfig, args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad or not variants:
        raise UsageError(f"unknown variants {bad}; choose from {sorted(ABLATION_VARIANTS)}")
    out = _prepare_dir(Path(args.out), args.force)
    _snapshot(
        out / "config.json",
        "ablate",
        {"train": base.to_dict(), "data": str(args.data), "variants": variants, "extra_smooth": args.extra_smooth, "samples": args.samples},
    )
    rows = run_ablation(args.data, base, out, variants, args.extra_smooth, args.samples, args.seed_eval)
    w = csv.writer(sys.stdout)
    w.writerow(["variant", "chamfer", "average_abs", "hausdorff", "baseline_chamfer"])
    for r in rows:
        w.writerow([r["variant"]] + [f"{r[k]:.4f}" for k in ("chamfer", "average_abs", "hausdorff", "baseline_chamfer")])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pialnn", description="Pial surface reconstruction by learned mesh deformation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="flat JSON object of SynthConfig fields")
    g.add_argument("--n-train", type=int, default=20)
    g.add_argument("--n-val", type=int, default=5)
    g.add_argument("--n-test", type=int, default=5)
    g.add_argument("--force", action="store_true")
    _add_dataclass_flags(g, SynthConfig)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset split")
    t.add_argument("--data", required=True, help="dataset.json manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--config", help="flat JSON object of TrainConfig fields")
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.add_argument("--force", action="store_true")
    _add_dataclass_flags(t, TrainConfig)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="deform a white surface with a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--white", required=True)
    r.add_argument("--volume", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--extra-smooth", type=int, default=1, help="extra smoothing passes at lambda 1 (default 1)")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="surface distance metrics between two meshes")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="JSON report path")
    e.add_argument("--error-map", help="per-vertex CSV path")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    c.add_argument("--K", type=int, default=3)
    c.add_argument("--L", type=int, default=3)
    c.add_argument("--vertices", type=int, default=12)
    c.add_argument("--dims", type=int, default=16)
    c.add_argument("--coords", type=int, default=50, help="coordinates probed per array, 0 for all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and compare full, single-scale and point-sampling variants")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="flat JSON object of TrainConfig fields")
    a.add_argument("--variants", default="full,single,point")
    a.add_argument("--extra-smooth", type=int, default=1)
    a.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    a.add_argument("--seed-eval", type=int, default=0, help="surface sampling seed for AD/HD")
    a.add_argument("--force", action="store_true")
    _add_dataclass_flags(a, TrainConfig, skip=("sampling", "scales"))
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"pialnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"pialnn {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MeshFormatError, VolumeFormatError, CheckpointError, ConnectivityError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"pialnn {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
