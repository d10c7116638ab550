"""Small differentiable layer set with explicit forward/backward functions.

Parameters live in a :class:`ParamStore` (name -> array, with a gradient
buffer of the same shape). Each layer is a pair of pure functions; callers
keep whatever the backward pass needs.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from pialnn._rng import make_rng


class NumericalError(RuntimeError):
    """Non-finite values or a failed gradient check."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "dense" | "leaky_relu" | "cube_conv"
    n_in: int
    n_out: int
    slope: float = 0.2
    channels: int = 0
    K: int = 0

    def __post_init__(self):
        if self.kind not in ("dense", "leaky_relu", "cube_conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.n_in <= 0 or self.n_out <= 0:
            raise ValueError(f"layer {self.name}: widths must be positive")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky ReLU slope must lie in (0, 1)")
        if self.kind == "cube_conv" and self.channels * self.K**3 != self.n_in:
            raise ValueError(f"layer {self.name}: n_in must equal channels * K**3")

    @property
    def weight_shape(self):
        if self.kind == "cube_conv":
            return (self.n_out, self.channels, self.K, self.K, self.K)
        return (self.n_in, self.n_out)


class ParamStore:
    """Ordered named parameters, each with a same-shape gradient buffer."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name}")
        self.values[name] = np.array(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.values[name])

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        for k, v in self.values.items():
            out.add(k, v)
        return out


# ---------------------------------------------------------------- layers


def dense_forward(x, W, b):
    x = np.asarray(x)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b


def dense_backward(g, x, W):
    """Returns ``(grad_x, grad_W, grad_b)`` for ``y = x @ W + b``."""
    return g @ W.T, x.T @ g, g.sum(axis=0)


def leaky_relu_forward(x, slope=0.2):
    # valid for 0 < slope < 1
    return np.maximum(x, slope * x)


def leaky_relu_backward(g, x, slope=0.2):
    # subgradient 1 at x == 0
    out = np.array(g, dtype=np.float64)
    out[x < 0] *= slope
    return out


def cube_conv_forward(cubes, kernel, bias):
    """Valid K-convolution of a K-cube: one output position per channel.

    ``cubes`` is (n, C, K, K, K), ``kernel`` (C_out, C, K, K, K); the result
    is ``(n, C_out)`` with entry ``<kernel[c], cube[v]> + bias[c]``.
    """
    if cubes.shape[1:] != kernel.shape[1:]:
        raise ValueError(f"cube {cubes.shape[1:]} does not match kernel {kernel.shape[1:]}")
    n = cubes.shape[0]
    return cubes.reshape(n, -1) @ kernel.reshape(kernel.shape[0], -1).T + bias


def cube_conv_backward(g, cubes, kernel):
    """Returns ``(grad_cubes, grad_kernel, grad_bias)``."""
    n = cubes.shape[0]
    kf = kernel.reshape(kernel.shape[0], -1)
    g_cubes = (g @ kf).reshape(cubes.shape)
    g_kernel = (g.T @ cubes.reshape(n, -1)).reshape(kernel.shape)
    return g_cubes, g_kernel, g.sum(axis=0)


def init_params(specs: list[LayerSpec], seed: int, store: ParamStore | None = None) -> ParamStore:
    """Uniform weights in ``+-sqrt(1/fan_in)``, zero biases.

    Each layer draws from its own stream keyed by ``(seed, layer position)``,
    so adding layers at the end leaves earlier ones untouched.
    """
    store = ParamStore(seed) if store is None else store
    for i, spec in enumerate(specs):
        if spec.kind == "leaky_relu":
            continue
        rng = make_rng(seed, i)
        bound = np.sqrt(1.0 / spec.n_in)
        store.add(f"{spec.name}.W", rng.uniform(-bound, bound, size=spec.weight_shape))
        store.add(f"{spec.name}.b", np.zeros(spec.n_out))
    return store


class Sequential:
    """Chain of layer specs evaluated against a shared ParamStore."""

    def __init__(self, specs: list[LayerSpec]):
        self.specs = list(specs)

    def forward(self, params: ParamStore, x):
        cache = []
        for s in self.specs:
            cache.append(x)
            if s.kind == "dense":
                x = dense_forward(x, params[s.name + ".W"], params[s.name + ".b"])
            elif s.kind == "cube_conv":
                x = cube_conv_forward(x, params[s.name + ".W"], params[s.name + ".b"])
            else:
                x = leaky_relu_forward(x, s.slope)
        return x, cache

    def backward(self, params: ParamStore, cache, g):
        for s, x in zip(reversed(self.specs), reversed(cache)):
            if s.kind == "leaky_relu":
                g = leaky_relu_backward(g, x, s.slope)
                continue
            W = params[s.name + ".W"]
            if s.kind == "dense":
                g, gW, gb = dense_backward(g, x, W)
            else:
                g, gW, gb = cube_conv_backward(g, x, W)
            params.grads[s.name + ".W"] += gW
            params.grads[s.name + ".b"] += gb
        return g


# ------------------------------------------------------ gradient checking


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """``||a - n|| / ||n||``; zero when both norms are below ``floor``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    na, nn = np.linalg.norm(a), np.linalg.norm(n)
    if max(na, nn) < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / max(nn, floor))


def grad_check_report(
    f: Callable[[dict], tuple[float, dict]],
    arrays: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    loss_fn: Callable[[dict], float] | None = None,
) -> dict[str, float]:
    """Compare analytic gradients with central differences, array by array.

    ``f(arrays)`` must return ``(loss, grads)`` with ``grads[name]`` shaped
    like ``arrays[name]``. With ``max_coords`` set, at most that many
    coordinates per array are probed, chosen by a seeded draw. ``loss_fn``,
    when given, evaluates the loss alone for the perturbed points.
    """
    if loss_fn is None:
        loss_fn = lambda a: f(a)[0]  # noqa: E731
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    _, analytic = f(arrays)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    rng = make_rng(seed)
    report = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.empty(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn(arrays)
            flat[i] = old - eps
            lm = loss_fn(arrays)
            flat[i] = old
            num[k] = (lp - lm) / (2.0 * eps)
        report[name] = relative_error(analytic[name].reshape(-1)[idx], num)
    return report


def grad_check(f, arrays, eps: float = 1e-5, max_coords: int | None = None, seed: int = 0, loss_fn=None) -> float:
    """Worst per-array relative error; see :func:`grad_check_report`."""
    rep = grad_check_report(f, arrays, eps=eps, max_coords=max_coords, seed=seed, loss_fn=loss_fn)
    return max(rep.values()) if rep else 0.0


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``<path>`` (JSON manifest) and ``<path stem>.bin`` (f64 payload).

    Arrays are concatenated in the manifest's listed order. Both files are
    written to temporaries and renamed, payload first.
    """
    path = Path(path)
    payload = path.with_name(path.stem + ".bin")
    man = dict(manifest)
    man["payload"] = payload.name
    man["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = b"".join(np.asarray(v, dtype="<f8").tobytes(order="C") for v in arrays.values())
    for target, data in ((payload, blob), (path, (json.dumps(man, indent=2) + "\n").encode())):
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, target)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        man = json.loads(path.read_text())
        entries = man["arrays"]
        payload = path.with_name(man["payload"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad checkpoint manifest ({exc})") from None
    raw = payload.read_bytes()
    total = sum(int(np.prod(e["shape"])) for e in entries)
    if len(raw) != 8 * total:
        raise CheckpointError(f"{payload}: payload has {len(raw)} bytes, manifest implies {8 * total}")
    flat = np.frombuffer(raw, dtype="<f8")
    arrays = {}
    pos = 0
    for e in entries:
        size = int(np.prod(e["shape"]))
        arrays[e["name"]] = flat[pos : pos + size].reshape(e["shape"]).astype(np.float64)
        pos += size
    return man, arrays


def spec_to_dict(spec: LayerSpec) -> dict:
    return asdict(spec)
