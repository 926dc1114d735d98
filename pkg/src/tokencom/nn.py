"""Small fully connected networks with hand-written backprop and Adam.

All parameters of a network live in one flat float64 vector so that the
optimizer, Polyak averaging and checkpointing are single vector operations;
per-layer weight/bias arrays are views into it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError

ACTIVATIONS = ("relu", "tanh", "identity")
# largest double below 1; keeps saturated tanh outputs strictly inside (-1, 1)
TANH_BOUND = np.nextafter(1.0, 0.0)
CHECKPOINT_VERSION = 1


class MLP:
    """Affine layers, each followed by ``relu``, ``tanh`` or ``identity``.

    Weights are stored ``(out, in)``; inputs are batches ``(B, in)``.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], params: np.ndarray | None = None):
        sizes = tuple(int(s) for s in sizes)
        activations = tuple(activations)
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least one layer")
        if len(activations) != len(sizes) - 1:
            raise ConfigurationError(
                f"{len(sizes) - 1} layers but {len(activations)} activation tags")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}")
        if min(sizes) < 1:
            raise ConfigurationError("layer sizes must be positive")
        self.sizes = sizes
        self.activations = activations
        n = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
        if params is None:
            params = np.zeros(n)
        elif params.shape != (n,):
            raise ConfigurationError(f"expected {n} parameters, got {params.shape}")
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        self.layers = self._views(self.params)

    def _views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        views, k = [], 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            W = flat[k:k + o * i].reshape(o, i)
            k += o * i
            b = flat[k:k + o]
            k += o
            views.append((W, b))
        return views

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.activations, self.params.copy())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ConfigurationError(f"input width {x.shape[1]} != {self.in_dim}")
        cache = []
        a = x
        for (W, b), act in zip(self.layers, self.activations):
            z = a @ W.T + b
            cache.append((a, z))
            if act == "relu":
                a = np.maximum(z, 0.0)
            elif act == "tanh":
                a = np.clip(np.tanh(z), -TANH_BOUND, TANH_BOUND)
            else:
                a = z
        cache.append((a, None))
        return a, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list, grad_out: np.ndarray, need_input_grad: bool = True):
        """Reverse pass for the scalar whose gradient w.r.t. the output is ``grad_out``.

        Returns ``(flat parameter gradient, input gradient)``.
        """
        out = cache[-1][0]
        g = np.asarray(grad_out, dtype=np.float64).reshape(out.shape)
        grad = np.empty_like(self.params)
        gviews = self._views(grad)
        for layer in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[layer]
            a_in, z = cache[layer]
            act = self.activations[layer]
            if act == "relu":
                g = g * (z > 0)
            elif act == "tanh":
                a_out = cache[layer + 1][0]
                g = g * (1.0 - a_out * a_out)
            gW, gb = gviews[layer]
            np.matmul(g.T, a_in, out=gW)
            gb[:] = g.sum(axis=0)
            if layer > 0 or need_input_grad:
                g = g @ W
        return grad, (g if need_input_grad else None)

    def soft_update(self, online: "MLP", tau: float) -> None:
        """Polyak averaging ``self <- tau * online + (1 - tau) * self``."""
        if online.params.shape != self.params.shape:
            raise ConfigurationError("target and online networks differ in shape")
        self.params[:] = tau * online.params + (1.0 - tau) * self.params


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> MLP:
    """Glorot-uniform weights, zero biases."""
    net = MLP(sizes, activations)
    for W, _ in net.layers:
        fan_out, fan_in = W.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[:] = rng.uniform(-limit, limit, size=W.shape)
    return net


def mlp_for(in_dim: int, hidden: Sequence[int], out_dim: int, out_activation: str,
            rng: np.random.Generator) -> MLP:
    sizes = [in_dim, *hidden, out_dim]
    acts = ["relu"] * len(hidden) + [out_activation]
    return init_mlp(sizes, acts, rng)


@dataclass
class Adam:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)
        self.t = 0
        self._buf = np.empty(self.size)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """Bias-corrected Adam update applied to ``params`` in place.

        Uses the folded form ``lr_t * m / (sqrt(v) + eps_t)`` with
        ``lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)`` and ``eps_t = eps * sqrt(1 - b2^t)``,
        which equals ``lr * m_hat / (sqrt(v_hat) + eps)``.
        """
        if grad.shape != params.shape or params.shape != self.m.shape:
            raise ConfigurationError("gradient/parameter/optimizer shapes differ")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = np.sqrt(1.0 - self.beta2 ** self.t)
        buf = self._buf
        self.m *= self.beta1
        np.multiply(grad, 1.0 - self.beta1, out=buf)
        self.m += buf
        self.v *= self.beta2
        np.multiply(grad, grad, out=buf)
        buf *= 1.0 - self.beta2
        self.v += buf
        np.sqrt(self.v, out=buf)
        buf += self.eps * c2
        np.divide(self.m, buf, out=buf)
        buf *= self.lr * c2 / c1
        params -= buf

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"m": self.m, "v": self.v, "t": np.array(self.t),
                "hyper": np.array([self.lr, self.beta1, self.beta2, self.eps])}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m = np.array(arrays["m"], float)
        self.v = np.array(arrays["v"], float)
        self.t = int(arrays["t"])
        self._buf = np.empty(self.m.size)
        self.lr, self.beta1, self.beta2, self.eps = (float(x) for x in arrays["hyper"])


def finite_diff_check(net: MLP, x: np.ndarray, loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
                      step: float = 1e-6, floor: float = 1e-8) -> float:
    """Worst relative error between backprop and central differences.

    ``loss(output) -> (value, d value / d output)``. The error is measured per
    layer array (weights, biases, then the input) as
    ``||g_bp - g_fd|| / max(||g_bp||, ||g_fd||, floor)``.
    """
    x = np.asarray(x, float)
    out, cache = net.forward(x)
    _, g_out = loss(out)
    g_params, g_in = net.backward(cache, g_out)

    def value_at(params=None, inp=None):
        saved = net.params.copy()
        if params is not None:
            net.params[:] = params
        try:
            return loss(net.forward(x if inp is None else inp)[0])[0]
        finally:
            net.params[:] = saved

    fd = np.empty_like(net.params)
    base = net.params.copy()
    for k in range(base.size):
        p = base.copy()
        p[k] += step
        up = value_at(params=p)
        p[k] -= 2 * step
        down = value_at(params=p)
        fd[k] = (up - down) / (2 * step)
    fd_in = np.empty_like(x)
    for k in np.ndindex(x.shape):
        xp = x.copy()
        xp[k] += step
        up = value_at(inp=xp)
        xp[k] -= 2 * step
        down = value_at(inp=xp)
        fd_in[k] = (up - down) / (2 * step)

    pairs = [(a, b) for (a, b) in zip(_split(net, g_params), _split(net, fd))]
    pairs.append((g_in.reshape(x.shape), fd_in))
    return max(_rel_err(a, b, floor) for a, b in pairs)


def _split(net: MLP, flat: np.ndarray) -> list[np.ndarray]:
    return [arr for wb in net._views(flat) for arr in wb]


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------- checkpoints

def save_networks(path: str | Path, nets: dict[str, MLP], extra: dict[str, np.ndarray] | None = None) -> None:
    """Write networks to an ``.npz`` archive.

    Keys: ``version``; per network ``<name>/sizes``, ``<name>/activations``
    (comma-joined tags) and ``<name>/params``; plus any ``extra`` arrays.
    """
    arrays = {"version": np.array(CHECKPOINT_VERSION)}
    for name, net in nets.items():
        arrays[f"{name}/sizes"] = np.array(net.sizes)
        arrays[f"{name}/activations"] = np.array(",".join(net.activations))
        arrays[f"{name}/params"] = net.params
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_networks(path: str | Path) -> tuple[dict[str, MLP], dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    version = int(arrays.pop("version", -1))
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    nets, extra = {}, {}
    names = {k.split("/")[0] for k in arrays if k.endswith("/params")}
    for name in sorted(names):
        sizes = arrays.pop(f"{name}/sizes").tolist()
        acts = str(arrays.pop(f"{name}/activations")).split(",")
        nets[name] = MLP(sizes, acts, arrays.pop(f"{name}/params").astype(float))
    extra.update(arrays)
    return nets, extra
