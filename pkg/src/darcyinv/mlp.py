"""Two-hidden-layer ReLU perceptron with hand-written backprop and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError

HIDDEN = (64, 64)
MLP_MAGIC = b"MLP1"


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape ``(fan_out, fan_in)`` and biases ``b[l]``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        """``[W1, b1, W2, b2, ...]``; the order used by Adam and checkpoints."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def from_arrays(cls, arrays) -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))


def mlp_init(n_obs: int, n_kl: int, seed: int, hidden=HIDDEN) -> MlpParams:
    """He-normal weights, zero biases."""
    if n_obs < 1 or n_kl < 1:
        raise DimensionMismatch("network needs at least one input and one output")
    rng = np.random.default_rng(seed)
    sizes = [n_obs, *hidden, n_kl]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]
    act: list[np.ndarray]


def mlp_forward(params: MlpParams, inputs) -> tuple[np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if x.shape[1] != params.n_in:
        raise DimensionMismatch(f"network expects {params.n_in} inputs, got {x.shape[1]}")
    pre, act = [], []
    h = x
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if layer == last else np.maximum(z, 0.0)
        act.append(h)
    return h, ForwardCache(x, pre, act)


def mlp_backward(params: MlpParams, cache: ForwardCache, grad_outputs) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradients; returns ``(parameter grads, input grads)``."""
    g = np.asarray(grad_outputs, dtype=float)
    if (
        len(cache.pre) != len(params.weights)
        or g.shape != cache.act[-1].shape
        or any(z.shape[1] != w.shape[0] for z, w in zip(cache.pre, params.weights))
    ):
        raise DimensionMismatch("forward cache does not match these parameters / output gradient")
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for layer in range(n - 1, -1, -1):
        if layer < n - 1:
            g = g * (cache.pre[layer] > 0.0)
        h_in = cache.inputs if layer == 0 else cache.act[layer - 1]
        gw[layer] = g.T @ h_in
        gb[layer] = g.sum(axis=0)
        g = g @ params.weights[layer]
    return MlpParams(gw, gb), g


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: MlpParams, lr: float = 1e-4) -> "AdamState":
        arrays = params.arrays()
        return cls(lr=lr, m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam update, applied in place; returns the same objects."""
    if not state.m:
        fresh = AdamState.fresh(params, state.lr)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape:
            raise DimensionMismatch(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_checkpoint(path, params: MlpParams, state: AdamState | None = None) -> None:
    """``MLP1`` checkpoint: sizes, W/b row-major, then the Adam state, all little-endian."""
    sizes = params.sizes
    if state is None:
        state = AdamState.fresh(params)
    elif not state.m:
        state = AdamState.fresh(params, state.lr)
    with open(path, "wb") as fh:
        fh.write(MLP_MAGIC)
        fh.write(struct.pack("<q", len(sizes)))
        fh.write(np.asarray(sizes, dtype="<i8").tobytes())
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        fh.write(struct.pack("<qdddd", state.t, state.lr, state.beta1, state.beta2, state.eps))
        for a in state.m + state.v:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MlpParams, AdamState]:
    raw = Path(path).read_bytes()
    if raw[:4] != MLP_MAGIC:
        raise FormatError(f"{path}: not an MLP1 checkpoint")
    try:
        (n_sizes,) = struct.unpack_from("<q", raw, 4)
        off = 12
        sizes = np.frombuffer(raw, "<i8", n_sizes, off).tolist()
        off += 8 * n_sizes
        shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]

        def take(offset):
            out = []
            for shape in shapes:
                count = int(np.prod(shape))
                out.append(np.frombuffer(raw, "<f8", count, offset).reshape(shape).astype(float))
                offset += 8 * count
            return out, offset

        arrays, off = take(off)
        t, lr, b1, b2, eps = struct.unpack_from("<qdddd", raw, off)
        off += struct.calcsize("<qdddd")
        m, off = take(off)
        v, off = take(off)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return MlpParams.from_arrays(arrays), AdamState(lr, b1, b2, eps, t, m, v)
