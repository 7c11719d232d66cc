"""Feed-forward networks, AdamW, and the ``JDNN`` checkpoint container."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    hidden_layers: int
    width: int
    output_dim: int

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1:
            raise ValueError("need at least one hidden layer of width >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dimensions must be positive")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    arch: MlpArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> MlpParams:
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[k:k + w.size].reshape(w.shape).copy())
            k += w.size
            bs.append(vec[k:k + b.size].copy())
            k += b.size
        return MlpParams(self.arch, ws, bs)

    def keys(self, prefix: Hashable) -> list[tuple]:
        out = []
        for i in range(len(self.weights)):
            out += [(prefix, "W", i), (prefix, "b", i)]
        return out

    def bind(self, tape: ad.Tape, prefix: Hashable) -> MlpParams:
        """Register every weight and bias as a tape leaf under ``prefix``."""
        ws = [tape.leaf(w, (prefix, "W", i)) for i, w in enumerate(self.weights)]
        bs = [tape.leaf(b, (prefix, "b", i)) for i, b in enumerate(self.biases)]
        return MlpParams(self.arch, ws, bs)

    def flat_grad(self, grads: dict, prefix: Hashable) -> np.ndarray:
        parts = []
        for i in range(len(self.weights)):
            parts += [grads[(prefix, "W", i)].ravel(), grads[(prefix, "b", i)].ravel()]
        return np.concatenate(parts)


def mlp_init(arch: MlpArch, scheme: str = "fan_uniform", seed: int = 0,
             var: float = 1e-4) -> MlpParams:
    """Initialise weights.

    ``fan_uniform`` draws weights and biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    ``gaussian`` draws weights from N(0, var) and sets biases to zero.
    """
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in arch.layer_shapes:
        if scheme == "fan_uniform":
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        elif scheme == "gaussian":
            ws.append(rng.normal(0.0, np.sqrt(var), size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return MlpParams(arch, ws, bs)


def mlp_apply(params: MlpParams, z):
    """Affine + ReLU hidden layers and an affine output layer.

    Works on plain arrays or on parameters bound to a tape.
    """
    h = z
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.matmul(h, w) + b
        if i < last:
            h = ad.relu(h)
    return h


def mlp_forward(params: MlpParams, x) -> tuple[ad.Var, ad.Tape]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    tape = ad.Tape()
    y = mlp_apply(params.bind(tape, "net"), x)
    if not np.all(np.isfinite(y.value)):
        raise FloatingPointError("non-finite network output")
    return y, tape


def backward(tape: ad.Tape, output: ad.Var, seed_gradient=None) -> dict:
    return tape.backward(output, seed_gradient)


@dataclass
class AdamW:
    """Adam with decoupled weight decay over one flat parameter vector."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if params.shape != grads.shape:
            raise ValueError("parameter and gradient shapes differ")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads**2
        m_hat = self.m / (1 - self.beta1**self.step_count)
        v_hat = self.v / (1 - self.beta2**self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) - self.lr * self.weight_decay * params


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamW) -> tuple[np.ndarray, AdamW]:
    return state.step(params, grads), state


# -- checkpoint container ----------------------------------------------------
#
# b"JDNN" | u32 version | u32 n_nets
# per net: u16 name_len | name utf-8 | u32 input_dim, hidden_layers, width, output_dim
# f64 payload of every net's flat() vector, in header order
# optional optimizer block: b"ADAM" | u64 step | u64 n | f64 lr, wd, b1, b2, eps | m[n] | v[n]

_MAGIC = b"JDNN"
_VERSION = 1


def save_checkpoint(path, nets: dict[str, MlpParams], optimizer: AdamW | None = None) -> None:
    buf = bytearray(_MAGIC)
    buf += struct.pack("<II", _VERSION, len(nets))
    for name, p in nets.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        a = p.arch
        buf += struct.pack("<IIII", a.input_dim, a.hidden_layers, a.width, a.output_dim)
    for p in nets.values():
        buf += p.flat().astype("<f8").tobytes()
    if optimizer is not None and optimizer.m is not None:
        n = optimizer.m.size
        buf += b"ADAM" + struct.pack("<QQ", optimizer.step_count, n)
        buf += struct.pack("<5d", optimizer.lr, optimizer.weight_decay,
                           optimizer.beta1, optimizer.beta2, optimizer.eps)
        buf += optimizer.m.astype("<f8").tobytes() + optimizer.v.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, MlpParams], AdamW | None]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a JDNN checkpoint")
    version, n_nets = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    archs = []
    for _ in range(n_nets):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        dims = struct.unpack_from("<IIII", data, off)
        off += 16
        archs.append((name, MlpArch(*dims)))
    nets = {}
    for name, arch in archs:
        template = mlp_init(arch, "gaussian", var=0.0)
        count = template.size
        vec = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        nets[name] = template.with_flat(vec)
    optimizer = None
    if off < len(data):
        if data[off:off + 4] != b"ADAM":
            raise ValueError(f"{path}: trailing bytes are not an optimizer block")
        step, n = struct.unpack_from("<QQ", data, off + 4)
        lr, wd, b1, b2, eps = struct.unpack_from("<5d", data, off + 20)
        off += 60
        m = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
        v = np.frombuffer(data, dtype="<f8", count=n, offset=off + 8 * n).astype(float)
        optimizer = AdamW(lr, wd, b1, b2, eps, step_count=step, m=m, v=v)
    return nets, optimizer
