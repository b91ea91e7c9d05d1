"""Neural building blocks, SGD with momentum, and checkpoint serialization.

Layers operate on :class:`~polsarcl.autodiff.Tensor` values.  Weight
initialization is centered uniform with fan-in scaling from an explicit
``numpy.random.Generator``, so model construction is fully reproducible.
Checkpoints are written in a small binary format ("PCKP") holding named
float32 arrays, optimizer momentum buffers, the sampler RNG state and an
epoch counter; loading one and resuming is bit-deterministic.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, conv1d, conv2d, l2_normalize, maxpool1d, maxpool2d

__all__ = [
    "Module",
    "Conv2d",
    "Conv1d",
    "BatchNorm",
    "MaxPool2d",
    "MaxPool1d",
    "Linear",
    "ReLU",
    "Flatten",
    "L2Norm",
    "Sequential",
    "LayerSpec",
    "build_network",
    "SGD",
    "cosine_lr",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"PCKP"
CHECKPOINT_VERSION = 1


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class: tracks sub-modules and named parameters/buffers."""

    def __init__(self):
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        """Trainable tensors, in a fixed construction order."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        """Non-trainable state (e.g. batchnorm running statistics)."""
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        self.training = True
        for _, child in self._children():
            child.train()
        return self

    def eval(self):
        self.training = False
        for _, child in self._children():
            child.eval()
        return self

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """All arrays needed to restore the module, parameters first."""
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update({name: b for name, b in self.named_buffers(prefix)})
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray], prefix: str = ""):
        for name, p in self.named_parameters(prefix):
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, b in self.named_buffers(prefix):
            b[...] = state[name]


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, padding,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        super().__init__()
        k = int(kernel_size)
        fan_in = in_channels * k * k
        self.padding = int(padding)
        self.weight = Tensor(
            _uniform_init(rng, (out_channels, in_channels, k, k), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
            if bias
            else None
        )

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.padding)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, padding,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        super().__init__()
        k = int(kernel_size)
        fan_in = in_channels * k
        self.padding = int(padding)
        self.weight = Tensor(
            _uniform_init(rng, (out_channels, in_channels, k), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
            if bias
            else None
        )

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.padding)


class BatchNorm(Module):
    """Per-channel standardization over the batch (and spatial) axes.

    Works on (B, C), (B, C, L) and (B, C, H, W) inputs; channel axis is 1.
    Training mode uses biased batch moments and updates running statistics
    with ``running = (1 - momentum) * running + momentum * batch``; eval mode
    normalizes with the running statistics.  Training on a batch of one is an
    error.
    """

    def __init__(self, num_channels, dtype=np.float32, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)

    def forward(self, x):
        ndim = x.data.ndim
        if ndim not in (2, 3, 4):
            raise ValueError("BatchNorm expects a 2-D, 3-D or 4-D tensor")
        axes = tuple(a for a in range(ndim) if a != 1)
        shape = tuple(1 if a != 1 else -1 for a in range(ndim))
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm training mode needs batch >= 2")
            mu = x.mean(axis=axes, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean += m * (
                mu.data.reshape(-1).astype(self.running_mean.dtype) - self.running_mean
            )
            self.running_var += m * (
                var.data.reshape(-1).astype(self.running_var.dtype) - self.running_var
            )
            xhat = centered * (var + self.eps).pow(-0.5)
        else:
            mu = Tensor(self.running_mean.reshape(shape))
            var = Tensor(self.running_var.reshape(shape))
            xhat = (x - mu) * (var + self.eps).pow(-0.5)
        return xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)


class MaxPool2d(Module):
    def forward(self, x):
        return maxpool2d(x)


class MaxPool1d(Module):
    def forward(self, x):
        return maxpool1d(x)


class Linear(Module):
    def __init__(self, in_features, out_features, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        super().__init__()
        self.weight = Tensor(
            _uniform_init(rng, (in_features, out_features), in_features, dtype),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)
            if bias
            else None
        )

    def forward(self, x):
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class L2Norm(Module):
    def forward(self, x):
        return l2_normalize(x, axis=-1)


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def _children(self):
        for i, layer in enumerate(self.layers):
            yield f"l{i}", layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


# -- declarative model construction ------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network: a kind plus its kind-specific parameters."""

    kind: str  # conv2d | conv1d | batchnorm | maxpool | linear | relu | l2norm
    params: dict = field(default_factory=dict)


def _infer_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind, p = spec.kind, spec.params
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != p["in_channels"]:
            raise ValueError(f"conv2d expects ({p['in_channels']}, H, W), got {shape}")
        k, pad = p["kernel_size"], p["padding"]
        h = shape[1] + 2 * pad - k + 1
        w = shape[2] + 2 * pad - k + 1
        if h < 1 or w < 1:
            raise ValueError("conv2d output would be empty")
        return (p["out_channels"], h, w)
    if kind == "conv1d":
        if len(shape) != 2 or shape[0] != p["in_channels"]:
            raise ValueError(f"conv1d expects ({p['in_channels']}, L), got {shape}")
        length = shape[1] + 2 * p["padding"] - p["kernel_size"] + 1
        if length < 1:
            raise ValueError("conv1d output would be empty")
        return (p["out_channels"], length)
    if kind == "batchnorm":
        if shape[0] != p["num_channels"]:
            raise ValueError(
                f"batchnorm expects {p['num_channels']} channels, got {shape[0]}"
            )
        return shape
    if kind == "maxpool":
        spatial = tuple(s // 2 for s in shape[1:])
        if any(s < 1 for s in spatial):
            raise ValueError("maxpool needs spatial dims >= 2")
        return (shape[0],) + spatial
    if kind == "linear":
        flat = int(np.prod(shape))
        if flat != p["in_features"]:
            raise ValueError(
                f"linear expects {p['in_features']} inputs, got {flat} from {shape}"
            )
        return (p["out_features"],)
    if kind in ("relu", "l2norm"):
        return shape
    raise ValueError(f"unknown layer kind: {kind}")


def build_network(specs, input_shape, rng: np.random.Generator, dtype=np.float32):
    """Instantiate a Sequential from layer specs, checking shape composition.

    ``input_shape`` excludes the batch axis.  A ``linear`` spec implicitly
    flattens its input.  Raises ValueError when declared shapes do not
    compose.
    """
    shape = tuple(input_shape)
    layers = []
    for spec in specs:
        shape_out = _infer_shape(spec, shape)
        p = spec.params
        if spec.kind == "conv2d":
            layers.append(
                Conv2d(p["in_channels"], p["out_channels"], p["kernel_size"],
                       p["padding"], rng, dtype)
            )
        elif spec.kind == "conv1d":
            layers.append(
                Conv1d(p["in_channels"], p["out_channels"], p["kernel_size"],
                       p["padding"], rng, dtype)
            )
        elif spec.kind == "batchnorm":
            layers.append(BatchNorm(p["num_channels"], dtype))
        elif spec.kind == "maxpool":
            layers.append(MaxPool2d() if len(shape) == 3 else MaxPool1d())
        elif spec.kind == "linear":
            if len(shape) > 1:
                layers.append(Flatten())
            layers.append(Linear(p["in_features"], p["out_features"], rng, dtype))
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "l2norm":
            layers.append(L2Norm())
        shape = shape_out
    net = Sequential(layers)
    net.output_shape = shape
    return net


# -- optimization ---------------------------------------------------------


class SGD:
    """SGD with classical momentum and decoupled-from-nothing weight decay.

    Update: ``v <- momentum * v + grad + weight_decay * w; w <- w - lr * v``.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def cosine_lr(t: float, total: float, lr0: float) -> float:
    """Cosine-annealed learning rate: lr0 at t=0, 0 at t=total."""
    return 0.5 * lr0 * (1.0 + np.cos(np.pi * t / total))


# -- checkpoint format ------------------------------------------------------


@dataclass
class Checkpoint:
    """Serialized parameters, optimizer state and RNG state for resume."""

    params: dict[str, np.ndarray]
    momenta: dict[str, np.ndarray]
    rng_state: dict | None
    epoch: int


def _write_table(buf: io.BytesIO, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype=np.float32)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        for d in a.shape:
            buf.write(struct.pack("<I", d))
        buf.write(a.tobytes())


def _read_table(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", buf.read(4))
    table = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape)
        table[name] = data.copy()
    return table


def _pack_rng(state: dict | None) -> bytes:
    if state is None:
        return struct.pack("<B", 0)
    if state["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 RNG state is supported")
    inner = state["state"]
    return (
        struct.pack("<B", 1)
        + int(inner["state"]).to_bytes(16, "little")
        + int(inner["inc"]).to_bytes(16, "little")
        + struct.pack("<B", int(state["has_uint32"]))
        + struct.pack("<I", int(state["uinteger"]))
    )


def _unpack_rng(buf: io.BytesIO) -> dict | None:
    (present,) = struct.unpack("<B", buf.read(1))
    if not present:
        return None
    state = int.from_bytes(buf.read(16), "little")
    inc = int.from_bytes(buf.read(16), "little")
    (has_uint32,) = struct.unpack("<B", buf.read(1))
    (uinteger,) = struct.unpack("<I", buf.read(4))
    return {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", ckpt.epoch))
    buf.write(_pack_rng(ckpt.rng_state))
    _write_table(buf, ckpt.params)
    _write_table(buf, ckpt.momenta)
    return buf.getvalue()


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (epoch,) = struct.unpack("<I", buf.read(4))
    rng_state = _unpack_rng(buf)
    params = _read_table(buf)
    momenta = _read_table(buf)
    return Checkpoint(params=params, momenta=momenta, rng_state=rng_state, epoch=epoch)
