"""Small deterministic numpy network engine.

Dense and 2-D convolution layers with ReLU between them, mean softmax
cross-entropy, and plain (optionally masked) SGD. All arithmetic is float64.
Weights are the only quantizable parameters; biases ride along as floats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ENGINE_VERSION = 1
CHECKPOINT_MAGIC = b"DNQ1"
FLOAT_BITS = 32


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int
    fan_out: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    is_quantizable: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.fan_in <= 0 or self.fan_out <= 0:
            raise ValueError("fan_in and fan_out must be positive")
        kh, kw = self.kernel
        if self.kind == "conv2d" and self.fan_in % (kh * kw):
            raise ValueError("conv2d fan_in must be in_channels * kernel area")
        object.__setattr__(self, "kernel", (int(kh), int(kw)))

    @property
    def param_count(self) -> int:
        return self.fan_in * self.fan_out

    @property
    def in_channels(self) -> int:
        return self.fan_in // (self.kernel[0] * self.kernel[1])

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.fan_out, self.fan_in)
        return (self.fan_out, self.in_channels, *self.kernel)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "dense":
            if int(np.prod(input_shape)) != self.fan_in:
                raise ShapeError(
                    f"layer {self.name or self.kind}: expects {self.fan_in} inputs, "
                    f"got shape {input_shape}"
                )
            return (self.fan_out,)
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(
                f"layer {self.name or self.kind}: expects ({self.in_channels}, H, W) input, "
                f"got shape {input_shape}"
            )
        _, h, w = input_shape
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"layer {self.name or self.kind}: kernel larger than input {input_shape}")
        return (self.fan_out, ho, wo)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "fan_in": self.fan_in,
            "fan_out": self.fan_out,
            "kernel": list(self.kernel),
            "stride": self.stride,
            "padding": self.padding,
            "is_quantizable": self.is_quantizable,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            fan_in=int(d["fan_in"]),
            fan_out=int(d["fan_out"]),
            kernel=tuple(d.get("kernel", (1, 1))),
            stride=int(d.get("stride", 1)),
            padding=int(d.get("padding", 0)),
            is_quantizable=bool(d.get("is_quantizable", True)),
            name=d.get("name", ""),
        )


@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class NetworkModel:
    input_shape: tuple[int, ...]
    layers: list[Layer]
    float_bits: int = FLOAT_BITS

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.layers:
            raise ValueError("model needs at least one layer")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.spec.output_shape(shape)
            if layer.weight.shape != layer.spec.weight_shape:
                raise ShapeError(
                    f"layer {layer.spec.name}: weight shape {layer.weight.shape} "
                    f"!= {layer.spec.weight_shape}"
                )
            if layer.bias.shape != (layer.spec.fan_out,):
                raise ShapeError(f"layer {layer.spec.name}: bad bias shape {layer.bias.shape}")
        if len(shape) != 1:
            raise ShapeError("last layer must produce a flat logit vector")
        self.num_classes = shape[0]

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def quantizable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.spec.is_quantizable]

    def copy(self) -> "NetworkModel":
        return NetworkModel(
            self.input_shape,
            [Layer(l.spec, l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.float_bits,
        )


def build_model(input_shape: Sequence[int], arch: Sequence[dict], seed: int) -> NetworkModel:
    """Build a model from an architecture table.

    Each entry is ``{"kind": "conv2d", "out": 8, "kernel": 3, "stride": 1,
    "padding": 1}`` or ``{"kind": "dense", "out": 10}``. Weights are drawn from
    U(-sqrt(6/fan_in), sqrt(6/fan_in)) with a seeded generator; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    layers = []
    for i, entry in enumerate(arch):
        kind = entry["kind"]
        name = entry.get("name", f"{'conv' if kind == 'conv2d' else 'fc'}{i + 1}")
        if kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"layer {name}: conv2d after a flat layer")
            k = entry.get("kernel", 3)
            kernel = (k, k) if isinstance(k, int) else tuple(k)
            spec = LayerSpec(
                "conv2d",
                fan_in=shape[0] * kernel[0] * kernel[1],
                fan_out=int(entry["out"]),
                kernel=kernel,
                stride=int(entry.get("stride", 1)),
                padding=int(entry.get("padding", 0)),
                is_quantizable=entry.get("quantize", True),
                name=name,
            )
        else:
            spec = LayerSpec(
                "dense",
                fan_in=int(np.prod(shape)),
                fan_out=int(entry["out"]),
                is_quantizable=entry.get("quantize", True),
                name=name,
            )
        bound = np.sqrt(6.0 / spec.fan_in)
        weight = rng.uniform(-bound, bound, size=spec.weight_shape)
        layers.append(Layer(spec, weight, np.zeros(spec.fan_out)))
        shape = spec.output_shape(shape)
    return NetworkModel(tuple(input_shape), layers)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.labels[:n], self.num_classes, self.split)


@dataclass
class SyntheticData:
    train: Dataset
    eval: Dataset


def make_synthetic_dataset(
    seed: int,
    num_classes: int,
    n_train: int,
    n_eval: int,
    shape: Sequence[int] = (1, 8, 8),
    noise: float = 0.6,
    bumps: int = 3,
) -> SyntheticData:
    """Gaussian-blob image classification data.

    Every class owns a prototype image built from a few signed Gaussian bumps;
    a sample is the prototype scaled by U(0.8, 1.2) plus i.i.d. Gaussian pixel
    noise. Train and eval come from one pool, so they never share a sample.
    """
    if min(num_classes, n_train, n_eval) <= 0:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in shape)
    c, h, w = shape if len(shape) == 3 else (1, 1, int(np.prod(shape)))
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            for _ in range(bumps):
                cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
                width = rng.uniform(0.8, 0.25 * max(h, w) + 0.8)
                sign = rng.choice([-1.0, 1.0])
                protos[k, ch] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        protos[k] /= np.sqrt(np.mean(protos[k] ** 2))
    n = n_train + n_eval
    labels = rng.permutation(np.arange(n) % num_classes)
    scale = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    x = protos[labels] * scale + noise * rng.standard_normal((n, c, h, w))
    x = x.reshape((n, *shape))
    return SyntheticData(
        Dataset(x[:n_train], labels[:n_train], num_classes, "train"),
        Dataset(x[n_train:], labels[n_train:], num_classes, "eval"),
    )


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, spec: LayerSpec) -> tuple[np.ndarray, tuple[int, int]]:
    kh, kw = spec.kernel
    p, s = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (ho, wo)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], out_hw, spec: LayerSpec) -> np.ndarray:
    n, c, h, w = x_shape
    kh, kw = spec.kernel
    p, s = spec.padding, spec.stride
    ho, wo = out_hw
    dcols = np.ascontiguousarray(dcols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[i, j]
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return dxp


def _layer_forward(layer: Layer, x: np.ndarray):
    spec = layer.spec
    if spec.kind == "dense":
        x2 = x.reshape(len(x), -1)
        return x2 @ layer.weight.T + layer.bias, (x.shape, x2)
    cols, (ho, wo) = _im2col(x, spec)
    out = cols @ layer.weight.reshape(spec.fan_out, -1).T + layer.bias
    out = out.reshape(len(x), ho, wo, spec.fan_out).transpose(0, 3, 1, 2)
    return out, (x.shape, cols, (ho, wo))


def _layer_backward(layer: Layer, dout: np.ndarray, cache, need_dx: bool):
    spec = layer.spec
    if spec.kind == "dense":
        x_shape, x2 = cache
        dw = dout.T @ x2
        db = dout.sum(axis=0)
        dx = (dout @ layer.weight).reshape(x_shape) if need_dx else None
        return dw, db, dx
    x_shape, cols, out_hw = cache
    dy = dout.transpose(0, 2, 3, 1).reshape(-1, spec.fan_out)
    wmat = layer.weight.reshape(spec.fan_out, -1)
    dw = (dy.T @ cols).reshape(spec.weight_shape)
    db = dy.sum(axis=0)
    dx = _col2im(dy @ wmat, x_shape, out_hw, spec) if need_dx else None
    return dw, db, dx


def _check_input(model: NetworkModel, x: np.ndarray):
    if tuple(x.shape[1:]) != model.input_shape:
        first = model.layers[0].spec
        raise ShapeError(
            f"layer {first.name or first.kind}: batch shape {tuple(x.shape[1:])} "
            f"does not match model input {model.input_shape}"
        )


def logits(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    _check_input(model, x)
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h, _ = _layer_forward(layer, h)
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def softmax_xent(z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    return float(loss), dz / n


def forward(model: NetworkModel, batch: Dataset) -> tuple[np.ndarray, float]:
    z = logits(model, batch.inputs)
    loss, _ = softmax_xent(z, batch.labels)
    return z, loss


def loss_and_grads(model: NetworkModel, x: np.ndarray, labels: np.ndarray):
    """Returns (loss, [(dW, db) per layer])."""
    _check_input(model, x)
    caches, pre = [], []
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h, cache = _layer_forward(layer, h)
        caches.append(cache)
        if i < last:
            pre.append(h)
            h = np.maximum(h, 0.0)
    loss, dh = softmax_xent(h, labels)
    grads = [None] * len(model.layers)
    for i in range(last, -1, -1):
        dw, db, dx = _layer_backward(model.layers[i], dh, caches[i], need_dx=i > 0)
        grads[i] = (dw, db)
        if i > 0:
            dh = dx * (pre[i - 1] > 0)
    return loss, grads


def backward(model: NetworkModel, batch: Dataset) -> list[np.ndarray]:
    """Per-layer weight gradients of the mean loss on ``batch``."""
    _, grads = loss_and_grads(model, batch.inputs, batch.labels)
    return [g[0] for g in grads]


def sgd_step(
    model: NetworkModel,
    grads,
    lr: float,
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    update_bias: bool = True,
) -> NetworkModel:
    """In-place ``w <- w - lr * g * m``.

    ``grads`` is a list of weight gradients or of ``(dW, db)`` pairs. Entries
    with ``m == 0`` are left untouched (bit-identical), not recomputed.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for i, layer in enumerate(model.layers):
        g = grads[i]
        dw, db = g if isinstance(g, tuple) else (g, None)
        m = None if masks is None else masks[i]
        if m is None:
            layer.weight -= lr * dw
        else:
            if m.shape != layer.weight.shape:
                raise ShapeError(f"layer {layer.spec.name}: mask shape {m.shape} != weight shape")
            np.copyto(layer.weight, layer.weight - lr * dw, where=m.astype(bool))
        if update_bias and db is not None:
            layer.bias -= lr * db
    return model


# ---------------------------------------------------------------------------
# training / evaluation


def accuracy(model: NetworkModel, data: Dataset, batch_size: int = 2048) -> float:
    if len(data) == 0:
        return 0.0
    correct = 0
    for s in range(0, len(data), batch_size):
        z = logits(model, data.inputs[s : s + batch_size])
        correct += int((z.argmax(axis=1) == data.labels[s : s + batch_size]).sum())
    return correct / len(data)


def mean_loss(model: NetworkModel, data: Dataset) -> float:
    return forward(model, data)[1]


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def train(
    model: NetworkModel,
    data: Dataset,
    steps: int,
    lr: float,
    batch_size: int = 100,
    seed: int = 0,
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    update_bias: bool = True,
) -> TrainLog:
    """Minibatch SGD with a seeded epoch shuffle. Mutates ``model``."""
    rng = np.random.default_rng(seed)
    log = TrainLog()
    n = len(data)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        loss, grads = loss_and_grads(model, data.inputs[idx], data.labels[idx])
        sgd_step(model, grads, lr, masks, update_bias=update_bias)
        log.losses.append(loss)
    return log


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: NetworkModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_bytes(model: NetworkModel) -> bytes:
    header = {
        "engine_version": ENGINE_VERSION,
        "float_bits": model.float_bits,
        "input_shape": list(model.input_shape),
        "layers": [l.spec.to_dict() for l in model.layers],
        "dtype": "<f8",
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", ENGINE_VERSION, len(hb)), hb]
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> NetworkModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(buf: bytes) -> NetworkModel:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a DNQ1 checkpoint (magic {buf[:4]!r})")
    if len(buf) < 10:
        raise ValueError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != ENGINE_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[10 : 10 + hlen].decode())
    pos = 10 + hlen
    specs = [LayerSpec.from_dict(d) for d in header["layers"]]
    layers = []
    for spec in specs:
        nw, nb = spec.param_count, spec.fan_out
        end = pos + 8 * (nw + nb)
        if end > len(buf):
            raise ValueError(f"checkpoint truncated in layer {spec.name} at byte {pos}")
        w = np.frombuffer(buf, "<f8", nw, pos).reshape(spec.weight_shape).astype(np.float64)
        b = np.frombuffer(buf, "<f8", nb, pos + 8 * nw).astype(np.float64)
        layers.append(Layer(spec, w, b))
        pos = end
    if pos != len(buf):
        raise ValueError(f"checkpoint has {len(buf) - pos} trailing bytes")
    return NetworkModel(tuple(header["input_shape"]), layers, header.get("float_bits", FLOAT_BITS))
