"""Compression-ratio accounting and the bit-packed model container.

File layout (all integers little-endian)::

    magic "DNQP" | u16 version | u32 header length | header | u32 header crc32
    per layer:   k_l float32 centroids | ceil(n_l * b_l / 8) bytes of indices
                 (raw layers: n_l float32 weights)
    biases:      float64, concatenated in layer order
    u32 crc32 of everything after the header crc

The header is JSON (sorted keys) carrying the input shape and, per layer,
its LayerSpec, bit-width, codebook size and weight count. Indices are packed
LSB-first and every layer starts on a byte boundary. Only the per-layer
sections count as payload; header, biases and checksums are overhead.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import net
from .quantizer import FLOAT_PASSTHROUGH_BITS, num_centroids

PACKED_MAGIC = b"DNQP"
PACKED_VERSION = 1
FLOAT_BITS = 32


class PackError(ValueError):
    pass


class UnpackError(ValueError):
    pass


@dataclass(frozen=True)
class LayerBudget:
    n: int
    bits: int
    k: int

    @property
    def quantized(self) -> bool:
        return self.bits < FLOAT_BITS

    def payload_bits(self, float_bits: int = FLOAT_BITS) -> int:
        return self.n * self.bits + self.k * float_bits

    def payload_bytes(self, float_bits: int = FLOAT_BITS) -> int:
        return (self.n * self.bits + 7) // 8 + (self.k * float_bits + 7) // 8


@dataclass(frozen=True)
class CompressionSpec:
    layers: tuple[LayerBudget, ...]
    float_bits: int = FLOAT_BITS

    def __post_init__(self):
        for lb in self.layers:
            if lb.n <= 0:
                raise ValueError("layer weight count must be positive")
            if lb.quantized and lb.k != num_centroids(lb.bits):
                raise ValueError(f"k={lb.k} does not match 2^(b-1)+1 for b={lb.bits}")

    @classmethod
    def uniform(cls, counts: Sequence[int], bits: int) -> "CompressionSpec":
        return cls.from_bits(counts, [bits] * len(counts))

    @classmethod
    def from_bits(cls, counts: Sequence[int], bits: Sequence[int], float_bits: int = FLOAT_BITS) -> "CompressionSpec":
        layers = []
        for n, b in zip(counts, bits, strict=True):
            b = min(int(b), float_bits)
            k = 0 if b >= float_bits else num_centroids(b)
            layers.append(LayerBudget(int(n), b, k))
        return cls(tuple(layers), float_bits)

    @classmethod
    def for_model(cls, model: net.NetworkModel, bitwidths: Sequence[int]) -> "CompressionSpec":
        """Budget for the quantizable layers of ``model``; 32 marks a float layer."""
        counts = [model.layers[i].spec.param_count for i in model.quantizable_indices()]
        return cls.from_bits(counts, bitwidths, model.float_bits)


def compression_ratio(spec: CompressionSpec) -> float:
    """Float storage over index-plus-codebook storage, summed over layers."""
    B = spec.float_bits
    num = sum(lb.n * B for lb in spec.layers)
    den = sum(lb.n * lb.bits + lb.k * B for lb in spec.layers)
    return num / den


# ---------------------------------------------------------------------------
# bit packing


def pack_indices(indices, bits: int) -> bytes:
    """Pack unsigned ints at ``bits`` bits each, LSB-first, zero-padded to a byte."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return b""
    if idx.min() < 0 or idx.max() >= (1 << bits):
        raise PackError(f"index out of range for {bits}-bit packing")
    bitplane = ((idx[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(bitplane.ravel(), bitorder="little").tobytes()


def unpack_indices(buf: bytes, bits: int, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    need = (count * bits + 7) // 8
    if len(buf) < need:
        raise UnpackError(f"index stream needs {need} bytes, got {len(buf)}")
    flat = np.unpackbits(np.frombuffer(buf, np.uint8, need), bitorder="little")[: count * bits]
    return (flat.reshape(count, bits).astype(np.int64) << np.arange(bits)).sum(axis=1)


# ---------------------------------------------------------------------------
# container


@dataclass
class LayerLayout:
    name: str
    kind: str
    n: int
    bits: int
    k: int
    offset: int
    centroid_bytes: int
    index_bytes: int

    @property
    def payload_bytes(self) -> int:
        return self.centroid_bytes + self.index_bytes

    @property
    def padding_bits(self) -> int:
        return 8 * self.index_bytes - self.n * self.bits if self.bits < FLOAT_BITS else 0


@dataclass
class PackedLayout:
    header_bytes: int
    layers: list[LayerLayout]
    bias_bytes: int
    trailer_bytes: int
    total_bytes: int

    @property
    def payload_bytes(self) -> int:
        return sum(l.payload_bytes for l in self.layers)

    @property
    def overhead_bytes(self) -> int:
        return self.total_bytes - self.payload_bytes

    def describe(self) -> str:
        lines = [f"{'layer':<8} {'kind':<7} {'n':>8} {'b':>3} {'k':>4} {'idx bits':>10} {'cb bits':>8} {'pad':>4} {'bytes':>8}"]
        for l in self.layers:
            quant = l.bits < FLOAT_BITS
            idx_bits = l.n * l.bits
            cb_bits = l.k * FLOAT_BITS if quant else 0
            lines.append(
                f"{l.name:<8} {l.kind:<7} {l.n:>8} {l.bits:>3} {l.k:>4} {idx_bits:>10} {cb_bits:>8} {l.padding_bits:>4} {l.payload_bytes:>8}"
            )
        lines.append(
            f"payload {self.payload_bytes} B, header {self.header_bytes} B, biases {self.bias_bytes} B, "
            f"checksum {self.trailer_bytes} B, file {self.total_bytes} B"
        )
        return "\n".join(lines)


def _layer_bits(model: net.NetworkModel, bitwidths: Sequence[int]) -> list[int]:
    qidx = model.quantizable_indices()
    if len(bitwidths) != len(qidx):
        raise PackError(f"got {len(bitwidths)} bit-widths for {len(qidx)} quantizable layers")
    bits = [FLOAT_BITS] * len(model.layers)
    for i, b in zip(qidx, bitwidths):
        bits[i] = min(int(b), FLOAT_BITS)
    return bits


def pack(
    model: net.NetworkModel,
    bitwidths: Sequence[int],
    codebooks: Mapping[int, np.ndarray],
) -> bytes:
    """Serialize a quantized model.

    ``codebooks`` maps layer index to its sorted centroid array (or Codebook).
    Every weight of a quantized layer must be exactly one of its centroids.
    """
    bits = _layer_bits(model, bitwidths)
    header = {"version": PACKED_VERSION, "input_shape": list(model.input_shape), "float_bits": model.float_bits, "layers": []}
    body = []
    for i, (layer, b) in enumerate(zip(model.layers, bits)):
        n = layer.spec.param_count
        entry = {"spec": layer.spec.to_dict(), "bits": b, "n": n, "k": 0}
        w = layer.weight.ravel()
        if b < FLOAT_BITS:
            if i not in codebooks:
                raise PackError(f"layer {i} ({layer.spec.name}): no codebook for a {b}-bit layer")
            c = np.asarray(getattr(codebooks[i], "centroids", codebooks[i]), dtype=np.float64)
            if len(c) != num_centroids(b):
                raise PackError(f"layer {i}: codebook has {len(c)} entries, expected {num_centroids(b)}")
            c32 = c.astype("<f4")
            if not np.array_equal(c32.astype(np.float64), c):
                raise PackError(f"layer {i}: centroids are not float32-representable")
            pos = np.clip(np.searchsorted(c, w), 0, len(c) - 1)
            bad = np.flatnonzero(c[pos] != w)
            if bad.size:
                raise PackError(
                    f"layer {i} ({layer.spec.name}): weight #{bad[0]} = {w[bad[0]]!r} is not in the codebook "
                    f"({bad.size} such weights; quantization incomplete)"
                )
            entry["k"] = len(c)
            body.append(c32.tobytes())
            body.append(pack_indices(pos, b))
        else:
            body.append(w.astype("<f4").tobytes())
        header["layers"].append(entry)
    for layer in model.layers:
        body.append(layer.bias.astype("<f8").tobytes())
    hb = json.dumps(header, sort_keys=True).encode()
    head = PACKED_MAGIC + struct.pack("<HI", PACKED_VERSION, len(hb)) + hb
    head += struct.pack("<I", zlib.crc32(head))
    payload = b"".join(body)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _parse(buf: bytes):
    if len(buf) < 10:
        raise UnpackError(f"truncated: {len(buf)} bytes is shorter than the fixed header")
    if buf[:4] != PACKED_MAGIC:
        raise UnpackError(f"bad magic {buf[:4]!r} at offset 0")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != PACKED_VERSION:
        raise UnpackError(f"unsupported version {version} at offset 4")
    end = 10 + hlen
    if len(buf) < end + 4:
        raise UnpackError(f"truncated header: need {end + 4} bytes, have {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise UnpackError(f"header checksum mismatch (header spans bytes 0..{end})")
    try:
        header = json.loads(buf[10:end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise UnpackError(f"unreadable header at offset 10: {e}") from None
    return header, end + 4


def layout(buf: bytes) -> PackedLayout:
    header, pos = _parse(buf)
    head_bytes = pos
    layers = []
    for entry in header["layers"]:
        spec = net.LayerSpec.from_dict(entry["spec"])
        n, b, k = entry["n"], entry["bits"], entry["k"]
        if b < FLOAT_BITS:
            cb, ib = 4 * k, (n * b + 7) // 8
        else:
            cb, ib = 0, 4 * n
        layers.append(LayerLayout(spec.name, spec.kind, n, b, k, pos, cb, ib))
        pos += cb + ib
    bias = 8 * sum(net.LayerSpec.from_dict(e["spec"]).fan_out for e in header["layers"])
    return PackedLayout(head_bytes, layers, bias, 4, len(buf))


def unpack(buf: bytes) -> tuple[net.NetworkModel, list[int], dict[int, np.ndarray]]:
    """Inverse of :func:`pack`: returns (model, bit-widths, codebooks)."""
    header, pos = _parse(buf)
    lay = layout(buf)
    expected = lay.header_bytes + lay.payload_bytes + lay.bias_bytes + 4
    if len(buf) < expected:
        raise UnpackError(f"truncated body: need {expected} bytes, have {len(buf)}")
    if len(buf) > expected:
        raise UnpackError(f"{len(buf) - expected} unexpected trailing bytes at offset {expected}")
    (crc,) = struct.unpack_from("<I", buf, expected - 4)
    if zlib.crc32(buf[lay.header_bytes : expected - 4]) != crc:
        raise UnpackError(f"body checksum mismatch (bytes {lay.header_bytes}..{expected - 4})")
    specs = [net.LayerSpec.from_dict(e["spec"]) for e in header["layers"]]
    weights, codebooks, bits = [], {}, []
    for i, (entry, ll, spec) in enumerate(zip(header["layers"], lay.layers, specs)):
        off = ll.offset
        if ll.bits < FLOAT_BITS:
            c = np.frombuffer(buf, "<f4", ll.k, off).astype(np.float64)
            idx = unpack_indices(buf[off + ll.centroid_bytes : off + ll.payload_bytes], ll.bits, ll.n)
            bad = np.flatnonzero(idx >= ll.k)
            if bad.size:
                raise UnpackError(
                    f"layer {i}: index {idx[bad[0]]} >= k={ll.k} at weight #{bad[0]} "
                    f"(byte {off + ll.centroid_bytes + bad[0] * ll.bits // 8})"
                )
            weights.append(c[idx].reshape(spec.weight_shape))
            codebooks[i] = c
        else:
            weights.append(np.frombuffer(buf, "<f4", ll.n, off).astype(np.float64).reshape(spec.weight_shape))
        if spec.is_quantizable:
            bits.append(ll.bits)
    off = lay.header_bytes + lay.payload_bytes
    layers = []
    for spec, w in zip(specs, weights):
        b = np.frombuffer(buf, "<f8", spec.fan_out, off).astype(np.float64)
        off += 8 * spec.fan_out
        layers.append(net.Layer(spec, w, b))
    model = net.NetworkModel(tuple(header["input_shape"]), layers, header.get("float_bits", FLOAT_BITS))
    return model, bits, codebooks


def measured_ratio(buf: bytes) -> float:
    """Raw float32 size of the packed layers over their packed payload size."""
    lay = layout(buf)
    raw = sum(4 * l.n for l in lay.layers)
    return raw / lay.payload_bytes


def spec_from_packed(buf: bytes) -> CompressionSpec:
    lay = layout(buf)
    return CompressionSpec(tuple(LayerBudget(l.n, l.bits, l.k) for l in lay.layers))


def cifar_net_counts() -> list[int]:
    """Weight counts of the Caffe ``cifar10_quick`` model (biases excluded).

    conv1 3->32 5x5, conv2 32->32 5x5, conv3 32->64 5x5, ip1 1024->64, ip2 64->10.
    """
    return [3 * 32 * 25, 32 * 32 * 25, 32 * 64 * 25, 1024 * 64, 64 * 10]


CIFAR_NET_KINDS = ["conv2d", "conv2d", "conv2d", "dense", "dense"]


def cifar_net_spec(conv_bits: Sequence[int], fc_bits: int = 3) -> CompressionSpec:
    """Budget for the table above: three conv bit-widths, one width shared by both FC layers."""
    if len(conv_bits) != 3:
        raise ValueError("CIFAR-Net has three conv layers")
    return CompressionSpec.from_bits(cifar_net_counts(), list(conv_bits) + [fc_bits] * 2)
