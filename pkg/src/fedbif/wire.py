"""Byte-exact payload codecs and bits-per-parameter accounting.

Layout (all integers little-endian) is documented in ``docs/wire-format.md``.
Every message starts with a 16-byte header::

    magic "FBIF" | version u8 | flags u8 | m u8 | activated u8 | round u32 | layers u32

``flags`` holds the direction in bit 0 (0 = downlink, 1 = uplink) and the
payload kind in the high nibble. Integers are stored offset-binary
(``q + 2**(m-1)``) at ``m`` bits each; all bit streams are LSB-first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AccountingError, DataError, DecodeError

MAGIC = b"FBIF"
VERSION = 1
HEADER = struct.Struct("<4sBBBBII")
HEADER_SIZE = HEADER.size  # 16
MULTI_INDEX = 0xFF

DOWNLINK, UPLINK = 0, 1

KIND_BITPLANE = 0  # FedBiF: m-bit integers down, activated planes up
KIND_DENSE = 1  # float32 tensors (FedAvg)
KIND_SIGN = 2  # alpha * sign(delta) (SignSGD)
KIND_UNIFORM = 3  # deterministic m-bit quantized delta (FedPAQ)
KIND_STOCHASTIC = 4  # stochastic m-level quantization over [-A, A] (LFL)
KIND_NAMES = {
    KIND_BITPLANE: "bitplane",
    KIND_DENSE: "dense",
    KIND_SIGN: "sign",
    KIND_UNIFORM: "uniform",
    KIND_STOCHASTIC: "stochastic",
}


# ---------------------------------------------------------------------------
# bit packing


@dataclass(frozen=True)
class PackedPlane:
    bit_count: int
    data: bytes

    def __post_init__(self):
        if len(self.data) != (self.bit_count + 7) // 8:
            raise DecodeError(f"{len(self.data)} bytes cannot hold exactly {self.bit_count} bits")


def pack_plane(plane: np.ndarray) -> PackedPlane:
    bits = np.asarray(plane).ravel()
    if bits.size and not np.all((bits == 0) | (bits == 1)):
        raise DataError("pack_plane needs a binary plane")
    return PackedPlane(bits.size, np.packbits(bits.astype(np.uint8), bitorder="little").tobytes())


def unpack_plane(packed: PackedPlane, shape: tuple[int, ...] | None = None) -> np.ndarray:
    raw = np.frombuffer(packed.data, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    if np.any(bits[packed.bit_count:]):
        raise DecodeError("non-zero padding bits in packed plane")
    bits = bits[:packed.bit_count]
    return bits.reshape(shape) if shape is not None else bits


def pack_uint(values: np.ndarray, m: int) -> bytes:
    """Concatenate unsigned ``m``-bit values, each LSB-first, into a bit stream."""
    v = np.asarray(values, dtype=np.int64).ravel()
    if v.size and (v.min() < 0 or v.max() >= (1 << m)):
        raise DataError(f"values do not fit in {m} unsigned bits")
    bits = ((v[:, None] >> np.arange(m)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_uint(data: bytes, m: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if np.any(bits[count * m:]):
        raise DecodeError("non-zero padding bits in packed integers")
    bits = bits[:count * m].reshape(count, m).astype(np.int64)
    return (bits << np.arange(m)).sum(axis=1)


# ---------------------------------------------------------------------------
# payload types


@dataclass
class QuantizedModel:
    """Downlink FedBiF payload: per-layer m-bit integers and step sizes, raw biases."""

    ints: list[np.ndarray]
    alphas: list[float]
    biases: list[np.ndarray]
    m: int
    round: int
    activated: tuple[int, ...]


@dataclass
class ClientUpdate:
    """Uplink FedBiF payload: trained activated plane(s) per layer plus bias deltas."""

    client_id: int
    round: int
    activated: tuple[int, ...]
    planes: list[list[np.ndarray]]  # planes[layer][j] is the plane of activated[j]
    bias_deltas: list[np.ndarray]
    sample_count: int
    m: int
    # simulation telemetry, never serialized
    train_loss: float = field(default=float("nan"), compare=False)


@dataclass
class TensorMessage:
    """Baseline payloads; ``codes`` are interpreted according to ``kind``.

    dense: float32 values; sign: int8 in {-1, 0, 1} scaled by ``scales``;
    uniform: signed m-bit ints times ``scales``; stochastic: signed m-bit ints
    on the grid of ``2**m`` levels spanning ``[-scale, scale]``.
    """

    kind: int
    direction: int
    round: int
    codes: list[np.ndarray]
    scales: list[float]
    biases: list[np.ndarray]
    m: int = 32
    client_id: int = 0
    sample_count: int = 0
    train_loss: float = field(default=float("nan"), compare=False)


# ---------------------------------------------------------------------------
# low-level writer / reader


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []
        self.weight_bytes = 0

    def put(self, fmt: str, *vals) -> None:
        self.parts.append(struct.pack("<" + fmt, *vals))

    def weights(self, data: bytes) -> None:
        self.parts.append(data)
        self.weight_bytes += len(data)

    def f32_array(self, arr: np.ndarray) -> None:
        a = np.asarray(arr, dtype="<f4").ravel()
        self.put("I", a.size)
        self.parts.append(a.tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError(f"truncated payload: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def get(self, fmt: str):
        s = struct.Struct("<" + fmt)
        vals = s.unpack(self.take(s.size))
        return vals if len(vals) > 1 else vals[0]

    def f32_array(self) -> np.ndarray:
        n = self.get("I")
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes after payload")


@dataclass(frozen=True)
class Header:
    version: int
    direction: int
    kind: int
    m: int
    activated: int
    round: int
    layers: int


def _header(direction: int, kind: int, m: int, activated: int, rnd: int, layers: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, (kind << 4) | direction, m, activated, rnd, layers)


def read_header(data: bytes) -> Header:
    if len(data) < HEADER_SIZE:
        raise DecodeError(f"payload shorter than the {HEADER_SIZE}-byte header")
    magic, version, flags, m, act, rnd, layers = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    kind = flags >> 4
    if kind not in KIND_NAMES or flags & 0x0E:
        raise DecodeError(f"bad flags byte 0x{flags:02x}")
    return Header(version, flags & 1, kind, m, act, rnd, layers)


def _activated_byte(activated: tuple[int, ...]) -> int:
    return activated[0] if len(activated) == 1 else MULTI_INDEX


def _mask(activated: tuple[int, ...]) -> int:
    return sum(1 << i for i in activated)


def _from_mask(mask: int) -> tuple[int, ...]:
    return tuple(i for i in range(7, -1, -1) if mask >> i & 1)


def _shape(w: _Writer, arr: np.ndarray) -> None:
    rows, cols = arr.shape if arr.ndim == 2 else (1, arr.size)
    w.put("II", rows, cols)


# ---------------------------------------------------------------------------
# FedBiF messages


def _encode_downlink(qm: QuantizedModel) -> tuple[bytes, int]:
    w = _Writer()
    w.parts.append(_header(DOWNLINK, KIND_BITPLANE, qm.m, _activated_byte(qm.activated), qm.round, len(qm.ints)))
    if len(qm.activated) != 1:
        w.put("B", _mask(qm.activated))
    offset = 1 << (qm.m - 1)
    for ints, alpha, bias in zip(qm.ints, qm.alphas, qm.biases):
        _shape(w, ints)
        w.put("f", alpha)
        w.weights(pack_uint(np.asarray(ints) + offset, qm.m))
        w.f32_array(bias)
    return w.getvalue(), w.weight_bytes


def encode_downlink(qm: QuantizedModel) -> bytes:
    return _encode_downlink(qm)[0]


def _read_activated(r: _Reader, h: Header) -> tuple[int, ...]:
    if h.activated == MULTI_INDEX:
        return _from_mask(r.get("B"))
    if h.activated >= max(h.m, 1):
        raise DecodeError(f"activated index {h.activated} out of range for m={h.m}")
    return (h.activated,)


def decode_downlink(data: bytes) -> QuantizedModel:
    h = read_header(data)
    if h.kind != KIND_BITPLANE or h.direction != DOWNLINK:
        raise DecodeError(f"not a FedBiF downlink payload (kind={h.kind}, direction={h.direction})")
    if not 1 <= h.m <= 8:
        raise DecodeError(f"bit width {h.m} out of range")
    r = _Reader(data, HEADER_SIZE)
    activated = _read_activated(r, h)
    offset = 1 << (h.m - 1)
    ints, alphas, biases = [], [], []
    for _ in range(h.layers):
        rows, cols = r.get("II")
        alpha = r.get("f")
        n = rows * cols
        ints.append((unpack_uint(r.take((n * h.m + 7) // 8), h.m, n) - offset).reshape(rows, cols))
        alphas.append(alpha)
        biases.append(r.f32_array())
    r.done()
    return QuantizedModel(ints, alphas, biases, h.m, h.round, activated)


def _encode_uplink(up: ClientUpdate) -> tuple[bytes, int]:
    w = _Writer()
    w.parts.append(_header(UPLINK, KIND_BITPLANE, up.m, _activated_byte(up.activated), up.round, len(up.planes)))
    w.put("II", up.client_id, up.sample_count)
    if len(up.activated) != 1:
        w.put("B", _mask(up.activated))
    for planes, bias in zip(up.planes, up.bias_deltas):
        _shape(w, planes[0])
        for plane in planes:
            w.weights(pack_plane(plane).data)
        w.f32_array(bias)
    return w.getvalue(), w.weight_bytes


def encode_uplink(up: ClientUpdate) -> bytes:
    return _encode_uplink(up)[0]


def decode_uplink(data: bytes) -> ClientUpdate:
    h = read_header(data)
    if h.kind != KIND_BITPLANE or h.direction != UPLINK:
        raise DecodeError(f"not a FedBiF uplink payload (kind={h.kind}, direction={h.direction})")
    r = _Reader(data, HEADER_SIZE)
    client_id, samples = r.get("II")
    activated = _read_activated(r, h)
    planes, biases = [], []
    for _ in range(h.layers):
        rows, cols = r.get("II")
        n = rows * cols
        layer = []
        for _ in activated:
            layer.append(unpack_plane(PackedPlane(n, r.take((n + 7) // 8)), (rows, cols)))
        planes.append(layer)
        biases.append(r.f32_array())
    r.done()
    return ClientUpdate(client_id, h.round, activated, planes, biases, samples, h.m)


# ---------------------------------------------------------------------------
# baseline messages


def _encode_tensor_message(msg: TensorMessage) -> tuple[bytes, int]:
    w = _Writer()
    m_field = msg.m if msg.kind != KIND_DENSE else 32
    w.parts.append(_header(msg.direction, msg.kind, m_field, 0, msg.round, len(msg.codes)))
    if msg.direction == UPLINK:
        w.put("II", msg.client_id, msg.sample_count)
    for codes, scale, bias in zip(msg.codes, msg.scales, msg.biases):
        codes = np.asarray(codes)
        _shape(w, codes)
        if msg.kind == KIND_DENSE:
            w.weights(np.asarray(codes, dtype="<f4").tobytes())
        elif msg.kind == KIND_SIGN:
            w.put("f", scale)
            zeros = codes == 0
            w.put("B", int(zeros.any()))
            w.weights(pack_plane(codes > 0).data)
            if zeros.any():
                w.weights(pack_plane(zeros).data)
        else:
            w.put("f", scale)
            w.weights(pack_uint(codes + (1 << (msg.m - 1)), msg.m))
        w.f32_array(bias)
    return w.getvalue(), w.weight_bytes


def encode_tensor_message(msg: TensorMessage) -> bytes:
    return _encode_tensor_message(msg)[0]


def decode_tensor_message(data: bytes) -> TensorMessage:
    h = read_header(data)
    if h.kind == KIND_BITPLANE:
        raise DecodeError("FedBiF payload; use decode_downlink / decode_uplink")
    r = _Reader(data, HEADER_SIZE)
    client_id = samples = 0
    if h.direction == UPLINK:
        client_id, samples = r.get("II")
    codes, scales, biases = [], [], []
    for _ in range(h.layers):
        rows, cols = r.get("II")
        n = rows * cols
        if h.kind == KIND_DENSE:
            codes.append(np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(rows, cols))
            scales.append(1.0)
        elif h.kind == KIND_SIGN:
            scales.append(r.get("f"))
            has_zeros = r.get("B")
            if has_zeros not in (0, 1):
                raise DecodeError(f"bad zero-plane flag {has_zeros}")
            positive = unpack_plane(PackedPlane(n, r.take((n + 7) // 8)), (rows, cols))
            c = np.where(positive == 1, 1, -1).astype(np.int8)
            if has_zeros:
                zeros = unpack_plane(PackedPlane(n, r.take((n + 7) // 8)), (rows, cols))
                c[zeros == 1] = 0
            codes.append(c)
        else:
            if not 1 <= h.m <= 8:
                raise DecodeError(f"bit width {h.m} out of range")
            scales.append(r.get("f"))
            raw = unpack_uint(r.take((n * h.m + 7) // 8), h.m, n)
            codes.append((raw - (1 << (h.m - 1))).reshape(rows, cols))
        biases.append(r.f32_array())
    r.done()
    return TensorMessage(h.kind, h.direction, h.round, codes, scales, biases, h.m, client_id, samples)


def encode(payload) -> tuple[bytes, int]:
    """Encode any payload; returns ``(bytes, weight_payload_bytes)``."""
    if isinstance(payload, QuantizedModel):
        return _encode_downlink(payload)
    if isinstance(payload, ClientUpdate):
        return _encode_uplink(payload)
    if isinstance(payload, TensorMessage):
        return _encode_tensor_message(payload)
    raise TypeError(f"cannot encode {type(payload).__name__}")


def decode(data: bytes):
    h = read_header(data)
    if h.kind == KIND_BITPLANE:
        return decode_downlink(data) if h.direction == DOWNLINK else decode_uplink(data)
    return decode_tensor_message(data)


# ---------------------------------------------------------------------------
# accounting


@dataclass
class WireStats:
    """Bit counters for one run.

    ``*_bits`` count whole messages; ``*_weight_bits`` count only the weight
    payload (packed planes / integers / float32 weights), excluding headers,
    shapes, step sizes and biases.
    """

    parameter_count: int
    weight_count: int
    uplink_bits: int = 0
    downlink_bits: int = 0
    uplink_weight_bits: int = 0
    downlink_weight_bits: int = 0
    uplink_messages: int = 0
    downlink_messages: int = 0

    def record(self, direction: int, payload) -> bytes:
        data, weight_bytes = encode(payload)
        if direction == UPLINK:
            self.uplink_bits += 8 * len(data)
            self.uplink_weight_bits += 8 * weight_bytes
            self.uplink_messages += 1
        else:
            self.downlink_bits += 8 * len(data)
            self.downlink_weight_bits += 8 * weight_bytes
            self.downlink_messages += 1
        return data


def bpp(stats: WireStats, direction: int | str, weights_only: bool = False) -> float:
    """Average bits per parameter per message in one direction.

    Downlink counts one broadcast per round; uplink counts one message per
    participating client.
    """
    if isinstance(direction, str):
        direction = {"uplink": UPLINK, "downlink": DOWNLINK}[direction]
    count = stats.weight_count if weights_only else stats.parameter_count
    if count <= 0:
        raise AccountingError("parameter count must be positive")
    if direction == UPLINK:
        bits = stats.uplink_weight_bits if weights_only else stats.uplink_bits
        messages = stats.uplink_messages
    else:
        bits = stats.downlink_weight_bits if weights_only else stats.downlink_bits
        messages = stats.downlink_messages
    if messages == 0:
        raise AccountingError("no rounds counted in this direction")
    return bits / count / messages
