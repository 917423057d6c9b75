"""Bit-exact model file format.

Layout (all integers little-endian):

    magic  "SBNN"                      4 bytes
    version u16  (= 1)                 2 bytes
    stage count u16                    2 bytes
    classes u32, ndim u8, dim u32 * ndim   (input shape)
    stage blocks...
    crc32 u32  over every byte after the 8-byte prefix (meta + stages)

Stage blocks start with a tag byte:

    1 float conv    u32 in,out,stride,pad; u8 takes_bits; f64 weights
                    (out*in*9); threshold block
    2 float linear  u32 in,out; u8 takes_bits; f64 weights (out*in);
                    threshold block
    3 binary conv   u32 in,out,stride,pad; u8 degenerate; f64 tau, phi;
                    threshold block; kernel payload (below), byte-padded
    4 binary linear u32 in,out; u8 degenerate; f64 tau, phi; threshold
                    block; raw weight bits MSB-first, byte-padded
    5 pool          (empty)
    6 head          u32 in,out; f64 weights (out*in); f64 bias (out)

    threshold block: i8 orientation per channel, then f64 theta per channel

The binary-conv kernel payload is a single MSB-first bit stream, padded to
a byte boundary at the end: first a 2-bit class code per kernel (00 zero,
01 single, 10 dense), then a 4-bit index per single kernel in kernel order,
then 9 raw bits per dense kernel (position 0 first). Its bit length
(excluding the final padding) is exactly the model's compressed-parameter
bit count.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .binquant import OmegaParams, ValidationError
from .engine import (
    KERNEL_DENSE,
    KERNEL_SINGLE,
    KERNEL_ZERO,
    BinStage,
    BitPool,
    FloatStage,
    FusedThreshold,
    Head,
    PackedLayer,
    QuantizedModel,
)

MAGIC = b"SBNN"
VERSION = 1

TAG_FLOAT_CONV = 1
TAG_FLOAT_LINEAR = 2
TAG_BIN_CONV = 3
TAG_BIN_LINEAR = 4
TAG_POOL = 5
TAG_HEAD = 6


class BadMagic(ValidationError):
    pass


class BadVersion(ValidationError):
    pass


class CrcMismatch(ValidationError):
    pass


class TruncatedStream(ValidationError):
    pass


class _BitWriter:
    """MSB-first bit stream."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0
        self.bits_written = 0

    def write(self, value: int, nbits: int):
        if value < 0 or value >= (1 << nbits):
            raise ValidationError(f"value {value} does not fit in {nbits} bits")
        for shift in range(nbits - 1, -1, -1):
            self._acc = (self._acc << 1) | ((value >> shift) & 1)
            self._nbits += 1
            if self._nbits == 8:
                self._bytes.append(self._acc)
                self._acc = 0
                self._nbits = 0
        self.bits_written += nbits

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append(self._acc << (8 - self._nbits))
        return bytes(out)


class _BitReader:
    def __init__(self, data: bytes, offset_base: int = 0):
        self._data = data
        self._pos = 0  # bit position
        self._offset_base = offset_base

    def read(self, nbits: int) -> int:
        end = self._pos + nbits
        if end > 8 * len(self._data):
            raise TruncatedStream(
                f"bit stream ends at byte offset {self._offset_base + len(self._data)}"
            )
        value = 0
        for _ in range(nbits):
            byte = self._data[self._pos // 8]
            bit = (byte >> (7 - self._pos % 8)) & 1
            value = (value << 1) | bit
            self._pos += 1
        return value


class _Cursor:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStream(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64s(self, n) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()

    def i8s(self, n) -> np.ndarray:
        return np.frombuffer(self.take(n), dtype=np.int8).copy()


def kernel_payload_bits(packed: PackedLayer) -> int:
    """Bit length of the kernel-class payload, excluding byte padding."""
    if packed.kind != "conv3x3":
        return packed.bits.size
    k0, k1, kd = packed.kernel_counts
    return 2 * (k0 + k1 + kd) + 4 * k1 + 9 * kd


def payload_bits(model: QuantizedModel) -> int:
    """Total payload bits over binarized stages (the compressed-parameter
    size, headers excluded)."""
    return sum(kernel_payload_bits(s.packed) for s in model.binary_stages())


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def _emit_threshold(out: bytearray, thr: FusedThreshold):
    out += thr.orientation.astype(np.int8).tobytes()
    out += thr.theta.astype("<f8").tobytes()


def _encode_kernel_payload(packed: PackedLayer) -> bytes:
    writer = _BitWriter()
    if packed.kind == "conv3x3":
        for kc in packed.kernel_classes:
            if kc.tag == KERNEL_ZERO:
                writer.write(0b00, 2)
            elif kc.tag == KERNEL_SINGLE:
                writer.write(0b01, 2)
            else:
                writer.write(0b10, 2)
        for kc in packed.kernel_classes:
            if kc.tag == KERNEL_SINGLE:
                writer.write(kc.index, 4)
        for kc in packed.kernel_classes:
            if kc.tag == KERNEL_DENSE:
                for pos in range(9):
                    writer.write((kc.pattern >> pos) & 1, 1)
    else:
        for bit in packed.bits.ravel():
            writer.write(int(bit), 1)
    assert writer.bits_written == kernel_payload_bits(packed)
    return writer.getvalue()


def encode(model: QuantizedModel) -> bytes:
    body = bytearray()
    body += struct.pack("<IB", model.classes, len(model.input_shape))
    for dim in model.input_shape:
        body += struct.pack("<I", dim)
    for stage in model.stages:
        if isinstance(stage, FloatStage):
            if stage.kind == "conv3x3":
                body.append(TAG_FLOAT_CONV)
                body += struct.pack(
                    "<IIII", stage.in_ch, stage.out_ch, stage.stride, stage.padding
                )
            else:
                body.append(TAG_FLOAT_LINEAR)
                body += struct.pack("<II", stage.in_ch, stage.out_ch)
            body.append(1 if stage.takes_bits else 0)
            body += stage.weight.astype("<f8").tobytes()
            _emit_threshold(body, stage.threshold)
        elif isinstance(stage, BinStage):
            p = stage.packed
            if p.kind == "conv3x3":
                body.append(TAG_BIN_CONV)
                body += struct.pack("<IIII", p.in_ch, p.out_ch, p.stride, p.padding)
            else:
                body.append(TAG_BIN_LINEAR)
                body += struct.pack("<II", p.in_ch, p.out_ch)
            body.append(1 if p.omega.degenerate else 0)
            body += struct.pack("<dd", p.omega.tau, p.omega.phi)
            _emit_threshold(body, stage.threshold)
            body += _encode_kernel_payload(p)
        elif isinstance(stage, BitPool):
            body.append(TAG_POOL)
        elif isinstance(stage, Head):
            body.append(TAG_HEAD)
            body += struct.pack("<II", stage.weight.shape[1], stage.weight.shape[0])
            body += stage.weight.astype("<f8").tobytes()
            body += stage.bias.astype("<f8").tobytes()
        else:
            raise ValidationError(f"cannot encode stage {type(stage).__name__}")
    head = MAGIC + struct.pack("<HH", VERSION, len(model.stages))
    crc = zlib.crc32(bytes(body))
    return head + bytes(body) + struct.pack("<I", crc)


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def _read_threshold(cur: _Cursor, channels: int) -> FusedThreshold:
    orientation = cur.i8s(channels)
    theta = cur.f64s(channels)
    return FusedThreshold(orientation=orientation, theta=theta)


def _decode_kernel_payload(cur: _Cursor, kind, out_ch, fan_in):
    if kind == "conv3x3":
        kernels = out_ch * (fan_in // 9)
        head_bits = 2 * kernels
        # first pass over the class codes to size the stream
        probe = _BitReader(cur.data[cur.pos :], offset_base=cur.pos)
        tags = [probe.read(2) for _ in range(kernels)]
        if any(t == 0b11 for t in tags):
            raise ValidationError(
                f"invalid kernel class code at byte offset ~{cur.pos}"
            )
        n_single = sum(1 for t in tags if t == 0b01)
        n_dense = sum(1 for t in tags if t == 0b10)
        total_bits = head_bits + 4 * n_single + 9 * n_dense
        nbytes = (total_bits + 7) // 8
        reader = _BitReader(cur.take(nbytes), offset_base=cur.pos - nbytes)
        bits = np.zeros((kernels, 9), dtype=np.uint8)
        tags = [reader.read(2) for _ in range(kernels)]
        for k, t in enumerate(tags):
            if t == 0b01:
                idx = reader.read(4)
                if idx > 8:
                    raise ValidationError(f"single-kernel index {idx} out of range")
                bits[k, idx] = 1
        for k, t in enumerate(tags):
            if t == 0b10:
                for pos in range(9):
                    bits[k, pos] = reader.read(1)
        return bits.reshape(out_ch, fan_in)
    nbits = out_ch * fan_in
    nbytes = (nbits + 7) // 8
    reader = _BitReader(cur.take(nbytes), offset_base=cur.pos - nbytes)
    flat = np.array([reader.read(1) for _ in range(nbits)], dtype=np.uint8)
    return flat.reshape(out_ch, fan_in)


def decode(data: bytes) -> QuantizedModel:
    if len(data) < 8:
        raise TruncatedStream(f"file is {len(data)} bytes; header needs 8")
    if data[:4] != MAGIC:
        raise BadMagic(f"magic {data[:4]!r} at offset 0, expected {MAGIC!r}")
    version, nstages = struct.unpack("<HH", data[4:8])
    if version != VERSION:
        raise BadVersion(f"version {version} at offset 4, supported: {VERSION}")
    if len(data) < 12:
        raise TruncatedStream("missing trailing crc")
    body, (crc_stored,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc_stored:
        raise CrcMismatch(
            f"crc mismatch at offset {len(data) - 4}: "
            f"stored 0x{crc_stored:08x}, computed 0x{zlib.crc32(body):08x}"
        )
    cur = _Cursor(body)
    classes = cur.u32()
    ndim = cur.u8()
    in_shape = tuple(cur.u32() for _ in range(ndim))
    stages = []
    for _ in range(nstages):
        tag = cur.u8()
        if tag in (TAG_FLOAT_CONV, TAG_FLOAT_LINEAR):
            if tag == TAG_FLOAT_CONV:
                in_ch, out_ch, stride, pad = (cur.u32() for _ in range(4))
                wshape = (out_ch, in_ch, 3, 3)
                kind = "conv3x3"
            else:
                in_ch, out_ch = cur.u32(), cur.u32()
                stride, pad = 1, 0
                wshape = (out_ch, in_ch)
                kind = "linear"
            takes_bits = bool(cur.u8())
            weight = cur.f64s(int(np.prod(wshape))).reshape(wshape)
            thr = _read_threshold(cur, out_ch)
            stages.append(
                FloatStage(
                    kind=kind,
                    in_ch=in_ch,
                    out_ch=out_ch,
                    stride=stride,
                    padding=pad,
                    weight=weight,
                    threshold=thr,
                    takes_bits=takes_bits,
                )
            )
        elif tag in (TAG_BIN_CONV, TAG_BIN_LINEAR):
            if tag == TAG_BIN_CONV:
                in_ch, out_ch, stride, pad = (cur.u32() for _ in range(4))
                fan_in = in_ch * 9
                kind = "conv3x3"
            else:
                in_ch, out_ch = cur.u32(), cur.u32()
                stride, pad = 1, 0
                fan_in = in_ch
                kind = "linear"
            degenerate = bool(cur.u8())
            tau, phi = struct.unpack("<dd", cur.take(16))
            thr = _read_threshold(cur, out_ch)
            bits = _decode_kernel_payload(cur, kind, out_ch, fan_in)
            omega = OmegaParams(tau=tau, phi=phi, degenerate=degenerate)
            packed = PackedLayer(
                kind=kind,
                in_ch=in_ch,
                out_ch=out_ch,
                stride=stride,
                padding=pad,
                bits=bits,
                omega=omega,
            )
            stages.append(BinStage(packed=packed, threshold=thr))
        elif tag == TAG_POOL:
            stages.append(BitPool())
        elif tag == TAG_HEAD:
            in_f, out_f = cur.u32(), cur.u32()
            weight = cur.f64s(in_f * out_f).reshape(out_f, in_f)
            bias = cur.f64s(out_f)
            stages.append(Head(weight=weight, bias=bias))
        else:
            raise ValidationError(f"unknown stage tag {tag} at offset {cur.pos - 1}")
    if cur.pos != len(body):
        raise TruncatedStream(
            f"{len(body) - cur.pos} unread bytes after last stage (offset {cur.pos + 8})"
        )
    return QuantizedModel(stages=stages, input_shape=in_shape, classes=classes)


def save_model(path, model: QuantizedModel):
    with open(path, "wb") as fh:
        fh.write(encode(model))


def load_model(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        return decode(fh.read())
