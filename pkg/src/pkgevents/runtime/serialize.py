"""TSM1 binary model format.

All integers little-endian. Layout::

    magic "TSM1" | version u8 | kind u8 (0 float, 1 quantized)
    input_length u32 | in_channels u32 | n_classes u32 | layer_count u32
    [quantized only] input scale f32 | input zero point i8
    layer records ...
    CRC-32 (IEEE) u32 over every preceding byte

Float records (tag u8 first):
    1 Conv1D      out, in, k, stride, padding u32; weight f32[out*in*k]; bias f32[out]
    2 BatchNorm1D channels u32; eps f64; momentum f64; gamma, beta, mean, var f32[channels]
    3 ReLU
    4 GlobalAvgPool1D
    5 Dense       out, in u32; weight f32[out*in]; bias f32[out]

Quantized records:
    17 QConv1D    out, in, k, stride, padding u32; relu u8; weight scale f32, zp i8;
                  output scale f32, zp i8; weight i8[out*in*k]; bias i32[out]
    20 QGlobalAvgPool1D  output scale f32, zp i8
    21 QDense     out, in u32; relu u8; weight scale f32, zp i8; output scale f32, zp i8;
                  weight i8[out*in]; bias i32[out]
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from ..compress import QConv1D, QDense, QGlobalAvgPool1D, QuantizedModel, QuantParams
from ..errors import ParseError, PkgEventsError
from ..nnet import BatchNorm1D, Conv1D, Dense, FloatModel, GlobalAvgPool1D, ReLU

MAGIC = b"TSM1"
VERSION = 1
KIND_FLOAT, KIND_QUANT = 0, 1
HEADER = struct.Struct("<4sBBIIII")
QP = struct.Struct("<fb")

TAGS = {Conv1D: 1, BatchNorm1D: 2, ReLU: 3, GlobalAvgPool1D: 4, Dense: 5,
        QConv1D: 17, QGlobalAvgPool1D: 20, QDense: 21}


class FormatError(ParseError):
    category = "bad_model_file"


class TruncatedError(FormatError):
    category = "truncated_model"


class ChecksumError(FormatError):
    category = "crc_mismatch"


class UnknownLayerError(FormatError):
    category = "unknown_layer"


class BadMagicError(FormatError):
    category = "bad_magic"


class VersionError(FormatError):
    category = "bad_version"


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _qp(p: QuantParams) -> bytes:
    return QP.pack(p.scale, p.zero_point)


def _float_record(layer) -> bytes:
    tag = bytes([TAGS[type(layer)]])
    if isinstance(layer, Conv1D):
        out, cin, k = layer.weight.shape
        return (tag + struct.pack("<5I", out, cin, k, layer.stride, layer.padding)
                + _f32(layer.weight) + _f32(layer.bias))
    if isinstance(layer, BatchNorm1D):
        return (tag + struct.pack("<Idd", len(layer.gamma), layer.eps, layer.momentum)
                + b"".join(_f32(a) for a in (layer.gamma, layer.beta,
                                             layer.running_mean, layer.running_var)))
    if isinstance(layer, Dense):
        return tag + struct.pack("<2I", *layer.weight.shape) + _f32(layer.weight) + _f32(layer.bias)
    return tag


def _quant_record(layer) -> bytes:
    tag = bytes([TAGS[type(layer)]])
    if isinstance(layer, QGlobalAvgPool1D):
        return tag + _qp(layer.output_params)
    if isinstance(layer, QConv1D):
        out, cin, k = layer.weight.shape
        dims = struct.pack("<5I", out, cin, k, layer.stride, layer.padding)
    else:
        dims = struct.pack("<2I", *layer.weight.shape)
    return (tag + dims + bytes([int(layer.relu)]) + _qp(layer.weight_params)
            + _qp(layer.output_params) + layer.weight.astype(np.int8).tobytes()
            + np.ascontiguousarray(layer.bias, dtype="<i4").tobytes())


def serialize(model) -> bytes:
    if isinstance(model, FloatModel):
        kind, records = KIND_FLOAT, [_float_record(l) for l in model.layers]
        prefix = b""
    elif isinstance(model, QuantizedModel):
        kind, records = KIND_QUANT, [_quant_record(l) for l in model.layers]
        prefix = _qp(model.input_params)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    body = HEADER.pack(MAGIC, VERSION, kind, model.input_length, model.in_channels,
                       model.n_classes, len(model.layers)) + prefix + b"".join(records)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, stream ends at {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count, shape=None):
        dt = np.dtype(dtype)
        arr = np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))
        return arr.reshape(shape) if shape is not None else arr

    def qparams(self, scheme) -> QuantParams:
        scale, zp = self.unpack("<fb")
        try:
            return QuantParams(float(scale), int(zp), scheme)
        except PkgEventsError as exc:
            raise FormatError(f"invalid quantization parameters: {exc}") from None


def _read_float_layer(r: _Reader, tag: int):
    if tag == 1:
        out, cin, k, stride, padding = r.unpack("<5I")
        w = r.array("<f4", out * cin * k, (out, cin, k))
        return Conv1D(w, r.array("<f4", out), stride, padding)
    if tag == 2:
        c, eps, momentum = r.unpack("<Idd")
        gamma, beta, mean, var = (r.array("<f4", c) for _ in range(4))
        return BatchNorm1D(gamma, beta, mean, var, eps, momentum)
    if tag == 3:
        return ReLU()
    if tag == 4:
        return GlobalAvgPool1D()
    if tag == 5:
        out, cin = r.unpack("<2I")
        return Dense(r.array("<f4", out * cin, (out, cin)), r.array("<f4", out))
    raise UnknownLayerError(f"unknown float layer tag {tag}")


def _read_quant_layer(r: _Reader, tag: int):
    if tag == 20:
        return QGlobalAvgPool1D(r.qparams("affine"))
    if tag == 17:
        out, cin, k, stride, padding = r.unpack("<5I")
        shape = (out, cin, k)
    elif tag == 21:
        out, cin = r.unpack("<2I")
        shape = (out, cin)
    else:
        raise UnknownLayerError(f"unknown quantized layer tag {tag}")
    (relu,) = r.unpack("<B")
    if relu > 1:
        raise FormatError(f"relu flag must be 0 or 1, got {relu}")
    wp, op = r.qparams("symmetric"), r.qparams("affine")
    w = r.array("i1", int(np.prod(shape)), shape)
    b = r.array("<i4", out)
    if tag == 17:
        return QConv1D(w, b, wp, op, stride, padding, bool(relu))
    return QDense(w, b, wp, op, bool(relu))


def deserialize(data: bytes):
    """Parse a TSM1 stream back into a FloatModel or QuantizedModel."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a TSM1 model (bad magic)")
    if len(data) < 5:
        raise TruncatedError("stream ends before the version byte")
    if data[4] != VERSION:
        raise VersionError(f"unsupported format version {data[4]}")
    if len(data) < HEADER.size + 4:
        raise TruncatedError("stream shorter than header and checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC-32 mismatch")
    r = _Reader(body)
    _, _, kind, length, channels, n_classes, n_layers = r.unpack(HEADER.format)
    if kind not in (KIND_FLOAT, KIND_QUANT):
        raise FormatError(f"unknown model kind {kind}")
    input_params = r.qparams("affine") if kind == KIND_QUANT else None
    read = _read_float_layer if kind == KIND_FLOAT else _read_quant_layer
    layers = [read(r, r.unpack("<B")[0]) for _ in range(n_layers)]
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} unexpected trailing bytes")
    try:
        if kind == KIND_FLOAT:
            return FloatModel(layers, length, channels, n_classes)
        return QuantizedModel(layers, input_params, length, channels, n_classes)
    except PkgEventsError as exc:
        raise FormatError(f"inconsistent model: {exc}") from None


def to_c_array(data: bytes, name: str = "model") -> str:
    """Source-embeddable text: one array of decimal bytes plus its length."""
    rows = [", ".join(str(b) for b in data[i:i + 16]) for i in range(0, len(data), 16)]
    body = ",\n  ".join(rows)
    return (f"const unsigned int {name}_len = {len(data)};\n"
            f"const unsigned char {name}_data[] = {{\n  {body}\n}};\n")
