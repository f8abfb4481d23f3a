"""Binary model formats.

IQM1 stores a converted integer graph; all fields are little-endian::

    b"IQM1"  version:u16  op_count:u16
    input: ndim:u8  dims:u32*ndim  zero_point:u8  bits:u8
    op_count x op:
        opcode:u8  (1 dense, 2 conv2d, 3 add, 4 concat, 5 flatten)
        n_inputs:u8  inputs:i16*n_inputs  out_zero_point:u8  out_bits:u8
        dense/conv2d:
            ndim:u8  dims:u32*ndim  weight_zero_point:u8  weight_bits:u8
            in_zero_point:u8  weight codes:u8*prod(dims)
            bias_len:u32  bias:i32*bias_len  m0:i32  shift:u8
            clamp_min:u8  clamp_max:u8
            conv2d only: stride:u8  padding:u8 (0 valid, 1 same)
        add:
            x_zero_point:u8  y_zero_point:u8  left_shift:u8
            3 x (m0:i32  shift:u8)  clamp_min:u8  clamp_max:u8
        concat: axis:i8
    b"META"  input_scale:f32  op_count x (out_scale:f32  weight_scale:f32)

The trailing metadata block is the only place floats appear.

IQF1 stores a float graph (pre-conversion) with f32 tensors; learned ranges
are kept in a separate JSON file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from intquant.converter import AddOp, ConcatOp, FlattenOp, GraphMeta, LinearOp, QuantGraph
from intquant.graph import GRAPH_INPUT, FloatGraph, Node
from intquant.kernels import AddStage, FusedOutputStage
from intquant.quantization import QuantizedMultiplier

IQM_MAGIC = b"IQM1"
IQM_VERSION = 1
IQF_MAGIC = b"IQF1"
IQF_VERSION = 1
RANGES_VERSION = 1

_OPCODES = {"dense": 1, "conv2d": 2, "add": 3, "concat": 4, "flatten": 5}
_PADDING = ("valid", "same")
_FLOAT_OPS = ("dense", "conv2d", "batch_norm", "relu", "relu6", "add", "concat", "flatten", "softmax")


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def put(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def shape(self, dims) -> None:
        self.put("B", len(dims))
        self.put(f"{len(dims)}I", *dims)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def get(self, fmt: str):
        st = struct.Struct("<" + fmt)
        if self.pos + st.size > len(self.data):
            raise ModelFormatError(f"truncated model: needed {st.size} bytes at offset {self.pos}")
        vals = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        n = dt.itemsize * count
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated model: needed {n} bytes at offset {self.pos}")
        out = np.frombuffer(self.data, dtype=dt, count=count, offset=self.pos).copy()
        self.pos += n
        return out

    def shape(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.array("<u4", self.get("B")))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ModelFormatError(f"{len(self.data) - self.pos} trailing bytes after model")


# IQM1 -----------------------------------------------------------------------


def save_model(qg: QuantGraph) -> bytes:
    w = _Writer()
    w.raw(IQM_MAGIC)
    w.put("HH", IQM_VERSION, len(qg.ops))
    w.shape(qg.input_shape)
    w.put("BB", qg.input_zero_point, qg.input_bits)
    for op in qg.ops:
        kind = op.kind if isinstance(op, LinearOp) else {AddOp: "add", ConcatOp: "concat", FlattenOp: "flatten"}[type(op)]
        w.put("BB", _OPCODES[kind], len(op.inputs))
        w.put(f"{len(op.inputs)}h", *op.inputs)
        w.put("BB", op.out_zero_point, op.out_bits)
        if isinstance(op, LinearOp):
            st = op.stage
            w.shape(op.weights.shape)
            w.put("BBB", op.weight_zero_point, op.weight_bits, op.in_zero_point)
            w.raw(np.ascontiguousarray(op.weights, dtype=np.uint8).tobytes())
            w.put("I", st.bias.size)
            w.raw(st.bias.astype("<i4").tobytes())
            w.put("iB", st.multiplier.m0_raw, st.multiplier.shift)
            w.put("BB", st.clamp_min, st.clamp_max)
            if op.kind == "conv2d":
                w.put("BB", op.stride, _PADDING.index(op.padding))
        elif isinstance(op, AddOp):
            st = op.stage
            w.put("BBB", st.x_zero_point, st.y_zero_point, st.left_shift)
            for m in (st.x_multiplier, st.y_multiplier, st.out_multiplier):
                w.put("iB", m.m0_raw, m.shift)
            w.put("BB", st.clamp_min, st.clamp_max)
        elif isinstance(op, ConcatOp):
            w.put("b", op.axis)
    w.raw(b"META")
    w.put("f", qg.meta.input_scale)
    for s_out, s_w in zip(qg.meta.out_scales, qg.meta.weight_scales):
        w.put("ff", s_out, s_w)
    return w.getvalue()


def _check_code(value: int, bits: int, what: str, lo: int = 0) -> None:
    if not lo <= value <= (1 << bits) - 1:
        raise ModelFormatError(f"{what} {value} outside [{lo}, {(1 << bits) - 1}]")


def _multiplier(r: _Reader) -> QuantizedMultiplier:
    m0, shift = r.get("iB")
    try:
        return QuantizedMultiplier(m0, shift)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None


def _read_op(r: _Reader, index: int, in_bits: dict[int, int]):
    opcode, n_in = r.get("BB")
    kinds = {v: k for k, v in _OPCODES.items()}
    if opcode not in kinds:
        raise ModelFormatError(f"op {index}: unknown opcode {opcode}")
    kind = kinds[opcode]
    inputs = tuple(int(v) for v in r.array("<i2", n_in))
    for j in inputs:
        if not (j == GRAPH_INPUT or 0 <= j < index):
            raise ModelFormatError(f"op {index}: input {j} is not an earlier op")
    arity = {"add": 2, "dense": 1, "conv2d": 1, "flatten": 1}.get(kind)
    if (arity and n_in != arity) or n_in == 0:
        raise ModelFormatError(f"op {index}: {kind} with {n_in} inputs")
    out_zp, out_bits = r.get("BB")
    if not 2 <= out_bits <= 8:
        raise ModelFormatError(f"op {index}: bad bit depth {out_bits}")
    _check_code(out_zp, out_bits, f"op {index} output zero point")
    if kind in ("dense", "conv2d"):
        wshape = r.shape()
        if len(wshape) != (2 if kind == "dense" else 4):
            raise ModelFormatError(f"op {index}: bad weight rank {len(wshape)}")
        wzp, wbits, in_zp = r.get("BBB")
        if not 2 <= wbits <= 8:
            raise ModelFormatError(f"op {index}: bad weight bit depth {wbits}")
        _check_code(wzp, wbits, f"op {index} weight zero point", 1)
        _check_code(in_zp, in_bits[inputs[0]], f"op {index} input zero point")
        weights = r.array("u1", int(np.prod(wshape))).reshape(wshape)
        if weights.size and (weights.min() < 1 or weights.max() > (1 << wbits) - 1):
            raise ModelFormatError(f"op {index}: weight codes outside the narrow range")
        n_bias = r.get("I")
        if n_bias != wshape[0]:
            raise ModelFormatError(f"op {index}: {n_bias} biases for {wshape[0]} outputs")
        bias = r.array("<i4", n_bias).astype(np.int32)
        mult = _multiplier(r)
        cmin, cmax = r.get("BB")
        if not cmin <= cmax <= (1 << out_bits) - 1:
            raise ModelFormatError(f"op {index}: bad clamp range [{cmin}, {cmax}]")
        stride, padding = 1, "valid"
        if kind == "conv2d":
            stride, pad = r.get("BB")
            if stride < 1 or pad >= len(_PADDING):
                raise ModelFormatError(f"op {index}: bad stride/padding")
            padding = _PADDING[pad]
        stage = FusedOutputStage(bias, mult, out_zp, cmin, cmax)
        return LinearOp(kind, inputs, weights, wzp, wbits, in_zp, stage, out_bits, stride, padding)
    if kind == "add":
        xzp, yzp, shift = r.get("BBB")
        _check_code(xzp, in_bits[inputs[0]], f"op {index} x zero point")
        _check_code(yzp, in_bits[inputs[1]], f"op {index} y zero point")
        if shift > 30:
            raise ModelFormatError(f"op {index}: left shift {shift} too large")
        mx, my, mo = _multiplier(r), _multiplier(r), _multiplier(r)
        cmin, cmax = r.get("BB")
        if not cmin <= cmax <= (1 << out_bits) - 1:
            raise ModelFormatError(f"op {index}: bad clamp range [{cmin}, {cmax}]")
        return AddOp(inputs, AddStage(xzp, yzp, shift, mx, my, mo, out_zp, cmin, cmax), out_bits)
    if kind == "concat":
        return ConcatOp(inputs, r.get("b"), out_zp, out_bits)
    return FlattenOp(inputs, out_zp, out_bits)


def load_model(data: bytes) -> QuantGraph:
    r = _Reader(bytes(data))
    if len(data) < 4 or bytes(data[:4]) != IQM_MAGIC:
        raise ModelVersionError(f"not an IQM1 model (magic {bytes(data[:4])!r})")
    r.pos = 4
    version, n_ops = r.get("HH")
    if version != IQM_VERSION:
        raise ModelVersionError(f"unsupported IQM1 version {version}")
    input_shape = r.shape()
    in_zp, in_bits = r.get("BB")
    if not 2 <= in_bits <= 8:
        raise ModelFormatError(f"bad input bit depth {in_bits}")
    _check_code(in_zp, in_bits, "input zero point")
    bits = {GRAPH_INPUT: in_bits}
    ops = []
    for i in range(n_ops):
        op = _read_op(r, i, bits)
        bits[i] = op.out_bits
        ops.append(op)
    if bytes(r.data[r.pos : r.pos + 4]) != b"META":
        raise ModelFormatError("missing metadata block")
    r.pos += 4
    input_scale = r.get("f")
    scales = r.array("<f4", 2 * n_ops).reshape(n_ops, 2).astype(np.float64)
    r.done()
    if not (np.isfinite(input_scale) and input_scale > 0) or not np.all(np.isfinite(scales)):
        raise ModelFormatError("non-finite or non-positive scale in metadata")
    if n_ops and not np.all(scales[:, 0] > 0):
        raise ModelFormatError("non-positive output scale in metadata")
    meta = GraphMeta(float(input_scale), tuple(float(s) for s in scales[:, 0]), tuple(float(s) for s in scales[:, 1]))
    return QuantGraph(input_shape, in_zp, in_bits, tuple(ops), meta)


def save_model_file(qg: QuantGraph, path) -> None:
    Path(path).write_bytes(save_model(qg))


def load_model_file(path) -> QuantGraph:
    return load_model(Path(path).read_bytes())


# IQF1 -----------------------------------------------------------------------


def save_float_model(g: FloatGraph) -> bytes:
    w = _Writer()
    w.raw(IQF_MAGIC)
    w.put("HBB", IQF_VERSION, g.weight_bits, g.activation_bits)
    w.shape(g.input_shape)
    w.put("H", len(g.nodes))
    for n in g.nodes:
        w.put("BB", _FLOAT_OPS.index(n.op) + 1, len(n.inputs))
        w.put(f"{len(n.inputs)}h", *n.inputs)
        if n.op == "conv2d":
            w.put("BB", n.attrs.get("stride", 1), _PADDING.index(n.attrs.get("padding", "valid")))
        elif n.op == "batch_norm":
            w.put("dB", n.attrs.get("epsilon", 1e-3), bool(n.attrs.get("initialized", False)))
        elif n.op == "concat":
            w.put("b", n.attrs.get("axis", -1))
        w.put("B", len(n.params))
        for name in sorted(n.params):
            arr = np.asarray(n.params[name])
            key = name.encode()
            w.put("B", len(key))
            w.raw(key)
            w.shape(arr.shape)
            w.raw(arr.astype("<f4").tobytes())
    return w.getvalue()


def load_float_model(data: bytes) -> FloatGraph:
    r = _Reader(bytes(data))
    if len(data) < 4 or bytes(data[:4]) != IQF_MAGIC:
        raise ModelVersionError(f"not an IQF1 model (magic {bytes(data[:4])!r})")
    r.pos = 4
    version, wbits, abits = r.get("HBB")
    if version != IQF_VERSION:
        raise ModelVersionError(f"unsupported IQF1 version {version}")
    if not (2 <= wbits <= 8 and 2 <= abits <= 8):
        raise ModelFormatError("bad bit depths")
    input_shape = r.shape()
    nodes = []
    for i in range(r.get("H")):
        code, n_in = r.get("BB")
        if not 1 <= code <= len(_FLOAT_OPS):
            raise ModelFormatError(f"node {i}: unknown opcode {code}")
        op = _FLOAT_OPS[code - 1]
        inputs = tuple(int(v) for v in r.array("<i2", n_in))
        attrs: dict = {}
        if op == "conv2d":
            stride, pad = r.get("BB")
            if pad >= len(_PADDING):
                raise ModelFormatError(f"node {i}: bad padding code {pad}")
            attrs = {"stride": stride, "padding": _PADDING[pad]}
        elif op == "batch_norm":
            eps, init = r.get("dB")
            attrs = {"epsilon": float(eps), "initialized": bool(init)}
        elif op == "concat":
            attrs = {"axis": r.get("b")}
        params = {}
        for _ in range(r.get("B")):
            key = bytes(r.array("u1", r.get("B"))).decode()
            shape = r.shape()
            params[key] = r.array("<f4", int(np.prod(shape))).reshape(shape).astype(np.float64)
        nodes.append(Node(op, inputs, params, attrs))
    r.done()
    return FloatGraph(input_shape, nodes, {}, wbits, abits)


def save_float_model_file(g: FloatGraph, path) -> None:
    Path(path).write_bytes(save_float_model(g))


def load_float_model_file(path) -> FloatGraph:
    return load_float_model(Path(path).read_bytes())


# ranges ---------------------------------------------------------------------


def ranges_to_json(ranges: dict[str, tuple[float, float]]) -> str:
    body = {"version": RANGES_VERSION, "ranges": {k: [float(a), float(b)] for k, (a, b) in sorted(ranges.items())}}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def ranges_from_json(text: str) -> dict[str, tuple[float, float]]:
    try:
        body = json.loads(text)
        if body.get("version") != RANGES_VERSION:
            raise ModelVersionError(f"unsupported ranges version {body.get('version')}")
        out = {}
        for k, (a, b) in body["ranges"].items():
            out[str(k)] = (float(a), float(b))
        return out
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"bad ranges file: {exc}") from None


def save_float_bundle(g: FloatGraph, model_path, ranges_path) -> None:
    save_float_model_file(g, model_path)
    Path(ranges_path).write_text(ranges_to_json(g.ranges))


def load_float_bundle(model_path, ranges_path) -> FloatGraph:
    g = load_float_model_file(model_path)
    g.ranges = ranges_from_json(Path(ranges_path).read_text())
    return g
