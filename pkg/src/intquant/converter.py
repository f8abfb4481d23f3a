"""Float graph -> integer-only inference graph, and its execution.

:func:`convert` computes every constant offline (quantized weights, int32
biases, normalized multipliers, clamp codes). The resulting
:class:`QuantGraph` holds integers only; float scales live in
:class:`GraphMeta` and are used solely to label tensors and to quantize raw
float inputs before they enter the graph.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from intquant import kernels
from intquant.graph import GRAPH_INPUT, FloatGraph, GraphError, activation_params, fuse
from intquant.kernels import AddStage, FusedOutputStage, ParamsMismatchError, QuantizedTensor
from intquant.quantization import (
    MultiplierRangeError,
    QuantParams,
    normalize_multiplier,
    quantize,
    quantize_bias,
    weight_params,
)
from intquant.simtrain.network import Network, folded_weights


class ConversionError(GraphError):
    pass


def _fields_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if not (isinstance(x, np.ndarray) and isinstance(y, np.ndarray)):
                return False
            if x.dtype != y.dtype or not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True


class _ArrayEq:
    def __eq__(self, other):
        return _fields_equal(self, other)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LinearOp(_ArrayEq):
    """Fused dense or conv2d layer (weights as lhs, activations as rhs)."""

    kind: str
    inputs: tuple[int, ...]
    weights: np.ndarray
    weight_zero_point: int
    weight_bits: int
    in_zero_point: int
    stage: FusedOutputStage
    out_bits: int = 8
    stride: int = 1
    padding: str = "valid"

    @property
    def out_zero_point(self) -> int:
        return self.stage.output_zero_point


@dataclass(frozen=True, eq=False)
class AddOp(_ArrayEq):
    inputs: tuple[int, ...]
    stage: AddStage
    out_bits: int = 8

    @property
    def out_zero_point(self) -> int:
        return self.stage.out_zero_point


@dataclass(frozen=True, eq=False)
class ConcatOp(_ArrayEq):
    inputs: tuple[int, ...]
    axis: int
    out_zero_point: int
    out_bits: int = 8


@dataclass(frozen=True, eq=False)
class FlattenOp(_ArrayEq):
    inputs: tuple[int, ...]
    out_zero_point: int
    out_bits: int = 8


@dataclass(frozen=True)
class GraphMeta:
    """Float scales, kept apart from the integer ops. Not used by inference."""

    input_scale: float
    out_scales: tuple[float, ...]
    weight_scales: tuple[float, ...]  # 0.0 for ops without weights


@dataclass(frozen=True, eq=False)
class QuantGraph(_ArrayEq):
    input_shape: tuple[int, ...]
    input_zero_point: int
    input_bits: int
    ops: tuple
    meta: GraphMeta

    def input_params(self) -> QuantParams:
        return QuantParams(self.meta.input_scale, self.input_zero_point, self.input_bits)

    def op_params(self, i: int) -> QuantParams:
        if i == GRAPH_INPUT:
            return self.input_params()
        op = self.ops[i]
        return QuantParams(self.meta.out_scales[i], op.out_zero_point, op.out_bits)

    def output_params(self) -> QuantParams:
        return self.op_params(len(self.ops) - 1 if self.ops else GRAPH_INPUT)

    def weight_tensor(self, i: int) -> QuantizedTensor:
        op = self.ops[i]
        p = QuantParams(self.meta.weight_scales[i], op.weight_zero_point, op.weight_bits, narrow_range=True)
        return QuantizedTensor(op.weights, p)

    def quantize_input(self, x) -> QuantizedTensor:
        """Quantize raw float samples with the graph's recorded input params."""
        return QuantizedTensor(quantize(np.asarray(x, dtype=np.float64), self.input_params()), self.input_params())


def clamp_codes(act: str | None, p: QuantParams) -> tuple[int, int]:
    """Activation clamp folded into the output code range."""
    if act is None:
        return p.qmin, p.qmax
    lo = quantize(0.0, p)
    hi = p.qmax if act == "relu" else quantize(6.0, p)
    return lo, hi


def convert(g: FloatGraph) -> QuantGraph:
    """Fold, quantize and lower ``g`` into an integer-only graph."""
    fused = fuse(g)
    aps = activation_params(g, fused)
    groups = fused.groups
    if groups and fused.output_group != len(groups) - 1:
        raise ConversionError("the graph output must be produced by the last op")
    in_p = aps[fused.input_site]

    def params_of(j: int) -> QuantParams:
        return in_p if j == GRAPH_INPUT else aps[fused.site_of_group[j]]

    ops = []
    out_scales: list[float] = []
    w_scales: list[float] = []
    for gi, grp in enumerate(groups):
        out_p = aps[fused.site_of_group[gi]]
        node = g.nodes[grp.head]
        w_scale = 0.0
        if grp.kind in ("dense", "conv2d"):
            x_p = params_of(grp.inputs[0])
            w_eff, b_eff = folded_weights(g, grp)
            wp = weight_params(w_eff, g.weight_bits)
            w_scale = wp.scale
            try:
                mult = normalize_multiplier(wp.scale * x_p.scale / out_p.scale)
            except MultiplierRangeError as exc:
                raise ConversionError(f"layer {grp.head} ({grp.kind}): {exc}") from None
            lo, hi = clamp_codes(grp.act, out_p)
            stage = FusedOutputStage(quantize_bias(b_eff, wp.scale, x_p.scale), mult, out_p.zero_point, lo, hi)
            ops.append(
                LinearOp(
                    grp.kind,
                    grp.inputs,
                    quantize(w_eff, wp).astype(np.uint8),
                    wp.zero_point,
                    wp.bits,
                    x_p.zero_point,
                    stage,
                    out_p.bits,
                    int(node.attrs.get("stride", 1)),
                    node.attrs.get("padding", "valid"),
                )
            )
        elif grp.kind == "add":
            lo, hi = clamp_codes(grp.act, out_p)
            try:
                stage = kernels.make_add_stage(params_of(grp.inputs[0]), params_of(grp.inputs[1]), out_p, lo, hi)
            except MultiplierRangeError as exc:
                raise ConversionError(f"layer {grp.head} (add): {exc}") from None
            ops.append(AddOp(grp.inputs, stage, out_p.bits))
        elif grp.kind == "concat":
            for j in grp.inputs:
                if params_of(j) != out_p:
                    raise ConversionError(f"concat at node {grp.head}: input params not harmonized")
            ops.append(ConcatOp(grp.inputs, int(node.attrs.get("axis", -1)), out_p.zero_point, out_p.bits))
        else:
            ops.append(FlattenOp(grp.inputs, out_p.zero_point, out_p.bits))
        out_scales.append(out_p.scale)
        w_scales.append(w_scale)
    return QuantGraph(
        tuple(int(s) for s in g.input_shape),
        in_p.zero_point,
        in_p.bits,
        tuple(ops),
        GraphMeta(in_p.scale, tuple(out_scales), tuple(w_scales)),
    )


def harmonization_notes(g: FloatGraph) -> list[str]:
    """Describe concat groups whose members were widened to a shared range."""
    fused = fuse(g)
    notes = []
    for root, sites in fused.members.items():
        if len(sites) < 2:
            continue
        lo = min(g.ranges[s][0] for s in sites if s in g.ranges)
        hi = max(g.ranges[s][1] for s in sites if s in g.ranges)
        widest = max(hi - lo, 1e-30)
        losses = []
        for s in sites:
            if s in g.ranges:
                a, b = g.ranges[s]
                losses.append(f"{s}:{(b - a) / widest:.3f}")
        notes.append(f"concat sites {','.join(sites)} share [{lo:.6g}, {hi:.6g}]; own/shared span {' '.join(losses)}")
    return notes


def integer_only_audit(qg: QuantGraph) -> list[str]:
    """Paths of any non-integer value reachable from the ops (empty means clean).

    ``qg.meta`` is skipped on purpose: its scales only label tensors.
    """
    found: list[str] = []

    def walk(v, path):
        if isinstance(v, (bool, str)) or v is None:
            return
        if isinstance(v, (int, np.integer)):
            return
        if isinstance(v, np.ndarray):
            if not np.issubdtype(v.dtype, np.integer):
                found.append(f"{path}: {v.dtype} array")
            return
        if dataclasses.is_dataclass(v):
            for f in dataclasses.fields(v):
                walk(getattr(v, f.name), f"{path}.{f.name}")
            return
        if isinstance(v, (tuple, list)):
            for k, item in enumerate(v):
                walk(item, f"{path}[{k}]")
            return
        found.append(f"{path}: {type(v).__name__}")

    walk(qg.input_zero_point, "input_zero_point")
    walk(qg.input_bits, "input_bits")
    walk(qg.input_shape, "input_shape")
    walk(qg.ops, "ops")
    return found


# execution --------------------------------------------------------------------


def _execute(qg: QuantGraph, codes: np.ndarray, pairwise: bool = False) -> list[np.ndarray]:
    outs: list[np.ndarray] = []
    for op in qg.ops:
        ins = [codes if j == GRAPH_INPUT else outs[j] for j in op.inputs]
        if isinstance(op, LinearOp):
            x = ins[0]
            if op.kind == "dense":
                if x.ndim != 2:
                    raise kernels.ShapeError(f"dense expects (batch, features), got {x.shape}")
                y = kernels.gemm_codes(op.weights, op.weight_zero_point, x.T, op.in_zero_point, op.stage, pairwise).T
            else:
                y = kernels.conv2d_codes(
                    x, op.in_zero_point, op.weights, op.weight_zero_point, op.stage, op.stride, op.padding, pairwise
                )
        elif isinstance(op, AddOp):
            y = kernels.add_codes(ins[0], ins[1], op.stage)
        elif isinstance(op, ConcatOp):
            y = kernels.concat_codes(ins, op.axis)
        else:
            y = ins[0].reshape(ins[0].shape[0], -1)
        outs.append(np.ascontiguousarray(y))
    return outs


def _check_input(qg: QuantGraph, x: QuantizedTensor) -> None:
    if x.params != qg.input_params():
        raise ParamsMismatchError(f"input params {x.params} != graph input params {qg.input_params()}")
    if tuple(x.shape[1:]) != tuple(qg.input_shape):
        raise kernels.ShapeError(f"input shape {x.shape[1:]} != graph input shape {qg.input_shape}")


def run_inference(qg: QuantGraph, input: QuantizedTensor, pairwise: bool = False) -> QuantizedTensor:
    """Execute the graph on a batch of quantized inputs (leading batch axis)."""
    _check_input(qg, input)
    outs = _execute(qg, input.codes, pairwise)
    codes = outs[-1] if outs else input.codes
    return QuantizedTensor(codes, qg.output_params())


def run_inference_batched(qg: QuantGraph, input: QuantizedTensor, threads: int = 1, chunk: int = 256) -> QuantizedTensor:
    """:func:`run_inference` over batch chunks on up to ``threads`` threads; same result."""
    _check_input(qg, input)
    n = input.shape[0]
    starts = list(range(0, n, chunk)) or [0]

    def part(s):
        return run_inference(qg, QuantizedTensor(input.codes[s : s + chunk], input.params)).codes

    if threads <= 1:
        parts = [part(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(part, starts))
    return QuantizedTensor(np.concatenate(parts, axis=0), qg.output_params())


# correspondence -----------------------------------------------------------------


@dataclass
class CorrespondenceReport:
    layers: list[tuple[int, str, int]]  # (op index, kind, max |code difference|)
    argmax_agreement: float
    samples: int
    notes: list[str]

    @property
    def max_divergence(self) -> int:
        return max((d for _, _, d in self.layers), default=0)

    def to_tsv(self) -> str:
        lines = [f"# {n}" for n in self.notes]
        lines.append("layer\tkind\tmax_code_divergence")
        lines += [f"{i}\t{k}\t{d}" for i, k, d in self.layers]
        lines.append(f"argmax_agreement\t{self.argmax_agreement:.6f}")
        lines.append(f"samples\t{self.samples}")
        return "\n".join(lines) + "\n"


def _kind(op) -> str:
    if isinstance(op, LinearOp):
        return op.kind
    return {AddOp: "add", ConcatOp: "concat", FlattenOp: "flatten"}[type(op)]


def verify_correspondence(g: FloatGraph, qg: QuantGraph, samples) -> CorrespondenceReport:
    """Compare fake-quant float execution of ``g`` with integer execution of ``qg``.

    Per layer, the simulated op is fed the dequantized inputs the integer op
    actually received, and its output is quantized with the op's output params,
    so each divergence reflects that layer's arithmetic alone. Argmax agreement
    compares the two full forward passes on the raw float samples.
    """
    x = np.asarray(samples, dtype=np.float64)
    net = Network(g)
    aps = activation_params(g, net.fused)
    xq = qg.quantize_input(x)
    ints = _execute(qg, xq.codes)
    layers = []
    for i, op in enumerate(qg.ops):
        ins = [QuantizedTensor(xq.codes if j == GRAPH_INPUT else ints[j], qg.op_params(j)).dequantize() for j in op.inputs]
        sim_codes = quantize(net.forward_group(i, ins, aps), qg.op_params(i))
        layers.append((i, _kind(op), int(np.max(np.abs(sim_codes - ints[i].astype(np.int64)), initial=0))))
    if qg.ops and x.shape[0]:
        sim_out = net.forward(x, site_params=aps)[-1].reshape(x.shape[0], -1)
        int_out = ints[-1].reshape(x.shape[0], -1)
        agree = float(np.mean(np.argmax(sim_out, axis=1) == np.argmax(int_out, axis=1)))
    else:
        agree = 1.0
    return CorrespondenceReport(layers, agree, int(x.shape[0]), harmonization_notes(g))
