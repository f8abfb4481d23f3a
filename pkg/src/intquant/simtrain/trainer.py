"""Minimal SGD-with-momentum trainer with simulated quantization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from intquant.graph import GRAPH_INPUT, INPUT_SITE, FloatGraph, Node, activation_params
from intquant.kernels import conv_output_size
from intquant.quantization import NudgedRange, choose_params
from intquant.simtrain.data import Dataset
from intquant.simtrain.network import Network, folded_weights, softmax_cross_entropy
from intquant.simtrain.observers import RangeObserver


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    weight_bits: int = 8
    activation_bits: int = 8
    # None or math.inf: plain float training, no fake quantization at all
    quant_delay_steps: float | None = 1000
    ema_decay: float = 0.999
    learning_rate: float = 0.05
    lr_decay_steps: int | None = None
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    steps: int = 2000
    eval_interval: int = 200
    bn_decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("weight_bits", "activation_bits"):
            if not 4 <= getattr(self, name) <= 8:
                raise ValueError(f"{name} must be in [4, 8], got {getattr(self, name)}")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.eval_interval < 1:
            raise ValueError("batch_size, steps and eval_interval must be positive")

    @property
    def float_only(self) -> bool:
        return self.quant_delay_steps is None or math.isinf(self.quant_delay_steps)

    def lr_at(self, step: int) -> float:
        if not self.lr_decay_steps:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (step // self.lr_decay_steps)


@dataclass
class TrainResult:
    graph: FloatGraph
    ranges: dict[str, NudgedRange]
    log: list[str] = field(default_factory=list)
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


# model construction ---------------------------------------------------------


def _he(rng, shape, fan_in):
    return rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape)


def build_graph(
    model_spec: Sequence[dict],
    input_shape: tuple[int, ...],
    rng: np.random.Generator,
    weight_bits: int = 8,
    activation_bits: int = 8,
) -> FloatGraph:
    """Instantiate a layer list with freshly initialised weights.

    Each entry is a dict with an ``op`` key plus op-specific keys (``units``
    for dense; ``filters``, ``kernel``, ``stride``, ``padding`` for conv2d;
    ``axis`` for concat). ``inputs`` defaults to the previous layer; ``-1`` is
    the graph input.
    """
    shapes: list[tuple[int, ...]] = []
    nodes: list[Node] = []
    spec = list(model_spec)
    bn_inputs = {tuple(l.get("inputs", (i - 1,)))[0] for i, l in enumerate(spec) if l["op"] == "batch_norm"}
    for i, layer in enumerate(spec):
        op = layer["op"]
        inputs = tuple(layer.get("inputs", (i - 1,)))
        in_shapes = [tuple(input_shape) if j == GRAPH_INPUT else shapes[j] for j in inputs]
        s = in_shapes[0]
        params: dict[str, np.ndarray] = {}
        attrs: dict = {}
        if op == "dense":
            if len(s) != 1:
                raise ValueError(f"dense layer {i} needs flat input, got {s}; add a flatten layer")
            units = int(layer["units"])
            params["weight"] = _he(rng, (units, s[0]), s[0])
            if i not in bn_inputs:
                params["bias"] = np.zeros(units)
            out = (units,)
        elif op == "conv2d":
            if len(s) != 3:
                raise ValueError(f"conv2d layer {i} needs (H, W, C) input, got {s}")
            k = int(layer.get("kernel", 3))
            f = int(layer["filters"])
            attrs["stride"] = int(layer.get("stride", 1))
            attrs["padding"] = layer.get("padding", "same")
            oh = conv_output_size(s[0], k, attrs["stride"], attrs["padding"])[0]
            ow = conv_output_size(s[1], k, attrs["stride"], attrs["padding"])[0]
            params["weight"] = _he(rng, (f, k, k, s[2]), k * k * s[2])
            if i not in bn_inputs:
                params["bias"] = np.zeros(f)
            out = (oh, ow, f)
        elif op == "batch_norm":
            c = s[-1]
            params = {"gamma": np.ones(c), "beta": np.zeros(c), "mean": np.zeros(c), "var": np.ones(c)}
            attrs["epsilon"] = float(layer.get("epsilon", 1e-3))
            out = s
        elif op == "add":
            if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
                raise ValueError(f"add layer {i} needs two equal shapes, got {in_shapes}")
            out = s
        elif op == "concat":
            axis = int(layer.get("axis", -1))
            nd = len(s)
            ax = axis % nd
            out = list(s)
            out[ax] = sum(sh[ax] for sh in in_shapes)
            out = tuple(out)
            attrs["axis"] = ax + 1  # in batched tensors
        elif op == "flatten":
            out = (int(np.prod(s)),)
        elif op in ("relu", "relu6", "softmax"):
            out = s
        else:
            raise ValueError(f"unsupported layer {op!r}")
        shapes.append(out)
        nodes.append(Node(op, inputs, params, attrs))
    return FloatGraph(tuple(input_shape), nodes, {}, weight_bits, activation_bits)


def mlp_spec(hidden: Sequence[int] = (32,), num_classes: int = 2, activation: str = "relu") -> list[dict]:
    spec: list[dict] = []
    for h in hidden:
        spec += [{"op": "dense", "units": h}, {"op": activation}]
    spec += [{"op": "dense", "units": num_classes}, {"op": "softmax"}]
    return spec


def cnn_spec(num_classes: int = 4, filters: int = 8) -> list[dict]:
    """Small conv net exercising batch norm, a bypass add and a concat."""
    return [
        {"op": "conv2d", "filters": filters, "kernel": 3, "stride": 1, "padding": "same"},  # 0
        {"op": "batch_norm"},  # 1
        {"op": "relu6"},  # 2
        {"op": "conv2d", "filters": filters, "kernel": 3, "padding": "same"},  # 3
        {"op": "batch_norm"},  # 4
        {"op": "add", "inputs": (2, 4)},  # 5
        {"op": "relu6"},  # 6
        {"op": "conv2d", "filters": filters // 2, "kernel": 1, "inputs": (6,)},  # 7
        {"op": "relu"},  # 8
        {"op": "conv2d", "filters": filters // 2, "kernel": 3, "stride": 2, "padding": "same", "inputs": (6,)},  # 9
        {"op": "relu"},  # 10
        {"op": "conv2d", "filters": filters // 2, "kernel": 3, "stride": 2, "padding": "same", "inputs": (8,)},  # 11
        {"op": "concat", "inputs": (11, 10), "axis": -1},  # 12
        {"op": "flatten"},  # 13
        {"op": "dense", "units": num_classes},  # 14
        {"op": "softmax"},  # 15
    ]


# training ---------------------------------------------------------------------


def make_observers(net: Network, decay: float) -> dict[str, RangeObserver]:
    obs = {INPUT_SITE: RangeObserver(decay)}
    for g in net.fused.groups:
        if g.site:
            obs[g.site] = RangeObserver(decay)
    return obs


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, **forward_kwargs) -> float:
    if len(y) == 0:
        return float("nan")
    logits = net.output(net.forward(x, **forward_kwargs), x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def simulated_logits(graph: FloatGraph, x: np.ndarray, quantized: bool = True) -> np.ndarray:
    """Inference-mode float forward; with ``quantized`` every fake-quant site is active."""
    net = Network(graph)
    if quantized:
        outs = net.forward(x, site_params=activation_params(graph, net.fused))
    else:
        outs = net.forward(x, quant_weights=False, quant_act=False)
    return net.output(outs, x)


def final_ranges(graph: FloatGraph, net: Network) -> dict[str, NudgedRange]:
    out = {s: choose_params(a, b, graph.activation_bits) for s, (a, b) in graph.ranges.items()}
    for g in net.fused.groups:
        if g.kind in ("dense", "conv2d"):
            w, _ = folded_weights(graph, g)
            out[f"w{g.head}"] = choose_params(float(w.min()), float(w.max()), graph.weight_bits, narrow_range=True)
    return out


def train(
    model_spec,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
    on_log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train ``model_spec`` (layer list or an existing FloatGraph) on ``dataset``.

    Weights are fake-quantized from the first step; activation fake-quant
    switches on after ``quant_delay_steps``. Activation ranges are tracked by
    EMA observers throughout, including during the delay and in float-only runs.
    """
    rng = np.random.default_rng(config.seed)
    if isinstance(model_spec, FloatGraph):
        graph = model_spec.copy()
        graph.weight_bits, graph.activation_bits = config.weight_bits, config.activation_bits
    else:
        graph = build_graph(model_spec, dataset.sample_shape, rng, config.weight_bits, config.activation_bits)
    net = Network(graph)
    observers = make_observers(net, config.ema_decay)
    x_all, y_all = dataset.features(), dataset.y
    if eval_dataset is not None:
        x_eval, y_eval = eval_dataset.features(), eval_dataset.y
    result = TrainResult(graph, {})

    def emit(line: str) -> None:
        result.log.append(line)
        if on_log:
            on_log(line)

    quant_w = not config.float_only
    delay = math.inf if config.float_only else int(config.quant_delay_steps)
    velocity: dict[tuple[int, str], np.ndarray] = {}
    n = len(y_all)
    order = rng.permutation(n)
    pos = 0
    loss_sum, correct, seen = 0.0, 0, 0
    if config.float_only:
        emit("# step 0: float training, fake quantization disabled")
    elif delay > 0:
        emit("# step 0: activation quantization disabled")
    else:
        emit("# step 0: activation quantization enabled")
    for step in range(config.steps):
        if delay and step == delay:
            emit(f"# step {step}: activation quantization enabled")
        if pos + config.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        xb, yb = x_all[idx], y_all[idx]
        outs = net.forward(
            xb,
            quant_weights=quant_w,
            quant_act=step >= delay,
            observers=observers,
            training=True,
            bn_decay=config.bn_decay,
        )
        logits = net.output(outs, xb)
        loss, dlogits = softmax_cross_entropy(logits, yb)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        loss_sum += loss * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        seen += len(yb)
        grads = net.backward(dlogits)
        lr = config.lr_at(step)
        for (node, name), g in grads.items():
            v = velocity.get((node, name))
            v = -lr * g if v is None else config.momentum * v - lr * g
            velocity[(node, name)] = v
            graph.nodes[node].params[name] = graph.nodes[node].params[name] + v
        last = step == config.steps - 1
        if (step + 1) % config.eval_interval == 0 or last:
            eval_acc = float("nan")
            if eval_dataset is not None:
                act_on = step + 1 >= delay
                eval_acc = accuracy(
                    net,
                    x_eval,
                    y_eval,
                    quant_weights=quant_w,
                    quant_act=act_on,
                    site_params=net.observed_site_params(observers) if act_on else None,
                )
            row = (step + 1, loss_sum / seen, correct / seen, eval_acc)
            result.history.append(row)
            emit(f"{row[0]}\t{row[1]:.6f}\t{row[2]:.4f}\t{row[3]:.4f}")
            loss_sum, correct, seen = 0.0, 0, 0
    # parameters are stored as f32; round now so in-memory and reloaded models convert identically
    for node in graph.nodes:
        node.params = {k: v.astype(np.float32).astype(np.float64) for k, v in node.params.items()}
    graph.ranges = {s: o.range for s, o in observers.items() if o.initialized}
    result.ranges = final_ranges(graph, net)
    return result
