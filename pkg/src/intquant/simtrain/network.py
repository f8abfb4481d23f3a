"""Forward / backward passes over a fused :class:`FloatGraph`.

Weights are fake-quantized (after batch-norm folding) before use, and
activations are fake-quantized at every fused-group output, i.e. exactly
where the integer engine requantizes. Gradients use the straight-through
rule for the rounding and zero outside the clamp range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from intquant.graph import GRAPH_INPUT, INPUT_SITE, FloatGraph, Fused, Group, fuse, site_params, union_range
from intquant.kernels import conv_output_size, im2col
from intquant.quantization import QuantParams, weight_params
from intquant.simtrain.bn import BatchNormParams, fold_batch_norm
from intquant.simtrain.fakequant import fake_quant
from intquant.simtrain.observers import RangeObserver


def col2im(dpatches, x_shape, kh, kw, stride, padding) -> np.ndarray:
    """Adjoint of :func:`intquant.kernels.im2col` (sums overlapping patches)."""
    b, h, w, c = x_shape
    oh, pt, pb = conv_output_size(h, kh, stride, padding)
    ow, pl, pr = conv_output_size(w, kw, stride, padding)
    dp = dpatches.reshape(b, oh, ow, kh, kw, c)
    dx = np.zeros((b, h + pt + pb, w + pl + pr, c))
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :] += dp[
                :, :, :, i, j, :
            ]
    return dx[:, pt : pt + h, pl : pl + w, :]


def bn_params(graph: FloatGraph, idx: int) -> BatchNormParams:
    p = graph.nodes[idx].params
    return BatchNormParams(p["gamma"], p["beta"], p["mean"], p["var"], graph.nodes[idx].attrs.get("epsilon", 1e-3))


def folded_weights(graph: FloatGraph, g: Group):
    """Effective (weight, bias) of a dense/conv group after folding its batch norm."""
    head = graph.nodes[g.head]
    w = head.params["weight"]
    b = head.params.get("bias")
    if g.bn is not None:
        return fold_batch_norm(w, bn_params(graph, g.bn), b)
    if b is None:
        b = np.zeros(w.shape[0])
    return np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)
    pre_act: np.ndarray | None = None
    pre_fq: np.ndarray | None = None
    fq: QuantParams | None = None
    patches: np.ndarray | None = None
    wq: np.ndarray | None = None
    w_eff: np.ndarray | None = None
    wp: QuantParams | None = None


class Network:
    """Executable view of a float graph for simulated-quantization training.

    Activation params come either from a fixed ``site_params`` mapping
    (evaluation, correspondence checks) or from live ``observers`` that are
    updated with each training batch.
    """

    def __init__(self, graph: FloatGraph):
        self.graph = graph
        self.fused: Fused = fuse(graph)
        self._caches: list[_Cache] = []
        self._input_cache: tuple | None = None

    # params -----------------------------------------------------------
    def _params_from_observers(self, observers: dict[str, RangeObserver], root: str) -> QuantParams | None:
        ranges = {s: o.range for s, o in observers.items() if o.initialized}
        r = union_range(ranges, self.fused.members[root])
        return None if r is None else site_params(r, self.graph.activation_bits)

    def observed_site_params(self, observers: dict[str, RangeObserver]) -> dict[str, QuantParams]:
        out = {}
        for root in self.fused.members:
            p = self._params_from_observers(observers, root)
            if p is not None:
                out[root] = p
        return out

    def _quantize_site(self, y, own_site, root, quant_act, site_params_map, observers, training):
        if training and observers is not None and own_site is not None:
            observers[own_site].update(y)
        if not quant_act:
            return y, None
        if site_params_map is not None:
            p = site_params_map[root]
        else:
            p = self._params_from_observers(observers, root)
            if p is None:
                return y, None
        return fake_quant(y, p), p

    # forward ----------------------------------------------------------
    def forward(
        self,
        x: np.ndarray,
        *,
        quant_weights: bool = True,
        quant_act: bool = True,
        site_params: dict[str, QuantParams] | None = None,
        observers: dict[str, RangeObserver] | None = None,
        training: bool = False,
        bn_decay: float = 0.9,
    ) -> list[np.ndarray]:
        """Run every fused group; returns the list of group outputs."""
        if site_params is None and observers is None and quant_act:
            raise ValueError("activation quantization needs site_params or observers")
        fused = self.fused
        x = np.asarray(x, dtype=np.float64)
        xq, p_in = self._quantize_site(
            x, INPUT_SITE, fused.input_site, quant_act, site_params, observers, training
        )
        self._input_cache = (x, p_in)
        outs: list[np.ndarray] = []
        self._caches = []
        for gi, g in enumerate(fused.groups):
            ins = [xq if j == GRAPH_INPUT else outs[j] for j in g.inputs]
            y, c = self._run_group(gi, ins, quant_weights, quant_act, site_params, observers, training, bn_decay)
            outs.append(y)
            self._caches.append(c)
        return outs

    def forward_group(self, gi: int, inputs: list[np.ndarray], site_params: dict[str, QuantParams]) -> np.ndarray:
        """Evaluate one fused group (fake-quantized) on the given inputs."""
        ins = [np.asarray(a, dtype=np.float64) for a in inputs]
        y, _ = self._run_group(gi, ins, True, True, site_params, None, False, 0.0)
        return y

    def _run_group(self, gi, ins, quant_weights, quant_act, site_params, observers, training, bn_decay):
        graph, fused = self.graph, self.fused
        g = fused.groups[gi]
        c = _Cache()
        c.inputs = ins
        node = graph.nodes[g.head]
        if g.kind in ("dense", "conv2d"):
            xin = ins[0]
            if g.kind == "conv2d":
                kh, kw = node.params["weight"].shape[1:3]
                stride = node.attrs.get("stride", 1)
                padding = node.attrs.get("padding", "valid")
                c.patches, oshape = im2col(xin, kh, kw, stride, padding, 0.0)
                lhs = c.patches
            else:
                if xin.ndim != 2:
                    raise ValueError(f"dense at node {g.head} expects 2-D input, got {xin.shape}")
                lhs = xin
            if training and g.bn is not None:
                self._update_bn(g, lhs, bn_decay)
            w_eff, b_eff = folded_weights(graph, g)
            c.w_eff = w_eff
            if quant_weights:
                c.wp = weight_params(w_eff, graph.weight_bits)
                c.wq = fake_quant(w_eff, c.wp)
            else:
                c.wq = w_eff
            y = lhs @ c.wq.reshape(c.wq.shape[0], -1).T + b_eff
            if g.kind == "conv2d":
                y = y.reshape(oshape + (c.wq.shape[0],))
        elif g.kind == "add":
            if ins[0].shape != ins[1].shape:
                raise ValueError(f"add at node {g.head}: {ins[0].shape} vs {ins[1].shape}")
            y = ins[0] + ins[1]
        elif g.kind == "concat":
            y = np.concatenate(ins, axis=node.attrs.get("axis", -1))
        else:  # flatten
            y = ins[0].reshape(ins[0].shape[0], -1)
        c.pre_act = y
        if g.act == "relu":
            y = np.maximum(y, 0.0)
        elif g.act == "relu6":
            y = np.clip(y, 0.0, 6.0)
        c.pre_fq = y
        if g.site is not None:
            y, c.fq = self._quantize_site(
                y, g.site, fused.site_of_group[gi], quant_act, site_params, observers, training
            )
        return y, c

    def output(self, outs: list[np.ndarray], x: np.ndarray | None = None) -> np.ndarray:
        og = self.fused.output_group
        if og == GRAPH_INPUT:
            return x
        return outs[og]

    def _update_bn(self, g: Group, lhs: np.ndarray, decay: float) -> None:
        head = self.graph.nodes[g.head]
        w = head.params["weight"]
        raw = lhs @ w.reshape(w.shape[0], -1).T
        if "bias" in head.params:
            raw = raw + head.params["bias"]
        mean = raw.mean(axis=0)
        var = raw.var(axis=0)
        bn = self.graph.nodes[g.bn]
        if not bn.attrs.get("initialized", False):
            bn.params["mean"], bn.params["var"] = mean, var
            bn.attrs["initialized"] = True
        else:
            bn.params["mean"] = decay * bn.params["mean"] + (1 - decay) * mean
            bn.params["var"] = decay * bn.params["var"] + (1 - decay) * var

    # backward ---------------------------------------------------------
    def backward(self, d_output: np.ndarray) -> dict[tuple[int, str], np.ndarray]:
        """Gradients of the loss w.r.t. trainable params, keyed ``(node, name)``."""
        graph, fused = self.graph, self.fused
        n_groups = len(fused.groups)
        dout: list[np.ndarray | None] = [None] * n_groups
        grads: dict[tuple[int, str], np.ndarray] = {}
        if fused.output_group == GRAPH_INPUT:
            return grads
        dout[fused.output_group] = np.asarray(d_output, dtype=np.float64)
        for gi in range(n_groups - 1, -1, -1):
            dy = dout[gi]
            if dy is None:
                continue
            g, c = fused.groups[gi], self._caches[gi]
            if c.fq is not None:
                dy = np.where((c.pre_fq >= c.fq.rmin) & (c.pre_fq <= c.fq.rmax), dy, 0.0)
            if g.act == "relu":
                dy = np.where(c.pre_act > 0, dy, 0.0)
            elif g.act == "relu6":
                dy = np.where((c.pre_act > 0) & (c.pre_act < 6), dy, 0.0)
            dins: list[np.ndarray] = []
            if g.kind in ("dense", "conv2d"):
                dins.append(self._backward_linear(g, c, dy, grads))
            elif g.kind == "add":
                dins = [dy, dy]
            elif g.kind == "concat":
                axis = graph.nodes[g.head].attrs.get("axis", -1)
                sizes = np.cumsum([a.shape[axis] for a in c.inputs])[:-1]
                dins = np.split(dy, sizes, axis=axis)
            else:
                dins.append(dy.reshape(c.inputs[0].shape))
            for j, d in zip(g.inputs, dins):
                if j == GRAPH_INPUT:
                    continue
                dout[j] = d if dout[j] is None else dout[j] + d
        return grads

    def _backward_linear(self, g: Group, c: _Cache, dy: np.ndarray, grads) -> np.ndarray:
        graph = self.graph
        head = graph.nodes[g.head]
        w = head.params["weight"]
        o = w.shape[0]
        dy2 = dy.reshape(-1, o)
        lhs = c.patches if g.kind == "conv2d" else c.inputs[0]
        db_eff = dy2.sum(axis=0)
        dw_eff = (dy2.T @ lhs).reshape(w.shape)
        if c.wp is not None:
            dw_eff = np.where((c.w_eff >= c.wp.rmin) & (c.w_eff <= c.wp.rmax), dw_eff, 0.0)
        dlhs = dy2 @ c.wq.reshape(o, -1)
        if g.kind == "conv2d":
            kh, kw = w.shape[1:3]
            dx = col2im(
                dlhs,
                c.inputs[0].shape,
                kh,
                kw,
                head.attrs.get("stride", 1),
                head.attrs.get("padding", "valid"),
            )
        else:
            dx = dlhs
        if g.bn is None:
            grads[(g.head, "weight")] = dw_eff
            if "bias" in head.params:
                grads[(g.head, "bias")] = db_eff
            return dx
        bn = bn_params(graph, g.bn)
        inv_std = bn.inv_std()
        scale = bn.gamma * inv_std
        bshape = (-1,) + (1,) * (w.ndim - 1)
        b = head.params.get("bias", np.zeros(o))
        grads[(g.head, "weight")] = dw_eff * scale.reshape(bshape)
        if "bias" in head.params:
            grads[(g.head, "bias")] = db_eff * scale
        grads[(g.bn, "gamma")] = (dw_eff * w).reshape(o, -1).sum(axis=1) * inv_std + db_eff * (
            b - bn.ema_mean
        ) * inv_std
        grads[(g.bn, "beta")] = db_eff
        return dx
