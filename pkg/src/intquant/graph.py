"""Float model representation shared by training and conversion.

A :class:`FloatGraph` is an ordered list of nodes; each node names the
earlier nodes it reads (``-1`` is the graph input). :func:`fuse` groups nodes
into the units the integer engine executes as one op (e.g. conv + batch norm
+ ReLU6). Training inserts activation fake-quantization exactly at group
outputs, which keeps the two sides in step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from intquant.quantization import QuantParams, choose_params, round_scale_f32

GRAPH_INPUT = -1
INPUT_SITE = "input"

COMPUTE_OPS = ("dense", "conv2d", "add", "concat", "flatten")
ACTIVATIONS = ("relu", "relu6")
ALL_OPS = COMPUTE_OPS + ACTIVATIONS + ("batch_norm", "softmax")


class GraphError(ValueError):
    pass


class MissingRangeError(GraphError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


@dataclass(eq=False)
class FloatGraph:
    input_shape: tuple[int, ...]
    nodes: list[Node]
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    weight_bits: int = 8
    activation_bits: int = 8

    def copy(self) -> "FloatGraph":
        nodes = [
            Node(n.op, tuple(n.inputs), {k: v.copy() for k, v in n.params.items()}, dict(n.attrs))
            for n in self.nodes
        ]
        return FloatGraph(
            tuple(self.input_shape), nodes, dict(self.ranges), self.weight_bits, self.activation_bits
        )


@dataclass
class Group:
    """One fused inference op: a compute node plus absorbed BN / clamp nodes."""

    kind: str
    head: int
    inputs: tuple[int, ...]  # group indices, GRAPH_INPUT for the graph input
    bn: int | None = None
    act: str | None = None
    last: int = -1

    @property
    def site(self) -> str | None:
        """Activation quantization site owned by this group, if any."""
        if self.kind in ("dense", "conv2d", "add"):
            return f"n{self.last}"
        return None


@dataclass
class Fused:
    groups: list[Group]
    output_group: int  # GRAPH_INPUT for an empty graph
    has_softmax: bool
    site_of_group: list[str]  # canonical site whose params each group output carries
    input_site: str
    members: dict[str, list[str]]  # canonical site -> member sites sharing its params


def _consumers(nodes: list[Node]) -> list[int]:
    counts = [0] * len(nodes)
    for i, n in enumerate(nodes):
        for j in n.inputs:
            if j != GRAPH_INPUT:
                if not 0 <= j < i:
                    raise GraphError(f"node {i} reads node {j}, which is not an earlier node")
                counts[j] += 1
    return counts


def fuse(graph: FloatGraph) -> Fused:
    nodes = graph.nodes
    consumers = _consumers(nodes)
    groups: list[Group] = []
    group_of_node: dict[int, int] = {}
    has_softmax = False

    def group_input(j: int) -> int:
        if j == GRAPH_INPUT:
            return GRAPH_INPUT
        if j not in group_of_node or groups[group_of_node[j]].last != j:
            raise GraphError(f"node {j} output is consumed but was fused away")
        return group_of_node[j]

    for i, n in enumerate(nodes):
        if n.op not in ALL_OPS:
            raise GraphError(f"unsupported layer {n.op!r} at node {i}")
        if has_softmax:
            raise GraphError("softmax must be the final node")
        if n.op in COMPUTE_OPS:
            arity = {"add": 2}.get(n.op)
            if arity and len(n.inputs) != arity:
                raise GraphError(f"{n.op} at node {i} needs {arity} inputs")
            if n.op == "concat" and len(n.inputs) < 1:
                raise GraphError(f"concat at node {i} has no inputs")
            if n.op in ("dense", "conv2d", "flatten") and len(n.inputs) != 1:
                raise GraphError(f"{n.op} at node {i} takes exactly one input")
            groups.append(Group(n.op, i, tuple(group_input(j) for j in n.inputs), last=i))
            group_of_node[i] = len(groups) - 1
            continue
        if len(n.inputs) != 1:
            raise GraphError(f"{n.op} at node {i} takes exactly one input")
        src = n.inputs[0]
        if n.op == "softmax":
            out = group_input(src)
            has_softmax = True
            continue
        if src == GRAPH_INPUT or src not in group_of_node:
            raise GraphError(f"{n.op} at node {i} has no op to fuse into")
        g = groups[group_of_node[src]]
        if g.last != src or consumers[src] != 1:
            raise GraphError(f"{n.op} at node {i} cannot be fused: node {src} has other consumers")
        if n.op == "batch_norm":
            if g.kind not in ("dense", "conv2d") or g.bn is not None or g.act is not None:
                raise GraphError(f"batch_norm at node {i} must directly follow dense/conv2d")
        else:
            if g.kind not in ("dense", "conv2d", "add") or g.act is not None:
                raise GraphError(f"{n.op} at node {i} must follow dense/conv2d/batch_norm/add")
        if n.op == "batch_norm":
            g.bn = i
        else:
            g.act = n.op
        g.last = i
        group_of_node[i] = group_of_node[src]

    if has_softmax:
        output_group = out
    else:
        output_group = len(groups) - 1 if groups else GRAPH_INPUT

    # concat inputs share one set of params: union-find over sites
    parent: dict[str, str] = {INPUT_SITE: INPUT_SITE}
    for g in groups:
        if g.site:
            parent[g.site] = g.site

    def find(s: str) -> str:
        while parent[s] != s:
            parent[s] = parent[parent[s]]
            s = parent[s]
        return s

    raw_site: list[str] = []
    for g in groups:
        if g.site:
            raw_site.append(g.site)
        else:
            srcs = [INPUT_SITE if j == GRAPH_INPUT else raw_site[j] for j in g.inputs]
            root = find(srcs[0])
            for s in srcs[1:]:
                r = find(s)
                if r != root:
                    # deterministic root: the earliest site wins
                    lo, hi = sorted((root, r), key=_site_order)
                    parent[hi] = lo
                    root = lo
            raw_site.append(root)
    site_of_group = [find(s) for s in raw_site]
    members: dict[str, list[str]] = {}
    for s in sorted(parent, key=_site_order):
        members.setdefault(find(s), []).append(s)
    return Fused(groups, output_group, has_softmax, site_of_group, find(INPUT_SITE), members)


def _site_order(s: str) -> int:
    return -1 if s == INPUT_SITE else int(s[1:])


def union_range(ranges: dict[str, tuple[float, float]], sites: list[str]) -> tuple[float, float] | None:
    known = [ranges[s] for s in sites if s in ranges]
    if not known:
        return None
    return min(a for a, _ in known), max(b for _, b in known)


def site_params(range_ab: tuple[float, float], bits: int) -> QuantParams:
    """Activation params for a learned range, scale rounded to float32."""
    return round_scale_f32(choose_params(float(range_ab[0]), float(range_ab[1]), bits).params)


def activation_params(graph: FloatGraph, fused: Fused | None = None) -> dict[str, QuantParams]:
    """Params for every canonical activation site, from the graph's learned ranges."""
    fused = fused or fuse(graph)
    out = {}
    for root, sites in fused.members.items():
        r = union_range(graph.ranges, sites)
        if r is None:
            raise MissingRangeError(f"no learned range for activation site(s) {sites}")
        out[root] = site_params(r, graph.activation_bits)
    return out
