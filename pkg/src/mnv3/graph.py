"""Executable node graphs with static shape inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import nonlinearity as nl
from . import tensor as T

OPS = ("input", "conv", "bn", "act", "avgpool", "add", "mul", "upsample", "concat")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: Tuple[str, ...]
    out_shape: Tuple[int, int, int]  # (channels, height, width), batch excluded
    attrs: dict = field(default_factory=dict)
    params: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Graph:
    nodes: Tuple[Node, ...]
    param_shapes: Dict[str, Tuple[int, ...]]
    output: str
    taps: Dict[str, str] = field(default_factory=dict)
    weights: Dict[str, np.ndarray] = field(default_factory=dict)
    spec: object = None
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.nodes[0].out_shape

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def with_weights(self, weights: Dict[str, np.ndarray]) -> "Graph":
        missing = set(self.param_shapes) - set(weights)
        extra = set(weights) - set(self.param_shapes)
        if missing or extra:
            raise GraphError(f"weight names mismatch: missing {sorted(missing)[:5]}, "
                             f"unexpected {sorted(extra)[:5]}")
        for k, shape in self.param_shapes.items():
            if tuple(weights[k].shape) != tuple(shape):
                raise GraphError(f"{k}: shape {weights[k].shape} != expected {shape}")
        frozen = {}
        for k in self.param_shapes:
            arr = np.array(weights[k], dtype=T.DTYPE)
            arr.setflags(write=False)
            frozen[k] = arr
        return replace(self, weights=frozen)

    def num_parameters(self, include_running_stats: bool = False) -> int:
        total = 0
        for k, shape in self.param_shapes.items():
            if not include_running_stats and k.endswith((".mean", ".var")):
                continue
            total += math.prod(shape)
        return total


class GraphBuilder:
    """Appends nodes while tracking output shapes."""

    def __init__(self, in_channels: int, height: int, width: int, input_name: str = "input"):
        self.nodes = []
        self.param_shapes = {}
        self.taps = {}
        self._shapes = {}
        self._emit(Node(input_name, "input", (), (in_channels, height, width)))

    def shape(self, name: str) -> Tuple[int, int, int]:
        return self._shapes[name]

    def _emit(self, node: Node) -> str:
        if node.name in self._shapes:
            raise GraphError(f"duplicate node name {node.name!r}")
        for i in node.inputs:
            if i not in self._shapes:
                raise GraphError(f"{node.name}: unknown input {i!r}")
        self.nodes.append(node)
        self._shapes[node.name] = node.out_shape
        return node.name

    def conv(self, name, x, out_ch, k=1, stride=1, dilation=1, groups=1, bias=False,
             op_class=None) -> str:
        c, h, w = self.shape(x)
        if c % groups or out_ch % groups:
            raise GraphError(f"{name}: channels {c}->{out_ch} not divisible by groups {groups}")
        oh, ow = math.ceil(h / stride), math.ceil(w / stride)
        params = [f"{name}.weight"]
        self.param_shapes[f"{name}.weight"] = (out_ch, c // groups, k, k)
        if bias:
            params.append(f"{name}.bias")
            self.param_shapes[f"{name}.bias"] = (out_ch,)
        attrs = dict(k=k, stride=stride, dilation=dilation, groups=groups, bias=bias,
                     op_class=op_class)
        return self._emit(Node(name, "conv", (x,), (out_ch, oh, ow), attrs, tuple(params)))

    def bn(self, name, x, eps=1e-3) -> str:
        c = self.shape(x)[0]
        params = tuple(f"{name}.{p}" for p in ("scale", "bias", "mean", "var"))
        for p in params:
            self.param_shapes[p] = (c,)
        return self._emit(Node(name, "bn", (x,), self.shape(x), dict(eps=eps), params))

    def act(self, name, x, kind) -> str:
        kind = nl.Activation(kind)
        if kind is nl.Activation.IDENTITY:
            return x
        return self._emit(Node(name, "act", (x,), self.shape(x), dict(kind=kind)))

    def avgpool(self, name, x, kernel=None, stride=None, op_class="pool") -> str:
        c, h, w = self.shape(x)
        if kernel is None:
            kh, kw, sh, sw = h, w, 1, 1
        else:
            kh, kw = kernel
            sh, sw = stride
        if kh > h or kw > w:
            raise GraphError(f"{name}: pool kernel {kh}x{kw} exceeds {h}x{w}")
        oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
        attrs = dict(kernel=(kh, kw), stride=(sh, sw), op_class=op_class)
        return self._emit(Node(name, "avgpool", (x,), (c, oh, ow), attrs))

    def add(self, name, a, b) -> str:
        if self.shape(a) != self.shape(b):
            raise GraphError(f"{name}: add of {self.shape(a)} and {self.shape(b)}")
        return self._emit(Node(name, "add", (a, b), self.shape(a)))

    def mul(self, name, a, b) -> str:
        sa, sb = self.shape(a), self.shape(b)
        if sb != sa and not (sb[0] == sa[0] and sb[1:] == (1, 1)):
            raise GraphError(f"{name}: cannot broadcast {sb} over {sa}")
        return self._emit(Node(name, "mul", (a, b), sa))

    def upsample(self, name, x, out_h, out_w) -> str:
        c, h, w = self.shape(x)
        if out_h < h or out_w < w:
            raise GraphError(f"{name}: upsample {h}x{w} -> {out_h}x{out_w}")
        return self._emit(Node(name, "upsample", (x,), (c, out_h, out_w)))

    def concat(self, name, xs: Sequence[str]) -> str:
        shapes = [self.shape(x) for x in xs]
        if len({s[1:] for s in shapes}) != 1:
            raise GraphError(f"{name}: concat spatial mismatch {shapes}")
        c = sum(s[0] for s in shapes)
        return self._emit(Node(name, "concat", tuple(xs), (c,) + shapes[0][1:]))

    def tap(self, label: str, node: str) -> None:
        self.taps[label] = node

    def finish(self, output: str, spec=None, **meta) -> Graph:
        return Graph(tuple(self.nodes), dict(self.param_shapes), output, dict(self.taps),
                     spec=spec, meta=meta)


def _execute(node: Node, args, weights, piecewise_hswish: bool):
    op = node.op
    if op == "conv":
        a = node.attrs
        bias = weights[node.params[1]] if a["bias"] else None
        return T.conv2d(args[0], weights[node.params[0]], bias, stride=a["stride"],
                        dilation=a["dilation"], groups=a["groups"], padding="same")
    if op == "bn":
        s, b, m, v = (weights[p] for p in node.params)
        return T.batchnorm_inference(args[0], s, b, m, v, node.attrs["eps"])
    if op == "act":
        return nl.apply(node.attrs["kind"], args[0], piecewise=piecewise_hswish)
    if op == "avgpool":
        return T.avg_pool(args[0], node.attrs["kernel"], node.attrs["stride"])
    if op == "add":
        return T.add(*args)
    if op == "mul":
        return T.mul(*args)
    if op == "upsample":
        return T.bilinear_upsample(args[0], node.out_shape[1], node.out_shape[2])
    if op == "concat":
        return T.concat(args)
    raise GraphError(f"unknown op {op!r}")


def run(g: Graph, x, outputs: Optional[Sequence[str]] = None,
        piecewise_hswish: bool = True) -> Dict[str, np.ndarray]:
    """Execute ``g`` on ``x`` and return the requested node values."""
    if not g.weights and g.param_shapes:
        raise GraphError("graph has no weights; call init_weights or load_weights first")
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != tuple(g.input_shape):
        raise T.ShapeError(f"input shape {x.shape[1:]} != graph input {g.input_shape}")
    wanted = set(outputs or [g.output])
    last_use = {}
    for idx, node in enumerate(g.nodes):
        for i in node.inputs:
            last_use[i] = idx
    values = {g.nodes[0].name: x}
    result = {}
    for idx, node in enumerate(g.nodes[1:], start=1):
        out = _execute(node, [values[i] for i in node.inputs], g.weights, piecewise_hswish)
        values[node.name] = out
        for i in node.inputs:
            if last_use.get(i) == idx and i not in wanted:
                del values[i]
    for name in wanted:
        if name not in values:
            raise KeyError(f"no node named {name!r}")
        result[name] = values[name]
    return result
