"""MAdds / parameter accounting and a linear latency estimator.

Convention: one MAdd is one multiply-accumulate. Convolutions count
``out_h * out_w * out_ch * k * k * in_ch / groups``; average pooling counts one
accumulate per input sample in each window. BatchNorm, activations, residual
adds, SE rescaling and upsampling are free. Parameters count conv weights, conv
biases (only on convolutions without BN), and BN scale/bias; BN running
statistics are excluded.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .blocks import se_width
from .spec import NetworkSpec, Op, apply_multiplier, apply_resolution

OP_CLASSES = ("conv", "pointwise", "depthwise", "se", "fc", "pool")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class LayerCost:
    name: str
    madds: int
    params: int
    op_class: str = "pointwise"


@dataclass
class CostReport:
    per_layer: list
    name: str = ""
    est_latency_ms: Optional[float] = None

    @property
    def total_madds(self) -> int:
        return sum(layer.madds for layer in self.per_layer)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.per_layer)

    def madds_by_class(self) -> dict:
        out = dict.fromkeys(OP_CLASSES, 0)
        for layer in self.per_layer:
            out[layer.op_class] += layer.madds
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "madds", "params"])
        for layer in self.per_layer:
            w.writerow([layer.name, layer.madds, layer.params])
        w.writerow(["total", self.total_madds, self.total_params])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([len(l.name) for l in self.per_layer] + [5])
        lines = [f"{'layer':<{width}}  {'madds':>14}  {'params':>12}"]
        for layer in self.per_layer:
            lines.append(f"{layer.name:<{width}}  {layer.madds:>14d}  {layer.params:>12d}")
        lines.append(f"{'total':<{width}}  {self.total_madds:>14d}  {self.total_params:>12d}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# per-op formulas

def conv_cost(name, in_ch, out_ch, k, out_h, out_w, groups=1, bias=False, bn=True, op_class=None):
    madds = out_h * out_w * out_ch * k * k * (in_ch // groups)
    params = k * k * (in_ch // groups) * out_ch
    if bias:
        params += out_ch
    if bn:
        params += 2 * out_ch
    if op_class is None:
        if groups > 1 and groups == in_ch:
            op_class = "depthwise"
        elif k == 1:
            op_class = "pointwise"
        else:
            op_class = "conv"
    return LayerCost(name, madds, params, op_class)


def pool_cost(name, ch, in_h, in_w, kh=None, kw=None, sh=None, sw=None, op_class="pool"):
    """Average pool; ``kh is None`` means global."""
    if kh is None:
        return LayerCost(name, ch * in_h * in_w, 0, op_class)
    out_h = (in_h - kh) // sh + 1
    out_w = (in_w - kw) // sw + 1
    return LayerCost(name, ch * out_h * out_w * kh * kw, 0, op_class)


def bneck_costs(prefix, in_ch, exp, out, k, stride, se, h, w, dilation=1):
    """Costs of one inverted bottleneck at input size (h, w)."""
    out_h, out_w = math.ceil(h / stride), math.ceil(w / stride)
    layers = []
    if exp != in_ch:
        layers.append(conv_cost(f"{prefix}.expand", in_ch, exp, 1, h, w))
    layers.append(conv_cost(f"{prefix}.depthwise", exp, exp, k, out_h, out_w, groups=exp))
    if se:
        sq = se_width(exp)
        layers.append(pool_cost(f"{prefix}.se.pool", exp, out_h, out_w, op_class="se"))
        layers.append(conv_cost(f"{prefix}.se.reduce", exp, sq, 1, 1, 1, bias=True, bn=False,
                                op_class="se"))
        layers.append(conv_cost(f"{prefix}.se.expand", sq, exp, 1, 1, 1, bias=True, bn=False,
                                op_class="se"))
    layers.append(conv_cost(f"{prefix}.project", exp, out, 1, out_h, out_w))
    return layers


def row_costs(spec: NetworkSpec, index: int, h: Optional[int] = None, w: Optional[int] = None):
    row = spec.rows[index]
    h = row.input_resolution if h is None else h
    w = row.input_resolution if w is None else w
    prefix = f"l{index:02d}"
    if row.operator is Op.BNECK:
        return bneck_costs(prefix, row.input_channels, row.exp_size, row.out_channels,
                           row.kernel, row.stride, row.se, h, w)
    if row.operator is Op.POOL:
        return [pool_cost(f"{prefix}.pool", row.input_channels, h, w)]
    out_h, out_w = math.ceil(h / row.stride), math.ceil(w / row.stride)
    nbn = row.operator is Op.CONV_NBN
    op_class = "fc" if nbn else None
    return [conv_cost(f"{prefix}.conv", row.input_channels, row.out_channels, row.kernel,
                      out_h, out_w, bias=nbn, bn=not nbn, op_class=op_class)]


def count(spec: NetworkSpec) -> CostReport:
    """Per-layer MAdds and parameters of ``spec``, straight from its rows."""
    layers = []
    for i in range(len(spec.rows)):
        layers.extend(row_costs(spec, i))
    return CostReport(layers, name=spec.name)


def count_graph(g) -> CostReport:
    """Per-node costs of a built graph, from its static shapes."""
    shapes = {n.name: n.out_shape for n in g.nodes}
    layers = []
    for node in g.nodes:
        if node.op == "conv":
            a = node.attrs
            in_ch = shapes[node.inputs[0]][0]
            out_ch, oh, ow = node.out_shape
            layers.append(conv_cost(node.name, in_ch, out_ch, a["k"], oh, ow, a["groups"],
                                    bias=a["bias"], bn=False, op_class=a["op_class"]))
        elif node.op == "bn":
            layers.append(LayerCost(node.name, 0, 2 * node.out_shape[0], "pointwise"))
        elif node.op == "avgpool":
            kh, kw = node.attrs["kernel"]
            c, oh, ow = node.out_shape
            layers.append(LayerCost(node.name, c * oh * ow * kh * kw, 0, node.attrs["op_class"]))
    return CostReport(layers, name=getattr(g.spec, "name", ""))


@dataclass(frozen=True)
class GridRow:
    model: str
    resolution: int
    multiplier: float
    report: CostReport

    @property
    def label(self) -> str:
        return f"{self.model} {self.resolution}/{self.multiplier:g}"


def count_grid(base: NetworkSpec, multipliers: Sequence[float], resolutions: Sequence[int]) -> list:
    """Cost of ``base`` at every (multiplier, resolution) pair, multiplier-major."""
    rows = []
    for m in multipliers:
        scaled = apply_multiplier(base, m)
        for r in resolutions:
            spec = scaled if r == scaled.resolution else apply_resolution(scaled, r)
            rows.append(GridRow(base.name, r, m, count(spec)))
    return rows


def grid_to_csv(rows: Iterable[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "resolution", "multiplier", "madds", "params"])
    for row in rows:
        w.writerow([row.model, row.resolution, f"{row.multiplier:g}",
                    row.report.total_madds, row.report.total_params])
    return buf.getvalue()


def grid_to_table(rows: Iterable[GridRow]) -> str:
    lines = [f"{'model':<28} {'resolution':>10} {'multiplier':>10} {'madds':>12} {'params':>10}"]
    for row in rows:
        lines.append(f"{row.model:<28} {row.resolution:>10d} {row.multiplier:>10g} "
                     f"{row.report.total_madds:>12d} {row.report.total_params:>10d}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# latency

@dataclass(frozen=True)
class DeviceProfile:
    name: str
    coefficients: dict  # op class -> ms per GMAdd
    fixed_overhead_ms: float = 0.0
    residuals: tuple = ()

    def __post_init__(self):
        for k, v in self.coefficients.items():
            if k not in OP_CLASSES:
                raise ProfileError(f"unknown op class {k!r}")
            if v < 0 or not math.isfinite(v):
                raise ProfileError(f"coefficient for {k!r} must be finite and >= 0, got {v}")
        if self.fixed_overhead_ms < 0:
            raise ProfileError("fixed overhead must be >= 0")

    def scaled(self, factor: float) -> "DeviceProfile":
        return DeviceProfile(self.name, {k: v * factor for k, v in self.coefficients.items()},
                             self.fixed_overhead_ms)

    def dumps(self) -> str:
        lines = [f"name = {self.name}", f"overhead_ms = {self.fixed_overhead_ms!r}"]
        lines += [f"{k} = {v!r}" for k, v in self.coefficients.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DeviceProfile":
        name, overhead, coeffs = "device", 0.0, {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ProfileError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "name":
                name = value
                continue
            try:
                value = float(value)
            except ValueError:
                raise ProfileError(f"line {lineno}: {key} is not a number") from None
            if key == "overhead_ms":
                overhead = value
            else:
                coeffs[key] = value
        return cls(name, coeffs, overhead)

    @classmethod
    def load(cls, path) -> "DeviceProfile":
        with open(path, encoding="utf-8") as f:
            return cls.loads(f.read())


def estimate_latency(report: CostReport, profile: DeviceProfile) -> float:
    """Overhead plus per-class ms-per-GMAdd times each layer's GMAdds."""
    total = profile.fixed_overhead_ms
    for layer in report.per_layer:
        if layer.op_class not in profile.coefficients:
            raise ProfileError(f"profile {profile.name!r} has no coefficient for {layer.op_class!r}")
        total += profile.coefficients[layer.op_class] * layer.madds / 1e9
    return total


def calibrate_profile(pairs: Sequence[tuple], name: str = "calibrated",
                      classes: Optional[Sequence[str]] = None) -> DeviceProfile:
    """Non-negative least-squares fit of per-class coefficients plus overhead.

    ``pairs`` holds ``(CostReport, measured_ms)``. Classes absent from every
    report get a zero coefficient.
    """
    if len(pairs) < 2:
        raise ProfileError("calibration needs at least two (report, latency) pairs")
    classes = list(classes or OP_CLASSES)
    rows = []
    for report, _ in pairs:
        by = report.madds_by_class()
        rows.append([by.get(c, 0) / 1e9 for c in classes] + [1.0])
    a = np.array(rows, dtype=np.float64)
    b = np.array([ms for _, ms in pairs], dtype=np.float64)
    active = np.flatnonzero(np.abs(a).sum(axis=0) > 0)
    if np.linalg.matrix_rank(a[:, active]) < 2:
        raise ProfileError("degenerate calibration system: reports are not distinguishable")
    x, _ = nnls(a[:, active], b)
    coef = np.zeros(a.shape[1])
    coef[active] = x
    residuals = tuple(float(r) for r in a @ coef - b)
    coefficients = {c: float(v) for c, v in zip(classes, coef[:-1])}
    for c in OP_CLASSES:
        coefficients.setdefault(c, 0.0)
    return DeviceProfile(name, coefficients, float(coef[-1]), residuals)


def reference_pairs():
    """(CostReport, Pixel-1 ms) for every published V3 reference configuration."""
    from .reference import V3_REFERENCE
    from .spec import resolve_spec
    return [(count(resolve_spec(m, mult, r)), ms) for m, r, mult, _, _, ms in V3_REFERENCE]


def pixel1_profile() -> DeviceProfile:
    """Linear profile fitted to the published Pixel-1 float latencies."""
    return calibrate_profile(reference_pairs(), name="pixel1")


def resolve_profile(name_or_path) -> DeviceProfile:
    if name_or_path in (None, "pixel1"):
        return pixel1_profile()
    return DeviceProfile.load(name_or_path)
