"""Segmentation heads (LR-ASPP and R-ASPP) over a classification backbone.

The backbone is the spec truncated before its global pool. With output stride
16 the last stride-2 bottleneck runs at stride 1 and every later block uses
dilation 2, so the final feature map stays at 1/16 of the input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .blocks import conv_bn_act
from .cost import CostReport, count_graph
from .graph import Graph, GraphBuilder, run
from .model import c4_row, compile_row
from .nonlinearity import Activation
from .spec import NetworkSpec, Op, SpecError, halve_c4_c5_channels

CITYSCAPES_HW = (1024, 2048)


class SegConfigError(ValueError):
    pass


class Head(str, enum.Enum):
    LRASPP = "lraspp"
    RASPP = "raspp"


@dataclass(frozen=True)
class SegHeadConfig:
    head: Head = Head.LRASPP
    filters: int = 128
    num_classes: int = 19
    output_stride: int = 16
    reduce_last_block: bool = True
    pool_kernel: Tuple[int, int] = (49, 49)
    pool_stride: Tuple[int, int] = (16, 20)
    gate: Activation = Activation.HARD_SIGMOID
    low_level_stride: int = 8
    # None: drop the wide 1x1 conv before the pool only for V2-style backbones
    drop_final_conv: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "head", Head(self.head))
        object.__setattr__(self, "gate", Activation(self.gate))
        if self.output_stride not in (16, 32):
            raise SegConfigError(f"output_stride must be 16 or 32, got {self.output_stride}")
        if self.filters < 1 or self.num_classes < 1:
            raise SegConfigError("filters and num_classes must be positive")
        if min(self.pool_kernel + self.pool_stride) < 1:
            raise SegConfigError("pool kernel and stride must be positive")


def _backbone_rows(spec: NetworkSpec, cfg: SegHeadConfig) -> Tuple[NetworkSpec, int]:
    """Spec to use and the number of leading rows that form the backbone."""
    if cfg.reduce_last_block:
        spec = halve_c4_c5_channels(spec)
    try:
        end = spec.pool_index()
    except (SpecError, IndexError):
        raise SegConfigError(f"spec {spec.name!r} has no global pool to cut at") from None
    drop = cfg.drop_final_conv
    if drop is None:
        drop = spec.name.startswith("V2")
    if drop and end > 0 and spec.rows[end - 1].operator is Op.CONV:
        end -= 1
    return spec, end


def _add_backbone(b: GraphBuilder, spec: NetworkSpec, cfg: SegHeadConfig):
    spec, end = _backbone_rows(spec, cfg)
    c4 = c4_row(spec)
    if c4 is None:
        raise SegConfigError(f"spec {spec.name!r} has no stride-2 bottleneck")
    x, stride, low = "input", 1, None
    outputs = []
    for i in range(end):
        row = spec.rows[i]
        s, d = row.stride, 1
        if cfg.output_stride == 16 and i >= c4:
            s = 1
            d = 2 if i > c4 else 1
        x = compile_row(b, spec, i, x, stride=s, dilation=d)
        outputs.append(x)
        stride *= s
        if stride == cfg.low_level_stride:
            low = x
    if low is None:
        raise SegConfigError(f"backbone never reaches stride {cfg.low_level_stride}")
    return spec, low, x, tuple(outputs)


def _check_input(hw):
    h, w = hw
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise SegConfigError(f"input size {h}x{w} must be a positive multiple of 32")


def build_backbone_for_segmentation(spec: NetworkSpec, cfg: SegHeadConfig,
                                    input_hw=CITYSCAPES_HW) -> Graph:
    _check_input(input_hw)
    b = GraphBuilder(3, *input_hw)
    used, low, high, outputs = _add_backbone(b, spec, cfg)
    b.tap("low_level", low)
    b.tap("high_level", high)
    return b.finish(high, spec=used, row_outputs=outputs, cfg=cfg)


def build_lraspp(b: GraphBuilder, cfg: SegHeadConfig, low: str, high: str,
                 out_hw: Tuple[int, int]) -> str:
    """Gated 1x1 branch on the high-level map plus a 1x1 skip from the low-level map."""
    _, h, w = b.shape(high)
    _, lh, lw = b.shape(low)
    a = conv_bn_act(b, "head.branch", high, cfg.filters, 1, act=Activation.RELU)
    kh, kw = min(cfg.pool_kernel[0], h), min(cfg.pool_kernel[1], w)
    g = b.avgpool("head.pool", high, (kh, kw), cfg.pool_stride, op_class="pool")
    g = b.conv("head.gate.conv", g, cfg.filters, bias=True)
    g = b.act("head.gate", g, cfg.gate)
    g = b.upsample("head.gate.up", g, h, w)
    y = b.mul("head.mix", a, g)
    y = b.conv("head.classifier", y, cfg.num_classes, bias=True)
    y = b.upsample("head.up", y, lh, lw)
    s = b.conv("head.skip", low, cfg.num_classes, bias=True)
    y = b.add("head.fuse", y, s)
    return b.upsample("head.out", y, *out_hw)


def build_raspp(b: GraphBuilder, cfg: SegHeadConfig, high: str,
                out_hw: Tuple[int, int]) -> str:
    """Two branches, 1x1 conv and image pooling, concatenated and projected."""
    _, h, w = b.shape(high)
    a = conv_bn_act(b, "head.branch", high, cfg.filters, 1, act=Activation.RELU)
    p = b.avgpool("head.pool", high)
    p = conv_bn_act(b, "head.image", p, cfg.filters, 1, act=Activation.RELU)
    p = b.upsample("head.image.up", p, h, w)
    y = b.concat("head.cat", [a, p])
    y = conv_bn_act(b, "head.project", y, cfg.filters, 1, act=Activation.RELU)
    y = b.conv("head.classifier", y, cfg.num_classes, bias=True)
    return b.upsample("head.out", y, *out_hw)


def build_segmentation(spec: NetworkSpec, cfg: SegHeadConfig = SegHeadConfig(),
                       input_hw=CITYSCAPES_HW) -> Graph:
    """Backbone plus head; the output is per-pixel logits at input resolution."""
    _check_input(input_hw)
    b = GraphBuilder(3, *input_hw)
    used, low, high, outputs = _add_backbone(b, spec, cfg)
    b.tap("low_level", low)
    b.tap("high_level", high)
    if cfg.head is Head.LRASPP:
        out = build_lraspp(b, cfg, low, high, tuple(input_hw))
    else:
        out = build_raspp(b, cfg, high, tuple(input_hw))
    return b.finish(out, spec=used, row_outputs=outputs, cfg=cfg)


def forward(g: Graph, x, piecewise_hswish: bool = True) -> np.ndarray:
    return run(g, x, piecewise_hswish=piecewise_hswish)[g.output]


def cost(spec: NetworkSpec, cfg: SegHeadConfig = SegHeadConfig(),
         input_hw=CITYSCAPES_HW) -> CostReport:
    report = count_graph(build_segmentation(spec, cfg, input_hw))
    report.name = f"{spec.name}+{cfg.head.value}"
    return report
