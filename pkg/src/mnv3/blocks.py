"""Composite layers: conv-BN-act, inverted residual bottleneck, squeeze-and-excite
and the two classifier last-stage variants."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .graph import GraphBuilder
from .nonlinearity import Activation
from .spec import round_channels


class BlockError(ValueError):
    pass


def se_width(channels: int) -> int:
    """Squeeze width: a quarter of the expanded width, rounded to a multiple of 8."""
    return round_channels(channels / 4)


@dataclass(frozen=True)
class BneckConfig:
    in_ch: int
    exp_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    se: bool = False
    nl: Activation = Activation.RELU
    dilation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "nl", Activation(self.nl))
        if min(self.in_ch, self.exp_ch, self.out_ch) < 1:
            raise BlockError(f"channel counts must be positive: {self}")
        if self.kernel not in (3, 5):
            raise BlockError(f"bneck kernel must be 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise BlockError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise BlockError("dilation must be >= 1")

    @property
    def has_residual(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch

    @property
    def has_expansion(self) -> bool:
        return self.exp_ch != self.in_ch

    @property
    def se_squeeze(self) -> int:
        return se_width(self.exp_ch)


def conv_bn_act(b: GraphBuilder, name, x, out_ch, k=1, stride=1, act=Activation.IDENTITY,
                groups=1, dilation=1, op_class=None) -> str:
    y = b.conv(f"{name}.conv", x, out_ch, k, stride, dilation, groups, op_class=op_class)
    y = b.bn(f"{name}.bn", y)
    return b.act(f"{name}.act", y, act)


def build_se(b: GraphBuilder, name: str, x: str, squeeze: int) -> str:
    """Global pool -> 1x1 reduce + ReLU -> 1x1 expand + hard-sigmoid -> channel rescale."""
    if squeeze < 1:
        raise BlockError("SE squeeze width must be >= 1")
    channels = b.shape(x)[0]
    s = b.avgpool(f"{name}.pool", x, op_class="se")
    s = b.conv(f"{name}.reduce", s, squeeze, bias=True, op_class="se")
    s = b.act(f"{name}.reduce.act", s, Activation.RELU)
    s = b.conv(f"{name}.expand", s, channels, bias=True, op_class="se")
    s = b.act(f"{name}.gate", s, Activation.HARD_SIGMOID)
    return b.mul(f"{name}.scale", x, s)


def build_bneck(b: GraphBuilder, name: str, x: str, cfg: BneckConfig, use_se=None) -> str:
    """Expand (1x1) -> depthwise kxk -> [SE] -> linear 1x1 projection -> [+ input].

    The expansion conv is skipped when the expanded width equals the input width.
    Returns the block output; the expansion output is available as
    ``f"{name}.expand.act"`` when the block expands.
    """
    if b.shape(x)[0] != cfg.in_ch:
        raise BlockError(f"{name}: input has {b.shape(x)[0]} channels, cfg expects {cfg.in_ch}")
    y = x
    if cfg.has_expansion:
        y = conv_bn_act(b, f"{name}.expand", y, cfg.exp_ch, 1, act=cfg.nl)
    y = conv_bn_act(b, f"{name}.dw", y, cfg.exp_ch, cfg.kernel, cfg.stride, act=cfg.nl,
                    groups=cfg.exp_ch, dilation=cfg.dilation)
    if cfg.se if use_se is None else use_se:
        y = build_se(b, f"{name}.se", y, cfg.se_squeeze)
    y = conv_bn_act(b, f"{name}.project", y, cfg.out_ch, 1)
    if cfg.has_residual:
        y = b.add(f"{name}.residual", y, x)
    return y


class LastStage(str, enum.Enum):
    EFFICIENT = "efficient"
    ORIGINAL = "original"


def build_last_stage(b: GraphBuilder, name: str, x: str, kind, penult_ch: int, k: int,
                     exp_ch=None, proj_ch=None, act=Activation.HSWISH) -> str:
    """Classifier tail on a stride-32 feature map.

    Efficient: 1x1 expand + BN -> global pool -> 1x1 (no BN) to ``penult_ch`` ->
    1x1 (no BN) to ``k``. Original: one more bottleneck (depthwise + projection
    to ``proj_ch``) and the ``penult_ch`` conv, both at full map resolution,
    before pooling and the classifier.
    """
    kind = LastStage(kind)
    in_ch = b.shape(x)[0]
    exp_ch = exp_ch or 6 * in_ch
    if kind is LastStage.EFFICIENT:
        y = conv_bn_act(b, f"{name}.expand", x, exp_ch, 1, act=act)
        y = b.avgpool(f"{name}.pool", y)
        y = b.conv(f"{name}.penult", y, penult_ch, bias=True, op_class="fc")
        y = b.act(f"{name}.penult.act", y, act)
    else:
        proj_ch = proj_ch or 2 * in_ch
        y = build_bneck(b, f"{name}.bneck", x, BneckConfig(in_ch, exp_ch, proj_ch, 3, 1, False, act))
        y = conv_bn_act(b, f"{name}.penult", y, penult_ch, 1, act=act)
        y = b.avgpool(f"{name}.pool", y)
    return b.conv(f"{name}.classifier", y, k, bias=True, op_class="fc")
