"""Activation functions, including the hard (ReLU6-based) sigmoid and swish."""

from __future__ import annotations

import enum

import numpy as np

from .spec import NL


class Activation(str, enum.Enum):
    RELU = "relu"
    RELU6 = "relu6"
    SIGMOID = "sigmoid"
    HARD_SIGMOID = "hard_sigmoid"
    SWISH = "swish"
    HSWISH = "hswish"
    IDENTITY = "identity"


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu6(x):
    return np.clip(x, 0, 6).astype(x.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def hard_sigmoid(x):
    return relu6(x + 3) / 6


def swish(x):
    return x * sigmoid(x)


def hswish(x):
    """x * ReLU6(x + 3) / 6, evaluated literally."""
    return x * relu6(x + 3) / 6


def hswish_piecewise(x):
    """Three-branch h-swish: 0 below -3, identity above 3, x(x+3)/6 between."""
    x = np.asarray(x)
    return np.where(x <= -3, 0, np.where(x >= 3, x, x * (x + 3) / 6)).astype(x.dtype, copy=False)


_NAIVE = {
    Activation.RELU: relu,
    Activation.RELU6: relu6,
    Activation.SIGMOID: sigmoid,
    Activation.HARD_SIGMOID: hard_sigmoid,
    Activation.SWISH: swish,
    Activation.HSWISH: hswish,
    Activation.IDENTITY: lambda x: x,
}


def apply(kind, x, piecewise: bool = True):
    """Apply activation ``kind`` element-wise; h-swish uses the piecewise form by default."""
    kind = Activation(kind)
    if kind is Activation.HSWISH and piecewise:
        return hswish_piecewise(x)
    return _NAIVE[kind](x)


def from_nl(nl) -> Activation:
    """Map a table NL column value to an activation."""
    return {NL.RE: Activation.RELU, NL.HS: Activation.HSWISH,
            NL.NONE: Activation.IDENTITY}[NL(nl)]
