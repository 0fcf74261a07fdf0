"""Compile a :class:`NetworkSpec` into an executable graph, run it, and persist weights.

Weights file layout (little-endian)::

    b"MNF1"
    repeated: u32 name_len | name (utf-8) | u8 rank | u32 dims[rank] | f32 data
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from typing import Dict, Optional

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .blocks import BneckConfig, build_bneck, conv_bn_act
from .graph import Graph, GraphBuilder, GraphError, run
from .nonlinearity import Activation, from_nl
from .spec import NetworkSpec, Op, SpecError, c4_bneck_number

MAGIC = b"MNF1"


class WeightsFormatError(ValueError):
    pass


def row_name(index: int) -> str:
    return f"l{index:02d}"


def compile_row(b: GraphBuilder, spec: NetworkSpec, index: int, x: str, stride=None,
                dilation: int = 1) -> str:
    """Append row ``index`` of ``spec`` to the builder; returns the row output node."""
    row = spec.rows[index]
    name = row_name(index)
    stride = row.stride if stride is None else stride
    act = from_nl(row.nl)
    if row.operator is Op.CONV:
        return conv_bn_act(b, name, x, row.out_channels, row.kernel, stride, act,
                           dilation=dilation)
    if row.operator is Op.BNECK:
        cfg = BneckConfig(row.input_channels, row.exp_size, row.out_channels, row.kernel,
                          stride, row.se, act, dilation)
        return build_bneck(b, name, x, cfg)
    if row.operator is Op.POOL:
        return b.avgpool(f"{name}.pool", x)
    y = b.conv(f"{name}.conv", x, row.out_channels, 1, bias=True, op_class="fc")
    return b.act(f"{name}.act", y, act)


def c4_row(spec: NetworkSpec) -> Optional[int]:
    """Row index of the bottleneck whose expansion output is the C4 feature."""
    try:
        return spec.bneck_indices()[c4_bneck_number(spec) - 1]
    except SpecError:
        return None


def build(spec: NetworkSpec) -> Graph:
    """Executable graph for ``spec`` at its declared resolution."""
    spec.validate()
    res = spec.resolution
    b = GraphBuilder(3, res, res)
    x = "input"
    row_outputs = []
    for i in range(len(spec.rows)):
        x = compile_row(b, spec, i, x)
        row_outputs.append(x)
    c4 = c4_row(spec)
    if c4 is not None and spec.rows[c4].has_expansion:
        b.tap("C4", f"{row_name(c4)}.expand.act")
    pools = [i for i, r in enumerate(spec.rows) if r.operator is Op.POOL]
    if pools and pools[0] > 0:
        b.tap("C5", row_outputs[pools[0] - 1])
    return b.finish(x, spec=spec, row_outputs=tuple(row_outputs))


def shape_trace(g: Graph) -> list:
    """Output shape (c, h, w) of every spec row, in order."""
    return [g.node(n).out_shape for n in g.meta["row_outputs"]]


def activation_elements(g: Graph) -> dict:
    """Per-image element count passed through each activation kind."""
    out = {}
    for node in g.nodes:
        if node.op == "act":
            c, h, w = node.out_shape
            key = node.attrs["kind"].value
            out[key] = out.get(key, 0) + c * h * w
    return out


def _sample_conv(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    w = truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) * std
    return w.astype(T.DTYPE)


def init_weights(g: Graph, seed: int = 0) -> Graph:
    """He-scaled truncated-normal conv weights, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in g.param_shapes.items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            weights[name] = _sample_conv(rng, shape)
        elif kind in ("scale", "var"):
            weights[name] = np.ones(shape, T.DTYPE)
        else:
            weights[name] = np.zeros(shape, T.DTYPE)
    return g.with_weights(weights)


def zero_weights(g: Graph) -> Graph:
    weights = {}
    for name, shape in g.param_shapes.items():
        fill = 1.0 if name.endswith(".var") else 0.0
        weights[name] = np.full(shape, fill, T.DTYPE)
    return g.with_weights(weights)


def forward(g: Graph, x, piecewise_hswish: bool = True) -> np.ndarray:
    """Logits of shape (batch, classes)."""
    out = run(g, x, piecewise_hswish=piecewise_hswish)[g.output]
    return out.reshape(out.shape[0], -1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def tap_features(g: Graph, x) -> Dict[str, np.ndarray]:
    if not g.taps:
        raise GraphError("graph has no registered feature taps")
    values = run(g, x, outputs=list(g.taps.values()))
    return {label: values[node] for label, node in g.taps.items()}


# ---------------------------------------------------------------------------
# weights I/O

def serialize_weights(g: Graph) -> bytes:
    if not g.weights:
        raise GraphError("graph has no weights to save")
    parts = [MAGIC]
    for name in g.param_shapes:
        arr = np.ascontiguousarray(g.weights[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def parse_weights(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < len(MAGIC) + 4:
        raise WeightsFormatError("file too short")
    if data[:4] != MAGIC:
        raise WeightsFormatError(f"bad magic/version {data[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise WeightsFormatError("CRC mismatch (truncated or corrupted file)")
    out = {}
    pos = 4
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(body):
                raise WeightsFormatError(f"tensor {name!r} runs past end of file")
            out[name] = np.frombuffer(body, "<f4", count, pos).reshape(dims).astype(T.DTYPE)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as e:
        raise WeightsFormatError(f"malformed record: {e}") from None
    return out


def save_weights(g: Graph, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_weights(g))


def load_weights(g: Graph, path) -> Graph:
    """Return a copy of ``g`` carrying the weights stored at ``path``."""
    with open(path, "rb") as f:
        weights = parse_weights(f.read())
    missing = [k for k in g.param_shapes if k not in weights]
    extra = [k for k in weights if k not in g.param_shapes]
    if missing or extra:
        raise WeightsFormatError(
            f"tensor-name mismatch: {len(missing)} missing (e.g. {missing[:3]}), "
            f"{len(extra)} unexpected (e.g. {extra[:3]})"
        )
    for k, shape in g.param_shapes.items():
        if weights[k].shape != tuple(shape):
            raise WeightsFormatError(f"{k}: stored shape {weights[k].shape} != {shape}")
    return g.with_weights(weights)
