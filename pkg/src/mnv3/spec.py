"""Declarative network specifications.

A :class:`NetworkSpec` is an ordered chain of :class:`LayerRow` values laid out
like the architecture tables (input size, operator, expansion width, output
width, SE, nonlinearity, stride). Every transformation returns a new spec.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

FORMAT_HEADER = "spec-version 1"
VALID_KERNELS = (1, 3, 5, 7)


class SpecError(ValueError):
    """Raised for invalid or inconsistent specifications."""


class SpecParseError(SpecError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Op(str, enum.Enum):
    CONV = "conv2d"
    BNECK = "bneck"
    POOL = "pool"
    CONV_NBN = "conv2d_nbn"


class NL(str, enum.Enum):
    RE = "RE"
    HS = "HS"
    NONE = "-"


@dataclass(frozen=True)
class LayerRow:
    input_resolution: int
    input_channels: int
    operator: Op
    kernel: int
    exp_size: Optional[int]
    out_channels: int
    se: bool = False
    nl: NL = NL.NONE
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "operator", Op(self.operator))
        object.__setattr__(self, "nl", NL(self.nl))
        for name in ("input_resolution", "input_channels", "out_channels", "kernel"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise SpecError(f"{name} must be a positive integer, got {v!r}")
        if self.stride not in (1, 2):
            raise SpecError(f"stride must be 1 or 2, got {self.stride}")
        if self.operator is Op.POOL:
            if self.kernel != self.input_resolution:
                raise SpecError(
                    f"pool kernel {self.kernel} must cover the {self.input_resolution}px map"
                )
            if self.out_channels != self.input_channels:
                raise SpecError("pool cannot change the channel count")
        elif self.kernel not in VALID_KERNELS:
            raise SpecError(f"kernel must be one of {VALID_KERNELS}, got {self.kernel}")
        if self.operator is Op.CONV_NBN and self.kernel != 1:
            raise SpecError("conv2d_nbn rows are 1x1")
        if self.operator is Op.BNECK:
            if self.exp_size is None or self.exp_size <= 0:
                raise SpecError("bneck rows need a positive exp_size")
            if self.se and self.exp_size < 8:
                raise SpecError("bneck rows with SE need exp_size >= 8")
        elif self.exp_size is not None:
            raise SpecError(f"exp_size is only valid on bneck rows, not {self.operator.value}")

    @property
    def output_resolution(self) -> int:
        if self.operator is Op.POOL:
            return 1
        return math.ceil(self.input_resolution / self.stride)

    @property
    def has_residual(self) -> bool:
        return (
            self.operator is Op.BNECK
            and self.stride == 1
            and self.input_channels == self.out_channels
        )

    @property
    def has_expansion(self) -> bool:
        # an expansion width equal to the input width means no 1x1 expand conv
        return self.operator is Op.BNECK and self.exp_size != self.input_channels


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    rows: tuple
    width_multiplier: float = 1.0
    resolution: int = 224
    num_classes: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if self.width_multiplier <= 0:
            raise SpecError("width_multiplier must be positive")
        self.validate()

    def validate(self) -> None:
        rows = self.rows
        if not rows:
            raise SpecError("spec has no rows")
        if rows[0].input_channels != 3:
            raise SpecError(f"first row must take 3 input channels, got {rows[0].input_channels}")
        if rows[0].input_resolution != self.resolution:
            raise SpecError(
                f"first row resolution {rows[0].input_resolution} != spec resolution {self.resolution}"
            )
        if rows[-1].out_channels != self.num_classes:
            raise SpecError(
                f"last row width {rows[-1].out_channels} != num_classes {self.num_classes}"
            )
        for i, (a, b) in enumerate(zip(rows, rows[1:]), start=1):
            if a.out_channels != b.input_channels:
                raise SpecError(
                    f"rows {i} and {i + 1}: out_channels {a.out_channels} "
                    f"!= next input_channels {b.input_channels}"
                )
            if a.output_resolution != b.input_resolution:
                raise SpecError(
                    f"rows {i} and {i + 1}: output resolution {a.output_resolution} "
                    f"!= next input_resolution {b.input_resolution}"
                )

    def bneck_indices(self) -> list:
        """Row indices of bottleneck rows, in order."""
        return [i for i, r in enumerate(self.rows) if r.operator is Op.BNECK]

    def pool_index(self) -> int:
        for i, r in enumerate(self.rows):
            if r.operator is Op.POOL:
                return i
        raise SpecError(f"spec {self.name!r} has no pool row")

    def residual_pattern(self) -> tuple:
        return tuple(r.has_residual for r in self.rows)


def round_channels(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """Round to the nearest multiple of ``divisor`` without dropping below 90% of ``value``."""
    if min_value is None:
        min_value = divisor
    new = max(min_value, int(value + divisor / 2) // divisor * divisor)
    if new < 0.9 * value:
        new += divisor
    return new


# ---------------------------------------------------------------------------
# built-in architectures

def spec_from_layers(name, resolution, num_classes, layers, width_multiplier=1.0) -> NetworkSpec:
    """Build a spec from (op, kernel, exp, out, se, nl, stride) tuples, deriving inputs."""
    rows = []
    res, ch = resolution, 3
    for op, k, exp, out, se, nl, s in layers:
        op = Op(op)
        if op is Op.POOL:
            k, out = res, ch
        row = LayerRow(res, ch, op, k, exp, out, se, NL(nl), s)
        rows.append(row)
        res, ch = row.output_resolution, row.out_channels
    return NetworkSpec(name, tuple(rows), width_multiplier, resolution, num_classes)


_rechain = spec_from_layers


_B, _C, _P, _N = "bneck", "conv2d", "pool", "conv2d_nbn"

V3_LARGE_LAYERS = [
    (_C, 3, None, 16, False, "HS", 2),
    (_B, 3, 16, 16, False, "RE", 1),
    (_B, 3, 64, 24, False, "RE", 2),
    (_B, 3, 72, 24, False, "RE", 1),
    (_B, 5, 72, 40, True, "RE", 2),
    (_B, 5, 120, 40, True, "RE", 1),
    (_B, 5, 120, 40, True, "RE", 1),
    (_B, 3, 240, 80, False, "HS", 2),
    (_B, 3, 200, 80, False, "HS", 1),
    (_B, 3, 184, 80, False, "HS", 1),
    (_B, 3, 184, 80, False, "HS", 1),
    (_B, 3, 480, 112, True, "HS", 1),
    (_B, 3, 672, 112, True, "HS", 1),
    (_B, 5, 672, 160, True, "HS", 2),
    (_B, 5, 960, 160, True, "HS", 1),
    (_B, 5, 960, 160, True, "HS", 1),
    (_C, 1, None, 960, False, "HS", 1),
    (_P, None, None, None, False, "-", 1),
    (_N, 1, None, 1280, False, "HS", 1),
    (_N, 1, None, "k", False, "-", 1),
]

# The 1x1 576 conv row carries an SE checkmark in the published table; it is kept
# for row fidelity but only bneck rows realize SE (see blocks.build_network).
V3_SMALL_LAYERS = [
    (_C, 3, None, 16, False, "HS", 2),
    (_B, 3, 16, 16, True, "RE", 2),
    (_B, 3, 72, 24, False, "RE", 2),
    (_B, 3, 88, 24, False, "RE", 1),
    (_B, 5, 96, 40, True, "HS", 2),
    (_B, 5, 240, 40, True, "HS", 1),
    (_B, 5, 240, 40, True, "HS", 1),
    (_B, 5, 120, 48, True, "HS", 1),
    (_B, 5, 144, 48, True, "HS", 1),
    (_B, 5, 288, 96, True, "HS", 2),
    (_B, 5, 576, 96, True, "HS", 1),
    (_B, 5, 576, 96, True, "HS", 1),
    (_C, 1, None, 576, True, "HS", 1),
    (_P, None, None, None, False, "-", 1),
    (_N, 1, None, 1024, False, "HS", 1),
    (_N, 1, None, "k", False, "-", 1),
]

# Last stage before the pooling move: an extra 960->320 bottleneck and a 1280-wide
# 1x1 conv evaluated at 7x7, followed directly by the classifier.
V3_LARGE_ORIGINAL_LAST_STAGE_LAYERS = V3_LARGE_LAYERS[:16] + [
    (_B, 3, 960, 320, False, "HS", 1),
    (_C, 1, None, 1280, False, "HS", 1),
    (_P, None, None, None, False, "-", 1),
    (_N, 1, None, "k", False, "-", 1),
]

# MobileNetV2 1.0: (t, c, n, s) settings expanded to rows, ReLU6 treated as RE.
_V2_SETTINGS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


def _v2_layers():
    layers = [(_C, 3, None, 32, False, "RE", 2)]
    ch = 32
    for t, c, n, s in _V2_SETTINGS:
        for i in range(n):
            layers.append((_B, 3, ch * t, c, False, "RE", s if i == 0 else 1))
            ch = c
    layers += [
        (_C, 1, None, 1280, False, "RE", 1),
        (_P, None, None, None, False, "-", 1),
        (_N, 1, None, "k", False, "-", 1),
    ]
    return layers


BUILTIN_LAYERS = {
    "V3Large": V3_LARGE_LAYERS,
    "V3Small": V3_SMALL_LAYERS,
    "V3LargeOriginalLastStage": V3_LARGE_ORIGINAL_LAST_STAGE_LAYERS,
    "V2Reference": None,
}

ALIASES = {
    "v3-large": "V3Large",
    "v3-small": "V3Small",
    "v3-large-original": "V3LargeOriginalLastStage",
    "v2": "V2Reference",
}


def builtin_spec(name: str, num_classes: int = 1000, resolution: int = 224) -> NetworkSpec:
    name = ALIASES.get(name, name)
    if name not in BUILTIN_LAYERS:
        raise SpecError(f"unknown built-in spec {name!r}; choose from {sorted(BUILTIN_LAYERS)}")
    layers = BUILTIN_LAYERS[name] if name != "V2Reference" else _v2_layers()
    layers = [tuple(num_classes if v == "k" else v for v in layer) for layer in layers]
    spec = _rechain(name, 224, num_classes, layers)
    return spec if resolution == 224 else apply_resolution(spec, resolution)


# ---------------------------------------------------------------------------
# transformations

def with_widths(spec: NetworkSpec, widths: Sequence[tuple], **meta) -> NetworkSpec:
    """Rebuild ``spec`` with new (exp_size, out_channels) per row, rechaining inputs.

    Pool rows ignore the given out width and pass channels through.
    """
    rows = []
    ch = 3
    for row, (exp, out) in zip(spec.rows, widths):
        if row.operator is Op.POOL:
            out = ch
        rows.append(replace(row, input_channels=ch, exp_size=exp, out_channels=out))
        ch = out
    num_classes = meta.pop("num_classes", rows[-1].out_channels)
    return replace(spec, rows=tuple(rows), num_classes=num_classes, **meta)


def _classifier_rows(spec: NetworkSpec) -> tuple:
    """Indices of (penultimate, final) 1x1 NBN rows after pooling."""
    nbn = [i for i, r in enumerate(spec.rows) if r.operator is Op.CONV_NBN]
    final = len(spec.rows) - 1
    penult = nbn[-2] if len(nbn) >= 2 else None
    return penult, final


# Models whose penultimate classifier width stays fixed even for alpha > 1.
FIXED_HEAD_ABOVE_ONE = frozenset({"V3Large", "V3LargeOriginalLastStage"})


def apply_multiplier(spec: NetworkSpec, alpha: float,
                     scale_head: Optional[bool] = None) -> NetworkSpec:
    """Scale channel widths by ``alpha``.

    Output widths become ``round_channels(c * alpha)``. Expansion widths keep
    their ratio to the (already scaled) block input. The class count never
    scales; the penultimate classifier width is fixed for ``alpha <= 1`` and for
    ``alpha > 1`` scales unless ``scale_head`` is False (default: per model).
    """
    if alpha <= 0:
        raise SpecError("width multiplier must be positive")
    if alpha == 1.0:
        return spec
    if scale_head is None:
        scale_head = spec.name not in FIXED_HEAD_ABOVE_ONE
    penult, final = _classifier_rows(spec)
    widths = []
    ch = 3
    for i, row in enumerate(spec.rows):
        exp = None
        if row.exp_size is not None:
            exp = round_channels(ch * row.exp_size / row.input_channels)
        if i == final or row.operator is Op.POOL:
            out = row.out_channels
        elif i == penult:
            out = round_channels(row.out_channels * alpha) if alpha > 1 and scale_head \
                else row.out_channels
        else:
            out = round_channels(row.out_channels * alpha)
        if row.operator is Op.POOL:
            out = ch
        widths.append((exp, out))
        ch = out
    return with_widths(spec, widths, width_multiplier=spec.width_multiplier * alpha)


def apply_resolution(spec: NetworkSpec, r: int) -> NetworkSpec:
    """Re-derive every input resolution for a square input of ``r`` pixels."""
    n_stride2 = sum(1 for row in spec.rows if row.stride == 2)
    step = 2 ** n_stride2
    if r <= 0 or r % step:
        raise SpecError(f"resolution {r} must be a positive multiple of {step}")
    rows = []
    res = r
    for row in spec.rows:
        kernel = res if row.operator is Op.POOL else row.kernel
        new = replace(row, input_resolution=res, kernel=kernel)
        rows.append(new)
        res = new.output_resolution
    return replace(spec, rows=tuple(rows), resolution=r)


def c4_bneck_number(spec: NetworkSpec) -> int:
    """1-based count (over bneck rows) of the block whose expansion layer is the C4 tap.

    C4 is the expansion of the last block that still runs at stride 16, i.e. the
    block performing the final stride-2 reduction.
    """
    bnecks = spec.bneck_indices()
    for n, idx in reversed(list(enumerate(bnecks, start=1))):
        if spec.rows[idx].stride == 2:
            return n
    raise SpecError(f"spec {spec.name!r} has no stride-2 bottleneck to anchor C4")


def halve_c4_c5_channels(spec: NetworkSpec) -> NetworkSpec:
    """Halve the widths of every layer after the C4 expansion up to the C5 map."""
    try:
        c4_row = spec.bneck_indices()[c4_bneck_number(spec) - 1]
        pool = spec.pool_index()
    except (SpecError, IndexError) as e:
        raise SpecError(f"cannot locate C4/C5 in {spec.name!r}: {e}") from None

    def half(c):
        return round_channels(c / 2)

    widths = []
    for i, row in enumerate(spec.rows):
        exp, out = row.exp_size, row.out_channels
        if i == c4_row:
            out = half(out)
        elif c4_row < i < pool:
            exp = half(exp) if exp is not None else None
            out = half(out)
        widths.append((exp, out))
    return with_widths(spec, widths)


def with_stem_filters(spec: NetworkSpec, filters: int) -> NetworkSpec:
    """Replace the width of the initial full convolution."""
    widths = [(r.exp_size, r.out_channels) for r in spec.rows]
    widths[0] = (None, filters)
    return with_widths(spec, widths)


def with_relu_only(spec: NetworkSpec) -> NetworkSpec:
    """Every h-swish row switched to ReLU."""
    rows = tuple(replace(r, nl=NL.RE) if r.nl is NL.HS else r for r in spec.rows)
    return replace(spec, rows=rows)


def with_hswish_from(spec: NetworkSpec, channels: int) -> NetworkSpec:
    """Keep h-swish only from the first row producing ``channels`` outputs onward.

    Earlier h-swish rows become ReLU; rows that use ReLU keep it.
    """
    start = next((i for i, r in enumerate(spec.rows) if r.out_channels == channels), None)
    if start is None:
        raise SpecError(f"no row of {spec.name!r} produces {channels} channels")
    rows = tuple(replace(r, nl=NL.RE) if (i < start and r.nl is NL.HS) else r
                 for i, r in enumerate(spec.rows))
    return replace(spec, rows=rows)


# ---------------------------------------------------------------------------
# text format

def _field(v) -> str:
    return "-" if v is None else str(v)


def serialize_spec(spec: NetworkSpec) -> str:
    lines = [
        FORMAT_HEADER,
        f"name {spec.name}",
        f"multiplier {spec.width_multiplier!r}",
        f"resolution {spec.resolution}",
        f"classes {spec.num_classes}",
        "# input_res input_ch operator kernel exp out se nl stride",
    ]
    for r in spec.rows:
        out = "-" if r.operator is Op.POOL else r.out_channels
        cols = [r.input_resolution, r.input_channels, r.operator.value, r.kernel,
                _field(r.exp_size), out, "SE" if r.se else "-", r.nl.value, r.stride]
        lines.append(" ".join(str(c) for c in cols))
    return "\n".join(lines) + "\n"


def _int(tok: str, what: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise SpecParseError(f"{what} must be an integer, got {tok!r}", line) from None


def parse_spec(text: str) -> NetworkSpec:
    meta = {}
    rows = []
    seen_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not seen_header:
            if line != FORMAT_HEADER:
                raise SpecParseError(f"expected {FORMAT_HEADER!r} header, got {line!r}", lineno)
            seen_header = True
            continue
        toks = line.split()
        if toks[0] in ("name", "multiplier", "resolution", "classes"):
            if len(toks) != 2:
                raise SpecParseError(f"{toks[0]} takes exactly one value", lineno)
            meta[toks[0]] = (toks[1], lineno)
            continue
        if len(toks) != 9:
            raise SpecParseError(f"expected 9 columns, got {len(toks)}", lineno)
        res, cin, op, k, exp, out, se, nl, stride = toks
        try:
            op = Op(op)
            nl = NL(nl)
        except ValueError as e:
            raise SpecParseError(str(e), lineno) from None
        if se not in ("SE", "-"):
            raise SpecParseError(f"se column must be 'SE' or '-', got {se!r}", lineno)
        cin_v = _int(cin, "input_ch", lineno)
        if out == "-" and op is Op.POOL:
            out_v = cin_v
        else:
            out_v = _int(out, "out", lineno)
        try:
            rows.append(LayerRow(
                _int(res, "input_res", lineno), cin_v, op, _int(k, "kernel", lineno),
                None if exp == "-" else _int(exp, "exp", lineno), out_v,
                se == "SE", nl, _int(stride, "stride", lineno),
            ))
        except SpecError as e:
            if isinstance(e, SpecParseError):
                raise
            raise SpecParseError(str(e), lineno) from None
    if not seen_header:
        raise SpecParseError("empty document", 1)
    if not rows:
        raise SpecParseError("no layer rows", len(text.splitlines()) or 1)
    name = meta.get("name", ("custom", 0))[0]
    try:
        mult = float(meta["multiplier"][0]) if "multiplier" in meta else 1.0
    except ValueError:
        raise SpecParseError("multiplier must be a number", meta["multiplier"][1]) from None
    resolution = (_int(meta["resolution"][0], "resolution", meta["resolution"][1])
                  if "resolution" in meta else rows[0].input_resolution)
    classes = (_int(meta["classes"][0], "classes", meta["classes"][1])
               if "classes" in meta else rows[-1].out_channels)
    return NetworkSpec(name, tuple(rows), mult, resolution, classes)


def load_spec(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as f:
        return parse_spec(f.read())


def resolve_spec(name_or_path: str, mult: float = 1.0, res: int = 224) -> NetworkSpec:
    """Built-in name/alias or a spec file path, then multiplier and resolution."""
    if name_or_path in BUILTIN_LAYERS or name_or_path in ALIASES:
        spec = builtin_spec(name_or_path)
    elif os.path.exists(name_or_path):
        spec = load_spec(name_or_path)
    else:
        raise SpecError(f"{name_or_path!r} is neither a built-in model "
                        f"({', '.join(sorted(ALIASES))}) nor a spec file")
    spec = apply_multiplier(spec, mult)
    if res != spec.resolution:
        spec = apply_resolution(spec, res)
    return spec
