"""Command-line entry point: ``python3 -m mnv3 <verb> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a validation or
runtime error. Data goes to stdout and diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from typing import List, Optional

import numpy as np

from . import cost as C
from . import model as M
from . import search as S
from . import segmentation as SEG
from .spec import SpecError, resolve_spec, with_hswish_from, with_relu_only

NL_VARIANTS = ("relu", "hswish@16", "hswish@112")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _rows_out(header, rows, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    cells = [list(map(str, header))] + [[str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in cells)


def make_input(source: str, shape) -> np.ndarray:
    """``zeros``, ``ones``, ``random:<seed>`` or ``file:<path>`` (a .npy array)."""
    if source == "zeros":
        return np.zeros(shape, np.float32)
    if source == "ones":
        return np.ones(shape, np.float32)
    if source.startswith("random:"):
        seed = int(source.split(":", 1)[1])
        return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    if source.startswith("file:"):
        x = np.load(source.split(":", 1)[1]).astype(np.float32)
        if x.ndim == 3:
            x = x[None]
        return x
    raise ValueError(f"unknown input source {source!r}")


# ---------------------------------------------------------------------------
# verbs

def cmd_summarize(a) -> str:
    report = C.count(resolve_spec(a.model, a.mult, a.res))
    if a.profile:
        report.est_latency_ms = C.estimate_latency(report, C.resolve_profile(a.profile))
    text = report.to_csv() if a.format == "csv" else report.to_table()
    if report.est_latency_ms is not None:
        text += (f"est_latency_ms,{report.est_latency_ms:.4f},\n" if a.format == "csv"
                 else f"estimated latency: {report.est_latency_ms:.4f} ms\n")
    return text


def cmd_grid(a) -> str:
    base = resolve_spec(a.model)
    rows = C.count_grid(base, a.mult, a.res)
    return C.grid_to_csv(rows) if a.format == "csv" else C.grid_to_table(rows)


def cmd_infer(a) -> str:
    spec = resolve_spec(a.model, a.mult, a.res)
    g = M.build(spec)
    g = M.load_weights(g, a.weights) if a.weights else M.init_weights(g, a.seed)
    x = make_input(a.input, (1, 3, spec.resolution, spec.resolution))
    probs = M.softmax(M.forward(g, x))[0]
    order = np.argsort(-probs, kind="stable")[: a.topk]
    rows = [(int(i), f"{probs[i]:.8f}") for i in order]
    return _rows_out(("class", "probability"), rows, a.format)


def cmd_init_weights(a) -> str:
    g = M.init_weights(M.build(resolve_spec(a.model, a.mult, a.res)), a.seed)
    M.save_weights(g, a.out)
    return _rows_out(("file", "tensors", "parameters"),
                     [(a.out, len(g.param_shapes), g.num_parameters())], a.format)


def cmd_search(a) -> str:
    seed = resolve_spec(a.model, a.mult, a.res)
    latency_fn = S.profile_latency_fn(C.resolve_profile(a.profile))
    if a.oracle != "synthetic":
        raise ValueError(f"unknown oracle {a.oracle!r}")
    cfg = S.SearchConfig(a.target_ms, a.delta_fraction, a.budget, a.granularity,
                         threads=S.default_threads())
    result = S.netadapt_run(seed, S.CapacityOracle(budget=a.budget), latency_fn, cfg)
    if a.out_spec:
        from .spec import serialize_spec
        with open(a.out_spec, "w", encoding="utf-8") as f:
            f.write(serialize_spec(result.spec))
    if not result.reached:
        print(f"warning: stopped at {result.state.latency:.4f} ms without reaching "
              f"{a.target_ms} ms", file=sys.stderr)
    if a.format == "csv":
        return S.trajectory_to_csv(result.trajectory)
    return S.trajectory_to_table(result.trajectory)


def _nl_variant(spec, variant: str):
    if variant == "relu":
        return with_relu_only(spec)
    if variant.startswith("hswish@"):
        return with_hswish_from(spec, int(variant.split("@", 1)[1]))
    raise ValueError(f"unknown variant {variant!r}; choose from {NL_VARIANTS}")


def cmd_compare_nl(a) -> str:
    base = resolve_spec(a.model, a.mult, a.res)
    variants = a.variant or list(NL_VARIANTS)
    ref = C.count(base).total_madds
    rows = []
    for v in variants:
        spec = _nl_variant(base, v)
        report = C.count(spec)
        acts = M.activation_elements(M.build(spec))
        rows.append((v, report.total_madds, report.total_madds - ref, report.total_params,
                     acts.get("hswish", 0), acts.get("relu", 0)))
    header = ("variant", "madds", "madds_delta", "params", "hswish_elements", "relu_elements")
    return _rows_out(header, rows, a.format)


def cmd_seg_summary(a) -> str:
    spec = resolve_spec(a.model)
    cfg = SEG.SegHeadConfig(head=a.head, filters=a.filters, num_classes=a.classes,
                            output_stride=a.os, reduce_last_block=a.rf2)
    report = SEG.cost(spec, cfg, (a.height, a.width))
    rows = [(spec.name, cfg.head.value, cfg.filters, cfg.output_stride, int(cfg.reduce_last_block),
             f"{a.height}x{a.width}", report.total_madds, report.total_params)]
    header = ("model", "head", "filters", "os", "rf2", "input", "madds", "params")
    return _rows_out(header, rows, a.format)


# ---------------------------------------------------------------------------
# parser

def _common(p, res=True, mult=True):
    p.add_argument("--model", default="v3-large", help="built-in name or spec file path")
    if res:
        p.add_argument("--res", type=int, default=224)
    if mult:
        p.add_argument("--mult", type=float, default=1.0)
    p.add_argument("--format", choices=("table", "csv"), default="table")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mnv3", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("summarize", help="per-layer MAdds and parameters")
    _common(p)
    p.add_argument("--profile", help="'pixel1' or a profile file; adds estimated latency")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("grid", help="cost over multipliers x resolutions")
    _common(p, res=False, mult=False)
    p.add_argument("--mult", type=_floats, default=[1.0])
    p.add_argument("--res", type=_ints, default=[224])
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("infer", help="forward pass on a synthetic input")
    _common(p)
    p.add_argument("--weights", help="MNF1 weights file (default: random init from --seed)")
    p.add_argument("--input", default="zeros")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("init-weights", help="write randomly initialized weights")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("search", help="latency-targeted layer-wise shrinking")
    _common(p)
    p.add_argument("--target-ms", type=float, required=True)
    p.add_argument("--profile", default="pixel1")
    p.add_argument("--oracle", default="synthetic", choices=("synthetic",))
    p.add_argument("--seed", type=int, default=0, help="accepted for reproducibility; "
                   "the synthetic oracle is deterministic")
    p.add_argument("--delta-fraction", type=float, default=0.01)
    p.add_argument("--budget", type=int, default=10000)
    p.add_argument("--granularity", type=int, default=8)
    p.add_argument("--out-spec", help="write the final spec here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("compare-nl", help="cost and activation counts of nonlinearity variants")
    _common(p)
    p.add_argument("--variant", action="append", help=f"one of {', '.join(NL_VARIANTS)}; repeatable")
    p.set_defaults(func=cmd_compare_nl)

    p = sub.add_parser("seg-summary", help="segmentation model cost")
    _common(p, res=False, mult=False)
    p.add_argument("--head", choices=("lraspp", "raspp"), default="lraspp")
    p.add_argument("--filters", type=int, default=128)
    p.add_argument("--os", type=int, choices=(16, 32), default=16)
    p.add_argument("--rf2", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--classes", type=int, default=19)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--width", type=int, default=2048)
    p.set_defaults(func=cmd_seg_summary)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    try:
        sys.stdout.write(args.func(args))
    except (SpecError, ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
