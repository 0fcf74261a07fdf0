"""NetAdapt-style layer-wise shrinking and the MnasNet multi-objective reward.

Each step proposes, for every site, the smallest channel reduction that cuts at
least ``delta`` ms of latency. A site is either the expansion layer of one
bottleneck, or a group of blocks joined by residual connections (which must
shrink together to keep the additions well formed). The proposal with the best
``accuracy change / |latency change|`` is committed.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

from .cost import DeviceProfile, count, estimate_latency
from .spec import NetworkSpec, Op, with_widths

EXPANSION = "expansion"
GROUP = "group"
_KIND_ORDER = {EXPANSION: 0, GROUP: 1}

TRAJECTORY_FIELDS = ("step", "proposal_kind", "site", "new_width", "latency_ms", "acc", "ratio")


class NoProposals(RuntimeError):
    """No site can shrink by at least delta."""


def mnas_reward(acc: float, lat: float, tar: float, w: float) -> float:
    """``acc * (lat / tar) ** w``."""
    if not (lat > 0 and tar > 0):
        raise ValueError(f"latency and target must be positive, got lat={lat}, tar={tar}")
    return acc * (lat / tar) ** w


@dataclass(frozen=True)
class SearchConfig:
    target_latency: float
    delta_fraction: float = 0.01
    oracle_budget: int = 10000
    granularity: int = 8
    threads: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.delta_fraction < 1:
            raise ValueError("delta_fraction must lie in (0, 1)")
        if self.granularity < 1 or self.granularity % 8:
            raise ValueError("granularity must be a positive multiple of 8")
        if self.oracle_budget < 1:
            raise ValueError("oracle_budget must be positive")


@dataclass(frozen=True)
class Proposal:
    kind: str
    site: int  # row index of the expanded block, or of the group's first row
    new_width: int
    spec: NetworkSpec = field(repr=False)
    latency: float
    latency_delta: float  # negative


@dataclass(frozen=True)
class TrajectoryStep:
    step: int
    proposal_kind: str
    site: int
    new_width: int
    latency_ms: float
    acc: float
    ratio: float


@dataclass(frozen=True)
class SearchState:
    spec: NetworkSpec
    latency: float
    acc: float
    delta: float
    trajectory: Tuple[TrajectoryStep, ...] = ()
    oracle_calls: int = 0

    @property
    def step_index(self) -> int:
        return len(self.trajectory)


@dataclass(frozen=True)
class SearchResult:
    spec: NetworkSpec
    trajectory: Tuple[TrajectoryStep, ...]
    reached: bool
    state: SearchState
    specs: Tuple[NetworkSpec, ...] = ()  # seed followed by every committed spec


# ---------------------------------------------------------------------------
# sites and proposals

def _is_residual(row) -> bool:
    return row.operator is Op.BNECK and row.stride == 1 and row.input_channels == row.out_channels


def expansion_sites(spec: NetworkSpec) -> List[int]:
    return [i for i in spec.bneck_indices() if spec.rows[i].has_expansion]


def bottleneck_groups(spec: NetworkSpec) -> List[Tuple[int, ...]]:
    """Runs of rows sharing one bottleneck width through residual connections.

    A group starts at a full conv or a non-residual bottleneck and absorbs the
    residual bottlenecks that follow it. Convs after the last bottleneck are
    classifier layers, not bottlenecks, and are left alone.
    """
    bnecks = spec.bneck_indices()
    if not bnecks:
        return []
    groups = []
    for i, row in enumerate(spec.rows[: bnecks[-1] + 1]):
        if _is_residual(row) and groups:
            groups[-1].append(i)
        elif row.operator in (Op.CONV, Op.BNECK):
            groups.append([i])
    return [tuple(g) for g in groups]


def _structure(spec: NetworkSpec):
    return spec.residual_pattern(), tuple(r.has_expansion for r in spec.rows)


def _shrunk(spec: NetworkSpec, kind: str, site, width: int) -> NetworkSpec:
    widths = [(r.exp_size, r.out_channels) for r in spec.rows]
    if kind == EXPANSION:
        widths[site] = (width, widths[site][1])
    else:
        for i in site:
            widths[i] = (widths[i][0], width)
    return with_widths(spec, widths)


def _site_proposal(spec, base_latency, kind, site, current, latency_fn, delta, granularity):
    index = site if kind == EXPANSION else site[0]
    shape = _structure(spec)
    width = (current - 1) // granularity * granularity
    while width >= granularity:
        candidate = _shrunk(spec, kind, site, width)
        if _structure(candidate) == shape:
            lat = latency_fn(candidate)
            if base_latency - lat >= delta:
                return Proposal(kind, index, width, candidate, lat, lat - base_latency)
        width -= granularity
    return None


def generate_proposals(spec: NetworkSpec, latency_fn: Callable, delta: float,
                       granularity: int = 8, base_latency: Optional[float] = None) -> List[Proposal]:
    """One proposal per site: the smallest shrink removing at least ``delta`` ms."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    base = latency_fn(spec) if base_latency is None else base_latency
    out = []
    for i in expansion_sites(spec):
        p = _site_proposal(spec, base, EXPANSION, i, spec.rows[i].exp_size, latency_fn,
                           delta, granularity)
        if p is not None:
            out.append(p)
    for group in bottleneck_groups(spec):
        p = _site_proposal(spec, base, GROUP, group, spec.rows[group[0]].out_channels,
                           latency_fn, delta, granularity)
        if p is not None:
            out.append(p)
    return sorted(out, key=lambda p: (p.site, _KIND_ORDER[p.kind]))


RATIO_DIGITS = 10


def tie_ratio(ratio: float) -> float:
    """Ratio rounded to ``RATIO_DIGITS`` significant digits.

    Mathematically equal ratios often differ in the last bits depending on
    summation order; rounding lets the deterministic tie-break decide them.
    """
    return float(f"{ratio:.{RATIO_DIGITS}g}")


def _selection_key(ratio: float, p: Proposal):
    # max over: ratio, then latency reduction, then lowest site, then kind order
    return (tie_ratio(ratio), tie_ratio(-p.latency_delta), -p.site, -_KIND_ORDER[p.kind])


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MNF_THREADS", "1")))
    except ValueError:
        return 1


def netadapt_step(state: SearchState, oracle: Callable, latency_fn: Callable,
                  cfg: SearchConfig) -> SearchState:
    proposals = generate_proposals(state.spec, latency_fn, state.delta, cfg.granularity,
                                   base_latency=state.latency)
    if not proposals:
        raise NoProposals(f"no site can remove {state.delta:.4g} ms from {state.latency:.4g} ms")
    threads = cfg.threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(lambda p: oracle(p.spec), proposals))
    else:
        accs = [oracle(p.spec) for p in proposals]
    ratios = [(a - state.acc) / abs(p.latency_delta) for a, p in zip(accs, proposals)]
    best = max(range(len(proposals)), key=lambda i: _selection_key(ratios[i], proposals[i]))
    p = proposals[best]
    record = TrajectoryStep(state.step_index + 1, p.kind, p.site, p.new_width, p.latency,
                            accs[best], ratios[best])
    return replace(state, spec=p.spec, latency=p.latency, acc=accs[best],
                   trajectory=state.trajectory + (record,),
                   oracle_calls=state.oracle_calls + len(proposals))


def netadapt_run(seed: NetworkSpec, oracle: Callable, latency_fn: Callable,
                 cfg: SearchConfig) -> SearchResult:
    """Shrink ``seed`` greedily until its latency reaches ``cfg.target_latency``.

    ``reached`` is False when the search ran out of proposals or oracle budget first.
    """
    lat = latency_fn(seed)
    state = SearchState(seed, lat, oracle(seed), cfg.delta_fraction * lat, oracle_calls=1)
    history = [seed]
    while state.latency > cfg.target_latency:
        if state.oracle_calls >= cfg.oracle_budget:
            break
        try:
            state = netadapt_step(state, oracle, latency_fn, cfg)
        except NoProposals:
            break
        history.append(state.spec)
    return SearchResult(state.spec, state.trajectory, state.latency <= cfg.target_latency,
                        state, tuple(history))


# ---------------------------------------------------------------------------
# oracles and latency functions

@dataclass(frozen=True)
class CapacityOracle:
    """Synthetic accuracy proxy: ``sum(log(1 + width)) / z`` over every layer width.

    Monotone and concave in each width, so it ranks shrinks like a
    diminishing-returns accuracy curve. ``budget`` is accepted for interface
    parity and ignored.
    """

    z: float = 100.0
    budget: int = 10000

    def __call__(self, spec: NetworkSpec) -> float:
        total = 0.0
        for row in spec.rows:
            if row.operator is Op.POOL:
                continue
            total += math.log1p(row.out_channels)
            if row.exp_size is not None and row.has_expansion:
                total += math.log1p(row.exp_size)
        return total / self.z


def profile_latency_fn(profile: DeviceProfile) -> Callable[[NetworkSpec], float]:
    def latency(spec: NetworkSpec) -> float:
        return estimate_latency(count(spec), profile)
    return latency


def trajectory_to_csv(trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_FIELDS)
    for s in trajectory:
        w.writerow([s.step, s.proposal_kind, s.site, s.new_width, f"{s.latency_ms:.6f}",
                    f"{s.acc:.8f}", f"{s.ratio:.8g}"])
    return buf.getvalue()


def trajectory_to_table(trajectory) -> str:
    lines = [f"{'step':>4} {'kind':<10} {'site':>4} {'width':>6} {'latency_ms':>11} "
             f"{'acc':>11} {'ratio':>12}"]
    for s in trajectory:
        lines.append(f"{s.step:>4} {s.proposal_kind:<10} {s.site:>4} {s.new_width:>6} "
                     f"{s.latency_ms:>11.6f} {s.acc:>11.8f} {s.ratio:>12.8g}")
    return "\n".join(lines) + "\n"
