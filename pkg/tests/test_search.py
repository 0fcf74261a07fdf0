import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mnv3.cost import DeviceProfile, OP_CLASSES
from mnv3.model import build
from mnv3.search import (
    CapacityOracle,
    NoProposals,
    SearchConfig,
    SearchState,
    bottleneck_groups,
    generate_proposals,
    mnas_reward,
    netadapt_run,
    netadapt_step,
    profile_latency_fn,
    trajectory_to_csv,
)
from mnv3.spec import builtin_spec, spec_from_layers

from conftest import random_spec

TAIL = [("conv2d", 1, None, 32, False, "HS", 1), ("pool", None, None, None, False, "-", 1),
        ("conv2d_nbn", 1, None, 10, False, "-", 1)]


def toy(blocks, stem=16):
    return spec_from_layers("toy", 32, 10, [("conv2d", 3, None, stem, False, "HS", 2)] + blocks + TAIL)


def width_latency(spec):
    """Linear in every width before the pool."""
    total = 0.0
    for row in spec.rows:
        if row.operator.value == "pool":
            break
        total += row.out_channels + (row.exp_size or 0)
    return total


# -- reward ------------------------------------------------------------------

def reward_reference(acc, lat, tar, w):
    getcontext().prec = 50
    return Decimal(acc) * (Decimal(lat) / Decimal(tar)) ** Decimal(w)


def test_reward_examples():
    assert mnas_reward(0.75, 80, 80, -0.07) == 0.75
    assert mnas_reward(0.75, 100, 80, -0.07) == pytest.approx(0.738375983745762, rel=1e-12)
    assert round(mnas_reward(0.75, 100, 80, -0.07), 5) == 0.73838
    assert mnas_reward(0.75, 100, 80, -0.15) < mnas_reward(0.75, 100, 80, -0.07)


@given(st.floats(0, 1), st.floats(0.1, 500), st.floats(0.1, 500), st.floats(-1, 0))
def test_reward_high_precision(acc, lat, tar, w):
    ref = reward_reference(acc, lat, tar, w)
    assert math.isclose(mnas_reward(acc, lat, tar, w), float(ref), rel_tol=1e-12, abs_tol=0)


@given(st.floats(0.01, 1), st.floats(1, 200), st.floats(1, 200), st.floats(0.1, 10))
def test_reward_scales_with_accuracy(acc, lat, tar, c):
    assert mnas_reward(acc * c, lat, tar, -0.07) == pytest.approx(c * mnas_reward(acc, lat, tar, -0.07))


@pytest.mark.parametrize("lat,tar", [(0, 1), (1, 0), (-1, 1)])
def test_reward_rejects(lat, tar):
    with pytest.raises(ValueError):
        mnas_reward(0.5, lat, tar, -0.07)


# -- proposals ---------------------------------------------------------------

TWO_BLOCKS = [("bneck", 3, 48, 16, False, "RE", 1), ("bneck", 3, 64, 24, False, "RE", 2)]


def _summary(props):
    return {(p.kind, p.site, p.new_width, p.latency_delta) for p in props}


def test_two_block_proposals_by_hand():
    spec = toy(TWO_BLOCKS)
    assert width_latency(spec) == 200
    assert _summary(generate_proposals(spec, width_latency, 20)) == {
        ("expansion", 1, 24, -24.0), ("expansion", 2, 40, -24.0)}
    assert _summary(generate_proposals(spec, width_latency, 8)) == {
        ("expansion", 1, 40, -8.0), ("expansion", 2, 56, -8.0),
        ("group", 0, 8, -16.0), ("group", 2, 16, -8.0)}


def test_delta_too_large():
    assert generate_proposals(toy(TWO_BLOCKS), width_latency, 1000) == []
    with pytest.raises(ValueError):
        generate_proposals(toy(TWO_BLOCKS), width_latency, 0)


def test_forty_channel_group_shrinks_together():
    spec = builtin_spec("v3-large")
    assert (4, 5, 6) in bottleneck_groups(spec)
    props = generate_proposals(spec, width_latency, 1)
    g = next(p for p in props if p.kind == "group" and p.site == 4)
    assert [g.spec.rows[i].out_channels for i in (4, 5, 6)] == [32, 32, 32]
    assert g.spec.residual_pattern() == spec.residual_pattern()


# -- selection ---------------------------------------------------------------

def _state(spec, latency_fn, oracle, delta):
    return SearchState(spec, latency_fn(spec), oracle(spec), delta)


def test_ratio_selection():
    spec = toy(TWO_BLOCKS)

    def lat(s):  # 5 ms per 8 channels of the first expansion, 1 ms for the second
        return s.rows[1].exp_size / 8 * 5 + s.rows[2].exp_size / 8

    def acc(s):
        return 0.7 - 0.01 * (s.rows[1].exp_size < 48) - 0.004 * (s.rows[2].exp_size < 64)

    cfg = SearchConfig(0.0, granularity=8)
    nxt = netadapt_step(_state(spec, lat, acc, 1.0), acc, lat, cfg)
    step = nxt.trajectory[-1]
    assert (step.site, step.new_width) == (1, 40)
    assert step.ratio == pytest.approx(-0.002)


def test_tie_breaks_to_lowest_site():
    spec = toy([("bneck", 3, 48, 16, False, "RE", 1), ("bneck", 3, 48, 16, False, "RE", 1)])

    def lat(s):
        return float(sum(r.exp_size or 0 for r in s.rows))

    nxt = netadapt_step(_state(spec, lat, lambda s: 0.5, 8.0), lambda s: 0.5, lat, SearchConfig(0.0))
    assert nxt.trajectory[-1].site == 1


def test_no_proposals_raises():
    spec = toy(TWO_BLOCKS)
    with pytest.raises(NoProposals):
        netadapt_step(_state(spec, width_latency, CapacityOracle(), 1e6), CapacityOracle(),
                      width_latency, SearchConfig(0.0))


def test_target_already_met():
    spec = toy(TWO_BLOCKS)
    r = netadapt_run(spec, CapacityOracle(), width_latency, SearchConfig(width_latency(spec)))
    assert r.reached and r.trajectory == () and r.spec == spec


# -- brute force on a three-block toy ------------------------------------------

THREE_BLOCKS = [("bneck", 3, 64, 24, False, "RE", 2), ("bneck", 3, 72, 24, False, "RE", 1),
                ("bneck", 5, 96, 40, True, "HS", 2)]


def _bf_latency(layers):
    return float(sum(l[3] + (l[2] or 0) for l in layers[:5]))


def _bf_acc(layers):
    return sum(math.log1p(l[3]) + (math.log1p(l[2]) if l[2] and l[2] != ins else 0)
               for l, ins in zip(layers[:5], [3] + [l[3] for l in layers[:4]]))


def _bf_structure(layers):
    ins = [3] + [l[3] for l in layers[:-1]]
    return [(l[0] == "bneck" and l[6] == 1 and i == l[3], l[0] == "bneck" and l[2] != i)
            for l, i in zip(layers, ins)]


def _bf_candidates(layers, delta):
    """Every site and every width, keeping the smallest shrink that meets delta."""
    base = _bf_latency(layers)
    sites = [("expansion", 1, (1,)), ("expansion", 2, (2,)), ("expansion", 3, (3,)),
             ("group", 0, (0,)), ("group", 1, (1, 2)), ("group", 3, (3,))]
    out = []
    for kind, site, rows in sites:
        field = 2 if kind == "expansion" else 3
        current = layers[rows[0]][field]
        options = []
        for width in range(8, current, 8):
            new = [list(l) for l in layers]
            for r in rows:
                new[r][field] = width
            new = [tuple(l) for l in new]
            if _bf_structure(new) != _bf_structure(layers):
                continue
            if base - _bf_latency(new) >= delta:
                options.append((width, new))
        if options:
            width, new = max(options)
            out.append((kind, site, width, new))
    return out


def _bf_greedy(layers, target, delta_fraction=0.01):
    delta = delta_fraction * _bf_latency(layers)
    order = {"expansion": 0, "group": 1}
    while _bf_latency(layers) > target:
        cands = _bf_candidates(layers, delta)
        if not cands:
            break
        a0, l0 = _bf_acc(layers), _bf_latency(layers)
        # ratios equal to 10 significant digits are ties
        scored = [(float(f"{(_bf_acc(n) - a0) / (l0 - _bf_latency(n)):.10g}"), l0 - _bf_latency(n),
                   -s, -order[k], n)
                  for k, s, w, n in cands]
        layers = max(scored, key=lambda t: t[:4])[4]
    return layers


@pytest.mark.parametrize("target_frac", [0.9, 0.8, 0.75, 0.7, 0.6, 0.5, 0.45, 0.3])
def test_three_block_toy_matches_brute_force(target_frac):
    layers = [("conv2d", 3, None, 16, False, "HS", 2)] + THREE_BLOCKS + TAIL
    spec = spec_from_layers("toy", 32, 10, layers)
    target = target_frac * _bf_latency(layers)
    expected = _bf_greedy(layers, target)
    r = netadapt_run(spec, CapacityOracle(z=1.0), width_latency, SearchConfig(target))
    assert r.reached == (_bf_latency(expected) <= target)
    assert r.spec.rows == spec_from_layers("toy", 32, 10, expected).rows


# -- randomized properties -----------------------------------------------------

def _random_profile(seed):
    rng = np.random.default_rng(seed)
    return DeviceProfile("r", {c: float(rng.uniform(0.5, 5)) for c in OP_CLASSES}, 0.1)


def check_instance(seed):
    spec = random_spec(seed, resolution=64)
    lat = profile_latency_fn(_random_profile(seed))
    cfg = SearchConfig(0.7 * lat(spec))
    r = netadapt_run(spec, CapacityOracle(), lat, cfg)
    delta = 0.01 * lat(spec)
    lats = [lat(spec)] + [s.latency_ms for s in r.trajectory]
    assert all(a - b >= delta - 1e-9 for a, b in zip(lats, lats[1:]))
    for s in r.specs:
        s.validate()
        build(s)
        assert s.residual_pattern() == spec.residual_pattern()
    again = netadapt_run(spec, CapacityOracle(), lat, cfg)
    assert again.trajectory == r.trajectory
    return r


@pytest.mark.parametrize("seed", range(10))
def test_random_instances(seed):
    check_instance(seed)


def test_threads_do_not_change_result(monkeypatch):
    spec = builtin_spec("v3-small")
    lat = profile_latency_fn(_random_profile(0))
    one = netadapt_run(spec, CapacityOracle(), lat, SearchConfig(0.9 * lat(spec), threads=1))
    four = netadapt_run(spec, CapacityOracle(), lat, SearchConfig(0.9 * lat(spec), threads=4))
    assert one.trajectory == four.trajectory


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(10, delta_fraction=0)
    with pytest.raises(ValueError):
        SearchConfig(10, granularity=12)


def test_trajectory_csv():
    spec = toy(TWO_BLOCKS)
    r = netadapt_run(spec, CapacityOracle(), width_latency, SearchConfig(150))
    lines = trajectory_to_csv(r.trajectory).splitlines()
    assert lines[0] == "step,proposal_kind,site,new_width,latency_ms,acc,ratio"
    assert len(lines) == len(r.trajectory) + 1
