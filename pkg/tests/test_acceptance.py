"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import time
from decimal import Decimal, getcontext

import numpy as np

from mnv3 import nonlinearity as nl
from mnv3 import tensor as T
from mnv3.cost import calibrate_profile, count, estimate_latency, reference_pairs
from mnv3.model import build, forward, init_weights, shape_trace
from mnv3.reference import V3_REFERENCE
from mnv3.search import CapacityOracle, SearchConfig, mnas_reward, netadapt_run
from mnv3.segmentation import SegHeadConfig, cost as seg_cost
from mnv3.spec import builtin_spec, resolve_spec, spec_from_layers, with_stem_filters

from conftest import random_spec, record
from test_search import THREE_BLOCKS, TAIL, _bf_greedy, _bf_latency, check_instance, width_latency
from test_spec import LARGE_INPUTS, SMALL_INPUTS


def within(value, target, tol):
    return abs(value / target - 1) <= tol


def test_criterion_01_cost_table():
    t0 = time.perf_counter()
    misses = []
    for model, res, mult, madds, params, _ in V3_REFERENCE:
        r = count(resolve_spec(model, mult, res))
        m, p = r.total_madds / 1e6, r.total_params / 1e6
        if not within(m, madds, 0.03):
            misses.append(f"{model} {res}/{mult} MAdds {m:.1f} vs {madds} ({m / madds - 1:+.1%})")
        if not within(p, params, 0.03):
            misses.append(f"{model} {res}/{mult} params {p:.3f} vs {params} ({p / params - 1:+.1%})")
    elapsed = time.perf_counter() - t0
    ok = not misses and elapsed < 5
    record(1, ok, f"{38 - len(misses)}/38 cells within 3%, {elapsed:.2f}s"
           + (f"; off: {'; '.join(misses)}" if misses else ""))
    assert ok, misses


def test_criterion_02_headline():
    large, small = count(builtin_spec("v3-large")), count(builtin_spec("v3-small"))
    checks = [within(large.total_madds, 219e6, 0.03), within(large.total_params, 5.4e6, 0.03),
              within(small.total_madds, 56e6, 0.03), within(small.total_params, 2.5e6, 0.03)]
    record(2, all(checks), f"large {large.total_madds / 1e6:.1f}M/{large.total_params / 1e6:.3f}M, "
           f"small {small.total_madds / 1e6:.1f}M/{small.total_params / 1e6:.3f}M")
    assert all(checks)


def test_criterion_03_last_stage_and_stem():
    large = builtin_spec("v3-large")
    last = count(builtin_spec("v3-large-original")).total_madds - count(large).total_madds
    stem = count(with_stem_filters(large, 32)).total_madds - count(large).total_madds
    ok = within(last, 30e6, 0.2) and within(stem, 10e6, 0.2)
    record(3, ok, f"last stage delta {last / 1e6:.2f}M, stem delta {stem / 1e6:.2f}M")
    assert ok


def test_criterion_04_tally_equals_count():
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(20):
        spec = random_spec(1000 + seed, resolution=32, max_blocks=8, max_ch=64)
        g = init_weights(build(spec), seed)
        with T.count_macs() as tally:
            forward(g, np.ones((1, 3, 32, 32), np.float32))
        mismatches += tally.total != count(spec).total_madds
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    record(4, ok, f"{20 - mismatches}/20 specs exact, {elapsed:.2f}s")
    assert ok


def test_criterion_05_shapes():
    ok = True
    for name, expected in (("v3-large", LARGE_INPUTS), ("v3-small", SMALL_INPUTS)):
        spec = builtin_spec(name)
        trace = [(3, 224, 224)] + shape_trace(build(spec))[:-1]
        ok &= [(h, c) for c, h, _ in trace] == expected
    g = build(builtin_spec("v3-large"))
    c4, c5 = g.node(g.taps["C4"]).out_shape, g.node(g.taps["C5"]).out_shape
    ok &= c4 == (672, 14, 14) and c5 == (960, 7, 7)
    record(5, ok, f"table input columns reproduced; C4 {c4}, C5 {c5}")
    assert ok


def test_criterion_06_nonlinearities():
    x = np.random.default_rng(0).uniform(-10, 10, 10**6).astype(np.float32)
    agree = float(np.max(np.abs(nl.hswish_piecewise(x) - nl.hswish(x))))
    tails = np.concatenate([np.linspace(-50, -3, 1001), np.linspace(3, 50, 1001)]).astype(np.float32)
    exact = bool(np.array_equal(nl.hswish_piecewise(tails), np.where(tails > 0, tails, 0)))
    grid = np.linspace(-10, 10, 20001)
    gap = float(np.max(np.abs(nl.hswish(grid) - nl.swish(grid))))
    hsig0 = nl.hard_sigmoid(np.float32(0.0)) == 0.5
    checks = {"forms agree": agree <= 1e-6, "exact tails": exact, "swish gap": gap <= 0.13,
              "hsig(0)": bool(hsig0)}
    ok = all(checks.values())
    record(6, ok, f"max |piecewise - naive| {agree:.2e}; tails exact {exact}; "
           f"max |h-swish - swish| {gap:.5f} (bound 0.13); hard_sigmoid(0) == 0.5 {bool(hsig0)}")
    assert ok, checks


def test_criterion_07_netadapt():
    t0 = time.perf_counter()
    failures = []
    for seed in range(100):
        try:
            check_instance(seed)
        except AssertionError:
            failures.append(seed)
    layers = [("conv2d", 3, None, 16, False, "HS", 2)] + THREE_BLOCKS + TAIL
    toy_ok = True
    for frac in (0.9, 0.75, 0.6, 0.45):
        target = frac * _bf_latency(layers)
        expected = spec_from_layers("toy", 32, 10, _bf_greedy(layers, target))
        got = netadapt_run(spec_from_layers("toy", 32, 10, layers), CapacityOracle(z=1.0),
                           width_latency, SearchConfig(target)).spec
        toy_ok &= got.rows == expected.rows
    elapsed = time.perf_counter() - t0
    ok = not failures and toy_ok and elapsed < 120
    record(7, ok, f"{100 - len(failures)}/100 random instances hold; toy matches brute force "
           f"{toy_ok}; {elapsed:.1f}s")
    assert ok, failures


def test_criterion_08_reward():
    getcontext().prec = 60
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        acc, lat, tar = rng.uniform(0, 1), rng.uniform(1, 300), rng.uniform(1, 300)
        w = rng.uniform(-1, 0)
        ref = Decimal(acc) * (Decimal(lat) / Decimal(tar)) ** Decimal(w)
        got = mnas_reward(acc, lat, tar, w)
        if ref != 0:
            worst = max(worst, abs(float((Decimal(got) - ref) / ref)))
    lats = np.linspace(1, 300, 2000)
    mono = all(np.all(np.diff([mnas_reward(0.7, l, 80, w) for l in lats]) < 0)
               for w in (-0.07, -0.15, -1.0))
    ok = worst <= 1e-12 and mono
    record(8, ok, f"max relative error {worst:.2e}; strictly decreasing in latency {mono}")
    assert ok


def test_criterion_09_segmentation():
    v3, v2 = builtin_spec("v3-large"), builtin_spec("v2")
    os16 = seg_cost(v3, SegHeadConfig(filters=128, output_stride=16)).total_madds / 1e9
    os32 = seg_cost(v3, SegHeadConfig(filters=128, output_stride=32)).total_madds / 1e9
    ratio = os16 / os32
    pairs = []
    for spec in (v2, v3):
        r = seg_cost(spec, SegHeadConfig(head="raspp", filters=256)).total_madds / 1e9
        lr = seg_cost(spec, SegHeadConfig(head="lraspp", filters=256)).total_madds / 1e9
        pairs.append((spec.name, lr, r))
    ok = (within(os16, 9.74, 0.10) and within(os32, 7.74, 0.15) and os16 > os32
          and within(ratio, 9.74 / 7.74, 0.15) and all(lr < r for _, lr, r in pairs))
    record(9, ok, f"OS16 {os16:.3f}B, OS32 {os32:.3f}B, ratio {ratio:.3f}; "
           + ", ".join(f"{n} LR-ASPP {lr:.2f}B < R-ASPP {r:.2f}B" for n, lr, r in pairs))
    assert ok


def test_criterion_10_latency_estimator():
    pairs = reference_pairs()
    errors = []
    for i in range(len(pairs)):
        profile = calibrate_profile(pairs[:i] + pairs[i + 1:])
        report, ms = pairs[i]
        errors.append(estimate_latency(report, profile) / ms - 1)
    worst = max(abs(e) for e in errors)
    ok = worst <= 0.25
    record(10, ok, f"leave-one-out over {len(pairs)} rows, worst held-out error {worst:+.1%}")
    assert ok
