import numpy as np
import pytest

from mnv3 import tensor as T
from mnv3.cost import count_graph
from mnv3.graph import run
from mnv3.model import init_weights
from mnv3.segmentation import (
    SegConfigError,
    SegHeadConfig,
    build_backbone_for_segmentation,
    build_segmentation,
    cost,
    forward,
)
from mnv3.spec import builtin_spec


@pytest.fixture(scope="module")
def large():
    return builtin_spec("v3-large")


@pytest.mark.parametrize("os_,hw", [(16, (64, 128)), (32, (32, 64))])
def test_high_level_resolution(large, os_, hw):
    g = build_backbone_for_segmentation(large, SegHeadConfig(output_stride=os_))
    assert g.node(g.taps["high_level"]).out_shape[1:] == hw
    assert g.node(g.taps["low_level"]).out_shape[1:] == (128, 256)


def test_dilation_only_with_os16(large):
    def dilations(os_):
        g = build_backbone_for_segmentation(large, SegHeadConfig(output_stride=os_))
        return {n.name: (n.attrs["stride"], n.attrs["dilation"]) for n in g.nodes
                if n.op == "conv" and n.attrs["groups"] > 1}
    d16, d32 = dilations(16), dilations(32)
    assert d16["l13.dw.conv"] == (1, 1) and d32["l13.dw.conv"] == (2, 1)
    assert d16["l14.dw.conv"] == (1, 2) and d16["l15.dw.conv"] == (1, 2)
    assert all(d == 1 for _, d in d32.values())


def test_rf2_halves_last_block(large):
    g = build_backbone_for_segmentation(large, SegHeadConfig(reduce_last_block=True))
    assert g.node(g.taps["high_level"]).out_shape[0] == 480
    g = build_backbone_for_segmentation(large, SegHeadConfig(reduce_last_block=False))
    assert g.node(g.taps["high_level"]).out_shape[0] == 960


@pytest.mark.parametrize("head", ["lraspp", "raspp"])
def test_full_res_output_shape(large, head):
    g = build_segmentation(large, SegHeadConfig(head=head))
    assert g.node(g.output).out_shape == (19, 1024, 2048)


@pytest.mark.parametrize("name,head,os_", [("v3-small", "lraspp", 16), ("v3-small", "raspp", 32),
                                           ("v2", "raspp", 16)])
def test_forward_shape(name, head, os_):
    cfg = SegHeadConfig(head=head, output_stride=os_, num_classes=5, filters=16)
    g = init_weights(build_segmentation(builtin_spec(name), cfg, (64, 96)), 0)
    x = np.random.default_rng(0).standard_normal((1, 3, 64, 96)).astype(np.float32)
    y = forward(g, x)
    assert y.shape == (1, 5, 64, 96) and np.all(np.isfinite(y))


def test_saturated_gate_is_ungated_path():
    spec = builtin_spec("v3-small")
    cfg = SegHeadConfig(num_classes=3, filters=8)
    g = init_weights(build_segmentation(spec, cfg, (64, 64)), 1)
    w = dict(g.weights)
    w["head.gate.conv.weight"] = np.zeros_like(w["head.gate.conv.weight"])
    w["head.gate.conv.bias"] = np.full_like(w["head.gate.conv.bias"], 10.0)
    g = g.with_weights(w)
    x = np.random.default_rng(2).standard_normal((1, 3, 64, 64)).astype(np.float32)
    v = run(g, x, outputs=["head.branch.act", "head.skip", g.output])
    logits = T.conv2d(v["head.branch.act"], w["head.classifier.weight"], w["head.classifier.bias"])
    up = T.bilinear_upsample(logits, *v["head.skip"].shape[2:])
    expected = T.bilinear_upsample(up + v["head.skip"], 64, 64)
    np.testing.assert_allclose(v[g.output], expected, rtol=1e-5, atol=1e-5)


def test_lraspp_cheaper_than_raspp(large):
    for f in (128, 256):
        lr = cost(large, SegHeadConfig(head="lraspp", filters=f)).total_madds
        r = cost(large, SegHeadConfig(head="raspp", filters=f)).total_madds
        assert lr < r


def test_half_res_is_quarter(large):
    full = cost(large).total_madds
    half = cost(large, SegHeadConfig(), (512, 1024)).total_madds
    assert half / full == pytest.approx(0.25, rel=0.05)


def test_os16_costs_more(large):
    assert cost(large).total_madds > cost(large, SegHeadConfig(output_stride=32)).total_madds


def test_cost_is_graph_count(large):
    g = build_segmentation(large)
    assert cost(large).total_madds == count_graph(g).total_madds


@pytest.mark.parametrize("kwargs", [dict(output_stride=8), dict(filters=0), dict(head="aspp"),
                                    dict(pool_stride=(0, 1))])
def test_bad_config(kwargs):
    with pytest.raises((SegConfigError, ValueError)):
        SegHeadConfig(**kwargs)


def test_bad_input_size(large):
    with pytest.raises(SegConfigError):
        build_segmentation(large, SegHeadConfig(), (100, 200))
