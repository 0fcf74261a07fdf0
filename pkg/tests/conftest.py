import numpy as np
import pytest
from hypothesis import strategies as st

from mnv3.spec import spec_from_layers


def random_layers(rng, max_blocks=8, max_ch=64, strides=2):
    """Stem conv, a few bottlenecks, a 1x1 conv, pool and classifier."""
    widths = list(range(8, max_ch + 1, 8))
    ch = int(rng.choice(widths))
    layers = [("conv2d", 3, None, ch, False, str(rng.choice(["RE", "HS"])), 2)]
    n = int(rng.integers(1, max_blocks + 1))
    stride_slots = set(rng.choice(n, size=min(strides, n), replace=False).tolist())
    for i in range(n):
        residual = rng.random() < 0.4 and i not in stride_slots
        out = ch if residual else int(rng.choice(widths))
        exp = int(rng.choice([ch] + widths))
        layers.append(("bneck", int(rng.choice([3, 5])), exp, out, bool(rng.random() < 0.5),
                       str(rng.choice(["RE", "HS"])), 2 if i in stride_slots else 1))
        ch = out
    layers += [("conv2d", 1, None, int(rng.choice(widths)), False, "HS", 1),
               ("pool", None, None, None, False, "-", 1),
               ("conv2d_nbn", 1, None, "k", False, "-", 1)]
    return layers


def random_spec(seed, resolution=32, num_classes=10, **kw):
    rng = np.random.default_rng(seed)
    layers = [tuple(num_classes if v == "k" else v for v in l) for l in random_layers(rng, **kw)]
    return spec_from_layers(f"rand{seed}", resolution, num_classes, layers)


@st.composite
def specs(draw, max_blocks=8):
    seed = draw(st.integers(0, 2**32 - 1))
    res = draw(st.sampled_from([32, 64, 96, 224]))
    classes = draw(st.integers(1, 1000))
    return random_spec(seed, res, classes, max_blocks=max_blocks)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
