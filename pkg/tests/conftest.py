import numpy as np
import pytest

from dnq import net

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TOY_ARCH = [
    {"kind": "conv2d", "out": 3, "kernel": 3, "stride": 2, "padding": 1},
    {"kind": "conv2d", "out": 4, "kernel": 2, "stride": 1, "padding": 0},
    {"kind": "dense", "out": 3},
]


@pytest.fixture
def toy_conv_model():
    return net.build_model((2, 6, 6), TOY_ARCH, seed=42)


@pytest.fixture(scope="session")
def small_data():
    return net.make_synthetic_dataset(3, num_classes=4, n_train=600, n_eval=200, shape=(1, 6, 6), noise=0.5)


@pytest.fixture(scope="session")
def trained_small(small_data):
    arch = [
        {"kind": "conv2d", "out": 4, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "conv2d", "out": 6, "kernel": 3, "stride": 2, "padding": 1},
        {"kind": "dense", "out": 16},
        {"kind": "dense", "out": 4},
    ]
    m = net.build_model((1, 6, 6), arch, seed=5)
    net.train(m, small_data.train, steps=400, lr=0.05, batch_size=50, seed=6)
    return m


def rng(seed=0):
    return np.random.default_rng(seed)
