import numpy as np
import pytest

from dialab import bench, nn
from dialab.numeric import Rng


def randomize_bn(net, rng):
    """Copy of ``net`` with random affine parameters and source statistics in every BN layer."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, nn.BatchNorm):
            c = layer.channels
            layer = nn.BatchNorm(rng.normal(1.0, 0.3, c), rng.normal(0.0, 0.3, c),
                                 rng.normal(0.0, 0.5, c), rng.uniform(0.5, 2.0, c), layer.eps)
        layers.append(layer)
    return nn.Network(layers)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_net(rng):
    return randomize_bn(nn.mlp([3, 6, 5, 4], rng=rng), rng)


@pytest.fixture(scope="session")
def tiny_bench():
    """Small, fast benchmark: 3 classes, 4 features, batches of 20."""
    spec = bench.BenchmarkSpec(n_classes=3, dim=4, train_size=600, test_size=200, batch_size=20, seed=5)
    train, clean, shifted = bench.generate_benchmark(spec)
    net = bench.train_source(train, (8, 8), epochs=5, lr=0.05, seed=5)
    return spec, net, train, clean, shifted


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for an acceptance criterion: ``with criterion(n, text): ...``."""
    import contextlib

    @contextlib.contextmanager
    def record(number, text):
        ACCEPTANCE[number] = f"FAIL criterion {number}: {text}"
        yield
        ACCEPTANCE[number] = f"PASS criterion {number}: {text}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
