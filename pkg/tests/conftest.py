import numpy as np
import pytest

from csgd.model import build_model, densenet, resnet, toy_vgg


def plain_spec():
    return toy_vgg((8, 16, 32), input_shape=(12, 12, 1), num_classes=5)


def residual_spec():
    return resnet((8, 16, 32), blocks=2, input_shape=(12, 12, 1), num_classes=5)


def dense_spec():
    return densenet(growth=4, layers_per_block=3, blocks=2, stem_filters=8, input_shape=(8, 8, 1),
                    num_classes=5)


TOPOLOGIES = {"plain": plain_spec, "residual": residual_spec, "dense": dense_spec}


def randomize_stats(model, seed=0):
    """Non-trivial BN statistics and biases so equivalence tests are not vacuous."""
    rng = np.random.default_rng(seed)
    for lid, p in model.params.items():
        for name in ("mu", "beta"):
            if name in p:
                p[name].data = rng.uniform(-0.5, 0.5, p[name].shape).astype(np.float32)
        for name in ("sigma", "gamma"):
            if name in p:
                p[name].data = rng.uniform(0.5, 1.5, p[name].shape).astype(np.float32)
    return model


@pytest.fixture(params=sorted(TOPOLOGIES))
def topology(request):
    return request.param, TOPOLOGIES[request.param]()


@pytest.fixture
def random_model(topology):
    name, spec = topology
    return name, randomize_stats(build_model(spec, 0), 1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
