import numpy as np
import pytest
import torch

from seta.features import init_extractor
from seta.synth import make_domain, render_person, repose, sample_person, sample_pose


@pytest.fixture(scope="session")
def psi():
    return init_extractor("perceptual_analog")


@pytest.fixture(scope="session")
def phi():
    return init_extractor("reid_analog")


@pytest.fixture(scope="session")
def source():
    return make_domain("source")


@pytest.fixture(scope="session")
def ood_both():
    return make_domain("ood_both")


@pytest.fixture(scope="session")
def person(ood_both):
    return render_person(sample_person(ood_both, 3))


@pytest.fixture(scope="session")
def pose_pair(ood_both):
    """Same identity in two poses: (A, B)."""
    spec = sample_person(ood_both, 11)
    b = repose(spec, sample_pose(ood_both, spec, np.random.default_rng(11)))
    return render_person(spec), render_person(b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_image(rng, h=64, w=48) -> torch.Tensor:
    return torch.tensor(rng.random((1, 3, h, w)))


PRETRAIN_STEPS = 2000


@pytest.fixture(scope="session")
def pretrained(source):
    """The source-domain model every experiment starts from: (params, loss curve, seconds)."""
    import time

    from seta.model import ArchConfig, init_model, pretrain

    t0 = time.perf_counter()
    params, curve = pretrain(init_model(ArchConfig(), 0), source, PRETRAIN_STEPS, seed=0)
    return params, curve, time.perf_counter() - t0


# acceptance lines, filled by test_acceptance and echoed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])


def pytest_collection_modifyitems(items):
    for item in items:
        if "pretrained" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
