import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "mipet", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("mipet")

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def sprites():
    from mipet.data import gen_minisprites

    return gen_minisprites()


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def central_fd(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function of ``x``."""
    out = torch.zeros_like(x)
    flat = x.detach().clone().view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(f(flat.view_as(x)))
        flat[i] = orig - h
        down = float(f(flat.view_as(x)))
        flat[i] = orig
        out.view(-1)[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
