import numpy as np
import pytest

from kljnsim.channel import Arrangement, CableModel, LoopConfig
from kljnsim.noise import NoiseSpec

_ACCEPTANCE = {}


def record_acceptance(key, passed, detail):
    """Remember one criterion's outcome for the end-of-session summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] {key}: {detail}"
    _ACCEPTANCE[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0].lstrip("C"))):
        terminalreporter.write_line(_ACCEPTANCE[key])


@pytest.fixture
def noise():
    return NoiseSpec(bandwidth_hz=5e3, kappa=1e-7, sample_rate_hz=5e4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_loop(cable, R_L=1e3, R_H=1e4, n_oc=50, bob_high=True, noise=None, **kw):
    noise = noise or NoiseSpec(bandwidth_hz=5e3, kappa=1e-7, sample_rate_hz=5e4)
    return LoopConfig(Arrangement.secure_bit(bob_high, R_L, R_H), cable, noise, n_oc=n_oc, **kw)


@pytest.fixture
def lossless():
    return CableModel.lossless(2e-6)
