import numpy as np
import pytest
import torch

from poselift.geometry import h36m_skeleton
from poselift.synthetic import SynthConfig, generate_synthetic


@pytest.fixture(autouse=True)
def _default_dtype():
    old = torch.get_default_dtype()
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def skel():
    return h36m_skeleton()


@pytest.fixture(scope="session")
def small_synth():
    """A few hundred noiseless synthetic poses with their camera truth."""
    return generate_synthetic(SynthConfig(n_samples=600), np.random.default_rng(11))


def random_pose3d(rng, n, J=17, depth=10.0, spread=0.5):
    """Random camera-frame poses well in front of the camera, flat (N, 3J)."""
    m = rng.normal(0.0, spread, size=(n, 3, J))
    m[:, 2] += depth
    return m.reshape(n, -1)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        verdict, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {verdict}  {detail}")
