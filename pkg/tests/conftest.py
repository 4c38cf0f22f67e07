import pytest

from patchsdf.config import TrainConfig
from patchsdf.geometry import AnalyticShape, sample_sdf_set, sample_surface
from patchsdf.training import train_patchnet


@pytest.fixture(scope="session")
def sphere_run():
    """One 200-epoch fit of a radius-0.8 sphere, shared by the slow tests."""
    shape = AnalyticShape("sphere", (0.8,))
    mesh = shape.mesh()
    data = [(sample_sdf_set(mesh, 20_000, seed=0), sample_surface(mesh, 10_000, seed=1))]
    cfg = TrainConfig(n_patches=8, latent_size=32, epochs=200)
    return data, cfg, train_patchnet(data, cfg)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
