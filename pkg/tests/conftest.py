import numpy as np
import pytest

from kinslab import collision as col
from kinslab import slab as sl
from kinslab import velocity as vel


@pytest.fixture(scope="session")
def grid8():
    return vel.build_velocity_grid(n_per_axis=8)


@pytest.fixture(scope="session")
def coll8(grid8):
    return col.assemble_K(grid8)


@pytest.fixture(scope="session")
def phase8(grid8):
    return sl.Phase(grid8, sl.build_slab(8), vel.maxwellian(grid8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one status line per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(lines):
        terminalreporter.write_line(lines[num])
