import numpy as np
import pytest
from hypothesis import settings

from monodomain_uq.config import parse_config_text
from monodomain_uq.mesh import BoxDomain, build_nested_hierarchy

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

CUBE = BoxDomain((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


@pytest.fixture(scope="session")
def cube():
    return CUBE


@pytest.fixture(scope="session")
def hierarchy3():
    """Cube levels h = 0.5, 0.25, 0.125 on T = 0.32."""
    return build_nested_hierarchy(CUBE, 3, 0.5, 0.16, 0.32)


@pytest.fixture(scope="session")
def small_config():
    return parse_config_text(
        "[hierarchy]\nlevels = 2\n[qoi]\nquantities = field; action_potential@0.25,0,0\n"
        "[quadrature]\nrepetitions = 2\nn_ref = 4\n", "<small>")


@pytest.fixture(scope="session")
def small_problem(small_config):
    return small_config.problem()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one summary line per acceptance criterion, printed at the end of the run
CRITERIA = {}


@pytest.fixture
def criterion():
    def record(number, title, ok, detail=""):
        CRITERIA[number] = (title, bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, ok, detail = CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
