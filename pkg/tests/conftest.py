import numpy as np
import pytest
from hypothesis import strategies as st

from stlab.routeworld import RouteConfig, SceneKind, generate_route


def route_from_seed(seed: int, scene: SceneKind = SceneKind.INDOOR_SINGLE, **kw):
    return generate_route(RouteConfig(scene=scene, **kw), np.random.default_rng(seed), f"r{seed}")


routes = st.builds(route_from_seed, st.integers(0, 2**32 - 1), st.sampled_from(list(SceneKind)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
