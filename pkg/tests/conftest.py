import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from cepramus.forward import (
    ary_shell_model,
    ball_source_space,
    build_leadfield,
    fibonacci_cap_layout,
)


@pytest.fixture(scope="session", autouse=True)
def _single_threaded_blas():
    # the matrices here are far too small for BLAS threading to pay off;
    # pinning also keeps timings reproducible
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def small_sphere():
    """A 50-source, 32-electrode problem for fast solver-level tests."""
    model = ary_shell_model()
    space = ball_source_space(50, radius=70.0, seed=11)
    layout = fibonacci_cap_layout(32, radius=model.outer_radius)
    leadfield = build_leadfield(model, space, layout)
    return model, space, layout, leadfield


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
