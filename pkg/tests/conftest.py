import math

import numpy as np
import pytest

from diffest.model_core import DiffusionModel, Interval

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def linear_diffusion_model():
    """a = 0, b(x; theta) = x: the correction term b b_x = x."""
    return DiffusionModel(
        name="linear_noise",
        drift=lambda x: 0.0 * x,
        diffusion=lambda x, th: x + 0.0 * th,
        d_diffusion_dx=lambda x, th: 1.0 + 0.0 * (x + th),
        d_diffusion_sq_dtheta=lambda x, th: 0.0 * (x + th),
    )


@pytest.fixture
def brownian_model():
    return DiffusionModel(
        name="brownian",
        drift=lambda x: 0.0 * x,
        diffusion=lambda x, th: 1.0 + 0.0 * (x + th),
        d_diffusion_dx=lambda x, th: 0.0 * (x + th),
        d_diffusion_sq_dtheta=lambda x, th: 0.0 * (x + th),
    )


@pytest.fixture
def ode_model():
    """dX = -2X dt, no noise."""
    return DiffusionModel(
        name="ode",
        drift=lambda x: -2.0 * x,
        diffusion=lambda x, th: 0.0 * (x + th),
        d_diffusion_dx=lambda x, th: 0.0 * (x + th),
        d_diffusion_sq_dtheta=lambda x, th: 0.0 * (x + th),
    )


@pytest.fixture
def positive_model():
    """Strongly mean-reverting to -5 on the state space (0, inf): paths escape."""
    return DiffusionModel(
        name="escaping",
        drift=lambda x: -50.0 * (x + 5.0),
        diffusion=lambda x, th: 0.1 + 0.0 * (x + th),
        d_diffusion_dx=lambda x, th: 0.0 * (x + th),
        d_diffusion_sq_dtheta=lambda x, th: 0.0 * (x + th),
        state_space=Interval(0.0, math.inf),
        theta_domain=Interval(0.0, math.inf),
    )


@pytest.fixture
def ou_model():
    from diffest.model_core import builtin_model

    return builtin_model("ou_sqrt_theta")
