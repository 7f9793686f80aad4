"""Scalar diffusion models dX = a(X) dt + b(X; theta) dW and generator tools.

A :class:`DiffusionModel` bundles the drift, the diffusion coefficient and the
two partial derivatives the rest of the package needs (``d b / d x`` for the
Milstein correction, ``d b^2 / d theta`` for Fisher information, efficiency
checks and the mixing variable).  Coefficient callables must accept numpy
arrays and broadcast; catalog models also accept complex input, which lets
:func:`generator_power_apply` obtain Taylor coefficients from a contour
integral instead of nested finite differences.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, NonFiniteResult, OrderTooHigh, UnknownModel
from .path_sim import PathGrid, riemann_functional

EPS = np.finfo(float).eps
MAX_GENERATOR_POWER = 3


@dataclass(frozen=True)
class Interval:
    """Open real interval ``(lo, hi)``; endpoints may be infinite."""

    lo: float = -math.inf
    hi: float = math.inf

    def __contains__(self, value) -> bool:
        v = np.asarray(value, dtype=float)
        return bool(np.all((v > self.lo) & (v < self.hi)))

    def clip_probe(self, values):
        """Keep only the probe points that lie strictly inside the interval."""
        values = np.asarray(values, dtype=float)
        return values[(values > self.lo) & (values < self.hi)]


@dataclass
class DiffusionModel:
    name: str
    drift: Callable
    diffusion: Callable
    d_diffusion_dx: Optional[Callable] = None
    d_diffusion_sq_dtheta: Optional[Callable] = None
    state_space: Interval = field(default_factory=Interval)
    theta_domain: Interval = field(default_factory=Interval)

    def diffusion_sq(self, x, theta):
        b = self.diffusion(x, theta)
        return b * b

    def check_state(self, x) -> None:
        if x not in self.state_space:
            raise DomainError(f"{x!r} is outside the state space {self.state_space} of {self.name}")

    def check_theta(self, theta) -> None:
        if theta not in self.theta_domain:
            raise DomainError(f"theta={theta!r} is outside {self.theta_domain} for {self.name}")


@dataclass
class ScalarField:
    """A test function f(y), optionally with analytic first/second derivatives."""

    eval: Callable
    d1: Optional[Callable] = None
    d2: Optional[Callable] = None
    smoothness_hint: int = 8

    def __call__(self, y):
        return self.eval(y)


def _as_field(f) -> ScalarField:
    return f if isinstance(f, ScalarField) else ScalarField(f)


def central_diff1(f: Callable, x: float, h: Optional[float] = None) -> float:
    if h is None:
        h = EPS ** (1 / 3) * max(1.0, abs(x))
    return (f(x + h) - f(x - h)) / (2.0 * h)


def central_diff2(f: Callable, x: float, h: Optional[float] = None) -> float:
    if h is None:
        h = EPS ** 0.25 * max(1.0, abs(x))
    return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)


def _finite(value: float, what: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteResult(f"{what} is not finite ({value})")
    return value


def generator_apply(model: DiffusionModel, f, x: float, theta: float) -> float:
    """Apply the infinitesimal generator ``a f' + b^2 f'' / 2`` at ``x``.

    Derivatives of ``f`` come from its analytic partials when supplied, from
    a contour-integral Taylor jet when ``f`` accepts complex input, and from
    central differences otherwise.
    """
    model.check_state(x)
    f = _as_field(f)
    numeric = None
    if f.d1 is None or f.d2 is None:
        numeric = _numeric_derivatives(f.eval, x)
    d1 = f.d1(x) if f.d1 is not None else numeric[0]
    d2 = f.d2(x) if f.d2 is not None else numeric[1]
    value = model.drift(x) * d1 + 0.5 * model.diffusion_sq(x, theta) * d2
    return _finite(value, "generator value")


# --- Taylor jets -------------------------------------------------------------
# A jet is the coefficient vector c with f(x + u) ~ sum_j c[j] u**j.  The
# generator maps exact jets of order m to exact jets of order m - 2, so k
# applications need order-2k jets of f, a and b^2.

_CONTOUR_POINTS = 64


def _contour_jet(func: Callable, x: float, order: int, radius: float) -> np.ndarray:
    k = np.arange(_CONTOUR_POINTS)
    z = x + radius * np.exp(2j * np.pi * k / _CONTOUR_POINTS)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        values = np.asarray(func(z), dtype=complex)
    if values.shape != z.shape:
        values = np.broadcast_to(values, z.shape)
    if not np.all(np.isfinite(values)):
        raise ArithmeticError("non-finite value on contour")
    coeffs = np.fft.fft(values) / _CONTOUR_POINTS
    return (coeffs[: order + 1] / radius ** np.arange(order + 1)).real


def _jet_derivative(c: np.ndarray) -> np.ndarray:
    return c[1:] * np.arange(1, len(c))


def _jet_mul(p: np.ndarray, q: np.ndarray, order: int) -> np.ndarray:
    return np.convolve(p, q)[: order + 1]


def _generator_jet(drift_jet, diff_sq_jet, f_jet):
    order = len(f_jet) - 3
    first = _jet_derivative(f_jet)
    second = _jet_derivative(first)
    return _jet_mul(drift_jet, first, order) + 0.5 * _jet_mul(diff_sq_jet, second, order)


def _power_by_jets(model, f, x, theta, k, radius):
    order = 2 * k
    f_jet = _contour_jet(f, x, order, radius)
    drift_jet = _contour_jet(model.drift, x, order, radius)
    diff_sq_jet = _contour_jet(lambda z: model.diffusion_sq(z, theta), x, order, radius)
    for _ in range(k):
        f_jet = _generator_jet(drift_jet, diff_sq_jet, f_jet)
    return float(f_jet[0])


def _power_by_jets_adaptive(model, f, x, theta, k):
    """Shrink the contour until two successive radii agree."""
    radius = 0.5 * max(1.0, abs(x))
    previous = _power_by_jets(model, f, x, theta, k, radius)
    for _ in range(10):
        radius *= 0.5
        current = _power_by_jets(model, f, x, theta, k, radius)
        if abs(current - previous) <= 1e-9 * (1.0 + abs(current)):
            return current
        previous = current
    return current


def _numeric_derivatives(f: Callable, x: float):
    """(f'(x), f''(x)) from Taylor jets, or central differences for real-only f."""
    try:
        radius = 0.5 * max(1.0, abs(x))
        previous = _contour_jet(f, x, 2, radius)
        for _ in range(10):
            radius *= 0.5
            current = _contour_jet(f, x, 2, radius)
            if np.all(np.abs(current - previous) <= 1e-10 * (1.0 + np.abs(current))):
                break
            previous = current
        return current[1], 2.0 * current[2]
    except (TypeError, ValueError, ArithmeticError, Warning):
        return central_diff1(f, x), central_diff2(f, x)


def _power_by_nesting(model, f, x, theta, k):
    field_ = _as_field(f)
    for _ in range(k):
        inner = field_
        field_ = ScalarField(lambda y, g=inner: generator_apply(model, g, y, theta))
    return field_(x)


def generator_power_apply(model: DiffusionModel, f, x: float, theta: float, k: int) -> float:
    """Return ``L^k f(x)`` for ``k`` in 0..3.

    Exact jet algebra on contour-integral Taylor coefficients is used when
    ``f`` and the model coefficients accept complex arguments; otherwise the
    generator is nested with central differences, which is reliable only
    for ``k <= 1``.
    """
    if k < 0 or k > MAX_GENERATOR_POWER:
        raise OrderTooHigh(f"generator power k={k} not in 0..{MAX_GENERATOR_POWER}")
    model.check_state(x)
    field_ = _as_field(f)
    if k == 0:
        return _finite(field_(x), "f(x)")
    try:
        value = _power_by_jets_adaptive(model, field_.eval, x, theta, k)
    except (TypeError, ValueError, ArithmeticError, Warning):
        value = _power_by_nesting(model, field_, x, theta, k)
    return _finite(value, f"L^{k} f")


def conditional_moment_expansion(model, f, x: float, delta: float, theta: float, k: int) -> float:
    """Truncated expansion ``sum_{i<=k} delta^i / i! L^i f(x)`` of E(f(X_delta) | X_0 = x)."""
    if not 0.0 < delta <= 1.0:
        raise DomainError(f"delta={delta} must lie in (0, 1]")
    return sum(
        delta**i / math.factorial(i) * generator_power_apply(model, f, x, theta, i)
        for i in range(k + 1)
    )


def fisher_info_path(model: DiffusionModel, path: PathGrid, theta0: float) -> float:
    """Left-endpoint Riemann approximation of the random Fisher information.

    Uses ``I = 1/2 * int_0^1 (d_theta b^2 / b^2)^2 ds``, which equals
    ``2 * int (d_theta b / b)^2 ds``.
    """
    def integrand(x):
        ratio = model.d_diffusion_sq_dtheta(x, theta0) / model.diffusion_sq(x, theta0)
        return 0.5 * ratio * ratio

    return riemann_functional(path, integrand)


# --- catalog -----------------------------------------------------------------

def _ou_sqrt_theta() -> DiffusionModel:
    return DiffusionModel(
        name="ou_sqrt_theta",
        drift=lambda x: -x,
        diffusion=lambda x, th: np.sqrt(th) * np.ones_like(x),
        d_diffusion_dx=lambda x, th: np.zeros_like(x) * th,
        d_diffusion_sq_dtheta=lambda x, th: np.ones_like(x) + 0.0 * th,
        theta_domain=Interval(0.0, math.inf),
    )


def _sec4(name: str, slope: float) -> DiffusionModel:
    # b^2 = 1 / (theta + x^2)
    def diffusion(x, th):
        return 1.0 / np.sqrt(th + x * x)

    def d_diffusion_dx(x, th):
        b = diffusion(x, th)
        return -x * b * b * b

    def d_diffusion_sq_dtheta(x, th):
        u = th + x * x
        return -1.0 / (u * u)

    return DiffusionModel(
        name=name,
        drift=lambda x: slope * x,
        diffusion=diffusion,
        d_diffusion_dx=d_diffusion_dx,
        d_diffusion_sq_dtheta=d_diffusion_sq_dtheta,
        theta_domain=Interval(0.0, math.inf),
    )


def _pearson_scaled() -> DiffusionModel:
    # b^2 = theta * (1 + x^2): separable h(x) k(theta) form
    def diffusion(x, th):
        return np.sqrt(th * (1.0 + x * x))

    return DiffusionModel(
        name="pearson_scaled",
        drift=lambda x: -x,
        diffusion=diffusion,
        d_diffusion_dx=lambda x, th: th * x / diffusion(x, th),
        d_diffusion_sq_dtheta=lambda x, th: (1.0 + x * x) + 0.0 * th,
        theta_domain=Interval(0.0, math.inf),
    )


MODEL_CATALOG = {
    "ou_sqrt_theta": _ou_sqrt_theta,
    "ergodic_sec4": lambda: _sec4("ergodic_sec4", -2.0),
    "nonergodic_sec4": lambda: _sec4("nonergodic_sec4", 2.0),
    "pearson_scaled": _pearson_scaled,
}


def builtin_model(name: str) -> DiffusionModel:
    try:
        factory = MODEL_CATALOG[name]
    except KeyError:
        raise UnknownModel(f"unknown model {name!r}; choose from {sorted(MODEL_CATALOG)}") from None
    return factory()
