"""G_n-estimators: evaluate the estimating equation, solve it, normalize.

The solver scans G_n on an equispaced grid, brackets every sign change and
refines each bracket with Brent's method.  A sample without any sign change
is a recorded ``no_root`` outcome, not an exception.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateNormalizer, NonFiniteResult, ZeroDenominator
from .estfun import EstimatingFunctionSpec, d2g_dy2_diag
from .model_core import DiffusionModel, fisher_info_path
from .path_sim import PathGrid, riemann_functional

CONVERGED = "converged"
NO_ROOT = "no_root"
MULTIPLE_ROOTS = "multiple_roots_resolved"
DEGENERATE_W = "degenerate_w"

_GRID_CELLS = 1 << 22  # cap on theta-grid x observations evaluated at once


@dataclass
class Sample:
    """Observations X_{t_i}, i = 0..n, with spacing ``delta`` (default 1/n)."""

    values: np.ndarray
    delta: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("a sample needs at least one observation")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteResult("sample contains non-finite values")
        if self.delta is None:
            self.delta = 1.0 / self.n if self.n else 1.0

    @property
    def n(self) -> int:
        return self.values.size - 1

    @classmethod
    def from_path(cls, path: PathGrid) -> "Sample":
        return cls(path.values, path.step)


@dataclass
class RootSolverConfig:
    search_lo: float = 0.01
    search_hi: float = 1.99
    scan_points: int = 256
    xtol: float = 1e-10
    max_iter: int = 200
    policy: str = "nearest"  # or "leftmost"
    reference: Optional[float] = None  # nearest-to target; None means midpoint

    def __post_init__(self):
        if not self.search_lo < self.search_hi:
            raise ValueError("search_lo must be below search_hi")
        if self.scan_points < 16:
            raise ValueError("scan_points must be at least 16")
        if self.policy not in ("nearest", "leftmost"):
            raise ValueError(f"unknown multiplicity policy {self.policy!r}")

    @property
    def target(self) -> float:
        if self.reference is not None:
            return self.reference
        return 0.5 * (self.search_lo + self.search_hi)


@dataclass
class EstimationResult:
    theta_hat: Optional[float]
    w_hat: Optional[float]
    status: str
    n_roots_found: int
    g_at_root: Optional[float]
    iterations: int

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in asdict(self).items()}


def _increments(sample: Sample):
    return sample.values[1:], sample.values[:-1]


def _check_finite(terms, what):
    if not np.all(np.isfinite(terms)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(terms)))[0])
        raise NonFiniteResult(f"{what} is not finite at increment {bad}", index=bad)


def eval_G(spec: EstimatingFunctionSpec, sample: Sample, theta: float) -> float:
    if sample.n == 0:
        return 0.0
    y, x = _increments(sample)
    terms = np.broadcast_to(spec.g(sample.delta, y, x, theta), y.shape)
    _check_finite(terms, f"{spec.name} term")
    return float(np.sum(terms))


def eval_G_grid(spec: EstimatingFunctionSpec, sample: Sample, thetas) -> np.ndarray:
    """G_n at every theta in ``thetas`` with one broadcast call per chunk."""
    thetas = np.asarray(thetas, dtype=float)
    if sample.n == 0:
        return np.zeros_like(thetas)
    y, x = _increments(sample)
    out = np.empty(thetas.size)
    chunk = max(1, _GRID_CELLS // max(1, sample.n))
    for start in range(0, thetas.size, chunk):
        th = thetas[start:start + chunk, None]
        terms = np.broadcast_to(spec.g(sample.delta, y, x, th), (th.shape[0], y.size))
        out[start:start + chunk] = terms.sum(axis=1)
    return out


def _theta_step(theta: float) -> float:
    return 1e-6 * max(1.0, abs(theta))


def dg_dtheta_terms(spec: EstimatingFunctionSpec, sample: Sample, theta: float) -> np.ndarray:
    y, x = _increments(sample)
    if spec.dg_dtheta is not None:
        terms = spec.dg_dtheta(sample.delta, y, x, theta)
    else:
        h = _theta_step(theta)
        terms = (spec.g(sample.delta, y, x, theta + h) - spec.g(sample.delta, y, x, theta - h)) / (2 * h)
    terms = np.broadcast_to(terms, y.shape)
    _check_finite(terms, f"d/dtheta {spec.name} term")
    return terms


def eval_dG(spec: EstimatingFunctionSpec, sample: Sample, theta: float) -> float:
    if sample.n == 0:
        return 0.0
    return float(np.sum(dg_dtheta_terms(spec, sample, theta)))


def _pick(roots, config: RootSolverConfig):
    if config.policy == "leftmost":
        return 0
    target = config.target
    distances = [abs(r - target) for r in roots]
    # min() returns the first minimum, and roots are sorted, so ties go left
    return distances.index(min(distances))


def _refine(spec, sample, lo, hi, config):
    def G(th):
        return eval_G(spec, sample, th)

    try:
        root, info = brentq(G, lo, hi, xtol=config.xtol, maxiter=config.max_iter,
                            full_output=True, disp=False)
    except ValueError:
        # the scalar and gridded sums disagree in sign only when G is ~0 at an end
        return (float(lo) if abs(G(lo)) <= abs(G(hi)) else float(hi)), 0
    return float(root), int(info.iterations)


def solve(spec: EstimatingFunctionSpec, sample: Sample, config: Optional[RootSolverConfig] = None
          ) -> EstimationResult:
    """Find all roots of G_n on the search interval and select one.

    ``w_hat`` is left empty; :func:`estimate` fills it.
    """
    config = config or RootSolverConfig()
    grid = np.linspace(config.search_lo, config.search_hi, config.scan_points)
    values = eval_G_grid(spec, sample, grid)
    finite = np.isfinite(values)

    found = []  # (root, iterations)
    for j in range(grid.size):
        if finite[j] and values[j] == 0.0:
            found.append((float(grid[j]), 0))
    for j in range(grid.size - 1):
        lo_val, hi_val = values[j], values[j + 1]
        if not (finite[j] and finite[j + 1]) or lo_val == 0.0 or hi_val == 0.0:
            continue
        if (lo_val < 0) != (hi_val < 0):
            found.append(_refine(spec, sample, grid[j], grid[j + 1], config))
    found.sort()

    if not found:
        return EstimationResult(None, None, NO_ROOT, 0, None, 0)
    root, iterations = found[_pick([r for r, _ in found], config)]
    status = CONVERGED if len(found) == 1 else MULTIPLE_ROOTS
    return EstimationResult(root, None, status, len(found), eval_G(spec, sample, root), iterations)


def compute_What(spec: EstimatingFunctionSpec, sample: Sample, theta_hat: float) -> float:
    """Data-driven normalizer  -sqrt(sum g^2 / delta) / sum d_theta g  at theta_hat."""
    y, x = _increments(sample)
    g = np.broadcast_to(spec.g(sample.delta, y, x, theta_hat), y.shape)
    _check_finite(g, f"{spec.name} term")
    numerator = math.sqrt(float(np.sum(g * g)) / sample.delta)
    dg = dg_dtheta_terms(spec, sample, theta_hat)
    denominator = float(np.sum(dg))
    scale = float(np.sum(np.abs(dg)))
    if numerator == 0.0 or scale == 0.0 or abs(denominator) < 1e-12 * scale:
        raise DegenerateNormalizer(
            f"normalizer undefined (numerator={numerator}, denominator={denominator})"
        )
    return -numerator / denominator


def estimate(spec, sample, config: Optional[RootSolverConfig] = None) -> EstimationResult:
    """Solve G_n(theta) = 0 and attach the normalizer W_hat at the root."""
    result = solve(spec, sample, config)
    if result.theta_hat is None:
        return result
    try:
        result.w_hat = compute_What(spec, sample, result.theta_hat)
    except DegenerateNormalizer:
        result.status = DEGENERATE_W
    return result


def normalized_stat(theta_hat: float, w_hat: float, theta0: float, n: int) -> float:
    """sqrt(n) (theta_hat - theta0) / w_hat, asymptotically standard normal."""
    if w_hat == 0 or not math.isfinite(w_hat):
        raise DegenerateNormalizer("w_hat must be finite and nonzero")
    return math.sqrt(n) * (theta_hat - theta0) / w_hat


# --- path functionals of the limit theory ------------------------------------

def _mixing_integrals(spec, model, path, theta0):
    def numerator(x):
        b2 = model.diffusion_sq(x, theta0)
        d2 = d2g_dy2_diag(spec, x, theta0)
        return 0.5 * (b2 * b2) * (d2 * d2)

    def denominator(x):
        return 0.5 * model.d_diffusion_sq_dtheta(x, theta0) * d2g_dy2_diag(spec, x, theta0)

    return riemann_functional(path, numerator), riemann_functional(path, denominator)


def mixing_W(spec, model: DiffusionModel, fine_path: PathGrid, theta0: float) -> float:
    """Riemann approximation of the random scale W(theta0) of the limit W Z."""
    num, den = _mixing_integrals(spec, model, fine_path, theta0)
    if den == 0.0:
        raise ZeroDenominator("int d_theta b^2 * d2g/dy2 ds vanishes along this path")
    return math.sqrt(num) / den


def limit_functionals(spec, model: DiffusionModel, fine_path: PathGrid, theta: float, theta0: float):
    """Riemann approximations of the limits A, B and C of G_n, d_theta G_n and G_n^sq.

    ``B`` needs d/dtheta of the diagonal second derivative, taken by a central
    difference in theta.
    """
    h = _theta_step(theta)

    def spread(x):
        return model.diffusion_sq(x, theta0) - model.diffusion_sq(x, theta)

    def a_integrand(x):
        return 0.5 * spread(x) * d2g_dy2_diag(spec, x, theta)

    def b_integrand(x):
        d2_theta = (d2g_dy2_diag(spec, x, theta + h) - d2g_dy2_diag(spec, x, theta - h)) / (2 * h)
        return (0.5 * spread(x) * d2_theta
                - 0.5 * model.d_diffusion_sq_dtheta(x, theta) * d2g_dy2_diag(spec, x, theta))

    def c_integrand(x):
        b2 = model.diffusion_sq(x, theta0)
        s = spread(x)
        d2 = d2g_dy2_diag(spec, x, theta)
        return 0.5 * (b2 * b2 + 0.5 * (s * s)) * (d2 * d2)

    return tuple(riemann_functional(fine_path, f) for f in (a_integrand, b_integrand, c_integrand))


def fisher_consistency_check(spec, model: DiffusionModel, fine_path: PathGrid, theta0: float):
    """Compare |W(theta0)| with I(theta0)^(-1/2); the ratio is 1 for efficient versions.

    Returns ``(abs_mixing_W, fisher_scale, ratio)``.
    """
    w = abs(mixing_W(spec, model, fine_path, theta0))
    fisher_scale = fisher_info_path(model, fine_path, theta0) ** -0.5
    return w, fisher_scale, w / fisher_scale
