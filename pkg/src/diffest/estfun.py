"""Estimating functions g(t, y, x; theta) and numerical checks of their properties.

``g`` callables take ``(t, y, x, theta)`` and must broadcast over numpy
arrays in ``y``, ``x`` and ``theta``; the estimator evaluates a whole grid of
parameter values in one call by passing ``theta`` with shape ``(m, 1)``.

The checks report on *this version* of an estimating function.  Multiplying
``g`` by a nonzero factor gives the same estimator, and a version that fails
a check may still have a rescaled sibling that passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import AllCensored, ModelMismatch, UnknownEstFun
from .model_core import EPS, DiffusionModel, ScalarField, generator_apply
from .path_sim import _milstein, make_rng

JACOBSEN_TOL = 1e-6
EFFICIENCY_TOL = 1e-3
IDENTITY_TOL = 1e-5


@dataclass
class EstimatingFunctionSpec:
    name: str
    g: Callable
    dg_dtheta: Optional[Callable] = None
    d2g_dy2_diag: Optional[Callable] = None
    kappa_claim: float = 2.0

    def __call__(self, t, y, x, theta):
        return self.g(t, y, x, theta)

    def scaled(self, factor: float) -> "EstimatingFunctionSpec":
        """The version ``factor * g`` of this estimating function."""
        return replace(
            self,
            name=f"{self.name}*{factor:g}",
            g=lambda t, y, x, th: factor * self.g(t, y, x, th),
            dg_dtheta=None if self.dg_dtheta is None
            else (lambda t, y, x, th: factor * self.dg_dtheta(t, y, x, th)),
            d2g_dy2_diag=None if self.d2g_dy2_diag is None
            else (lambda x, th: factor * self.d2g_dy2_diag(x, th)),
        )


@dataclass
class CheckReport:
    name: str
    check: str
    passed: bool
    max_defect: float
    grid: list
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "check": self.check,
            "passed": bool(self.passed),
            "max_defect": _json_float(self.max_defect),
            "grid": [float(v) for v in self.grid],
            "details": self.details,
        }


@dataclass
class EfficiencyReport:
    K_values: list
    relative_spread: float
    verdict: str
    name: str = ""

    def to_check_report(self) -> CheckReport:
        return CheckReport(
            name=self.name,
            check="efficiency",
            passed=self.verdict == "efficient",
            max_defect=self.relative_spread,
            grid=[x for x, _ in self.K_values],
            details={
                "verdict": self.verdict,
                "K_values": [[float(x), _json_float(k)] for x, k in self.K_values],
            },
        )


def _json_float(value):
    value = float(value)
    return value if math.isfinite(value) else None


# --- shape probes used by the catalog guards ---------------------------------

def _probe_xs(model: DiffusionModel) -> np.ndarray:
    xs = model.state_space.clip_probe([-1.7, -0.6, 0.0, 0.3, 1.1, 2.4])
    return xs if xs.size else np.array([_interior_point(model.state_space)])


def _probe_thetas(model: DiffusionModel) -> np.ndarray:
    ths = model.theta_domain.clip_probe([0.35, 1.0, 1.8, 3.0])
    return ths if ths.size else np.array([_interior_point(model.theta_domain)])


def _interior_point(interval) -> float:
    lo, hi = interval.lo, interval.hi
    if math.isinf(lo) and math.isinf(hi):
        return 0.0
    if math.isinf(hi):
        return lo + 1.0
    if math.isinf(lo):
        return hi - 1.0
    return 0.5 * (lo + hi)


def _matches(model, fn, expected, what):
    for th in _probe_thetas(model):
        xs = _probe_xs(model)
        got = np.broadcast_to(fn(xs, th), xs.shape)
        want = np.broadcast_to(expected(xs, th), xs.shape)
        if not np.allclose(got, want, rtol=1e-10, atol=1e-12):
            raise ModelMismatch(f"model {model.name} does not have {what}")


def _require_constant_diffusion(model):
    _matches(model, model.diffusion_sq, lambda x, th: th + 0.0 * x, "b^2(x; theta) = theta")


def _require_unit_reverting_drift(model):
    _matches(model, lambda x, th: model.drift(x), lambda x, th: -x, "drift a(x) = -x")


def _require_inverse_quadratic_diffusion(model):
    _matches(model, model.diffusion_sq, lambda x, th: 1.0 / (th + x * x),
             "b^2(x; theta) = 1 / (theta + x^2)")


def _linear_drift_slope(model) -> float:
    slope = float(model.drift(1.0))
    _matches(model, lambda x, th: model.drift(x), lambda x, th: slope * x,
             "a linear drift a(x) = c x")
    return slope


# --- catalog -----------------------------------------------------------------

def _efficient_generic(model):
    def weight(x, th):
        b2 = model.diffusion_sq(x, th)
        return model.d_diffusion_sq_dtheta(x, th) / (b2 * b2)

    def g(t, y, x, th):
        d = y - x
        return weight(x, th) * (d * d - t * model.diffusion_sq(x, th))

    return EstimatingFunctionSpec(
        "efficient_generic", g, d2g_dy2_diag=lambda x, th: 2.0 * weight(x, th)
    )


def _gcj_contrast_score(model):
    # minus the theta-derivative of t log b^2(x) + (y - x)^2 / b^2(x)
    def g(t, y, x, th):
        b2 = model.diffusion_sq(x, th)
        db2 = model.d_diffusion_sq_dtheta(x, th)
        d = y - x
        return -(t * db2 / b2 - d * d * db2 / (b2 * b2))

    def d2(x, th):
        b2 = model.diffusion_sq(x, th)
        return 2.0 * model.d_diffusion_sq_dtheta(x, th) / (b2 * b2)

    return EstimatingFunctionSpec("gcj_contrast_score", g, d2g_dy2_diag=d2)


def _qv(model):
    _require_constant_diffusion(model)
    return _plain_qv("qv")


def _plain_qv(name):
    def g(t, y, x, th):
        d = y - x
        return d * d - th * t

    return EstimatingFunctionSpec(
        name, g,
        dg_dtheta=lambda t, y, x, th: -t + 0.0 * (x + th),
        d2g_dy2_diag=lambda x, th: 2.0 + 0.0 * (x + th),
    )


def _sec4_g(model):
    _require_inverse_quadratic_diffusion(model)
    slope = _linear_drift_slope(model)

    def g(t, y, x, th):
        r = y - (1.0 + slope * t) * x
        return r * r - t / (th + x * x)

    def dg(t, y, x, th):
        u = th + x * x
        return t / (u * u) + 0.0 * y

    return EstimatingFunctionSpec(
        "sec4_g", g, dg_dtheta=dg, d2g_dy2_diag=lambda x, th: 2.0 + 0.0 * (x + th)
    )


def _sec4_h(model):
    _require_inverse_quadratic_diffusion(model)
    slope = _linear_drift_slope(model)

    def powers(x, th):
        u = th + x * x
        u2 = u * u
        u4 = u2 * u2
        u8 = u4 * u4
        return u, u8, u8 * u, u8 * u2

    def h(t, y, x, th):
        _, _, u9, u10 = powers(x, th)
        r = y - (1.0 + slope * t) * x
        return u10 * (r * r) - u9 * t

    def dh(t, y, x, th):
        _, u8, u9, _ = powers(x, th)
        r = y - (1.0 + slope * t) * x
        return 10.0 * u9 * (r * r) - 9.0 * u8 * t

    def d2(x, th):
        return 2.0 * powers(x, th)[3]

    return EstimatingFunctionSpec("sec4_h", h, dg_dtheta=dh, d2g_dy2_diag=d2)


def _ou_exact(model):
    _require_constant_diffusion(model)
    _require_unit_reverting_drift(model)

    def g(t, y, x, th):
        r = y - np.exp(-t) * x
        return r * r - 0.5 * th * (1.0 - np.exp(-2.0 * t))

    return EstimatingFunctionSpec(
        "ou_exact", g,
        dg_dtheta=lambda t, y, x, th: -0.5 * (1.0 - np.exp(-2.0 * t)) + 0.0 * (x + th),
        d2g_dy2_diag=lambda x, th: 2.0 + 0.0 * (x + th),
    )


def _ou_simple(model):
    _require_constant_diffusion(model)
    _require_unit_reverting_drift(model)

    def g(t, y, x, th):
        r = y - (1.0 - t) * x
        return r * r - th * t

    return EstimatingFunctionSpec(
        "ou_simple", g,
        dg_dtheta=lambda t, y, x, th: -t + 0.0 * (x + th),
        d2g_dy2_diag=lambda x, th: 2.0 + 0.0 * (x + th),
    )


def _increment(model):
    # violates the Jacobsen condition on purpose
    return EstimatingFunctionSpec(
        "increment",
        lambda t, y, x, th: (y - x) - th * t,
        dg_dtheta=lambda t, y, x, th: -t + 0.0 * (x + th),
        d2g_dy2_diag=lambda x, th: 0.0 * (x + th),
    )


ESTFUN_CATALOG = {
    "efficient_generic": _efficient_generic,
    "qv": _qv,
    "gcj_contrast_score": _gcj_contrast_score,
    "sec4_g": _sec4_g,
    "sec4_h": _sec4_h,
    "ou_exact": _ou_exact,
    "ou_simple": _ou_simple,
}

# Counter-examples for the checks; no model guard.
DIAGNOSTIC_CATALOG = {
    "naive_qv": lambda model: _plain_qv("naive_qv"),
    "increment": _increment,
}


def builtin_estfun(name: str, model: DiffusionModel) -> EstimatingFunctionSpec:
    factory = ESTFUN_CATALOG.get(name) or DIAGNOSTIC_CATALOG.get(name)
    if factory is None:
        known = sorted(ESTFUN_CATALOG) + sorted(DIAGNOSTIC_CATALOG)
        raise UnknownEstFun(f"unknown estimating function {name!r}; choose from {known}")
    return factory(model)


# --- derivatives ---------------------------------------------------------------

def dg_dy_diag(spec, x, theta) -> float:
    h = EPS ** (1 / 3) * max(1.0, abs(x))
    return float((spec.g(0.0, x + h, x, theta) - spec.g(0.0, x - h, x, theta)) / (2 * h))


def d2g_dy2_diag_numeric(spec, x, theta) -> float:
    """Five-point central difference of g(0, ., x; theta) at y = x."""
    h = EPS**0.25 * max(1.0, abs(x))
    g = lambda y: spec.g(0.0, y, x, theta)  # noqa: E731
    return float((-g(x + 2 * h) + 16 * g(x + h) - 30 * g(x) + 16 * g(x - h) - g(x - 2 * h))
                 / (12 * h * h))


def d2g_dy2_diag(spec, x, theta):
    """Second y-derivative of g(0, y, x; theta) on the diagonal; broadcasts in x."""
    if spec.d2g_dy2_diag is not None:
        return spec.d2g_dy2_diag(x, theta)
    if np.ndim(x) == 0:
        return d2g_dy2_diag_numeric(spec, float(x), theta)
    return np.array([d2g_dy2_diag_numeric(spec, float(v), theta) for v in np.ravel(x)]).reshape(
        np.shape(x)
    )


def dg_dt_at_zero(spec, y, x, theta) -> float:
    """The first t-derivative of g at t = 0 (central difference)."""
    h = EPS ** (1 / 3)
    return float((spec.g(h, y, x, theta) - spec.g(-h, y, x, theta)) / (2 * h))


def default_grid(model: DiffusionModel, points: int = 50) -> np.ndarray:
    lo = max(model.state_space.lo, -2.0)
    hi = min(model.state_space.hi, 2.0)
    if lo == model.state_space.lo or hi == model.state_space.hi:
        pad = 1e-3 * (hi - lo)
        lo, hi = lo + pad * (lo == model.state_space.lo), hi - pad * (hi == model.state_space.hi)
    return np.linspace(lo, hi, points)


# --- checks ------------------------------------------------------------------

def check_jacobsen(spec, model, x_grid, theta) -> CheckReport:
    """Rate-optimality condition: d/dy g(0, y, x; theta) vanishes at y = x."""
    defects, scaled_ok = [], True
    for x in np.asarray(x_grid, dtype=float):
        defect = dg_dy_diag(spec, x, theta)
        scale = 1.0 + abs(float(d2g_dy2_diag(spec, x, theta))) * max(1.0, abs(x))
        defects.append(defect)
        scaled_ok &= abs(defect) <= JACOBSEN_TOL * scale
    max_defect = float(np.max(np.abs(defects))) if defects else 0.0
    return CheckReport(spec.name, "jacobsen", bool(scaled_ok), max_defect, list(x_grid),
                       {"theta": theta, "tolerance": JACOBSEN_TOL})


def efficiency_constants(spec, model, x_grid, theta) -> np.ndarray:
    xs = np.asarray(x_grid, dtype=float)
    b2 = np.broadcast_to(model.diffusion_sq(xs, theta), xs.shape)
    db2 = np.broadcast_to(model.d_diffusion_sq_dtheta(xs, theta), xs.shape)
    d2 = np.broadcast_to(d2g_dy2_diag(spec, xs, theta), xs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        return d2 * b2 * b2 / db2


def check_efficiency(spec, model, x_grid, theta, tol: float = EFFICIENCY_TOL) -> EfficiencyReport:
    """Test whether d2g/dy2(0, x, x) * b^4 / d_theta b^2 is one nonzero constant."""
    xs = np.asarray(x_grid, dtype=float)
    db2 = np.broadcast_to(model.d_diffusion_sq_dtheta(xs, theta), xs.shape)
    K = efficiency_constants(spec, model, xs, theta)
    pairs = list(zip(xs.tolist(), K.tolist()))
    if np.any(db2 == 0) or not np.all(np.isfinite(K)):
        return EfficiencyReport(pairs, math.nan, "undefined", spec.name)
    peak = float(np.max(np.abs(K)))
    if peak == 0.0:
        return EfficiencyReport(pairs, math.inf, "not_efficient", spec.name)
    spread = float((np.max(K) - np.min(K)) / peak)
    same_sign = bool(np.all(K > 0) or np.all(K < 0))
    verdict = "efficient" if spread <= tol and same_sign else "not_efficient"
    return EfficiencyReport(pairs, spread, verdict, spec.name)


def check_generator_identities(spec, model, xs, thetas) -> CheckReport:
    """g(0, x, x) = 0 and g^(1)(x, x) = -L_theta g(0, ., x)(x) at each (x, theta)."""
    worst_zero = worst_first = 0.0
    passed = True
    for x, th in zip(np.asarray(xs, dtype=float), np.asarray(thetas, dtype=float)):
        g0 = float(spec.g(0.0, x, x, th))
        first = dg_dt_at_zero(spec, x, x, th)
        field_ = ScalarField(lambda y, x=x, th=th: spec.g(0.0, y, x, th))
        gen = generator_apply(model, field_, x, th)
        scale = 1.0 + abs(gen)
        worst_zero = max(worst_zero, abs(g0) / scale)
        worst_first = max(worst_first, abs(first + gen) / scale)
        passed &= abs(g0) <= IDENTITY_TOL * scale and abs(first + gen) <= IDENTITY_TOL * scale
    return CheckReport(
        spec.name, "generator_identities", bool(passed), max(worst_zero, worst_first), list(xs),
        {"thetas": [float(t) for t in thetas], "max_rel_g0": worst_zero,
         "max_rel_first_order": worst_first, "tolerance": IDENTITY_TOL},
    )


# --- Monte Carlo checks ----------------------------------------------------------

SUBSTEPS_PER_INTERVAL = 100


def simulate_transition(model, theta, x, delta, reps, rng, substeps=SUBSTEPS_PER_INTERVAL):
    """Draw ``reps`` Milstein approximations of X_delta given X_0 = x."""
    h = delta / substeps
    sqrt_h = math.sqrt(h)
    state = np.full(reps, float(x))
    for _ in range(substeps):
        state = _milstein(model, state, theta, h, rng.standard_normal(reps) * sqrt_h)
    return state


def _mc_mean(spec, model, x, theta_sim, theta_eval, delta, reps, rng):
    y = simulate_transition(model, theta_sim, x, delta, reps, rng)
    vals = spec.g(delta, y, x, theta_eval)
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(reps))


@dataclass
class DefectOrderResult:
    slope: float
    slope_se: float
    points: list

    def censored(self) -> list:
        return [p for p in self.points if p["censored"]]


def martingale_defect_order(
    spec, model, x, theta, deltas, mc_reps=100_000, seed=0, censor_z: float = 3.0
) -> DefectOrderResult:
    """Estimate the order in delta of E_theta(g(delta, X_delta, x; theta) | X_0 = x).

    Points whose estimate is within ``censor_z`` Monte Carlo standard errors
    of zero are censored; the slope is a log-log least-squares fit over the
    rest, with its standard error.
    """
    rng = make_rng(seed)
    points = []
    for delta in deltas:
        est, se = _mc_mean(spec, model, x, theta, theta, delta, mc_reps, rng)
        points.append({"delta": float(delta), "estimate": est, "se": se,
                       "censored": abs(est) <= censor_z * se})
    kept = [p for p in points if not p["censored"]]
    if not kept:
        raise AllCensored("defect consistent with an exact martingale", points)
    if len(kept) < 2:
        return DefectOrderResult(math.nan, math.nan, points)
    lx = np.log([p["delta"] for p in kept])
    ly = np.log([abs(p["estimate"]) for p in kept])
    slope, intercept = np.polyfit(lx, ly, 1)
    if len(kept) > 2:
        resid = ly - (slope * lx + intercept)
        s2 = float(resid @ resid) / (len(kept) - 2)
        slope_se = math.sqrt(s2 / float(np.sum((lx - lx.mean()) ** 2)))
    else:
        slope_se = math.nan
    return DefectOrderResult(float(slope), slope_se, points)


def leading_moment_check(spec, model, x, theta, theta0, delta, mc_reps=100_000, seed=0):
    """Compare E_theta0 g(delta, X_delta, x; theta) with its leading-order term.

    The prediction is ``delta / 2 * (b^2(x; theta0) - b^2(x; theta)) * d2g/dy2(0, x, x; theta)``.
    Returns ``(mc_estimate, predicted, z_score)``.
    """
    rng = make_rng(seed)
    est, se = _mc_mean(spec, model, x, theta0, theta, delta, mc_reps, rng)
    predicted = 0.5 * delta * float(
        (model.diffusion_sq(x, theta0) - model.diffusion_sq(x, theta))
        * d2g_dy2_diag(spec, x, theta)
    )
    return est, predicted, (est - predicted) / se
