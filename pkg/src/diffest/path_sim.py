"""Path simulation on an equidistant grid over [0, 1].

Paths for many replicates are advanced together: the time loop runs once and
every step is a handful of numpy operations over the replicate axis.  Each
replicate still draws its Wiener increments from its own seeded generator,
so a path depends only on its seed and never on which batch it ran in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .errors import EmptyPath, IndivisibleGrid, MissingDerivative, NonFiniteResult, StateEscape

if TYPE_CHECKING:
    from .model_core import DiffusionModel

_MASK64 = (1 << 64) - 1
_RNG_BLOCK = 8192


def splitmix64(value: int) -> int:
    """One round of the SplitMix64 finalizer (a bijection on 64-bit ints)."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_seed(base_seed: int, replicate_index: int) -> int:
    """Seed of the independent RNG stream owned by one replicate."""
    return splitmix64((int(base_seed) ^ int(replicate_index)) & _MASK64)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


@dataclass
class PathGrid:
    """State values at times i / n_steps, i = 0..n_steps, on [t0, t_end] = [0, 1]."""

    values: np.ndarray
    t0: float = 0.0
    t_end: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 2:
            raise EmptyPath("a path needs at least two grid values")
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise NonFiniteResult(f"path value at index {bad} is not finite", index=bad)

    @property
    def n_steps(self) -> int:
        return self.values.size - 1

    @property
    def step(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_steps + 1) * self.step


@dataclass
class SimConfig:
    fine_steps: int
    seed: int
    x0: float = 0.0
    scheme: str = "milstein"

    def __post_init__(self):
        if int(self.fine_steps) < 1:
            raise ValueError("fine_steps must be >= 1")
        if self.scheme not in ("euler", "milstein"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self.fine_steps = int(self.fine_steps)


def _euler(model, x, theta, delta, dW):
    return x + model.drift(x) * delta + model.diffusion(x, theta) * dW


def _milstein(model, x, theta, delta, dW):
    b = model.diffusion(x, theta)
    correction = 0.5 * b * model.d_diffusion_dx(x, theta) * (dW * dW - delta)
    return x + model.drift(x) * delta + b * dW + correction


def _checked(value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteResult(f"step produced a non-finite value ({value})")
    return value if np.ndim(value) else float(value)


def euler_step(model: "DiffusionModel", x, theta, delta, dW):
    """x + a(x) delta + b(x; theta) dW."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return _checked(_euler(model, x, theta, delta, dW))


def milstein_step(model: "DiffusionModel", x, theta, delta, dW):
    """Euler step plus the correction b * b_x * (dW^2 - delta) / 2."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if model.d_diffusion_dx is None:
        raise MissingDerivative(f"model {model.name} has no d_diffusion_dx; Milstein needs it")
    return _checked(_milstein(model, x, theta, delta, dW))


def simulate_paths(
    model: "DiffusionModel",
    theta: float,
    seeds: Sequence[int],
    fine_steps: int,
    x0: float = 0.0,
    scheme: str = "milstein",
):
    """Simulate one path per seed, advancing all of them in lockstep.

    Returns
    -------
    values : ndarray, shape (len(seeds), fine_steps + 1)
    escape_step : ndarray of int, shape (len(seeds),)
        First step index at which a path left the state space or became
        non-finite, or -1 for paths that stayed inside.  Escaped rows hold
        nan from that step on.
    """
    if scheme == "milstein" and model.d_diffusion_dx is None:
        raise MissingDerivative(f"model {model.name} has no d_diffusion_dx; Milstein needs it")
    step_fn = _milstein if scheme == "milstein" else _euler
    n_paths = len(seeds)
    rngs = [make_rng(s) for s in seeds]
    delta = 1.0 / fine_steps
    sqrt_delta = math.sqrt(delta)
    lo, hi = model.state_space.lo, model.state_space.hi

    values = np.empty((n_paths, fine_steps + 1))
    values[:, 0] = x0
    escape_step = np.full(n_paths, -1, dtype=np.int64)
    x = np.full(n_paths, float(x0))
    with np.errstate(all="ignore"):
        for start in range(0, fine_steps, _RNG_BLOCK):
            block = min(_RNG_BLOCK, fine_steps - start)
            dW = np.empty((block, n_paths))
            for j, rng in enumerate(rngs):
                dW[:, j] = rng.standard_normal(block)
            dW *= sqrt_delta
            for k in range(block):
                x = step_fn(model, x, theta, delta, dW[k])
                values[:, start + k + 1] = x
            block_vals = values[:, start + 1 : start + block + 1]
            bad = ~(np.isfinite(block_vals) & (block_vals > lo) & (block_vals < hi))
            newly = bad.any(axis=1) & (escape_step < 0)
            for row in np.flatnonzero(newly):
                escape_step[row] = start + 1 + int(np.argmax(bad[row]))
            if newly.any():
                x[escape_step >= 0] = np.nan
    for row in np.flatnonzero(escape_step >= 0):
        values[row, escape_step[row]:] = np.nan
    return values, escape_step


def simulate_path(model: "DiffusionModel", theta: float, config: SimConfig) -> PathGrid:
    model.check_state(config.x0)
    values, escape = simulate_paths(
        model, theta, [config.seed], config.fine_steps, config.x0, config.scheme
    )
    if escape[0] >= 0:
        raise StateEscape(
            f"path of {model.name} left the state space at step {escape[0]}", step=int(escape[0])
        )
    return PathGrid(values[0])


def subsample(path: PathGrid, n_obs: int) -> PathGrid:
    """Keep every (n_steps / n_obs)-th value; endpoints are preserved."""
    if n_obs < 1 or path.n_steps % n_obs:
        raise IndivisibleGrid(f"{path.n_steps} steps cannot be subsampled to {n_obs}")
    return PathGrid(path.values[:: path.n_steps // n_obs], path.t0, path.t_end)


def riemann_functional(path: PathGrid, integrand: Callable) -> float:
    """Left-endpoint Riemann sum of integrand(X_s) over the path's interval."""
    if path.n_steps < 1:
        raise EmptyPath("path has no steps")
    left = path.values[:-1]
    vals = np.broadcast_to(np.asarray(integrand(left), dtype=float), left.shape)
    total = float(np.sum(vals)) * path.step
    if not math.isfinite(total):
        raise NonFiniteResult("Riemann sum is not finite")
    return total


def write_path_csv(path: PathGrid, fh) -> None:
    fh.write("t,x\n")
    for t, x in zip(path.times, path.values):
        fh.write(f"{t:.17g},{x:.17g}\n")


def read_path_csv(fh) -> PathGrid:
    header = fh.readline().strip()
    if header != "t,x":
        raise ValueError(f"expected header 't,x', got {header!r}")
    rows = [line.split(",") for line in fh if line.strip()]
    times = np.array([float(r[0]) for r in rows])
    values = np.array([float(r[1]) for r in rows])
    if times.size < 2:
        raise EmptyPath("path CSV has fewer than two rows")
    return PathGrid(values, t0=float(times[0]), t_end=float(times[-1]))
