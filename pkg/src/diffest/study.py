"""Monte Carlo replication studies of G_n-estimators.

Each replicate owns one fine path, simulated from its own RNG stream.  Every
observation size in ``n_list`` is a subsample of that same path, and every
estimating function is applied to the same samples.  Replicates are split
into fixed chunks whose boundaries depend only on ``replicate_id``.  Chunks
are simulated in lockstep and handed to a process pool, so the number of
workers never changes a record.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError, DegenerateNormalizer, EmptyInput
from .estfun import builtin_estfun
from .estimator import (
    CONVERGED,
    DEGENERATE_W,
    MULTIPLE_ROOTS,
    NO_ROOT,
    RootSolverConfig,
    Sample,
    estimate,
    mixing_W,
)
from .model_core import builtin_model
from .path_sim import PathGrid, simulate_paths, stream_seed

SIM_FAILED = "sim_failed"
QUANTILE_LEVELS = (1, 5, 25, 50, 75, 95, 99)
REPLICATE_HEADER = ["replicate_id", "n", "estfun", "theta_hat", "w_hat", "z", "status", "wall_time_ms"]
KDE_POINTS = 512


def default_fine_steps(n_list) -> int:
    return max(10_000, 10 * max(n_list))


@dataclass
class StudyConfig:
    model_name: str
    estfun_names: list
    theta0: float
    n_list: list
    replicates: int
    fine_steps: Optional[int] = None
    x0: float = 0.0
    base_seed: int = 0
    solver: RootSolverConfig = field(default_factory=RootSolverConfig)
    output_dir: Optional[str] = None
    scheme: str = "milstein"
    chunk_size: int = 100
    record_timing: bool = False
    compute_mixing: bool = True

    def __post_init__(self):
        self.estfun_names = list(self.estfun_names)
        self.n_list = [int(n) for n in self.n_list]
        if self.fine_steps is None and self.n_list:
            self.fine_steps = default_fine_steps(self.n_list)

    def validate(self) -> None:
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not self.n_list or not self.estfun_names:
            raise ConfigError("n_list and estfun_names must be nonempty")
        if self.fine_steps is None or self.fine_steps < 1:
            raise ConfigError("fine_steps must be >= 1")
        for n in self.n_list:
            if n < 1 or self.fine_steps % n:
                raise ConfigError(f"fine_steps={self.fine_steps} is not divisible by n={n}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        try:
            model = builtin_model(self.model_name)
            for name in self.estfun_names:
                builtin_estfun(name, model)
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.x0 not in model.state_space:
            raise ConfigError(f"x0={self.x0} is outside the state space")
        lo, hi = self.solver.search_lo, self.solver.search_hi
        if lo not in model.theta_domain or hi not in model.theta_domain:
            raise ConfigError(f"search interval [{lo}, {hi}] is not inside the parameter domain")


@dataclass
class ReplicateRecord:
    replicate_id: int
    n: int
    estfun: str
    theta_hat: Optional[float]
    w_hat: Optional[float]
    z: Optional[float]
    status: str
    wall_time_ms: Optional[float] = None


@dataclass
class SummaryStats:
    count_converged: int
    count_no_root: int
    count_degenerate: int
    count_sim_failed: int
    count_multiple_roots: int
    mean_z: Optional[float]
    var_z: Optional[float]
    ks_stat: Optional[float]
    var_scaled_error: Optional[float]
    quantiles: dict


@dataclass
class StudyResult:
    config: StudyConfig
    records: list
    mixing: list = field(default_factory=list)  # (replicate_id, estfun, w_tilde)
    summaries: dict = field(default_factory=dict)  # (n, estfun) -> SummaryStats

    def group(self, n: int, estfun: str) -> list:
        return [r for r in self.records if r.n == n and r.estfun == estfun]


# --- distribution helpers --------------------------------------------------------

def normal_quantile(p):
    return ndtri(p)


def qq_data(z_values) -> np.ndarray:
    """Pairs (Phi^-1((i - 0.5) / m), z_(i)) for the sorted sample."""
    z = np.sort(np.asarray(z_values, dtype=float))
    if z.size == 0:
        raise EmptyInput("qq_data needs at least one value")
    m = z.size
    theoretical = normal_quantile((np.arange(1, m + 1) - 0.5) / m)
    return np.column_stack([theoretical, z])


def ks_stat(z_values) -> float:
    """One-sample Kolmogorov-Smirnov distance to the standard normal CDF."""
    z = np.sort(np.asarray(z_values, dtype=float))
    if z.size == 0:
        raise EmptyInput("ks_stat needs at least one value")
    m = z.size
    cdf = ndtr(z)
    above = np.arange(1, m + 1) / m - cdf
    below = cdf - np.arange(m) / m
    return float(max(above.max(), below.max()))


class DegenerateSampleWarning(UserWarning):
    pass


def bandwidth_nrd0(samples) -> float:
    """R's default rule 0.9 * min(sd, IQR / 1.34) * m^(-1/5)."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise EmptyInput("bandwidth needs at least one sample")
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread == 0.0:
        spread = sd  # R falls back to sd when the IQR collapses
    bw = 0.9 * spread * x.size ** -0.2
    if bw == 0.0:
        bw = 1e-3 * max(1.0, abs(float(x[0])))
        warnings.warn(f"degenerate sample; using fallback bandwidth {bw:g}", DegenerateSampleWarning)
    return bw


def kde(samples, eval_points, bandwidth: Optional[float] = None) -> np.ndarray:
    """Gaussian kernel density estimate evaluated exactly at ``eval_points``."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise EmptyInput("kde needs at least one sample")
    bw = bandwidth_nrd0(x) if bandwidth is None else bandwidth
    pts = np.asarray(eval_points, dtype=float)
    u = (pts[..., None] - x) / bw
    return np.exp(-0.5 * u * u).sum(axis=-1) / (x.size * bw * math.sqrt(2 * math.pi))


def kde_grid(samples, points: int = KDE_POINTS):
    """R-style evaluation grid: three bandwidths beyond the sample range."""
    x = np.asarray(samples, dtype=float)
    bw = bandwidth_nrd0(x)
    grid = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, points)
    return grid, kde(x, grid, bw)


# --- running --------------------------------------------------------------------

def _chunks(replicates: int, size: int):
    return [list(range(s, min(s + size, replicates))) for s in range(0, replicates, size)]


def _estimate_record(spec, sample, config, rid, n):
    started = time.perf_counter()
    result = estimate(spec, sample, config.solver)
    elapsed = (time.perf_counter() - started) * 1e3 if config.record_timing else None
    z = None
    if result.status in (CONVERGED, MULTIPLE_ROOTS) and result.w_hat:
        z = math.sqrt(n) * (result.theta_hat - config.theta0) / abs(result.w_hat)
    return ReplicateRecord(rid, n, spec.name, result.theta_hat, result.w_hat, z, result.status, elapsed)


def _run_chunk(config: StudyConfig, replicate_ids: list):
    model = builtin_model(config.model_name)
    specs = [builtin_estfun(name, model) for name in config.estfun_names]
    seeds = [stream_seed(config.base_seed, rid) for rid in replicate_ids]
    paths, escape = simulate_paths(
        model, config.theta0, seeds, config.fine_steps, config.x0, config.scheme
    )
    records, mixing = [], []
    for row, rid in enumerate(replicate_ids):
        if escape[row] >= 0:
            for n in config.n_list:
                for spec in specs:
                    records.append(ReplicateRecord(rid, n, spec.name, None, None, None, SIM_FAILED))
            continue
        fine = PathGrid(paths[row])
        for n in config.n_list:
            sample = Sample(fine.values[:: config.fine_steps // n])
            for spec in specs:
                records.append(_estimate_record(spec, sample, config, rid, n))
        if config.compute_mixing:
            for spec in specs:
                try:
                    w = mixing_W(spec, model, fine, config.theta0)
                except ArithmeticError:
                    w = None
                mixing.append((rid, spec.name, w))
    return records, mixing


def run_study(config: StudyConfig, workers: int = 1) -> StudyResult:
    """Simulate, subsample and estimate for every replicate, then summarize."""
    config.validate()
    chunks = _chunks(config.replicates, config.chunk_size)
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [config] * len(chunks), chunks))
    else:
        parts = [_run_chunk(config, ids) for ids in chunks]
    n_rank = {n: i for i, n in enumerate(config.n_list)}
    f_rank = {f: i for i, f in enumerate(config.estfun_names)}
    records = sorted((r for recs, _ in parts for r in recs),
                     key=lambda r: (r.replicate_id, n_rank[r.n], f_rank[r.estfun]))
    mixing = sorted((m for _, mix in parts for m in mix), key=lambda m: (m[0], f_rank[m[1]]))
    result = StudyResult(config, records, mixing)
    result.summaries = summarize_records(records, config.theta0, config.n_list, config.estfun_names)
    return result


# --- summaries -------------------------------------------------------------------

def _opt(value):
    return None if value is None or not math.isfinite(value) else float(value)


def summarize_group(records, theta0: float) -> SummaryStats:
    statuses = [r.status for r in records]
    z = np.array([r.z for r in records if r.z is not None], dtype=float)
    scaled = np.array([math.sqrt(r.n) * (r.theta_hat - theta0)
                       for r in records if r.theta_hat is not None], dtype=float)
    if z.size:
        quantiles = {str(q): float(v) for q, v in zip(QUANTILE_LEVELS, np.percentile(z, QUANTILE_LEVELS))}
    else:
        quantiles = {str(q): None for q in QUANTILE_LEVELS}
    return SummaryStats(
        count_converged=statuses.count(CONVERGED) + statuses.count(MULTIPLE_ROOTS),
        count_no_root=statuses.count(NO_ROOT),
        count_degenerate=statuses.count(DEGENERATE_W),
        count_sim_failed=statuses.count(SIM_FAILED),
        count_multiple_roots=statuses.count(MULTIPLE_ROOTS),
        mean_z=_opt(float(np.mean(z))) if z.size else None,
        var_z=_opt(float(np.var(z, ddof=1))) if z.size > 1 else None,
        ks_stat=ks_stat(z) if z.size else None,
        var_scaled_error=_opt(float(np.var(scaled, ddof=1))) if scaled.size > 1 else None,
        quantiles=quantiles,
    )


def summarize_records(records, theta0, n_list, estfun_names) -> dict:
    groups = {(n, f): [] for n in n_list for f in estfun_names}
    for r in records:
        groups.setdefault((r.n, r.estfun), []).append(r)
    return {key: summarize_group(recs, theta0) for key, recs in groups.items()}


def summary_document(summaries: dict, theta0: float, replicates: int) -> dict:
    return {
        "theta0": theta0,
        "replicates": replicates,
        "groups": [{"n": n, "estfun": f, **asdict(s)} for (n, f), s in summaries.items()],
    }


# --- files ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.17g}"


def _write_csv(path: Path, header, rows) -> int:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    count = 0
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
        count += 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())
    return count


def write_outputs(result: StudyResult, output_dir) -> dict:
    """Write replicates.csv, summary.json and per-group QQ/KDE tables.

    Returns a manifest mapping each written path to its data row count.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    manifest = {}

    rows = [[r.replicate_id, r.n, r.estfun, r.theta_hat, r.w_hat, r.z, r.status, r.wall_time_ms]
            for r in result.records]
    path = out / "replicates.csv"
    manifest[str(path)] = _write_csv(path, REPLICATE_HEADER, rows)

    doc = summary_document(result.summaries, cfg.theta0, cfg.replicates)
    path = out / "summary.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    manifest[str(path)] = len(doc["groups"])

    for (n, f) in result.summaries:
        group = result.group(n, f)
        z = [r.z for r in group if r.z is not None]
        path = out / f"qq_{n}_{f}.csv"
        manifest[str(path)] = _write_csv(path, ["theoretical", "empirical"], qq_data(z) if z else [])
        scaled = [math.sqrt(n) * (r.theta_hat - cfg.theta0) for r in group if r.theta_hat is not None]
        path = out / f"kde_{n}_{f}.csv"
        manifest[str(path)] = _write_csv(path, ["x", "density"], _kde_rows(scaled))

    if result.mixing:
        path = out / "mixing.csv"
        manifest[str(path)] = _write_csv(path, ["replicate_id", "estfun", "w_tilde"], result.mixing)
        for f in cfg.estfun_names:
            ws = [w for _, name, w in result.mixing if name == f and w is not None]
            path = out / f"kde_w_{f}.csv"
            manifest[str(path)] = _write_csv(path, ["x", "density"], _kde_rows(ws))
    return manifest


def _kde_rows(values):
    if len(values) == 0:
        return []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSampleWarning)
        grid, dens = kde_grid(values)
    return zip(grid, dens)


def _parse_opt(text, kind=float):
    return None if text == "" else kind(text)


def read_replicates_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPLICATE_HEADER:
            raise ValueError(f"unexpected replicates.csv header {reader.fieldnames}")
        return [
            ReplicateRecord(
                int(row["replicate_id"]), int(row["n"]), row["estfun"],
                _parse_opt(row["theta_hat"]), _parse_opt(row["w_hat"]), _parse_opt(row["z"]),
                row["status"], _parse_opt(row["wall_time_ms"]),
            )
            for row in reader
        ]


def resummarize(output_dir) -> dict:
    """Rebuild the summary.json document from replicates.csv alone (plus theta0)."""
    out = Path(output_dir)
    existing = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    records = read_replicates_csv(out / "replicates.csv")
    n_list = list(dict.fromkeys(g["n"] for g in existing["groups"]))
    estfuns = list(dict.fromkeys(g["estfun"] for g in existing["groups"]))
    summaries = summarize_records(records, existing["theta0"], n_list, estfuns)
    return summary_document(summaries, existing["theta0"], existing["replicates"])


def default_workers() -> int:
    return os.cpu_count() or 1
