"""Monte-Carlo simulation of the single-neuron membrane-potential chain.

With i.i.d. input the post-reset potential ``U[t]`` is a Markov chain.  The
lab simulates many independent trajectories, measures how fast the
per-timestep distribution settles (total variation against the last
timestep) and checks that the mean minimises the expected squared deviation.
"""

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import lif
from .diagnostics import histogram, pooled_edges, tv_distance

STATIONARY = "stationary-mean"
TV_FLOOR = 1e-3
SWEEP_HEADER = ("tau", "vthr", "reset", "t", "tv", "rate", "r2")


@dataclass(frozen=True)
class ChainConfig:
    """``input_dist`` is ``("gaussian", mean, std)`` or ``("uniform", a, b)``."""

    input_dist: tuple = ("gaussian", 1.0, 1.0)
    tau: float = 2.0
    vthr: float = 1.0
    reset_mode: str = "soft"
    T: int = 10
    n_samples: int = 100_000
    u0: object = 0.0
    seed: int = 0

    def __post_init__(self):
        kind = self.input_dist[0]
        if kind not in ("gaussian", "uniform") or len(self.input_dist) != 3:
            raise ValueError(f"input_dist must be (gaussian, mean, std) or (uniform, a, b), got {self.input_dist}")
        if kind == "gaussian" and self.input_dist[2] < 0:
            raise ValueError("gaussian std must be >= 0")
        if kind == "uniform" and self.input_dist[2] < self.input_dist[1]:
            raise ValueError("uniform needs a <= b")
        if not self.tau > 1:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if not self.vthr > 0:
            raise ValueError(f"vthr must be positive, got {self.vthr}")
        if self.reset_mode not in lif.RESET_MODES:
            raise ValueError(f"reset_mode must be one of {lif.RESET_MODES}")
        if self.T < 1 or self.n_samples < 1:
            raise ValueError("T and n_samples must be positive")
        if isinstance(self.u0, str) and self.u0 != STATIONARY:
            raise ValueError(f"u0 must be a number or {STATIONARY!r}")


@dataclass
class DecayFit:
    rate: float
    intercept: float
    r_squared: float
    n_points: int
    skipped: bool = False  # True when fewer than two TV values clear the floor

    def as_dict(self):
        return asdict(self)


def draw_input(cfg, rng, size):
    kind, a, b = cfg.input_dist
    if kind == "gaussian":
        return rng.normal(a, b, size)
    return rng.uniform(a, b, size)


def _run(cfg, u0, steps, rng):
    U = np.full(cfg.n_samples, float(u0))
    inv_tau = 1.0 / cfg.tau
    out = np.empty((steps, cfg.n_samples))
    for t in range(steps):
        M = lif.integrate(U, draw_input(cfg, rng, cfg.n_samples), inv_tau)
        S = lif.fire(M, cfg.vthr)
        U = lif.reset(M, S, cfg.vthr, cfg.reset_mode)
        out[t] = U
    return out


def stationary_mean(cfg, burn_in=100, window=100):
    """Mean of ``U`` over ``window`` steps after ``burn_in`` steps from zero.

    Uses its own random stream so the estimate does not consume draws of
    the main simulation.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    traj = _run(cfg, 0.0, burn_in + window, rng)
    return float(traj[burn_in:].mean())


def resolve_u0(cfg):
    return stationary_mean(cfg) if cfg.u0 == STATIONARY else float(cfg.u0)


def simulate_chain(cfg):
    """Samples of ``U[t]`` for ``t = 1..T``, shape ``(T, n_samples)``."""
    return _run(cfg, resolve_u0(cfg), cfg.T, np.random.default_rng([cfg.seed, 0]))


def empirical_bounds(samples, burn_in=0):
    s = np.asarray(samples)[burn_in:]
    return float(s.min()), float(s.max())


def boundedness_fraction(samples, vthr, burn_in=0, k=2.0):
    """Fraction of samples with ``|U| <= k*vthr``."""
    s = np.asarray(samples)[burn_in:]
    return float(np.mean(np.abs(s) <= k * vthr))


def tv_curve(samples, bins=64):
    """TV of every ``U[t]`` histogram against the last timestep's, on pooled bins."""
    samples = np.asarray(samples)
    edges = pooled_edges(*samples, bins=bins)
    ref = histogram(samples[-1], edges)
    return [tv_distance(histogram(s, edges), ref) for s in samples]


def fit_log_linear(tvs, floor=TV_FLOOR):
    """Least-squares line through ``log TV`` against ``t`` (1-based) where TV > floor."""
    t = np.arange(1, len(tvs) + 1, dtype=float)
    tvs = np.asarray(tvs, dtype=float)
    keep = tvs > floor
    if keep.sum() < 2:
        return DecayFit(float("nan"), float("nan"), float("nan"), int(keep.sum()), skipped=True)
    x, y = t[keep], np.log(tvs[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)), int(keep.sum()))


def tv_decay_curve(samples, bins=64, floor=TV_FLOOR):
    """(TV list, fit).  The last timestep is the reference and is dropped from the fit."""
    if len(samples) < 4:
        raise ValueError("tv_decay_curve needs T >= 4")
    tvs = tv_curve(samples, bins)
    return tvs, fit_log_linear(tvs[:-1], floor)


def lemma1_check(samples, step=0.01):
    """Grid argmin of ``mean((U - c)^2)`` over ``c`` spanning the sample range.

    Returns ``(c_star, sample_mean)``.
    """
    u = np.asarray(samples, dtype=float).ravel()
    if u.size == 0:
        raise ValueError("lemma1_check needs samples")
    lo, hi = float(u.min()), float(u.max())
    grid = lo + step * np.arange(int(math.floor((hi - lo) / step)) + 1)
    if grid[-1] < hi:
        grid = np.append(grid, hi)
    objective = np.array([np.mean((u - c) ** 2) for c in grid])
    return float(grid[int(np.argmin(objective))]), float(u.mean())


def _sweep_cell(cfg):
    return tv_decay_curve(simulate_chain(cfg))


def parameter_sweep(base, taus, vthrs, workers=1):
    """One decay fit per (tau, vthr) cell; rows follow :data:`SWEEP_HEADER`.

    Cells are independent; with ``workers > 1`` they run in separate
    processes and are merged back in grid order.
    """
    cells = [replace(base, tau=float(tau), vthr=float(v)) for tau in taus for v in vthrs]
    if not cells:
        raise ValueError("parameter_sweep needs a nonempty grid")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    rows = []
    for cfg, (tvs, fit) in zip(cells, results):
        for t, tv in enumerate(tvs, start=1):
            rows.append({"tau": cfg.tau, "vthr": cfg.vthr, "reset": cfg.reset_mode, "t": t, "tv": tv,
                         "rate": "skipped" if fit.skipped else fit.rate,
                         "r2": "skipped" if fit.skipped else fit.r_squared})
    return rows


def fits_by_cell(rows):
    """Collapse sweep rows to ``{(tau, vthr): (rate, r2)}``."""
    return {(r["tau"], r["vthr"]): (r["rate"], r["r2"]) for r in rows}


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        writer.writeheader()
        writer.writerows(rows)
