"""Minimal super-solution of the constrained BSDE by penalization.

Level n solves the unconstrained equation with driver
f + n * dist(z sigma^{-1}, K_t) (or dist(z, K_t) in direct mode). Since
n * dist(z, K) = sup_{|nu| <= n} (z.nu - delta(nu)), each level is itself a
bounded-control dual value, so Y^n increases to the minimal super-solution
from below.

The lattice scheme is explicit in Z; with penalty slope n it stays monotone
only while h * xi_max^2 * (n |sigma^{-1}| + L_z)^2 <= 1. ``solve_minimal``
therefore refines the time step with n (h ~ 1/n^2) on nested lattices.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .bsde import (BsdeSolution, DriverSpec, Lattice1D, custom_driver, make_lattice,
                   solve_lattice, solve_lsmc)
from .constraints import ConstraintFamily, distance_scalar_batch
from .errors import StepSizeError, UnsupportedConstraintError
from .sde import PathEnsemble, SdeModel


@dataclass
class PenalizedRun:
    n: float
    solution: BsdeSolution
    K_increment_max: np.ndarray          # per step, max over audited nodes/paths
    violation_fraction: float
    violation_threshold: float
    audit_window: tuple[float, float] | None = None

    @property
    def compensator_nondecreasing(self) -> bool:
        return bool(np.all(self.K_increment_max >= 0))


def _gains_distance(model: SdeModel, family: ConstraintFamily):
    """z -> dist(z sigma^{-1}, K_t) (gains) or dist(z, K_t) (direct), for d = 1."""
    if model.mode == "direct":
        return lambda t, x, z: distance_scalar_batch(family, t, z)

    def dist(t, x, z):
        s = model.sigma_at(t, np.asarray(x, float)[..., None]).reshape(np.shape(x))
        return distance_scalar_batch(family, t, z / s)
    return dist


def penalized_driver(driver: DriverSpec, model: SdeModel, family: ConstraintFamily,
                     n: float) -> DriverSpec:
    if n == 0:
        return driver
    dist = _gains_distance(model, family)

    def fn(t, x, y, z):
        return driver(t, x, y, z) + n * dist(t, x, z)
    return custom_driver(fn, driver.L + n * model.inverse_vol_bound(), y_free=driver.y_free)


def stable_step(lattice_order: int, n: float, inv_vol: float, z_lipschitz: float) -> float:
    """Largest h keeping the explicit-in-Z penalized step monotone."""
    from numpy.polynomial.hermite_e import hermegauss
    xi_max = float(np.max(np.abs(hermegauss(lattice_order)[0])))
    slope = n * inv_vol + z_lipschitz
    return math.inf if slope == 0 else 1.0 / (xi_max ** 2 * slope ** 2)


def _inverse_vol_on(model: SdeModel, x: np.ndarray, grid: np.ndarray) -> float:
    if model.mode == "direct":
        return 1.0
    ts = grid if not model.autonomous else grid[:1]
    worst = 0.0
    for t in ts[:: max(1, ts.size // 16)]:
        s = np.abs(model.sigma_at(t, x[:, None]).reshape(x.size))
        worst = max(worst, float(np.max(1.0 / s)))
    return worst


def solve_penalized(model: SdeModel, driver: DriverSpec, g: Callable, family: ConstraintFamily,
                    n: float, grid, lattice: Lattice1D | None = None, backend: str = "lattice",
                    ensemble: PathEnsemble | None = None, theta: float = 1.0,
                    audit_window: tuple[float, float] | None = None,
                    steps_to_keep=None, **lsmc_kw) -> PenalizedRun:
    """One penalty level on the lattice or Monte Carlo backend."""
    if not family.solver_admissible:
        raise UnsupportedConstraintError("penalization needs a bounded Box or Ball constraint "
                                         "containing the origin")
    if family.dim != 1 or model.dim != 1:
        raise ValueError("penalized solver is one-dimensional")
    if n < 0:
        raise ValueError("penalty level must be non-negative")
    grid = np.asarray(grid, dtype=float)
    f_n = penalized_driver(driver, model, family, n)
    hmax = float(np.max(np.diff(grid)))
    l_total = driver.L + n * model.L
    if hmax * l_total >= 0.5:
        raise StepSizeError(f"h * (L + nL) = {hmax * l_total:.4g} >= 1/2 at n = {n}; "
                            "the time step has to shrink as the penalty grows")
    dist = _gains_distance(model, family)
    threshold = 10.0 / math.sqrt(n) if n > 0 else math.inf
    N = grid.size - 1
    kmax = np.zeros(N)
    counts = [0, 0]

    if backend == "lattice":
        if lattice is None:
            raise ValueError("lattice backend needs a Lattice1D")
        x = lattice.x
        inv_vol = _inverse_vol_on(model, x, grid)
        h_ok = stable_step(lattice.order, n, inv_vol, driver.L)
        if hmax > h_ok * (1 + 1e-9):
            raise StepSizeError(f"h = {hmax:.4g} exceeds the monotone limit {h_ok:.4g} at n = {n}; "
                                f"use at least {math.ceil((grid[-1] - grid[0]) / h_ok)} steps")
        mask = np.ones(x.size, bool) if audit_window is None else \
            (x >= audit_window[0]) & (x <= audit_window[1])

        def on_step(i, t, Y, Z):
            d = dist(t, x[mask], Z[mask])
            kmax[i] = n * (grid[i + 1] - grid[i]) * float(d.max(initial=0.0))
            counts[0] += int(np.count_nonzero(d > threshold))
            counts[1] += d.size

        sol = solve_lattice(model, f_n, g, grid, lattice, theta=theta,
                            steps_to_keep=steps_to_keep, on_step=on_step)
    elif backend == "lsmc":
        if ensemble is None:
            raise ValueError("lsmc backend needs a PathEnsemble")
        sol = solve_lsmc(model, f_n, g, grid, ensemble, theta=theta, **lsmc_kw)
        X = ensemble.states[:, :, 0]
        for i in range(N):
            d = dist(grid[i], X[:, i], sol.Z[i])
            kmax[i] = n * (grid[i + 1] - grid[i]) * float(d.max(initial=0.0))
            counts[0] += int(np.count_nonzero(d > threshold))
            counts[1] += d.size
    else:
        raise ValueError(f"unknown backend {backend!r}")
    sol.K_increment_max = kmax
    frac = counts[0] / counts[1] if counts[1] else 0.0
    return PenalizedRun(n=n, solution=sol, K_increment_max=kmax, violation_fraction=frac,
                        violation_threshold=threshold, audit_window=audit_window)


# -- monotone limit ----------------------------------------------------------

@dataclass
class LevelRecord:
    n: float
    N: int
    dx: float
    y0: float
    picard_max: int
    violation_fraction: float
    k_increment_max_first_half: float
    monotonicity_min: float | None = None
    monotonicity_min_all_times: float | None = None


@dataclass
class ConvergenceDiag:
    x0: float
    stop_tol: float
    levels: list[LevelRecord] = field(default_factory=list)
    converged: bool = False
    final_delta: float | None = None
    monotonicity_min: float | None = None
    monotone: bool = True
    terminal_gap: float | None = None
    terminal_layer_flag: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=True)


@dataclass
class MinimalSolution:
    solution: BsdeSolution
    diag: ConvergenceDiag
    runs: list[PenalizedRun]

    @property
    def y0(self) -> float:
        return self.diag.levels[-1].y0


def joint_schedule(model: SdeModel, driver: DriverSpec, levels, horizon: float,
                   inv_vol: float, order: int = 3) -> list[int]:
    """Step counts per level: monotone-stable, h (L + nL) <= 1/4, and nested when possible."""
    levels = list(levels)
    need = []
    for n in levels:
        h_ok = min(stable_step(order, n, inv_vol, driver.L),
                   0.25 / (driver.L + n * model.L) if driver.L + n * model.L > 0 else math.inf)
        need.append(max(1, math.ceil(horizon / h_ok - 1e-9)))
    ratios = [b / a for a, b in zip(levels[:-1], levels[1:])]
    if ratios and all(abs(r - round(r)) < 1e-12 and r >= 1 for r in ratios):
        steps = [need[0]]
        for r, req in zip(ratios, need[1:]):
            nxt = steps[-1] * int(round(r)) ** 2
            while nxt < req:
                nxt *= 2
            steps.append(nxt)
        return steps
    return need


def _level_gap(coarse: BsdeSolution, fine: BsdeSolution, all_times: bool = False) -> float:
    """min over coarse nodes of Y_fine - Y_coarse at t = 0, or at every shared stored time.

    Nested lattices make the interpolation exact. Away from t = 0 the coarse
    level still carries its own time-step error near the terminal jump, so
    the all-times figure is informational.
    """
    if not all_times:
        yf = np.interp(coarse.x, fine.x, fine.row(0))
        return float(np.min(yf - coarse.row(0)))
    tc = coarse.times()
    tf = fine.times()
    worst = math.inf
    for k, t in enumerate(tc):
        j = np.searchsorted(tf, t - 1e-12)
        if j < tf.size and abs(tf[j] - t) <= 1e-12:
            yf = np.interp(coarse.x, fine.x, fine.Y[j])
            worst = min(worst, float(np.min(yf - coarse.Y[k])))
    return worst


def solve_minimal(model: SdeModel, driver: DriverSpec, g: Callable, family: ConstraintFamily,
                  x0: float, horizon: float | None = None, levels=(4, 16, 64, 256),
                  stop_tol: float = 0.02, width: float = 6.0, theta: float = 1.0,
                  steps: list[int] | None = None, audit_width: float = 4.0,
                  progress: Callable | None = None) -> MinimalSolution:
    """Run penalty levels on nested aligned lattices until successive Y(0, x0) differ by stop_tol.

    Exhausting the schedule is reported in the diagnostics, not raised.
    """
    T = family.horizon if horizon is None else horizon
    levels = list(levels)
    if any(b <= a for a, b in zip(levels[:-1], levels[1:])):
        raise ValueError("penalty schedule must be increasing")
    sigma = abs(model.scalar_vol(0.0, x0))
    probe_x = x0 + sigma * np.linspace(-width, width, 65)
    inv_vol = _inverse_vol_on(model, probe_x, np.array([0.0, T]))
    steps = joint_schedule(model, driver, levels, T, inv_vol) if steps is None else list(steps)
    window = (x0 - audit_width * sigma * math.sqrt(T), x0 + audit_width * sigma * math.sqrt(T))
    diag = ConvergenceDiag(x0=x0, stop_tol=stop_tol)
    runs: list[PenalizedRun] = []
    prev = None
    for n, N in zip(levels, steps):
        grid = np.linspace(0.0, T, N + 1)
        lat = make_lattice(model, x0, T, T / N, order=3, width=width)
        run = solve_penalized(model, driver, g, family, n, grid, lattice=lat, theta=theta,
                              audit_window=window)
        sol = run.solution
        y0 = float(np.interp(x0, sol.x, sol.row(0)))
        half = run.K_increment_max[: N // 2]
        rec = LevelRecord(n=n, N=N, dx=lat.dx, y0=y0,
                          picard_max=int(sol.diagnostics["picard_max"]),
                          violation_fraction=run.violation_fraction,
                          k_increment_max_first_half=float(half.max(initial=0.0)))
        if prev is not None:
            rec.monotonicity_min = _level_gap(prev.solution, sol)
            rec.monotonicity_min_all_times = _level_gap(prev.solution, sol, all_times=True)
            diag.monotonicity_min = rec.monotonicity_min if diag.monotonicity_min is None \
                else min(diag.monotonicity_min, rec.monotonicity_min)
        diag.levels.append(rec)
        runs.append(run)
        if progress is not None:
            progress(rec)
        if prev is not None:
            diag.final_delta = abs(y0 - diag.levels[-2].y0)
            if diag.final_delta <= stop_tol:
                diag.converged = True
                break
        prev = run
    diag.monotone = diag.monotonicity_min is None or diag.monotonicity_min >= -1e-8
    last = runs[-1].solution
    # penalty-induced part of the last step: penalized Y(T - h) against the plain
    # one-step expectation of g on the same lattice (driver term is O(h))
    h_last = float(last.grid[-1] - last.grid[-2])
    P = lat.transition(model, last.grid[-2], h_last)[: lat.size]
    inside = (last.x >= window[0]) & (last.x <= window[1])
    plain = P @ np.asarray(g(last.x), float)
    gap = np.max(np.abs(last.row(last.N - 1) - plain)[inside])
    diag.terminal_gap = float(gap)
    diag.terminal_layer_flag = bool(gap > stop_tol)
    if not diag.converged:
        diag.message = (f"schedule exhausted: last change {diag.final_delta} exceeds stop_tol "
                        f"{stop_tol}" if diag.final_delta is not None else
                        "schedule has a single level; convergence not assessed")
    elif diag.terminal_layer_flag:
        diag.message = "converged at x0; a terminal boundary layer is present near T"
    else:
        diag.message = "converged"
    return MinimalSolution(solution=last, diag=diag, runs=runs)


def terminal_jump(solution: BsdeSolution, g: Callable, ghat: Callable | None,
                  offset_steps: int = 1, first_fraction: float = 0.5) -> dict:
    """Jump estimate Y(T - k h, x) - g(x) against the face-lift reference (ghat - g)(x).

    k = ``offset_steps``. A penalized level n returns to g within about 1/n of
    T, so the estimate reads the face-lift only when k h sits above that layer.
    """
    if ghat is None:
        raise ValueError("terminal_jump needs a face-lift tabulation")
    if solution.backend != "lattice":
        raise ValueError("terminal_jump reads node values from a lattice solution")
    x = solution.x
    N = solution.N
    if not 1 <= offset_steps <= N:
        raise ValueError("offset_steps must lie in [1, N]")
    gx = np.asarray(g(x), float)
    jump = solution.row(N - offset_steps) - gx
    ref = np.asarray(ghat(x), float) - gx
    out = {"x": x, "jump": jump, "reference": ref, "h": float(solution.grid[N] - solution.grid[N - offset_steps]),
           "max_abs_error": float(np.max(np.abs(jump - ref)))}
    if solution.K_increment_max is not None:
        kinc = solution.K_increment_max
        out["k_increment_max_before_T"] = float(kinc[: N - offset_steps].max(initial=0.0))
        cut = max(1, int(N * first_fraction))
        out["k_increment_max_first_part"] = float(kinc[:cut].max(initial=0.0))
    return out
