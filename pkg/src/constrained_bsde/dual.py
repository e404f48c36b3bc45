"""Dual control formulation: bounded drift controls nu shift the forward process and
pay delta_t(nu) in the driver. Every admissible policy gives a lower bound for the
minimal super-solution; the search over a finite candidate set gives the best of them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import (DriverSpec, Lattice1D, _picard, _check_grid, custom_driver, make_lattice,
                   solve_lsmc)
from .constraints import ConstraintFamily, support_array
from .errors import ConfigError, InadmissibleControlError, UnsupportedConstraintError
from .sde import PathEnsemble, SdeModel, simulate


@dataclass
class ControlPolicy:
    """Piecewise-constant control on the solver grid.

    ``values`` has shape (N,) for deterministic controls and (N, bins) for
    feedback tables; bin k covers [edges[k], edges[k+1]) with the outer bins
    extended to infinity.
    """

    grid: np.ndarray
    values: np.ndarray
    nu_max: float
    edges: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        N = self.grid.size - 1
        if self.values.shape[0] != N:
            raise ValueError(f"control needs one value (or row) per interval: {N} expected")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control values must be finite")
        if np.max(np.abs(self.values), initial=0.0) > self.nu_max * (1 + 1e-12):
            raise ValueError(f"control exceeds its bound nu_max = {self.nu_max}")
        if self.values.ndim == 2:
            if self.edges is None or np.asarray(self.edges).size != self.values.shape[1] + 1:
                raise ValueError("feedback policy needs bins + 1 edges")
            self.edges = np.asarray(self.edges, dtype=float)

    @property
    def kind(self) -> str:
        return "deterministic" if self.values.ndim == 1 else "feedback"

    @classmethod
    def constant(cls, grid, c: float, nu_max: float | None = None) -> "ControlPolicy":
        grid = np.asarray(grid, float)
        return cls(grid, np.full(grid.size - 1, float(c)), abs(c) if nu_max is None else nu_max)

    def bin_index(self, x) -> np.ndarray:
        inner = self.edges[1:-1]
        return np.searchsorted(inner, np.asarray(x, float), side="right")

    def value(self, i: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "deterministic":
            return np.full(x.shape, self.values[i])
        flat = x[..., 0] if x.ndim >= 2 and x.shape[-1] == 1 else x
        out = self.values[i][self.bin_index(flat)]
        return out.reshape(x.shape) if x.ndim >= 2 and x.shape[-1] == 1 else out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "breakpoints": self.grid.tolist(),
             "values": self.values.tolist(), "nu_max": self.nu_max}
        if self.edges is not None:
            d["edges"] = self.edges.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ControlPolicy":
        return cls(np.asarray(d["breakpoints"]), np.asarray(d["values"]), d["nu_max"],
                   None if d.get("edges") is None else np.asarray(d["edges"]))


# -- evaluation ----------------------------------------------------------------

def _delta(family: ConstraintFamily, t: float, nu: np.ndarray) -> np.ndarray:
    vals, finite = support_array(family, t, nu)
    if not np.all(finite):
        raise InadmissibleControlError(f"delta_t(nu) is infinite at t = {t}")
    return vals


def _shift(model: SdeModel, s: np.ndarray, nu: np.ndarray) -> np.ndarray:
    return s * nu if model.mode == "direct" else nu


class _LatticeStepper:
    """Controlled one-step operator on a lattice with caching for repeated controls."""

    def __init__(self, model: SdeModel, lattice: Lattice1D):
        self.model = model
        self.lattice = lattice
        self._cache: dict = {}

    def op(self, t: float, h: float, nu: np.ndarray):
        uniform = bool(np.all(nu == nu[0]))
        key = None
        if uniform and self.model.autonomous:
            key = (round(h, 15), float(nu[0]))
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        b, s = self.lattice.coefficients(self.model, t)
        op = self.lattice.transition_from(b + _shift(self.model, s, nu), s, h)
        if key is not None:
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = op
        return op

    def step(self, i, t, h, Y, nu, driver, family, theta):
        x = self.lattice.x
        n = x.size
        EV = self.op(t, h, nu) @ Y
        E, V = EV[:n], EV[n:]
        cost = _delta(family, t, nu)

        def psi(u, v):
            return driver(t, x, u, v) - cost
        U, _, _ = _picard(E, V, h, theta, psi, driver.y_free)
        return U


def _terminal_values(terminal: Callable, x: np.ndarray) -> np.ndarray:
    vals = np.asarray(terminal(x), dtype=float).reshape(x.shape)
    if not np.all(np.isfinite(vals)):
        raise ValueError("terminal function undefined on part of the lattice")
    return vals


def _lattice_sweep(model, driver, terminal_vals, family, grid, lattice, nu_of, theta,
                   i_start=0, i_end=None, keep: set | None = None):
    """Backward sweep from step i_end down to i_start with nu_of(i, x) -> per-node control."""
    stepper = _LatticeStepper(model, lattice)
    N = grid.size - 1
    i_end = N if i_end is None else i_end
    Y = terminal_vals.copy()
    rows = {}
    for i in range(i_end - 1, i_start - 1, -1):
        t, h = grid[i], grid[i + 1] - grid[i]
        Y = stepper.step(i, t, h, Y, nu_of(i, lattice.x), driver, family, theta)
        if keep is not None and i in keep:
            rows[i] = Y.copy()
    return Y, rows


def evaluate_control(model: SdeModel, driver: DriverSpec, terminal: Callable,
                     family: ConstraintFamily, policy: ControlPolicy, x0: float, grid=None,
                     backend: str = "lattice", lattice: Lattice1D | None = None,
                     M: int = 50000, seed: int = 0, theta: float = 0.5,
                     return_se: bool = False, **lsmc_kw):
    """Y^nu(0, x0) of the controlled BSDE with driver f - delta_t(nu_t)."""
    grid = _check_grid(policy.grid if grid is None else grid)
    if policy.grid.size != grid.size or np.any(np.abs(policy.grid - grid) > 1e-12):
        raise ValueError("policy breakpoints must equal the solver grid")
    if not family.solver_admissible:
        raise UnsupportedConstraintError("control evaluation needs a bounded constraint family")
    if backend == "lattice":
        if lattice is None:
            lattice = make_lattice(model, x0, grid[-1] - grid[0], float(np.min(np.diff(grid))),
                                   width=6.0 + policy.nu_max * math.sqrt(grid[-1] - grid[0]))
        Y, _ = _lattice_sweep(model, driver, _terminal_values(terminal, lattice.x), family,
                              grid, lattice, policy.value, theta)
        val = float(np.interp(x0, lattice.x, Y))
        return (val, 0.0) if return_se else val
    if backend != "lsmc":
        raise ValueError(f"unknown backend {backend!r}")
    ens = simulate(model, x0, grid[0], policy, grid, M, seed)
    sol = solve_lsmc(model, _controlled_driver(driver, family, policy, grid), terminal, grid,
                     ens, theta=theta, **lsmc_kw)
    val = float(np.mean(sol.Y[0]))
    return (val, sol.y0_se) if return_se else val


def _controlled_driver(driver: DriverSpec, family, policy: ControlPolicy, grid) -> DriverSpec:
    def fn(t, x, y, z):
        i = min(int(np.searchsorted(grid, t + 1e-12, side="right")) - 1, grid.size - 2)
        nu = policy.value(i, x)
        return driver(t, x, y, z) - _delta(family, t, nu)
    return custom_driver(fn, driver.L, y_free=driver.y_free)


# -- search ----------------------------------------------------------------------

def default_candidates(nu_max: float, dim: int = 1, points: int = 5) -> np.ndarray:
    if dim != 1:
        raise ValueError("candidate grids are one-dimensional")
    return np.linspace(-nu_max, nu_max, points)


@dataclass
class DualResult:
    value: float                      # g-version
    policy: ControlPolicy | None
    value_ghat: float | None = None   # face-lifted terminal
    policy_ghat: ControlPolicy | None = None
    search: str = "feedback"
    search_tolerance: float = 0.0
    evaluations: int = 0
    trail: list = field(default_factory=list)
    table: dict | None = None         # dp: value at every node at selected steps

    def to_dict(self) -> dict:
        return {"value": self.value, "value_ghat": self.value_ghat, "search": self.search,
                "search_tolerance": self.search_tolerance, "evaluations": self.evaluations,
                "trail": self.trail,
                "policy": None if self.policy is None else self.policy.to_dict(),
                "policy_ghat": None if self.policy_ghat is None else self.policy_ghat.to_dict()}


def _blocks(N: int, pieces: int) -> list[tuple[int, int]]:
    pieces = max(1, min(N, pieces))
    cuts = np.linspace(0, N, pieces + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def _search_one(model, driver, terminal, family, x0, grid, lattice, cands, nu_max, search,
                theta, pieces, bins, sweeps, keep_rows):
    N = grid.size - 1
    term = _terminal_values(terminal, lattice.x)
    evals = 0
    trail = []

    def value_of(policy):
        nonlocal evals
        evals += 1
        Y, _ = _lattice_sweep(model, driver, term, family, grid, lattice, policy.value, theta)
        return float(np.interp(x0, lattice.x, Y))

    if search == "dp":
        stepper = _LatticeStepper(model, lattice)
        Y = term.copy()
        choice = np.zeros((N, lattice.size), dtype=np.int64)
        rows = {}
        for i in range(N - 1, -1, -1):
            t, h = grid[i], grid[i + 1] - grid[i]
            best, arg = None, None
            for k, c in enumerate(cands):   # first index wins ties
                U = stepper.step(i, t, h, Y, np.full(lattice.size, c), driver, family, theta)
                if best is None:
                    best, arg = U, np.zeros(lattice.size, dtype=np.int64)
                else:
                    better = U > best
                    best = np.where(better, U, best)
                    arg = np.where(better, k, arg)
            evals += len(cands)
            Y = best
            choice[i] = arg
            if keep_rows is not None and i in keep_rows:
                rows[i] = Y.copy()
        x = lattice.x
        edges = np.concatenate([[-np.inf], (x[1:] + x[:-1]) / 2, [np.inf]])
        policy = ControlPolicy(grid, cands[choice], nu_max, edges)
        val = float(np.interp(x0, x, Y))
        rows[0] = Y.copy()
        return val, policy, 0.0, evals, [val], {"x": x, "rows": rows}

    blocks = _blocks(N, pieces)
    if search == "deterministic":
        idx = np.full(len(blocks), int(np.argmin(np.abs(cands))))

        def build(ix):
            vals = np.empty(N)
            for (a, b), k in zip(blocks, ix):
                vals[a:b] = cands[k]
            return ControlPolicy(grid, vals, nu_max)

        best = value_of(build(idx))
        trail.append(best)
        last_gain = 0.0
        for _ in range(sweeps):
            start = best
            for bi in range(len(blocks)):
                for k in range(len(cands)):
                    if k == idx[bi]:
                        continue
                    trial = idx.copy()
                    trial[bi] = k
                    v = value_of(build(trial))
                    if v > best + 1e-14:
                        best, idx = v, trial
            trail.append(best)
            last_gain = best - start
            if last_gain <= 1e-12:
                break
        return best, build(idx), last_gain, evals, trail, None

    if search != "feedback":
        raise ValueError(f"unknown search {search!r}")
    # feedback: bins in x, greedy backward over time blocks, then coordinate ascent
    T = grid[-1] - grid[0]
    sigma = abs(model.scalar_vol(0.0, x0))
    half = 3.0 * sigma * math.sqrt(T)
    edges = np.linspace(x0 - half, x0 + half, bins + 1)
    edges[0], edges[-1] = -np.inf, np.inf
    x = lattice.x
    bin_of = np.searchsorted(edges[1:-1], x, side="right")
    weight = np.exp(-0.5 * ((x - x0) / (sigma * math.sqrt(T))) ** 2)
    zero = int(np.argmin(np.abs(cands)))
    table = np.full((len(blocks), bins), zero, dtype=np.int64)

    def build_fb(tab):
        vals = np.empty((N, bins))
        for (a, b), row in zip(blocks, tab):
            vals[a:b] = cands[row]
        return ControlPolicy(grid, vals, nu_max, edges)

    Y_end = term.copy()
    for bi in range(len(blocks) - 1, -1, -1):
        a, b = blocks[bi]
        scores = []
        for c in cands:
            Yc, _ = _lattice_sweep(model, driver, Y_end, family, grid, lattice,
                                   lambda i, xx, c=c: np.full(xx.shape, c), theta,
                                   i_start=a, i_end=b)
            evals += 1
            s = np.bincount(bin_of, weights=weight * Yc, minlength=bins)
            w = np.bincount(bin_of, weights=weight, minlength=bins)
            scores.append(np.where(w > 0, s / np.where(w > 0, w, 1.0), -np.inf))
        table[bi] = np.argmax(np.array(scores), axis=0)
        pol = build_fb(table)
        Y_end, _ = _lattice_sweep(model, driver, Y_end, family, grid, lattice, pol.value,
                                  theta, i_start=a, i_end=b)
        evals += 1
    best = value_of(build_fb(table))
    trail.append(best)
    last_gain = 0.0
    for _ in range(sweeps):
        start = best
        for bi in range(len(blocks)):
            for j in range(bins):
                for k in range(len(cands)):
                    if k == table[bi, j]:
                        continue
                    trial = table.copy()
                    trial[bi, j] = k
                    v = value_of(build_fb(trial))
                    if v > best + 1e-14:
                        best, table = v, trial
        trail.append(best)
        last_gain = best - start
        if last_gain <= 1e-12:
            break
    return best, build_fb(table), last_gain, evals, trail, None


def strong_dual_value(model: SdeModel, driver: DriverSpec, g: Callable, family: ConstraintFamily,
                      x0: float, grid, search: str = "feedback", candidates=None,
                      nu_max: float | None = None, ghat: Callable | None = None,
                      lattice: Lattice1D | None = None, theta: float = 0.5,
                      pieces: int | None = None, bins: int = 20, sweeps: int | None = None,
                      keep_rows=None) -> DualResult:
    """Best finite-candidate control value for terminal g, and for ghat when given.

    search: "deterministic" (coordinate ascent over per-block constants),
    "feedback" (binned tables, greedy backward pass plus optional ascent sweeps)
    or "dp" (per-node maximisation at every step, the best Markov choice).
    Feedback tables default to one block per solver interval; deterministic
    controls default to 8 constant pieces and 3 ascent sweeps.
    """
    grid = _check_grid(grid)
    N = grid.size - 1
    if pieces is None:
        pieces = N if search == "feedback" else 8
    if sweeps is None:
        sweeps = 3 if search == "deterministic" else 0
    if not family.solver_admissible:
        raise UnsupportedConstraintError("dual search needs a bounded constraint family")
    if nu_max is None:
        nu_max = 8.0 * model.L
    cands = default_candidates(nu_max) if candidates is None else np.asarray(candidates, float)
    if cands.size == 0:
        raise ConfigError("empty control candidate set")
    nu_max = max(nu_max, float(np.max(np.abs(cands))))
    if lattice is None:
        T = grid[-1] - grid[0]
        lattice = make_lattice(model, x0, T, float(np.min(np.diff(grid))),
                               width=6.0 + nu_max * math.sqrt(T))
    args = (model, driver)
    val, pol, tol, ev, trail, table = _search_one(*args, g, family, x0, grid, lattice, cands,
                                                  nu_max, search, theta, pieces, bins, sweeps,
                                                  keep_rows)
    res = DualResult(value=val, policy=pol, search=search, search_tolerance=tol,
                     evaluations=ev, trail=trail, table=table)
    if ghat is not None:
        v2, p2, tol2, ev2, _, _ = _search_one(*args, ghat, family, x0, grid, lattice, cands,
                                              nu_max, search, theta, pieces, bins, sweeps, None)
        res.value_ghat, res.policy_ghat = v2, p2
        res.search_tolerance = max(tol, tol2)
        res.evaluations += ev2
    return res


# -- weak formulation ------------------------------------------------------------

def weak_dual_value(model: SdeModel, driver: DriverSpec, g: Callable, family: ConstraintFamily,
                    policy: ControlPolicy, ensemble: PathEnsemble) -> tuple[float, float]:
    """Girsanov-reweighted value of a deterministic policy on the unshifted forward paths.

    For f = alpha y + beta z + c the controlled value is
    E[Gamma_T (e^{alpha T} G(X_T) + int e^{alpha s} (c - delta_s(nu_s)) ds)],
    Gamma the density with kernel sigma^{-1} nu + beta. Returns (value, standard error).
    """
    if driver.kind not in ("zero", "linear"):
        raise UnsupportedConstraintError("weak formulation is restricted to linear drivers")
    if policy.kind != "deterministic":
        raise ValueError("weak formulation needs a deterministic piecewise-constant policy")
    if not model.constant_vol or model.dim != 1:
        raise ValueError("weak formulation needs a constant scalar volatility")
    grid = ensemble.grid
    if policy.grid.size != grid.size or np.any(np.abs(policy.grid - grid) > 1e-12):
        raise ValueError("policy breakpoints must equal the ensemble grid")
    sigma = model.scalar_vol()
    alpha = driver.alpha if driver.kind == "linear" else 0.0
    beta = driver.beta if driver.kind == "linear" else 0.0
    c = driver.c if driver.kind == "linear" else 0.0
    h = np.diff(grid)
    nu = policy.values
    kern = (nu if model.mode == "direct" else nu / sigma) + beta
    dW = ensemble.dW[:, :, 0]
    log_gamma = dW @ kern - 0.5 * np.sum(kern ** 2 * h)
    gamma = np.exp(log_gamma)
    X = ensemble.states[:, :, 0]
    t0 = grid[0]
    # exact int of e^{alpha s} over each interval; the cost is constant there
    if alpha != 0.0:
        disc_int = np.diff(np.exp(alpha * (grid - t0))) / alpha
    else:
        disc_int = h.copy()
    cost = np.array([float(_delta(family, t, np.array([v]))[0]) for t, v in zip(grid[:-1], nu)])
    if callable(c):
        c_nodes = np.stack([np.asarray(c(t, X[:, i]), float) * np.ones(X.shape[0])
                            for i, t in enumerate(grid)], axis=1)
        c_path = 0.5 * (c_nodes[:, :-1] + c_nodes[:, 1:])   # trapezoid in time
        running = (c_path - cost[None, :]) @ disc_int
    else:
        running = np.full(X.shape[0], float(np.sum(disc_int * (c - cost))))
    G = np.asarray(g(X[:, -1]), float)
    sample = gamma * (np.exp(alpha * (grid[-1] - t0)) * G + running)
    M = sample.size
    return float(sample.mean()), float(sample.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0


# -- dynamic programming residual ------------------------------------------------

def dpp_residual(model: SdeModel, driver: DriverSpec, g: Callable, family: ConstraintFamily,
                 x0: float, grid, split_time: float, search: str = "dp", candidates=None,
                 nu_max: float | None = None, lattice: Lattice1D | None = None,
                 theta: float = 0.5, **search_kw) -> dict:
    """|full-horizon dual value - value of the two-stage problem split at split_time|."""
    grid = _check_grid(grid)
    j = int(np.argmin(np.abs(grid - split_time)))
    if abs(grid[j] - split_time) > 1e-9:
        raise ValueError("split time must be a grid time")
    if j == 0:
        raise ValueError("split time must be after the initial time")
    if nu_max is None:
        nu_max = 8.0 * model.L
    cands = default_candidates(nu_max) if candidates is None else np.asarray(candidates, float)
    nu_max = max(nu_max, float(np.max(np.abs(cands)))) if cands.size else nu_max
    T = grid[-1] - grid[0]
    if lattice is None:
        lattice = make_lattice(model, x0, T, float(np.min(np.diff(grid))),
                               width=6.0 + nu_max * math.sqrt(T))
    kw = dict(search=search, candidates=cands, nu_max=nu_max, lattice=lattice, theta=theta,
              **search_kw)
    full = strong_dual_value(model, driver, g, family, x0, grid, **kw)
    x = lattice.x
    if j == grid.size - 1:
        inner = np.asarray(g(x), float)
        inner_tol = 0.0
    else:
        # per-node inner search on [split_time, T]: the dp table gives every node at once
        inner_res = strong_dual_value(model, driver, g, family, x0, grid[j:], search="dp",
                                      candidates=cands, nu_max=nu_max, lattice=lattice,
                                      theta=theta)
        inner = inner_res.table["rows"][0]
        inner_tol = inner_res.search_tolerance

    def inner_fn(xx, inner=inner):
        return np.interp(xx, x, inner)
    outer = strong_dual_value(model, driver, inner_fn, family, x0, grid[: j + 1], **kw)
    residual = abs(full.value - outer.value)
    return {"residual": residual, "full": full.value, "two_stage": outer.value,
            "split_time": float(grid[j]), "x": x, "inner_values": inner,
            "tolerance": full.search_tolerance + outer.search_tolerance + inner_tol}
