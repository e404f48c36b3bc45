"""Backward solvers for unconstrained BSDEs in one space dimension.

Both backends run the same one-step recursion

    U_i = E_i[U_{i+1}] + h * (theta psi(U_i, V_i) + (1 - theta) psi(E_i[U_{i+1}], V_i)),
    V_i = E_i[U_{i+1} dW_i] / h,

implicit in Y through a Picard loop and explicit in Z. theta = 1 is the plain
implicit Euler step; the default theta = 1/2 is second order in the
y-dependence. On a lattice the conditional expectations are exact
quadrature sums; the Monte Carlo backend replaces them with regressions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import sparse

from .errors import BasisError, DomainError, ModelBoundsError, StepSizeError
from .sde import PathEnsemble, SdeModel

PICARD_TOL = 1e-10
PICARD_CAP = 50


# -- drivers -----------------------------------------------------------------

@dataclass(frozen=True)
class DriverSpec:
    """f(t, x, y, z), vectorised over equally shaped arrays.

    ``y_free`` marks drivers without y-dependence, which need no Picard loop.
    """

    kind: str
    L: float
    fn: Callable = None
    alpha: float = 0.0
    beta: float = 0.0
    c: float | Callable = 0.0
    y_free: bool = True

    def __call__(self, t, x, y, z):
        if self.kind == "zero":
            return np.zeros(np.broadcast(x, y, z).shape)
        if self.kind == "linear":
            c = self.c(t, x) if callable(self.c) else self.c
            return self.alpha * y + self.beta * z + c
        return self.fn(t, x, y, z)

    def to_dict(self) -> dict:
        if self.kind == "custom":
            return {"kind": "custom", "L": self.L}
        out = {"kind": self.kind, "L": self.L}
        if self.kind == "linear":
            out.update(alpha=self.alpha, beta=self.beta,
                       c=None if callable(self.c) else self.c)
        return out


def zero_driver(L: float = 0.0) -> DriverSpec:
    return DriverSpec("zero", L)


def linear_driver(alpha: float = 0.0, beta: float = 0.0, c: float | Callable = 0.0,
                  L: float | None = None) -> DriverSpec:
    if L is None:
        c_bound = 0.0 if callable(c) else abs(c)
        L = max(abs(alpha) + abs(beta), c_bound)
    return DriverSpec("linear", L, alpha=alpha, beta=beta, c=c, y_free=(alpha == 0.0))


def custom_driver(fn: Callable, L: float, y_free: bool = False) -> DriverSpec:
    return DriverSpec("custom", L, fn=fn, y_free=y_free)


def probe_driver(driver: DriverSpec, window=(-2.0, 2.0), samples: int = 256, seed: int = 0,
                 horizon: float = 1.0) -> None:
    """Check the Lipschitz and growth bounds on random points; raises ModelBoundsError."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, horizon, samples)
    x = rng.uniform(*window, samples)
    y, y2, z, z2 = rng.normal(0.0, 2.0, (4, samples))
    L = driver.L * (1 + 1e-12) + 1e-15
    f1 = np.array([driver(ti, xi, yi, zi) for ti, xi, yi, zi in zip(t, x, y, z)], float)
    f2 = np.array([driver(ti, xi, yi, zi) for ti, xi, yi, zi in zip(t, x, y2, z2)], float)
    f0 = np.array([driver(ti, xi, 0.0, 0.0) for ti, xi in zip(t, x)], float)
    if np.any(np.abs(f1 - f2) > L * (np.abs(y - y2) + np.abs(z - z2))):
        raise ModelBoundsError("driver violates its declared Lipschitz constant")
    if np.any(np.abs(f0) > L):
        raise ModelBoundsError("driver violates |f(t, x, 0, 0)| <= L")


# -- lattice -----------------------------------------------------------------

@dataclass
class Lattice1D:
    """Uniform nodes with a Gauss-Hermite transition and linear interpolation."""

    x: np.ndarray
    order: int = 8

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        xi, w = hermegauss(self.order)
        self.xi = xi
        self.weights = w / w.sum()
        self._cache: dict = {}

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def size(self) -> int:
        return self.x.size

    def _interp_matrix(self, pts: np.ndarray) -> sparse.csr_matrix:
        n = self.size
        s = (pts - self.x[0]) / self.dx
        j = np.clip(np.floor(s + 1e-9).astype(np.int64), 0, n - 2)
        frac = np.clip(s - j, 0.0, 1.0)
        frac[np.abs(frac) < 1e-9] = 0.0
        frac[np.abs(frac - 1.0) < 1e-9] = 1.0
        rows = np.repeat(np.arange(n), 2)
        cols = np.stack([j, j + 1], axis=1).ravel()
        vals = np.stack([1.0 - frac, frac], axis=1).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def coefficients(self, model: SdeModel, t: float) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x[:, None]
        b = np.asarray(model.drift(t, xs), float)[:, 0]
        s = model.sigma_at(t, xs).reshape(self.size, -1)[:, 0]
        return b, s

    def transition_from(self, b: np.ndarray, s: np.ndarray, h: float) -> sparse.csr_matrix:
        """[P; Q] for node-wise drift b and volatility s over one step h."""
        sh = np.sqrt(h)
        n = self.size
        rows, cols, vp, vq = [], [], [], []
        for xi, w in zip(self.xi, self.weights):
            I = self._interp_matrix(self.x + b * h + s * sh * xi).tocoo()
            rows.append(I.row)
            cols.append(I.col)
            vp.append(w * I.data)
            vq.append((w * xi / sh) * I.data)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        P = sparse.csr_matrix((np.concatenate(vp), (r, c)), shape=(n, n))
        Q = sparse.csr_matrix((np.concatenate(vq), (r, c)), shape=(n, n))
        op = sparse.vstack([P, Q]).tocsr()
        op.eliminate_zeros()
        return op

    def transition(self, model: SdeModel, t: float, h: float) -> sparse.csr_matrix:
        """Stacked operator [P; Q] with P U = E[U'] and Q U = E[U' dW] / h."""
        key = (round(h, 15),) if model.autonomous else (round(t, 15), round(h, 15))
        op = self._cache.get(key)
        if op is not None:
            return op
        b, s = self.coefficients(model, t)
        op = self.transition_from(b, s, h)
        if len(self._cache) > 4 and not model.autonomous:
            self._cache.clear()
        self._cache[key] = op
        return op


def make_lattice(model: SdeModel, x0: float, horizon: float, h: float, order: int = 8,
                 width: float = 6.0, dx: float | None = None,
                 midpoint_at: float | None = None) -> Lattice1D:
    """Nodes x0 + k dx covering x0 +- (width sigma sqrt(T) + |b| T).

    Order 3 uses dx = sigma sqrt(3h), which puts every quadrature landing
    point on a node for driftless models; otherwise dx = sigma sqrt(h) / 8. ``midpoint_at`` shrinks dx so that
    the given point falls halfway between two nodes, which centres the
    interpolation ramp of a jump located there.
    """
    if model.dim != 1:
        raise ValueError("the lattice backend is one-dimensional")
    sigma = abs(model.scalar_vol(0.0, x0))
    if sigma == 0:
        raise ModelBoundsError("lattice needs a non-degenerate volatility")
    if dx is None:
        # off-node landings pay about dx^2 Y'' / 12 per step in interpolation,
        # so dx^2 / h sets a bias that does not vanish with h; 1/64 keeps it small
        dx = sigma * np.sqrt(3.0 * h) if order == 3 else sigma * np.sqrt(h) / 8.0
    if midpoint_at is not None and midpoint_at != x0:
        gap = abs(midpoint_at - x0)
        k = max(0, int(np.ceil(gap / dx - 0.5)))
        dx = gap / (k + 0.5)
    b = abs(float(np.asarray(model.drift(0.0, np.array([[x0]])), float).ravel()[0]))
    half = width * sigma * np.sqrt(horizon) + b * horizon
    m = int(np.ceil(half / dx - 1e-9))
    return Lattice1D(x0 + dx * np.arange(-m, m + 1), order)


# -- solution container ------------------------------------------------------

@dataclass
class BsdeSolution:
    """Y and Z on stored time steps.

    Lattice: ``Y[k]`` and ``Z[k]`` are node arrays at step ``steps[k]``.
    Monte Carlo: rows are per-path values at every step; ``y0_se`` is the
    standard error of the time-0 estimate.
    """

    grid: np.ndarray
    steps: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    backend: str
    x: np.ndarray | None = None
    K_increment_max: np.ndarray | None = None
    y0_se: float = 0.0
    tolerance: float = PICARD_TOL
    diagnostics: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.grid.size - 1

    def row(self, step: int) -> np.ndarray:
        idx = np.searchsorted(self.steps, step)
        if idx >= self.steps.size or self.steps[idx] != step:
            raise KeyError(f"step {step} was not stored")
        return self.Y[idx]

    def z_row(self, step: int) -> np.ndarray:
        idx = np.searchsorted(self.steps, step)
        if idx >= self.steps.size or self.steps[idx] != step:
            raise KeyError(f"step {step} was not stored")
        return self.Z[idx]

    def step_of(self, t: float) -> int:
        i = int(round(t / (self.grid[-1] - self.grid[0]) * self.N)) if self._uniform() else \
            int(np.argmin(np.abs(self.grid - t)))
        if abs(self.grid[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not a grid time")
        return i

    def _uniform(self) -> bool:
        d = np.diff(self.grid)
        return bool(np.ptp(d) <= 1e-12 * max(1.0, d[0]))

    def value(self, t: float, x) -> np.ndarray | float:
        """Y(t, x) by linear interpolation in x (lattice) or the path mean at t = t0 (MC)."""
        row = self.row(self.step_of(t))
        if self.backend == "lattice":
            out = np.interp(np.asarray(x, float), self.x, row)
            return float(out) if np.ndim(out) == 0 else out
        return float(np.mean(row))

    def times(self) -> np.ndarray:
        return self.grid[self.steps]


def snapshot_steps(N: int, nodes: int, budget: float = 5e6, uniform: int = 256) -> np.ndarray:
    """All steps when cheap; otherwise a uniform subset plus the terminal ladders."""
    if (N + 1) * nodes <= budget or N <= uniform:
        return np.arange(N + 1)
    stride = max(1, N // uniform)
    keep = set(range(0, N + 1, stride))
    keep.add(N)
    j = 1
    while 2 ** (j - 1) <= N:
        keep.add(N - 2 ** (j - 1))
        if N % 2 ** j == 0:
            keep.add(N - N // 2 ** j)
        j += 1
    return np.array(sorted(s for s in keep if 0 <= s <= N))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be an increasing array of at least two times")
    return grid


def _picard(E, V, h, theta, psi, y_free):
    """Solve U = E + h (theta psi(U) + (1-theta) psi(E)) given V; returns (U, iterations, residual)."""
    if y_free:
        return E + h * psi(E, V), 0, 0.0
    explicit = E + h * (1.0 - theta) * psi(E, V) if theta < 1.0 else E
    U = E.copy()
    for it in range(1, PICARD_CAP + 1):
        U_new = explicit + h * theta * psi(U, V)
        diff = float(np.max(np.abs(U_new - U))) if U.size else 0.0
        U = U_new
        if diff <= PICARD_TOL:
            return U, it, diff
    raise StepSizeError(f"Picard loop did not reach {PICARD_TOL:g} in {PICARD_CAP} iterations; "
                        "reduce the time step")


def _check_step(grid: np.ndarray, L: float) -> None:
    hmax = float(np.max(np.diff(grid)))
    if hmax * L >= 0.5:
        raise StepSizeError(f"h * L = {hmax * L:.4g} must stay below 1/2; refine the time grid")


def solve_lattice(model: SdeModel, driver: DriverSpec, terminal: Callable, grid,
                  lattice: Lattice1D, theta: float = 0.5, steps_to_keep=None,
                  on_step: Callable | None = None) -> BsdeSolution:
    """Backward sweep on the lattice.

    ``on_step(i, t, Y_i, Z_i)`` is called after every step, which lets callers
    collect per-step statistics without storing every row.
    """
    grid = _check_grid(grid)
    if model.dim != 1:
        raise ValueError("lattice backend requires d = 1")
    if model.degenerate:
        raise ModelBoundsError("solvers refuse degenerate (sigma = 0) models")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    _check_step(grid, driver.L)
    N = grid.size - 1
    x = lattice.x
    Y = np.asarray(terminal(x), dtype=float).reshape(x.shape)
    if not np.all(np.isfinite(Y)):
        raise DomainError("terminal function is undefined on part of the lattice")
    keep = snapshot_steps(N, x.size) if steps_to_keep is None else np.asarray(steps_to_keep)
    keep_set = {int(s) for s in keep}
    Ys, Zs = {N: Y.copy()}, {N: np.zeros_like(Y)}
    picard_total = picard_max = 0
    n = x.size
    for i in range(N - 1, -1, -1):
        t, h = grid[i], grid[i + 1] - grid[i]
        op = lattice.transition(model, t, h)
        EV = op @ Y
        E, V = EV[:n], EV[n:]

        def psi(u, v, t=t):
            return driver(t, x, u, v)

        Y, its, _ = _picard(E, V, h, theta, psi, driver.y_free)
        picard_total += its
        picard_max = max(picard_max, its)
        if on_step is not None:
            on_step(i, t, Y, V)
        if i in keep_set:
            Ys[i], Zs[i] = Y.copy(), V.copy()
    st = np.array(sorted(Ys))
    return BsdeSolution(
        grid=grid, steps=st, Y=np.array([Ys[s] for s in st]), Z=np.array([Zs[s] for s in st]),
        backend="lattice", x=x.copy(),
        diagnostics={"picard_max": picard_max, "picard_total": picard_total, "theta": theta,
                     "order": lattice.order, "dx": lattice.dx},
    )


# -- least-squares Monte Carlo ----------------------------------------------

def _bin_regression(x: np.ndarray, targets: np.ndarray, bins: int) -> np.ndarray:
    """Local linear fit on equal-count bins; ``targets`` has shape (k, M)."""
    M = x.size
    order = np.argsort(x, kind="stable")
    nb = max(1, min(bins, M // 4))
    edges = np.linspace(0, M, nb + 1).astype(np.int64)
    fitted = np.empty_like(targets)
    xs = x[order]
    ts = targets[:, order]
    for a, b in zip(edges[:-1], edges[1:]):
        xb = xs[a:b]
        m = xb.mean()
        sd = xb.std()
        if sd <= 1e-14 * max(1.0, abs(m)):
            fitted[:, order[a:b]] = ts[:, a:b].mean(axis=1, keepdims=True)
            continue
        u = (xb - m) / sd
        A = np.column_stack([np.ones_like(u), u])
        cond = np.linalg.cond(A)
        if cond > 1e10:
            raise BasisError(f"local regression condition number {cond:.3g} exceeds 1e10")
        coef, *_ = np.linalg.lstsq(A, ts[:, a:b].T, rcond=None)
        fitted[:, order[a:b]] = (A @ coef).T
    return fitted


def _poly_regression(x: np.ndarray, targets: np.ndarray, degree: int) -> tuple[np.ndarray, float]:
    sd = x.std()
    u = (x - x.mean()) / (sd if sd > 0 else 1.0)
    A = np.vander(u, degree + 1, increasing=True) if sd > 0 else np.ones((x.size, 1))
    cond = float(np.linalg.cond(A))
    if cond > 1e10:
        raise BasisError(f"polynomial regression condition number {cond:.3g} exceeds 1e10")
    coef, *_ = np.linalg.lstsq(A, targets.T, rcond=None)
    return (A @ coef).T, cond


def solve_lsmc(model: SdeModel, driver: DriverSpec, terminal: Callable, grid,
               ensemble: PathEnsemble, basis: str | int = "bins", bins: int = 50,
               theta: float = 0.5) -> BsdeSolution:
    """Regression-based backward induction on an uncontrolled path ensemble.

    ``basis`` is "bins" (local linear on equal-count bins) or an integer
    polynomial degree.
    """
    grid = _check_grid(grid)
    if ensemble.grid.shape != grid.shape or np.any(np.abs(ensemble.grid - grid) > 1e-12):
        raise ValueError("ensemble was simulated on a different grid")
    if model.degenerate:
        raise ModelBoundsError("solvers refuse degenerate (sigma = 0) models")
    _check_step(grid, driver.L)
    N = grid.size - 1
    X = ensemble.states[:, :, 0]
    dW = ensemble.dW[:, :, 0]
    M = X.shape[0]
    Y = np.asarray(terminal(X[:, N]), float)
    if not np.all(np.isfinite(Y)):
        raise DomainError("terminal function is undefined at some simulated states")
    Yall = np.empty((N + 1, M))
    Zall = np.zeros((N + 1, M))
    Yall[N] = Y
    cond_max = 1.0
    picard_max = 0
    se = 0.0
    realized = Y.copy()  # pathwise G + sum h psi, source of the standard error
    for i in range(N - 1, -1, -1):
        t, h = grid[i], grid[i + 1] - grid[i]
        xi = X[:, i]
        targets = np.vstack([Y, Y * dW[:, i] / h])
        if i == 0 or np.ptp(xi) == 0:
            fitted = np.repeat(targets.mean(axis=1, keepdims=True), M, axis=1)
        elif basis == "bins":
            fitted = _bin_regression(xi, targets, bins)
        else:
            fitted, cond = _poly_regression(xi, targets, int(basis))
            cond_max = max(cond_max, cond)
        E, V = fitted

        def psi(u, v, t=t, xi=xi):
            return driver(t, xi, u, v)

        Y, its, _ = _picard(E, V, h, theta, psi, driver.y_free)
        picard_max = max(picard_max, its)
        Yall[i], Zall[i] = Y, V
        realized = realized + (Y - E)
    if M > 1:
        se = float(realized.std(ddof=1) / np.sqrt(M))
    return BsdeSolution(
        grid=grid, steps=np.arange(N + 1), Y=Yall, Z=Zall, backend="lsmc", y0_se=se,
        diagnostics={"picard_max": picard_max, "cond_max": cond_max, "basis": basis,
                     "theta": theta, "M": M},
    )


def linear_closed_form(alpha: float, c: float, expected_terminal: float, duration: float) -> float:
    """Y for f = alpha y + beta z + c with constant coefficients.

    ``expected_terminal`` must already be taken under the beta-shifted measure
    (for beta = 0 it is the plain expectation).
    """
    growth = np.exp(alpha * duration)
    integral = duration if alpha == 0 else (growth - 1.0) / alpha
    return float(growth * expected_terminal + c * integral)
