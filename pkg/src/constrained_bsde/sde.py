"""Euler-Maruyama simulation of the (optionally drift-controlled) forward SDE.

Brownian increments come from a counter-based Philox stream keyed by the
seed. Path p owns a fixed block of counters, so any subset of paths can be
regenerated independently and the result does not depend on chunking or on
the number of workers.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .errors import ModelBoundsError

Coef = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SdeModel:
    """Coefficients b(t, x) -> [..., d] and sigma(t, x) -> [..., d, d].

    ``constant_vol`` marks sigma independent of x, which is what the direct
    constraint mode requires. ``degenerate`` allows sigma = 0 for test
    fixtures; solvers refuse such models in gains mode.
    """

    drift: Coef
    vol: Coef
    L: float
    dim: int = 1
    mode: str = "gains"
    constant_vol: bool = False
    degenerate: bool = False
    autonomous: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("gains", "direct"):
            raise ValueError("mode must be 'gains' or 'direct'")
        if self.mode == "direct" and not self.constant_vol:
            raise ModelBoundsError("direct constraint mode needs sigma independent of x")

    def sigma_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.vol(t, x), dtype=float)

    def scalar_vol(self, t: float = 0.0, x: float = 0.0) -> float:
        """sigma for d = 1 at a point."""
        return float(self.sigma_at(t, np.array([[x]], dtype=float)).reshape(-1)[0])

    def inverse_vol_bound(self) -> float:
        """Operator-norm bound of sigma^{-1} used by the penalty Lipschitz constant."""
        if self.degenerate:
            return float("inf")
        return self.L

    def to_dict(self) -> dict:
        return {"name": self.name, "L": self.L, "dim": self.dim, "mode": self.mode,
                **self.params}


def brownian(sigma: float = 1.0, drift: float = 0.0, L: float | None = None,
             mode: str = "gains", degenerate: bool = False) -> SdeModel:
    if L is None:
        L = abs(drift) + abs(sigma) + (1.0 / abs(sigma) if sigma else 0.0)
    return SdeModel(
        drift=lambda t, x: np.full_like(x, drift, dtype=float),
        vol=lambda t, x: np.full(x.shape + (1,), sigma, dtype=float),
        L=L, dim=1, mode=mode, constant_vol=True, degenerate=degenerate, autonomous=True,
        name="brownian", params={"sigma": sigma, "drift": drift},
    )


def ornstein_uhlenbeck(kappa: float = 1.0, sigma: float = 1.0, L: float = 5.0,
                       mode: str = "gains") -> SdeModel:
    """dX = -kappa X dt + sigma dW. The drift is unbounded, so L only holds on the probe window."""
    return SdeModel(
        drift=lambda t, x: -kappa * x,
        vol=lambda t, x: np.full(x.shape + (1,), sigma, dtype=float),
        L=L, dim=1, mode=mode, constant_vol=True, autonomous=True,
        name="ornstein_uhlenbeck", params={"kappa": kappa, "sigma": sigma},
    )


def probe(model: SdeModel, window: tuple[float, float] = (-2.0, 2.0), horizon: float = 1.0,
          samples: int = 64, seed: int = 0) -> None:
    """Spot-check the declared bounds; raises ModelBoundsError on violation."""
    rng = np.random.default_rng(seed)
    d = model.dim
    ts = rng.uniform(0.0, horizon, samples)
    xs = rng.uniform(window[0], window[1], (samples, d))
    xs2 = xs + rng.normal(0.0, 0.1, (samples, d))
    L = model.L * (1 + 1e-12)
    for t, x, x2 in zip(ts, xs, xs2):
        b = np.asarray(model.drift(t, x[None, :]))[0]
        s = model.sigma_at(t, x[None, :])[0]
        total = np.linalg.norm(b) + np.linalg.norm(s, 2)
        if model.mode == "gains":
            if model.degenerate:
                continue
            total += np.linalg.norm(np.linalg.inv(s), 2)
        if total > L:
            raise ModelBoundsError(f"|b|+|sigma|+|sigma^-1| = {total:.4g} exceeds L = {model.L} at x={x}")
        b2 = np.asarray(model.drift(t, x2[None, :]))[0]
        s2 = model.sigma_at(t, x2[None, :])[0]
        dx = np.linalg.norm(x - x2)
        if np.linalg.norm(b - b2) > L * dx or np.linalg.norm(s - s2, 2) > L * dx:
            raise ModelBoundsError(f"Lipschitz probe failed near x={x}")


# -- counter-based normals ---------------------------------------------------

def _block(N: int, d: int) -> int:
    """Counters (64-bit draws) reserved per path, rounded to Philox's 4-word blocks."""
    return -(-N * d // 4) * 4


def gaussian_increments(seed: int, first_path: int, paths: int, N: int, d: int) -> np.ndarray:
    """Standard normals for paths [first_path, first_path + paths), shape (paths, N, d)."""
    S = _block(N, d)
    bg = np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    bg = bg.advance(first_path * S // 4)
    raw = bg.random_raw(paths * S).reshape(paths, S)[:, :N * d]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u).reshape(paths, N, d)


@dataclass
class PathEnsemble:
    M: int
    grid: np.ndarray
    states: np.ndarray  # (M, N+1, d)
    dW: np.ndarray      # (M, N, d)
    seed: int
    control_applied: object = None

    @property
    def N(self) -> int:
        return self.grid.size - 1

    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def to_csv(self, path, max_paths: int | None = None) -> None:
        """Debug dump with columns path, step, x0..x{d-1}."""
        d = self.states.shape[2]
        m = self.M if max_paths is None else min(self.M, max_paths)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["path", "step", *[f"x{k}" for k in range(d)]])
            for p in range(m):
                for i in range(self.N + 1):
                    w.writerow([p, i, *[repr(float(v)) for v in self.states[p, i]]])


def _control_drift(control, model: SdeModel, i: int, t: float, x: np.ndarray) -> np.ndarray:
    if control is None:
        return np.zeros_like(x)
    nu = control.value(i, x)
    if model.mode == "direct":
        s = model.sigma_at(t, x)
        return np.einsum("...ij,...j->...i", s, nu)
    return nu


def _euler_chunk(model: SdeModel, x0: np.ndarray, grid: np.ndarray, control, start: int,
                 z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m, N, d = z.shape
    h = np.diff(grid)
    dW = z * np.sqrt(h)[None, :, None]
    X = np.empty((m, N + 1, d))
    X[:, 0, :] = x0
    for i in range(N):
        t = grid[i]
        x = X[:, i, :]
        s = model.sigma_at(t, x)
        drift = np.asarray(model.drift(t, x), float) + _control_drift(control, model, i, t, x)
        X[:, i + 1, :] = x + drift * h[i] + np.einsum("...ij,...j->...i", s, dW[:, i, :])
    return X, dW


def simulate(model: SdeModel, x0, t0: float, control, grid, M: int, seed: int,
             workers: int = 1, chunk: int = 8192) -> PathEnsemble:
    """Simulate M Euler paths on ``grid`` (starting at t0, which must be grid[0])."""
    grid = np.asarray(grid, dtype=float)
    if M < 1:
        raise ValueError("M must be at least 1")
    if abs(grid[0] - t0) > 1e-12:
        raise ValueError("t0 must equal the first grid time")
    d = model.dim
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,)).copy()
    N = grid.size - 1
    starts = list(range(0, M, chunk))

    def run(s):
        m = min(chunk, M - s)
        z = gaussian_increments(seed, s, m, N, d)
        return _euler_chunk(model, x0, grid, control, s, z)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    states = np.concatenate([p[0] for p in parts], axis=0)
    dW = np.concatenate([p[1] for p in parts], axis=0)
    return PathEnsemble(M=M, grid=grid, states=states, dW=dW, seed=seed, control_applied=control)


class _ImpulseControl:
    """nu = u / eps on every step (the whole grid spans [t0, t0 + eps])."""

    def __init__(self, u: np.ndarray):
        self.u = u

    def value(self, i, x):
        return np.broadcast_to(self.u, x.shape)


def impulse_error(model: SdeModel, x0, u, eps: float, M: int, seed: int,
                  t0: float = 0.0, steps: int = 32) -> float:
    """Mean-square distance between X_{t0+eps} under nu = u/eps and the jump target x0 + u."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = model.dim
    u = np.broadcast_to(np.asarray(u, dtype=float).reshape(-1), (d,))
    grid = t0 + np.linspace(0.0, eps, steps + 1)
    ens = simulate(model, x0, t0, _ImpulseControl(u / eps), grid, M, seed)
    target = np.asarray(x0, float).reshape(-1) + u
    return float(np.mean(np.sum((ens.terminal() - target) ** 2, axis=-1)))
