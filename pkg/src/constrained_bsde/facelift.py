"""Face-lift of a terminal payoff, ghat(x) = sup_u g(x + u) - delta_T(u).

The sup is taken by brute force over a finite grid of shifts u. When K_T
contains a centered ball of radius rho * s(T), any maximiser satisfies
|u| <= 2 L / (rho s(T)) because |g| <= L, so that radius certifies the search.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .constraints import ConstraintFamily, support_array
from .errors import InsufficientSearchRadiusError

_CHUNK = 1 << 22  # max (x, u) pairs evaluated at once


@dataclass
class FaceliftedPayoff:
    x_grid: np.ndarray | tuple[np.ndarray, ...]
    g_values: np.ndarray
    values: np.ndarray
    lipschitz_estimate: float
    search_radius: float
    residual_idempotence: float
    u_step: float
    certified: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.x_grid) if isinstance(self.x_grid, tuple) else 1

    def __call__(self, x) -> np.ndarray:
        """Linear interpolation of the tabulated face-lift (flat outside the grid)."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            if x.ndim >= 2 and x.shape[-1] == 1:
                x = x[..., 0]
            return np.interp(x, self.x_grid, self.values)
        interp = RegularGridInterpolator(self.x_grid, self.values, bounds_error=False,
                                         fill_value=None)
        return interp(x)

    def to_csv(self, path, extra_columns: dict | None = None) -> None:
        if self.dim != 1:
            raise ValueError("CSV export is only defined for d = 1")
        extra = extra_columns or {}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["x", "g", "ghat", *extra.keys()])
            for x, g, gh in zip(self.x_grid, self.g_values, self.values):
                w.writerow([repr(float(x)), repr(float(g)), repr(float(gh)), *extra.values()])


def certified_radius(family: ConstraintFamily, bound: float, t: float | None = None) -> float | None:
    """Sufficient search radius 2 L / (rho s(t)); None when rho = 0."""
    t = family.horizon if t is None else t
    rho = family.inner_radius() * family.scale(t)
    if rho <= 0:
        return None
    return 2.0 * bound / rho


def _grid_points(grid) -> tuple[np.ndarray, tuple[int, ...], list[np.ndarray]]:
    if isinstance(grid, (tuple, list)) and len(grid) > 0 and np.ndim(grid[0]) == 1:
        axes = [np.asarray(a, dtype=float) for a in grid]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        return pts, tuple(a.size for a in axes), axes
    arr = np.asarray(grid, dtype=float)
    return arr[:, None], (arr.size,), [arr]


def _steps(axes: list[np.ndarray]) -> list[float]:
    out = []
    for a in axes:
        d = np.diff(a)
        if a.size < 2 or np.ptp(d) > 1e-9 * max(1.0, abs(d[0])):
            raise ValueError("x grid must be uniform with at least two points")
        out.append(float((a[-1] - a[0]) / (a.size - 1)))  # less drift than d[0]
    return out


def _sup_convolution(func: Callable, x_pts: np.ndarray, u_pts: np.ndarray,
                     delta: np.ndarray) -> np.ndarray:
    dim = x_pts.shape[1]
    out = np.full(x_pts.shape[0], np.nan)
    rows = max(1, _CHUNK // max(1, u_pts.shape[0]))
    for start in range(0, x_pts.shape[0], rows):
        xs = x_pts[start:start + rows]
        shifted = xs[:, None, :] + u_pts[None, :, :]
        vals = func(shifted[..., 0] if dim == 1 else shifted)
        vals = vals - delta[None, :]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN rows stay NaN
            out[start:start + rows] = np.nanmax(vals, axis=1)
    return out


def _tabulated_function(axes: list[np.ndarray], values: np.ndarray) -> Callable:
    """Linear interpolant that is undefined (NaN) outside the tabulation window."""
    if len(axes) == 1:
        xs = axes[0]

        def f1(x):
            v = np.interp(x, xs, values)
            return np.where((x >= xs[0] - 1e-12) & (x <= xs[-1] + 1e-12), v, np.nan)
        return f1
    interp = RegularGridInterpolator(tuple(axes), values, bounds_error=False, fill_value=np.nan)
    return lambda x: interp(x)


def facelift(g: Callable, family: ConstraintFamily, x_grid, u_grid=None, *,
             radius: float | None = None, bound: float | None = None,
             t: float | None = None) -> FaceliftedPayoff:
    """Tabulate the face-lift of ``g`` under delta_t (t defaults to the horizon).

    ``x_grid`` is a uniform 1-d array, or a tuple of axes for d = 2. The shift
    grid defaults to step dx/2 over the certified radius; a supplied grid
    smaller than the certified radius is rejected.
    """
    t = family.horizon if t is None else t
    bound = getattr(g, "bound", 1.0) if bound is None else bound
    x_pts, shape, axes = _grid_points(x_grid)
    dim = x_pts.shape[1]
    if dim != family.dim:
        raise ValueError(f"x grid dimension {dim} does not match constraint dimension {family.dim}")
    steps = _steps(axes)

    r_cert = certified_radius(family, bound, t)
    certified = r_cert is not None
    if u_grid is None:
        if r_cert is None and radius is None:
            raise InsufficientSearchRadiusError(
                "constraint has no interior ball around 0; pass an explicit radius or u_grid")
        span = radius if radius is not None else r_cert
        u_axes = []
        for dx in steps:
            du = dx / 2.0
            k = int(np.ceil(span / du - 1e-9))
            u_axes.append(du * np.arange(-k, k + 1))
    else:
        u_axes = [np.asarray(a, float) for a in u_grid] if dim > 1 else [np.asarray(u_grid, float)]
    if any(a.size == 0 for a in u_axes):
        raise InsufficientSearchRadiusError("empty u grid")
    reach = min(min(-a.min(), a.max()) for a in u_axes)
    if certified and reach < r_cert - 1e-9:
        raise InsufficientSearchRadiusError(
            f"u grid reaches {reach:.6g} but the certified radius is {r_cert:.6g}")
    if not certified:
        warnings.warn("face-lift search radius is not certified for this constraint",
                      RuntimeWarning, stacklevel=2)
    u_step = float(min(np.min(np.diff(a)) if a.size > 1 else np.inf for a in u_axes))
    u_pts, _, _ = _grid_points(tuple(u_axes) if dim > 1 else u_axes[0])

    delta, finite = support_array(family, t, u_pts if dim > 1 else u_pts[:, 0])
    u_pts, delta = u_pts[finite], delta[finite]
    if u_pts.shape[0] == 0:
        raise InsufficientSearchRadiusError("no shift in the u grid has finite support value")

    g_vals = g(x_pts[:, 0] if dim == 1 else x_pts)
    fl = _sup_convolution(g, x_pts, u_pts, delta)

    fl_tab = _tabulated_function(axes, fl.reshape(shape))
    fl2 = _sup_convolution(fl_tab, x_pts, u_pts, delta)
    ok = np.isfinite(fl) & np.isfinite(fl2)
    resid = float(np.max(np.abs(fl2[ok] - fl[ok]))) if ok.any() else 0.0

    values = fl.reshape(shape)
    lip = 0.0
    for ax, dx in enumerate(steps):
        diffs = np.abs(np.diff(values, axis=ax)) / dx
        if np.isfinite(diffs).any():
            lip = max(lip, float(np.nanmax(diffs)))
    span_used = float(max(max(-a.min(), a.max()) for a in u_axes))
    return FaceliftedPayoff(
        x_grid=axes[0] if dim == 1 else tuple(axes),
        g_values=np.asarray(g_vals, float).reshape(shape),
        values=values,
        lipschitz_estimate=lip,
        search_radius=span_used,
        residual_idempotence=resid,
        u_step=u_step,
        certified=certified,
        meta={"certified_radius": r_cert, "t": t},
    )


def is_selffacelifted(x_grid: Sequence[float], v: Sequence[float], family: ConstraintFamily,
                      t: float, tol: float = 1e-9) -> tuple[bool, float]:
    """Max over grid pairs of (v(x+u) - delta_t(u) - v(x))^+ and whether it is <= tol."""
    x = np.asarray(x_grid, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.ndim != 1 or x.shape != v.shape:
        raise ValueError("x_grid and v must be matching 1-d arrays")
    resid = 0.0
    rows = max(1, _CHUNK // max(1, x.size))
    for start in range(0, x.size, rows):
        xi = x[start:start + rows]
        u = x[None, :] - xi[:, None]
        delta, finite = support_array(family, t, u.ravel())
        delta = np.where(finite, delta, np.inf).reshape(u.shape)
        gap = v[None, :] - delta - v[start:start + rows, None]
        resid = max(resid, float(np.max(gap, initial=0.0)))
    return resid <= tol, resid
