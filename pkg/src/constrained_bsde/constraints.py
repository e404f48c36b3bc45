"""Time-indexed convex constraint sets K_t = s(t) * K_base.

Support function, Euclidean projection and distance, plus a validation
report for the standing assumptions on the family (0 in K_t, bounded union,
support function non-increasing in t and left-continuous at the horizon).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DomainError, UnsupportedConstraintError


class _Unbounded:
    """Tagged +infinity returned by :func:`support` outside the effective domain."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNBOUNDED"

    def __reduce__(self):
        return (_Unbounded, ())


UNBOUNDED = _Unbounded()

ExtendedReal = Union[float, _Unbounded]


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("Box bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("Box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size


@dataclass(frozen=True)
class Ball:
    radius: float
    dim: int = 1

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError("Ball radius must be non-negative")


@dataclass(frozen=True)
class HalfLineCone:
    """The closed ray {lambda * direction, lambda >= 0}; only usable for face-lifts."""

    direction: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.direction, dtype=float))
        norm = np.linalg.norm(d)
        if norm == 0:
            raise ValueError("cone direction must be non-zero")
        object.__setattr__(self, "direction", d / norm)

    @property
    def dim(self) -> int:
        return self.direction.size


Base = Union[Box, Ball, HalfLineCone]


@dataclass(frozen=True)
class ShrinkSchedule:
    """Piecewise-linear scale factor s(t) tabulated on knots.

    A repeated final knot encodes a jump at the horizon, which the validator
    reports as a left-continuity failure.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 1:
            raise ValueError("shrink table needs matching 1-d times and values")
        if np.any(np.diff(t) < 0):
            raise ValueError("shrink knots must be sorted")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, horizon: float, value: float = 1.0) -> "ShrinkSchedule":
        return cls(np.array([0.0, horizon]), np.array([value, value]))

    @classmethod
    def from_function(cls, fn, horizon: float, knots: int = 65) -> "ShrinkSchedule":
        t = np.linspace(0.0, horizon, knots)
        return cls(t, np.array([fn(s) for s in t], dtype=float))

    def __call__(self, t: float) -> float:
        if t >= self.times[-1]:
            return float(self.values[-1])
        return float(np.interp(t, self.times, self.values))

    def left_limit(self, t: float, h: float) -> float:
        """Value at t - h, read off the segment left of t."""
        s = t - h
        # np.interp picks the right-most duplicate knot; restrict to knots < t
        mask = self.times < t
        if not mask.any():
            return float(self.values[0])
        return float(np.interp(s, self.times[mask], self.values[mask]))


@dataclass(frozen=True)
class ConstraintFamily:
    base: Base
    horizon: float = 1.0
    shrink: ShrinkSchedule | None = None

    def __post_init__(self):
        if self.shrink is None:
            object.__setattr__(self, "shrink", ShrinkSchedule.constant(self.horizon))

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def solver_admissible(self) -> bool:
        if isinstance(self.base, HalfLineCone):
            return False
        if isinstance(self.base, Box):
            b = self.base
            return bool(np.all(np.isfinite(b.lo)) and np.all(np.isfinite(b.hi))
                        and np.all(b.lo <= 0) and np.all(b.hi >= 0))
        return bool(np.isfinite(self.base.radius))

    def scale(self, t: float) -> float:
        _check_time(self, t)
        return self.shrink(t)

    def inner_radius(self) -> float:
        """Radius of the largest centered ball inside K_base (0 if none)."""
        b = self.base
        if isinstance(b, Box):
            return float(max(0.0, np.min(np.minimum(-b.lo, b.hi))))
        if isinstance(b, Ball):
            return float(b.radius)
        return 0.0

    def outer_radius(self) -> float:
        b = self.base
        if isinstance(b, Box):
            return float(np.linalg.norm(np.maximum(np.abs(b.lo), np.abs(b.hi))))
        if isinstance(b, Ball):
            return float(b.radius)
        return float("inf")

    def to_dict(self) -> dict:
        b = self.base
        if isinstance(b, Box):
            out = {"base": "box", "lo": b.lo.tolist(), "hi": b.hi.tolist()}
        elif isinstance(b, Ball):
            out = {"base": "ball", "radius": b.radius, "dim": b.dim}
        else:
            out = {"base": "cone", "direction": b.direction.tolist()}
        out["shrink"] = {"times": self.shrink.times.tolist(),
                         "values": self.shrink.values.tolist()}
        return out


def box(lo, hi, horizon: float = 1.0, shrink: ShrinkSchedule | None = None) -> ConstraintFamily:
    return ConstraintFamily(Box(lo, hi), horizon, shrink)


def ball(radius: float, dim: int = 1, horizon: float = 1.0,
         shrink: ShrinkSchedule | None = None) -> ConstraintFamily:
    return ConstraintFamily(Ball(radius, dim), horizon, shrink)


def half_line_cone(direction, horizon: float = 1.0) -> ConstraintFamily:
    return ConstraintFamily(HalfLineCone(direction), horizon)


def _check_time(family: ConstraintFamily, t: float) -> None:
    if not (0.0 <= t <= family.horizon):
        raise DomainError(f"time {t} outside [0, {family.horizon}]")


def _as_points(u, dim: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if dim == 1:
        # scalars and flat arrays are batches of 1-d points; (..., 1) is already shaped
        return u[..., None] if u.ndim < 2 or u.shape[-1] != 1 else u
    if u.ndim == 0 or u.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got {u.shape}")
    return u


def support_array(family: ConstraintFamily, t: float, u) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised support function over the leading axes of ``u``.

    Returns ``(values, finite)``; entries where ``finite`` is False are +infinity
    and their ``values`` slot holds 0.
    """
    s = family.scale(t)
    u = _as_points(u, family.dim)
    b = family.base
    if isinstance(b, Box):
        vals = s * np.maximum(u * b.lo, u * b.hi).sum(axis=-1)
        return vals, np.ones(vals.shape, dtype=bool)
    if isinstance(b, Ball):
        vals = s * b.radius * np.linalg.norm(u, axis=-1)
        return vals, np.ones(vals.shape, dtype=bool)
    proj = u @ b.direction
    finite = proj <= 0
    return np.zeros(proj.shape), finite


def support(family: ConstraintFamily, t: float, u) -> ExtendedReal:
    """delta_t(u) = sup {k.u : k in K_t}; UNBOUNDED when the sup is infinite."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise DomainError("u must be finite")
    vals, finite = support_array(family, t, u.reshape(-1) if u.ndim <= 1 else u)
    if not finite.ravel()[0]:
        return UNBOUNDED
    return float(vals.ravel()[0])


def project(family: ConstraintFamily, t: float, z) -> np.ndarray:
    """Euclidean projection onto K_t (Box and Ball bases only)."""
    if not family.solver_admissible:
        raise UnsupportedConstraintError(
            f"projection needs a bounded Box or Ball base, got {type(family.base).__name__}")
    s = family.scale(t)
    z = _as_points(z, family.dim)
    b = family.base
    if isinstance(b, Box):
        return np.clip(z, s * b.lo, s * b.hi)
    r = s * b.radius
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    factor = np.where(norm > r, r / np.where(norm > 0, norm, 1.0), 1.0)
    return z * factor


def distance(family: ConstraintFamily, t: float, z) -> np.ndarray | float:
    z_arr = _as_points(z, family.dim)
    d = np.linalg.norm(z_arr - project(family, t, z_arr), axis=-1)
    return float(d.ravel()[0]) if d.size == 1 and np.ndim(z) <= 1 else d


def distance_scalar_batch(family: ConstraintFamily, t: float, z: np.ndarray) -> np.ndarray:
    """Distance for a 1-d family evaluated on a flat array (hot loop helper)."""
    s = family.scale(t)
    b = family.base
    if isinstance(b, Box):
        lo, hi = s * b.lo[0], s * b.hi[0]
        return np.maximum(z - hi, 0.0) + np.maximum(lo - z, 0.0)
    if isinstance(b, Ball):
        return np.maximum(np.abs(z) - s * b.radius, 0.0)
    raise UnsupportedConstraintError("distance needs a Box or Ball base")


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    details: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def failed(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]


def validate(family: ConstraintFamily) -> ValidationReport:
    """Check the standing assumptions; never raises."""
    rep = ValidationReport()
    b = family.base
    try:
        if isinstance(b, Box):
            ok = bool(np.all(b.lo <= 0) and np.all(b.hi >= 0))
        else:
            ok = True  # ball and ray both contain the origin
        rep.checks["contains_zero"] = ok
        rep.details["contains_zero"] = "0 in K_base" if ok else "0 not in K_base"

        bounded = family.solver_admissible or (
            isinstance(b, Box) and bool(np.all(np.isfinite(b.lo)) and np.all(np.isfinite(b.hi))))
        rep.checks["bounded"] = bool(bounded and not isinstance(b, HalfLineCone))
        rep.details["bounded"] = f"outer radius {family.outer_radius():.6g}"

        vals = family.shrink.values
        rep.checks["shrink_non_increasing"] = bool(np.all(np.diff(vals) <= 1e-15))
        rep.checks["shrink_positive"] = bool(np.all(vals > 0) and np.all(vals <= 1 + 1e-15))
        rep.details["shrink_non_increasing"] = f"max increment {np.max(np.diff(vals), initial=0.0):.3g}"

        T = family.horizon
        sT = family.shrink(T)
        gaps = [abs(sT - family.shrink.left_limit(T, T * 2.0 ** -k)) for k in range(4, 31)]
        rep.checks["left_continuous_at_T"] = bool(gaps[-1] <= 1e-8)
        rep.details["left_continuous_at_T"] = f"|s(T)-s(T-h)| at finest h: {gaps[-1]:.3g}"
    except Exception as exc:  # report object, never throws
        rep.checks["internal"] = False
        rep.details["internal"] = repr(exc)
    return rep
