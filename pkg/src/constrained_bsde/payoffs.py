"""Terminal payoff functions g."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("call", "put", "digital", "clamp", "linear", "constant", "tabulated")


@dataclass(frozen=True)
class PayoffSpec:
    """Scalar terminal function of the first state coordinate.

    ``domain`` restricts where g is defined; outside it the payoff evaluates
    to NaN and face-lift searches skip those points.
    """

    kind: str
    params: dict = field(default_factory=dict)
    bound: float = 1.0
    domain: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "tabulated":
            xs = np.asarray(self.params["x"], dtype=float)
            if xs.ndim != 1 or np.any(np.diff(xs) <= 0):
                raise ValueError("tabulated payoff needs strictly increasing x")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim >= 2 and x.shape[-1] == 1:
            x = x[..., 0]  # (..., 1) arrays from the d=1 simulators
        p = self.params
        k = self.kind
        if k == "call":
            out = np.maximum(x - p["strike"], 0.0)
        elif k == "put":
            out = np.maximum(p["strike"] - x, 0.0)
        elif k == "digital":
            if p.get("below", False):
                out = (x < p["strike"]).astype(float)
            else:
                out = (x > p["strike"]).astype(float)  # open set, so g stays lsc
        elif k == "clamp":
            out = np.clip(x, p["lo"], p["hi"])
        elif k == "linear":
            out = p.get("slope", 1.0) * x + p.get("intercept", 0.0)
        elif k == "constant":
            out = np.full(x.shape, float(p["value"]))
        else:
            out = _tabulated(x, np.asarray(p["x"], float), np.asarray(p["g"], float),
                             bool(p.get("lsc", False)))
        lo, hi = self.domain
        if np.isfinite(lo) or np.isfinite(hi):
            out = np.where((x >= lo) & (x <= hi), out, np.nan)
        return out

    def check_bound(self, window: tuple[float, float], points: int = 2001) -> float:
        """Largest |g| on the window; compare against ``bound``."""
        xs = np.linspace(window[0], window[1], points)
        vals = self(xs)
        return float(np.nanmax(np.abs(vals)))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, **{k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
                                   for k, v in self.params.items()}, "bound": self.bound}
        if np.isfinite(self.domain[0]) or np.isfinite(self.domain[1]):
            d["domain"] = [self.domain[0], self.domain[1]]
        return d


def _tabulated(x, xs, gs, lsc):
    if not lsc:
        out = np.interp(x, xs, gs)
    else:
        # step function, lower-semicontinuous at the knots
        idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 1)
        out = gs[idx]
        on_knot = np.isin(x, xs)
        if np.any(on_knot):
            k = np.searchsorted(xs, x[on_knot])
            left = gs[np.maximum(k - 1, 0)]
            out = out.copy()
            out[on_knot] = np.minimum(gs[k], left)
    return np.where((x >= xs[0]) & (x <= xs[-1]), out, np.nan)


def call(strike: float, bound: float = 1.0) -> PayoffSpec:
    return PayoffSpec("call", {"strike": strike}, bound)


def put(strike: float, bound: float = 1.0) -> PayoffSpec:
    return PayoffSpec("put", {"strike": strike}, bound)


def digital(strike: float, below: bool = False, domain=(-np.inf, np.inf)) -> PayoffSpec:
    return PayoffSpec("digital", {"strike": strike, "below": below}, 1.0, tuple(domain))


def clamp(lo: float, hi: float) -> PayoffSpec:
    return PayoffSpec("clamp", {"lo": lo, "hi": hi}, max(abs(lo), abs(hi)))


def linear(slope: float = 1.0, intercept: float = 0.0, bound: float = np.inf) -> PayoffSpec:
    return PayoffSpec("linear", {"slope": slope, "intercept": intercept}, bound)


def constant(value: float) -> PayoffSpec:
    return PayoffSpec("constant", {"value": value}, abs(value))


def tabulated(x, g, lsc: bool = False, bound: float | None = None) -> PayoffSpec:
    g = np.asarray(g, dtype=float)
    return PayoffSpec("tabulated", {"x": np.asarray(x, float), "g": g, "lsc": lsc},
                      float(np.max(np.abs(g))) if bound is None else bound)


def from_dict(d: dict) -> PayoffSpec:
    d = dict(d)
    kind = d.pop("kind")
    bound = d.pop("bound", None)
    domain = tuple(d.pop("domain", (-np.inf, np.inf)))
    if kind == "tabulated":
        d["x"] = np.asarray(d["x"], float)
        d["g"] = np.asarray(d["g"], float)
    spec = PayoffSpec(kind, d, 1.0 if bound is None else float(bound), domain)
    if bound is None:
        default = {"clamp": lambda: max(abs(d["lo"]), abs(d["hi"])),
                   "constant": lambda: abs(d["value"]),
                   "tabulated": lambda: float(np.max(np.abs(d["g"])))}.get(kind)
        if default is not None:
            spec = PayoffSpec(kind, d, float(default()), domain)
    return spec
