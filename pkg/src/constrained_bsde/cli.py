"""Command line driver: facelift, solve, dual and verify subcommands.

Exit codes: 0 success (or an inconclusive verification), 1 a verification
check failed, 2 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import regularity as reg
from .bsde import make_lattice, solve_lattice
from .constraints import validate
from .dual import ControlPolicy, evaluate_control, strong_dual_value, weak_dual_value
from .errors import ConstrainedBsdeError
from .facelift import facelift
from .penalization import solve_minimal
from .sde import simulate

EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2


def _clean(obj):
    return reg._clean(obj)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, columns: list[str], rows, hdr: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns + ["config_hash", "artifact_version"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r] + [hdr["config_hash"], hdr["artifact_version"]])


class _Run:
    """Resolved config plus the built objects every subcommand needs."""

    def __init__(self, cfg: dict, out: Path, workers: int):
        self.cfg = cfg
        self.out = out
        self.workers = workers
        self.hdr = cfgmod.header(cfg)
        self.model = cfgmod.build_model(cfg)
        self.driver = cfgmod.build_driver(cfg)
        self.g = cfgmod.build_payoff(cfg)
        self.family = cfgmod.build_constraint(cfg)
        self.x0 = float(cfg["x0"])
        self.T = float(cfg["grid"]["T"])
        self.timing: dict[str, float] = {}
        # unbounded cones are fine for the face-lift; the solvers reject them themselves
        failed = [k for k in validate(self.family).failed() if k != "bounded"]
        if failed:
            raise cfgmod.ConfigError(f"constraint family fails validation: {failed}")

    def tick(self, name: str, start: float) -> None:
        self.timing[name] = round(time.perf_counter() - start, 3)

    def write_runtime(self) -> None:
        # wall-clock lives apart from the reproducible outputs
        _write_json(self.out / "runtime.json", {"header": self.hdr, "seconds": self.timing})

    def facelift_table(self, x_grid=None):
        fl_cfg = self.cfg["facelift"]
        if x_grid is None:
            dx = float(fl_cfg["dx"])
            hw = float(fl_cfg["half_width"])
            lo = self.x0 - hw if fl_cfg["x_min"] is None else float(fl_cfg["x_min"])
            k = int(round((self.x0 + hw - lo) / dx))
            x_grid = lo + dx * np.arange(k + 1)
        radius = fl_cfg["radius"]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            fl = facelift(self.g, self.family, x_grid, radius=radius)
        fl.meta["warnings"] = sorted({str(w.message) for w in caught})
        return fl

    def minimal(self):
        pen = self.cfg["penalty"]
        return solve_minimal(self.model, self.driver, self.g, self.family, self.x0, self.T,
                             levels=pen["levels"], stop_tol=pen["stop_tol"],
                             width=self.cfg["backend"]["width"], steps=pen["steps"])


# -- subcommands -----------------------------------------------------------------

def cmd_facelift(run: _Run) -> int:
    t = time.perf_counter()
    fl = run.facelift_table()
    run.tick("facelift", t)
    fl.to_csv(run.out / "facelift.csv", extra_columns=run.hdr)
    bound = 2.0 * fl.u_step * fl.lipschitz_estimate
    _write_json(run.out / "facelift.json", {
        "header": run.hdr, "residual_idempotence": fl.residual_idempotence,
        "idempotence_bound": bound, "idempotent": fl.residual_idempotence <= bound + 1e-12,
        "lipschitz_estimate": fl.lipschitz_estimate, "search_radius": fl.search_radius,
        "u_step": fl.u_step, "certified": fl.certified, "meta": fl.meta,
        "constraint": run.family.to_dict(), "payoff": run.g.to_dict()})
    return EXIT_OK


def _surface_rows(sol, x0: float, half: float, max_times: int = 33, max_nodes: int = 201):
    times = sol.times()
    k = np.unique(np.linspace(0, times.size - 1, min(max_times, times.size)).round().astype(int))
    sel = np.nonzero(np.abs(sol.x - x0) <= half)[0]
    stride = max(1, math.ceil(sel.size / max_nodes))
    sel = sel[::stride]
    for j in k:
        for i in sel:
            yield times[j], sol.x[i], sol.Y[j][i], sol.Z[j][i]


def cmd_solve(run: _Run) -> int:
    t = time.perf_counter()
    ms = run.minimal()
    run.tick("penalized_levels", t)
    sol = ms.solution
    t = time.perf_counter()
    ref = solve_lattice(run.model, run.driver, run.g, sol.grid, _lattice_of(run, ms), theta=1.0,
                        steps_to_keep=[0])
    run.tick("unconstrained_reference", t)
    payload = {"header": run.hdr, "fixture": run.cfg["fixture"], "y0": ms.y0,
               "unconstrained_y0": float(np.interp(run.x0, ref.x, ref.row(0))),
               "diagnostics": ms.diag.to_dict()}
    _write_json(run.out / "convergence.json", payload)
    half = 4.0 * abs(run.model.scalar_vol(0.0, run.x0)) * math.sqrt(run.T)
    _write_csv(run.out / "surface.csv", ["t", "x", "y", "z"],
               _surface_rows(sol, run.x0, half), run.hdr)
    return EXIT_OK


def _lattice_of(run: _Run, ms):
    # the same aligned lattice the last penalty level ran on
    N = ms.solution.N
    return make_lattice(run.model, run.x0, run.T, run.T / N, order=3,
                        width=run.cfg["backend"]["width"])


def cmd_dual(run: _Run) -> int:
    c = run.cfg["control"]
    N = int(run.cfg["grid"]["N"])
    grid = np.linspace(0.0, run.T, N + 1)
    nu_max = 8.0 * run.model.L if c["nu_max"] is None else float(c["nu_max"])
    cands = None if c["candidates"] is None else np.asarray(c["candidates"], float)
    if cands is None:
        cands = np.linspace(-nu_max, nu_max, int(c["points"]))
    if cands.size == 0:
        raise cfgmod.ConfigError("control.candidates is empty")
    reach = max(nu_max, float(np.max(np.abs(cands))))
    lat = make_lattice(run.model, run.x0, run.T, run.T / N, width=6.0 + reach * math.sqrt(run.T),
                       midpoint_at=run.cfg["backend"]["midpoint_at"])
    t = time.perf_counter()
    ghat = run.facelift_table(lat.x)
    run.tick("facelift", t)
    t = time.perf_counter()
    res = strong_dual_value(run.model, run.driver, run.g, run.family, run.x0, grid,
                            search=c["search"], candidates=cands, nu_max=nu_max, ghat=ghat,
                            lattice=lat, sweeps=c["sweeps"])
    run.tick("dual_search", t)
    payload = {"header": run.hdr, "fixture": run.cfg["fixture"], "N": N,
               "candidates": cands.tolist(), **res.to_dict()}
    payload.pop("policy")
    payload.pop("policy_ghat")
    conv = run.out / "convergence.json"
    if conv.exists():
        primal = json.loads(conv.read_text(encoding="utf-8"))
        if primal.get("header", {}).get("config_hash") == run.hdr["config_hash"]:
            payload["primal_y0"] = primal["y0"]
            payload["dual_minus_primal"] = res.value - primal["y0"]
    if c["weak"]:
        t = time.perf_counter()
        payload["weak"] = _weak_check(run, grid, lat, nu_max, int(c["policies"]),
                                      int(c["policy_pieces"]), int(c["M"]))
        run.tick("weak_check", t)
    _write_json(run.out / "dual.json", payload)
    _write_json(run.out / "policy.json", {"header": run.hdr, "policy": res.policy.to_dict(),
                                          "policy_ghat": None if res.policy_ghat is None
                                          else res.policy_ghat.to_dict()})
    return EXIT_OK


def _weak_check(run: _Run, grid, lat, nu_max: float, count: int, pieces: int, M: int) -> list:
    rng = np.random.default_rng(int(run.cfg["seed"]))
    ens = simulate(run.model, run.x0, 0.0, None, grid, M, int(run.cfg["seed"]),
                   workers=run.workers)
    N = grid.size - 1
    cuts = np.linspace(0, N, pieces + 1).round().astype(int)
    rows = []
    for _ in range(count):
        levels = rng.uniform(-nu_max, nu_max, pieces)
        vals = np.repeat(levels, np.diff(cuts))
        pol = ControlPolicy(grid, vals, nu_max)
        strong = evaluate_control(run.model, run.driver, run.g, run.family, pol, run.x0,
                                  lattice=lat)
        weak, se = weak_dual_value(run.model, run.driver, run.g, run.family, pol, ens)
        rows.append({"levels": levels.tolist(), "strong": strong, "weak": weak, "se": se,
                     "z_score": abs(weak - strong) / se if se > 0 else None})
    return rows


def cmd_verify(run: _Run) -> int:
    v = run.cfg["verify"]
    t = time.perf_counter()
    ms = run.minimal()
    run.tick("penalized_levels", t)
    sol = ms.solution
    sigma = abs(run.model.scalar_vol(0.0, run.x0))
    report = reg.RegularityReport(meta={**run.hdr, "fixture": run.cfg["fixture"],
                                        "y0": ms.y0, "converged": ms.diag.converged,
                                        "monotone": ms.diag.monotone,
                                        "levels": [r.n for r in ms.diag.levels]})
    t = time.perf_counter()
    hw = float(v["space_half_width"])
    xs = run.x0 + np.linspace(-hw, hw, int(v["space_points"]))
    for ts in v["space_times"]:
        report.space.append(reg.space_modulus(sol, run.family, float(ts) * run.T, xs))
    for x in ([run.x0] if v["time_x"] is None else v["time_x"]):
        report.time.append(reg.time_modulus(sol, float(x), v["time_separations"]))
    n_last = ms.diag.levels[-1].n
    # an inactive penalty leaves no terminal layer to step over
    min_h = float(v["terminal_min_h_factor"]) / n_last if ms.diag.terminal_layer_flag else 0.0
    thw = float(v["terminal_half_width"]) * sigma * math.sqrt(run.T)
    window = (run.x0 - thw, run.x0 + thw)
    comp = [(r.solution.grid, r.K_increment_max) for r in ms.runs]
    if v["reference"] == "ghat":
        ghat = run.facelift_table(sol.x) if run.family.solver_admissible else None
        report.terminal.append(reg.terminal_limit(sol, ghat, run.g, min_h=min_h, window=window,
                                                  compensator_runs=comp))
    elif v["reference"] == "g":
        # deliberately wrong reference: the harness must reject it
        report.terminal.append(reg.terminal_limit(sol, run.g, None, min_h=min_h, window=window))
    else:
        raise cfgmod.ConfigError("verify.reference must be 'ghat' or 'g'")
    run.tick("checks", t)
    t = time.perf_counter()
    reg.emit_report(report, run.out, extra_columns=run.hdr)
    run.tick("emit", t)
    return EXIT_FAIL if report.status == reg.FAIL else EXIT_OK


COMMANDS = {"facelift": cmd_facelift, "solve": cmd_solve, "dual": cmd_dual, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="constrained-bsde",
                                description="Constrained BSDE experiments on one-dimensional "
                                            "diffusions.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--fixture", choices=sorted(cfgmod.FIXTURES), help="named fixture")
        s.add_argument("--out", help="output directory (overrides config 'output')")
        s.add_argument("--seed", type=int, help="Monte Carlo seed (overrides config 'seed')")
        s.add_argument("--workers", type=int, default=1,
                       help="threads for path simulation; results do not depend on it")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config, args.fixture)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["output"] = args.out
        if args.workers < 1:
            raise cfgmod.ConfigError("--workers must be at least 1")
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        run = _Run(cfg, out, args.workers)
        code = COMMANDS[args.command](run)
        run.write_runtime()
    except (ConstrainedBsdeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return code


if __name__ == "__main__":
    sys.exit(main())
