import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from constrained_bsde import bsde as B
from constrained_bsde import constraints as C
from constrained_bsde import payoffs as P
from constrained_bsde import penalization as PEN
from constrained_bsde import sde
from constrained_bsde.errors import StepSizeError, UnsupportedConstraintError

from conftest import CLAMP_HALF, DIGITAL_HALF

BM = sde.brownian()
BOX1 = C.box([-1.0], [1.0], 1.0)
HUGE = C.box([-1e3], [1e3], 1.0)


def _aligned(N):
    return np.linspace(0.0, 1.0, N + 1), B.make_lattice(BM, 0.5, 1.0, 1.0 / N, order=3)


def test_zero_penalty_is_the_plain_solve():
    grid, lat = _aligned(48)
    run = PEN.solve_penalized(BM, B.zero_driver(), P.digital(1.0), BOX1, 0, grid, lattice=lat)
    ref = B.solve_lattice(BM, B.zero_driver(), P.digital(1.0), grid, lat, theta=1.0)
    np.testing.assert_array_equal(run.solution.Y, ref.Y)


def test_huge_box_never_activates():
    # strike on a cell midpoint; a node on the jump costs O(dx)
    grid = np.linspace(0.0, 1.0, 769)
    lat = B.make_lattice(BM, 0.5, 1.0, 1.0 / 768, order=3, midpoint_at=1.0)
    run = PEN.solve_penalized(BM, B.zero_driver(), P.digital(1.0), HUGE, 16, grid, lattice=lat)
    ref = B.solve_lattice(BM, B.zero_driver(), P.digital(1.0), grid, lat, theta=1.0)
    assert np.max(np.abs(run.solution.Y - ref.Y)) <= 1e-6
    assert run.K_increment_max.max() == 0.0
    assert abs(run.solution.value(0.0, 0.5) - DIGITAL_HALF) < 1e-2


def test_step_rules_are_enforced():
    grid, lat = _aligned(48)
    with pytest.raises(StepSizeError):
        PEN.solve_penalized(BM, B.zero_driver(), P.digital(1.0), BOX1, 64, grid, lattice=lat)
    with pytest.raises(UnsupportedConstraintError):
        PEN.solve_penalized(BM, B.zero_driver(), P.digital(1.0), C.half_line_cone([1.0]), 4,
                            grid, lattice=lat)


def test_stable_step_and_schedule():
    assert PEN.stable_step(3, 4, 1.0, 0.0) == pytest.approx(1 / 48)
    steps = PEN.joint_schedule(BM, B.zero_driver(), [4, 16, 64, 256], 1.0, 1.0)
    assert steps == [48, 768, 12288, 196608]
    assert all(b % a == 0 for a, b in zip(steps, steps[1:]))


@settings(max_examples=12)
@given(n1=st.integers(0, 6), dn=st.integers(1, 6), k=st.floats(0.2, 1.5))
def test_monotone_in_n_on_a_shared_grid(n1, dn, k):
    n2 = n1 + dn
    N = 3 * n2 * n2 + 3
    grid, lat = _aligned(N)
    g = P.digital(k)
    y1 = PEN.solve_penalized(BM, B.zero_driver(), g, BOX1, n1, grid, lattice=lat).solution.Y
    y2 = PEN.solve_penalized(BM, B.zero_driver(), g, BOX1, n2, grid, lattice=lat).solution.Y
    assert np.all(y2 - y1 >= -1e-10)


def test_compensator_increments_are_nonnegative():
    grid, lat = _aligned(768)
    run = PEN.solve_penalized(BM, B.zero_driver(), P.digital(1.0), BOX1, 16, grid, lattice=lat)
    assert np.all(run.K_increment_max >= 0)


def test_interior_compensator_halves_with_h():
    ks = {}
    for N in (1536, 3072):
        grid, lat = _aligned(N)
        run = PEN.solve_penalized(BM, B.zero_driver(), P.digital(1.0), BOX1, 16, grid,
                                  lattice=lat)
        ks[N] = run.K_increment_max, grid
    # on [0, T/2] the constraint never binds for this fixture
    for kinc, grid in ks.values():
        assert kinc[grid[:-1] <= 0.5].max() == 0.0
    # where it does bind, per-step increments scale with h
    a = ks[1536][0][ks[1536][1][:-1] <= 0.96].max()
    b = ks[3072][0][ks[3072][1][:-1] <= 0.96].max()
    assert 0.35 <= b / a <= 0.65


def test_levels_increase_toward_the_oracle(digital_box):
    diag = digital_box["minimal"].diag
    ys = [lv.y0 for lv in diag.levels]
    assert all(b > a for a, b in zip(ys, ys[1:]))
    assert ys[-1] <= CLAMP_HALF + 1e-3
    assert diag.converged and abs(ys[-1] - CLAMP_HALF) < 1e-2


def test_violation_audit_final_level(digital_box):
    last = digital_box["minimal"].diag.levels[-1]
    assert last.violation_fraction < 0.05


def test_terminal_jump_reads_the_facelift(digital_box, digital_box_ghat):
    ms = digital_box["minimal"]
    sol = ms.solution
    n = ms.diag.levels[-1].n
    N = sol.N
    # step back past the 1/n boundary layer of the penalized solution
    off = [k for k in (N // 2 ** j for j in range(12)) if k / N >= 2.0 / n][-1]
    tj = PEN.terminal_jump(sol, digital_box["g"], digital_box_ghat, offset_steps=off)
    i = int(np.argmin(np.abs(sol.x - 0.5)))
    assert abs(tj["jump"][i] - 0.5) < 0.05          # Y(T-h, 0.5) is near ghat(0.5) = 0.5
    assert abs(sol.row(N - off)[i] - 0.0) > 0.4     # and far from g(0.5) = 0


def test_terminal_jump_vanishes_for_a_lifted_payoff():
    grid, lat = _aligned(3 * 16 * 16)
    g = P.clamp(0.0, 1.0)
    run = PEN.solve_penalized(BM, B.zero_driver(), g, BOX1, 16, grid, lattice=lat)
    errs = [PEN.terminal_jump(run.solution, g, g, offset_steps=k)["max_abs_error"]
            for k in (48, 12, 3)]
    assert errs[0] > errs[1] > errs[2]


def test_unconstrained_minimal_converges_immediately():
    ms = PEN.solve_minimal(BM, B.zero_driver(), P.clamp(0.0, 1.0), HUGE, 0.5,
                           levels=(4, 16, 64))
    assert ms.diag.converged and len(ms.diag.levels) == 2
    assert not ms.diag.terminal_layer_flag
    assert ms.y0 == pytest.approx(CLAMP_HALF, abs=1e-3)


def test_exhausted_schedule_is_reported():
    ms = PEN.solve_minimal(BM, B.zero_driver(), P.digital(1.0), BOX1, 0.5, levels=(1, 2),
                           stop_tol=1e-6)
    assert not ms.diag.converged and "exhausted" in ms.diag.message


def test_diag_serialises(digital_box):
    d = json.loads(digital_box["minimal"].diag.to_json())
    assert d["monotone"] and len(d["levels"]) == len(digital_box["minimal"].runs)
    assert math.isfinite(d["final_delta"])
