import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from constrained_bsde import bsde as B
from constrained_bsde import constraints as C
from constrained_bsde import payoffs as P
from constrained_bsde import sde
from constrained_bsde.dual import (ControlPolicy, dpp_residual, evaluate_control,
                                   strong_dual_value, weak_dual_value)
from constrained_bsde.errors import UnsupportedConstraintError

from conftest import CLAMP_HALF, DIGITAL_HALF

BM = sde.brownian()
BOX1 = C.box([-1.0], [1.0], 1.0)
HUGE = C.box([-1e3], [1e3], 1.0)
GRID = np.linspace(0.0, 1.0, 101)

# E[clamp(m + Z, 0, 1)], Z standard normal, by adaptive quadrature
CLAMP_AT = {0.8: 0.6133125980314891, 0.5: 0.5000000000000002, 0.2: 0.38668740196851126}


def _lat(N=200, mid=None):
    return B.make_lattice(BM, 0.5, 1.0, 1.0 / N, width=8.0, order=8, midpoint_at=mid)


def test_zero_control_is_the_unconstrained_value():
    grid = np.linspace(0.0, 1.0, 201)
    lat = _lat(mid=1.0)
    v = evaluate_control(BM, B.zero_driver(), P.digital(1.0), BOX1,
                         ControlPolicy.constant(grid, 0.0, 2.0), 0.5, lattice=lat)
    ref = B.solve_lattice(BM, B.zero_driver(), P.digital(1.0), grid, lat).value(0.0, 0.5)
    assert v == pytest.approx(ref, abs=1e-12)
    assert abs(v - DIGITAL_HALF) < 1e-3


@pytest.mark.parametrize("c", [0.3, 0.0, -0.3])
def test_deterministic_control_matches_quadrature(c):
    grid = np.linspace(0.0, 1.0, 201)
    v = evaluate_control(BM, B.zero_driver(), P.clamp(0.0, 1.0), BOX1,
                         ControlPolicy.constant(grid, c, 2.0), 0.5, lattice=_lat())
    expected = CLAMP_AT[round(0.5 + c, 10)] - abs(c)
    assert v == pytest.approx(expected, abs=1e-3)
    assert v <= CLAMP_HALF + 1e-3


def test_constant_controls_stay_below_the_minimal_solution(digital_box):
    y = digital_box["minimal"].y0
    grid = np.linspace(0.0, 1.0, 201)
    for c in (-1.0, -0.5, 0.0, 0.5, 1.0):
        v = evaluate_control(BM, B.zero_driver(), P.digital(1.0), BOX1,
                             ControlPolicy.constant(grid, c, 2.0), 0.5, lattice=_lat(mid=1.0))
        assert v <= y + 1e-3


def test_huge_box_best_control_is_zero():
    r = strong_dual_value(BM, B.zero_driver(), P.clamp(0.0, 1.0), HUGE, 0.5, GRID, nu_max=2.0,
                          search="deterministic")
    assert r.value == pytest.approx(CLAMP_HALF, abs=1e-6)
    np.testing.assert_array_equal(r.policy.values, 0.0)


def test_lifted_terminal_gains_nothing_from_shifting():
    r = strong_dual_value(BM, B.zero_driver(), P.digital(1.0), BOX1, 0.5, GRID, nu_max=2.0,
                          ghat=P.clamp(0.0, 1.0))
    assert r.value_ghat == pytest.approx(CLAMP_HALF, abs=1e-6)
    assert np.max(np.abs(r.policy_ghat.values)) == 0.0
    assert r.value <= r.value_ghat + 1e-12


def test_single_candidate_zero():
    r = strong_dual_value(BM, B.zero_driver(), P.digital(1.0), BOX1, 0.5, GRID,
                          candidates=[0.0])
    lat = B.make_lattice(BM, 0.5, 1.0, 0.01, width=6.0)
    ref = B.solve_lattice(BM, B.zero_driver(), P.digital(1.0), GRID, lat).value(0.0, 0.5)
    assert r.value == pytest.approx(ref, abs=1e-9)


def test_cone_is_refused():
    with pytest.raises(UnsupportedConstraintError):
        strong_dual_value(BM, B.zero_driver(), P.digital(1.0), C.half_line_cone([1.0]), 0.5,
                          GRID, candidates=[0.0])


# -- dynamic programming ------------------------------------------------------------

def test_dpp_trivial_split():
    d = dpp_residual(BM, B.zero_driver(), P.digital(1.0), BOX1, 0.5, np.array([0.0, 1.0]), 1.0,
                     candidates=[0.0])
    assert d["residual"] == 0.0


def test_dpp_half_horizon():
    d = dpp_residual(BM, B.zero_driver(), P.digital(1.0), BOX1, 0.5, GRID, 0.5, nu_max=2.0)
    assert d["residual"] <= 2 * d["tolerance"] + 1e-9
    assert d["full"] > DIGITAL_HALF


def test_split_time_must_be_on_the_grid():
    with pytest.raises(ValueError):
        dpp_residual(BM, B.zero_driver(), P.digital(1.0), BOX1, 0.5, GRID, 0.505,
                     candidates=[0.0])


# -- weak formulation -----------------------------------------------------------------

@pytest.fixture(scope="module")
def paths():
    grid = np.linspace(0.0, 1.0, 51)
    return sde.simulate(BM, 0.5, 0.0, None, grid, 100_000, seed=31)


def test_weak_zero_control_has_unit_density(paths):
    pol = ControlPolicy.constant(paths.grid, 0.0, 1.0)
    v, se = weak_dual_value(BM, B.zero_driver(), P.linear(), BOX1, pol, paths)
    assert v == pytest.approx(float(paths.terminal()[:, 0].mean()), abs=1e-12)


@pytest.mark.parametrize("c", [0.4, -0.7])
def test_weak_linear_terminal(paths, c):
    pol = ControlPolicy.constant(paths.grid, c, 1.0)
    v, se = weak_dual_value(BM, B.zero_driver(), P.linear(), BOX1, pol, paths)
    assert abs(v - (0.5 + c - abs(c))) <= 3 * se


def test_weak_agrees_with_strong_on_the_digital(paths):
    pol = ControlPolicy.constant(paths.grid, 0.5, 1.0)
    v, se = weak_dual_value(BM, B.zero_driver(), P.digital(1.0), BOX1, pol, paths)
    lat = B.make_lattice(BM, 0.5, 1.0, 0.02, width=8.0, order=8, midpoint_at=1.0)
    strong = evaluate_control(BM, B.zero_driver(), P.digital(1.0), BOX1, pol, 0.5, lattice=lat)
    assert abs(v - strong) <= 3 * se


def test_weak_needs_a_linear_driver(paths):
    pol = ControlPolicy.constant(paths.grid, 0.0, 1.0)
    drv = B.custom_driver(lambda t, x, y, z: np.sin(y), 1.0)
    with pytest.raises(UnsupportedConstraintError):
        weak_dual_value(BM, drv, P.linear(), BOX1, pol, paths)


# -- policy objects ---------------------------------------------------------------------

def test_policy_validation():
    with pytest.raises(ValueError):
        ControlPolicy(GRID, np.zeros(50), 1.0)
    with pytest.raises(ValueError):
        ControlPolicy(GRID, np.full(100, 2.0), 1.0)
    with pytest.raises(ValueError):
        ControlPolicy(GRID, np.zeros((100, 3)), 1.0)
    with pytest.raises(ValueError):
        ControlPolicy(GRID, np.full(100, np.nan), 1.0)


@settings(max_examples=25)
@given(vals=st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4))
def test_policy_json_round_trip(vals):
    grid = np.linspace(0.0, 1.0, 5)
    fb = ControlPolicy(grid, np.tile(vals, (4, 1)), 1.0, edges=np.linspace(-2, 2, 5))
    back = ControlPolicy.from_dict(json.loads(fb.to_json()))
    np.testing.assert_array_equal(back.values, fb.values)
    np.testing.assert_array_equal(back.edges, fb.edges)
    assert back.kind == "feedback"
    assert fb.value(0, np.array([-5.0, 0.1, 5.0])).tolist() == [vals[0], vals[2], vals[3]]


@settings(max_examples=15)
@given(sub=st.lists(st.sampled_from([-2.0, -1.0, 0.0, 1.0, 2.0]), min_size=1, max_size=5,
                    unique=True),
       k=st.floats(0.5, 1.5))
def test_more_candidates_never_lower_the_value(sub, k):
    grid = np.linspace(0.0, 1.0, 41)
    lat = B.make_lattice(BM, 0.5, 1.0, 1.0 / 40, width=8.0)
    kw = dict(search="dp", nu_max=2.0, lattice=lat)
    small = strong_dual_value(BM, B.zero_driver(), P.digital(k), BOX1, 0.5, grid,
                              candidates=sub, **kw)
    full = strong_dual_value(BM, B.zero_driver(), P.digital(k), BOX1, 0.5, grid,
                             candidates=[-2.0, -1.0, 0.0, 1.0, 2.0], **kw)
    assert full.value >= small.value - 1e-12
