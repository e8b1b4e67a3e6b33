import math

import numpy as np
import pytest
from conftest import random_case, two_bus_text
from oracles import loop_admittance, loop_injections, reference_solution
from scipy.optimize import brentq

from gridcrit.grid import GridCase, parse_case
from gridcrit.powerflow import (
    IslandError,
    PowerFlowSolution,
    SingularJacobianError,
    build_admittance,
    electrical_distance,
    solve_ac,
)


# -- admittance --------------------------------------------------------------


def test_admittance_single_branch():
    Y = build_admittance(parse_case(two_bus_text(x=0.1)))
    assert Y[0, 1] == pytest.approx(10j)
    assert Y[1, 0] == pytest.approx(10j)
    assert Y[0, 0] == pytest.approx(-10j)
    assert Y[1, 1] == pytest.approx(-10j)


def test_admittance_line_charging():
    Y0 = build_admittance(parse_case(two_bus_text(x=0.1)))
    Y1 = build_admittance(parse_case(two_bus_text(x=0.1, b=0.2)))
    assert np.allclose(np.diag(Y1 - Y0), [0.1j, 0.1j])
    assert Y1[0, 1] == Y0[0, 1]


def test_admittance_ieee30_matches_loop_assembly(case30):
    assert np.max(np.abs(build_admittance(case30) - loop_admittance(case30))) < 1e-12


# -- solve_ac ----------------------------------------------------------------


def test_flat_solution_without_injection():
    sol = solve_ac(parse_case(two_bus_text()))
    assert sol.converged
    assert sol.iterations <= 1
    assert np.allclose(sol.vm, 1.0) and np.allclose(sol.va, 0.0)
    assert np.allclose([sol.p_from, sol.p_to, sol.q_from, sol.q_to], 0.0)


def test_two_bus_against_scalar_solve():
    x, p = 0.1, 0.5
    sol = solve_ac(parse_case(two_bus_text(p_load=p, x=x)))
    # Q balance at bus 2 with V1 = 1: V2 = cos(theta); P balance: V2 sin(theta) / x = -p
    theta = brentq(lambda t: math.cos(t) * math.sin(t) / x + p, -math.pi / 4, 0.0, xtol=1e-15)
    assert sol.converged
    assert sol.va[1] == pytest.approx(theta, abs=1e-8)
    assert sol.vm[1] == pytest.approx(math.cos(theta), abs=1e-8)


def test_ieee30_base_case(case30):
    sol = solve_ac(case30)
    assert sol.converged
    assert sol.iterations <= 10
    assert sol.max_mismatch <= 1e-8
    vm_ref, va_ref = reference_solution(case30)
    assert np.max(np.abs(sol.vm - vm_ref)) < 1e-3
    assert np.max(np.abs(sol.va - va_ref)) < 1e-6


def _check_invariants(case, sol):
    total_gen = sol.p_gen.sum()
    total_load = sum(b.p_load for b in case.buses)
    assert abs(total_gen - total_load - sol.loss.sum()) <= 10 * sol.tol
    P, Q = loop_injections(case, sol.vm, sol.va)
    p_spec = np.array([b.p_gen - b.p_load for b in case.buses])
    q_spec = np.array([b.q_gen - b.q_load for b in case.buses])
    kinds = [b.kind for b in case.buses]
    mis = [abs(P[i] - p_spec[i]) for i, k in enumerate(kinds) if k != "slack"]
    mis += [abs(Q[i] - q_spec[i]) for i, k in enumerate(kinds) if k == "pq"]
    assert max(mis) <= sol.tol
    assert np.all(sol.loss >= -1e-12)
    assert np.allclose(sol.loss, sol.p_from + sol.p_to)
    assert np.all(sol.loading >= 0)


def test_invariants_ieee30(case30):
    _check_invariants(case30, solve_ac(case30))


def test_invariants_random_cases():
    rng = np.random.default_rng(21)
    solved = 0
    for _ in range(40):
        case = random_case(rng, int(rng.integers(2, 12)))
        sol = solve_ac(case)
        if sol.converged:
            solved += 1
            _check_invariants(case, sol)
    assert solved >= 35


def test_tighter_tolerance(case30):
    loose = solve_ac(case30, tol=1e-4)
    tight = solve_ac(case30, tol=1e-12)
    assert tight.max_mismatch <= 1e-12
    assert loose.iterations <= tight.iterations


def test_non_convergence_is_data():
    sol = solve_ac(parse_case(two_bus_text(p_load=10.0)), max_iter=15)
    assert not sol.converged
    assert sol.iterations == 15 or not math.isfinite(sol.max_mismatch)


def test_singular_jacobian_raises():
    text = two_bus_text(p_load=0.2).replace("[BRANCH]", "3,pq,0.1,0,\n[BRANCH]")
    with pytest.raises(SingularJacobianError):
        solve_ac(parse_case(text))


def test_bad_arguments(four_bus):
    with pytest.raises(ValueError):
        solve_ac(four_bus, tol=0)
    with pytest.raises(ValueError):
        solve_ac(four_bus, max_iter=0)


def test_solution_dict_round_trip(four_bus):
    sol = solve_ac(four_bus)
    back = PowerFlowSolution.from_dict(sol.to_dict())
    for k, v in sol.to_dict().items():
        got = back.to_dict()[k]
        assert got == v


# -- electrical distance -----------------------------------------------------


def test_distance_zero_diagonal(case30):
    L = electrical_distance(case30)
    assert np.all(np.diag(L) == 0)


def test_distance_two_bus():
    L = electrical_distance(parse_case(two_bus_text(x=0.1)))
    assert L[0, 1] == pytest.approx(0.1, abs=1e-14)
    assert L[1, 0] == pytest.approx(0.1, abs=1e-14)


def test_distance_symmetric_triangle():
    text = """\
[BUS]
id,kind,p_load,q_load,v_setpoint
1,slack,0,0,1
2,pq,0.1,0,
3,pq,0.1,0,
[BRANCH]
id,from,to,r,x,b_shunt,rating
1,1,2,0,0.2,0,1
2,2,3,0,0.2,0,1
3,3,1,0,0.2,0,1
[GEN]
bus_id,p_gen,q_gen
1,0,0
"""
    L = electrical_distance(parse_case(text))
    off = L[~np.eye(3, dtype=bool)]
    assert np.allclose(off, off[0], rtol=0, atol=1e-14)
    # three equal reactances: x in parallel with 2x
    assert off[0] == pytest.approx(0.2 * 0.4 / 0.6)


def test_distance_properties_random():
    rng = np.random.default_rng(8)
    for _ in range(30):
        case = random_case(rng, int(rng.integers(2, 10)))
        L = electrical_distance(case)
        assert np.array_equal(L, L.T)
        assert np.all(np.diag(L) == 0)
        assert np.all(L >= 0)


def test_distance_scales_with_reactance():
    rng = np.random.default_rng(9)
    for _ in range(10):
        base = random_case(rng, int(rng.integers(3, 9)))
        lossless = GridCase(
            base.buses,
            [type(br)(br.id, br.from_bus, br.to_bus, 0.0, br.x, 0.0, br.rating) for br in base.branches],
        )
        doubled = GridCase(
            base.buses,
            [type(br)(br.id, br.from_bus, br.to_bus, 0.0, 2 * br.x, 0.0, br.rating) for br in base.branches],
        )
        assert np.allclose(electrical_distance(doubled), 2 * electrical_distance(lossless), rtol=1e-10, atol=1e-14)


def test_distance_island_raises():
    text = two_bus_text(p_load=0.2).replace("[BRANCH]", "3,pq,0.1,0,\n[BRANCH]")
    with pytest.raises(IslandError):
        electrical_distance(parse_case(text))
