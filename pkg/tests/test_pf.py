"""Newton power flow against closed forms and a Gauss-Seidel oracle."""

import numpy as np
import pytest

from pqflex.grid import aggregate_injections, build_admittances
from pqflex.pf import Scenario, batch_solve, solve

from oracles import (
    dense_ybus,
    gauss_seidel,
    lossless_two_bus_voltage,
    power_mismatch,
)


def make_scenario(net):
    return Scenario(
        adm=build_admittances(net),
        s_inj=aggregate_injections(net),
        slack_v=net.ext.v_pu,
    )


def test_two_bus_against_closed_form(two_bus):
    # strip the reactive load so the lossless closed form applies
    net = two_bus
    net = net.__class__(
        buses=net.buses,
        lines=net.lines,
        loads=(net.loads[0].__class__(0, 1, p_mw=30.0, q_mvar=0.0),),
        ext=net.ext,
    )
    res = solve(make_scenario(net))
    assert res.converged
    v_ref = lossless_two_bus_voltage(0.3, 0.1)
    assert abs(res.v[1] - v_ref) < 1e-9


def test_two_bus_against_gauss_seidel(two_bus):
    res = solve(make_scenario(two_bus))
    assert res.converged
    assert res.max_mismatch < 1e-8
    ybus = dense_ybus(two_bus)
    v_gs, ok = gauss_seidel(ybus, aggregate_injections(two_bus), 0, 1.0)
    assert ok
    np.testing.assert_allclose(res.v, v_gs, atol=1e-8)


def test_four_bus_against_gauss_seidel(four_bus):
    res = solve(make_scenario(four_bus))
    assert res.converged
    assert res.iterations <= 10
    ybus = dense_ybus(four_bus)
    v_gs, ok = gauss_seidel(ybus, aggregate_injections(four_bus), 0, 1.02)
    assert ok
    np.testing.assert_allclose(res.v, v_gs, atol=1e-8)
    assert power_mismatch(ybus, res.v, aggregate_injections(four_bus), 0) < 1e-8


def test_power_balance(four_bus):
    res = solve(make_scenario(four_bus))
    adm = build_admittances(four_bus)
    # slack injection closes the balance: sum of bus injections equals
    # total series plus shunt losses inside the network
    s_calc = res.v * np.conj(adm.ybus @ res.v)
    s_from = res.v[adm.f_bus] * np.conj(res.i_from)
    s_to = res.v[adm.t_bus] * np.conj(res.i_to)
    assert abs(np.sum(s_calc) - np.sum(s_from + s_to)) < 1e-9


def test_interface_flow_sign(four_bus):
    # net importing grid: flow comes from the external grid, so the export
    # convention makes the interface power negative
    res = solve(make_scenario(four_bus))
    assert res.interface_p_mw < 0
    total_load = 40.0 + 25.0
    total_gen = 15.0 + 6.0
    assert res.interface_p_mw == pytest.approx(total_gen - total_load, abs=2.0)


def test_warm_start_converges_faster(four_bus):
    sc = make_scenario(four_bus)
    cold = solve(sc)
    warm = solve(sc, init=cold.v)
    assert warm.converged
    assert warm.iterations == 0
    np.testing.assert_allclose(warm.v, cold.v, atol=1e-12)


def test_flat_start_uses_slack_magnitude(four_bus):
    sc = make_scenario(four_bus)
    res = solve(sc)
    assert abs(res.v[0]) == pytest.approx(1.02)


def test_divergence_reported_not_raised(two_bus):
    # absurd load far beyond loadability must come back non-converged
    sc = Scenario(
        adm=build_admittances(two_bus),
        s_inj=np.array([0.0, -80.0 - 30.0j]),
        slack_v=1.0,
    )
    res = solve(sc)
    assert not res.converged
    assert res.max_mismatch > 1e-8


def test_loading_uses_worse_end(four_bus):
    res = solve(make_scenario(four_bus))
    adm = build_admittances(four_bus)
    manual = np.maximum(np.abs(res.i_from), np.abs(res.i_to)) / adm.i_max_pu * 100.0
    np.testing.assert_allclose(res.loading, manual, rtol=1e-14)
    assert np.all(res.loading >= 0)


def test_batch_matches_sequential(four_bus, two_bus):
    rng = np.random.default_rng(7)
    adm = build_admittances(four_bus)
    base = aggregate_injections(four_bus)
    scenarios = [
        Scenario(adm=adm, s_inj=base * (1.0 + 0.2 * rng.standard_normal()), slack_v=1.02)
        for _ in range(40)
    ]
    seq = [solve(s) for s in scenarios]
    par = batch_solve(scenarios, workers=4)
    for a, b in zip(seq, par):
        assert a.converged == b.converged
        assert np.array_equal(a.v, b.v)  # bit identical, not merely close
        assert np.array_equal(a.loading, b.loading)
        assert a.interface_p_mw == b.interface_p_mw


def test_batch_rejects_mismatched_inits(four_bus):
    sc = make_scenario(four_bus)
    with pytest.raises(ValueError):
        batch_solve([sc, sc], inits=[None])
