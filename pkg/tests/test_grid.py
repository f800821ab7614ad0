"""Grid model: admittance assembly, capability curve, injections, validation."""

import numpy as np
import pytest

from pqflex.grid import (
    Bus,
    Der,
    ExtGrid,
    Line,
    Load,
    Network,
    aggregate_injections,
    build_admittances,
    der_q_limits,
)

from oracles import dense_ybus


def test_two_bus_textbook_ybus(two_bus):
    # x = 0.1 pu, no shunt: ybus = [[-10j, 10j], [10j, -10j]]
    adm = build_admittances(two_bus)
    dense = adm.ybus.toarray()
    expected = np.array([[-10j, 10j], [10j, -10j]])
    np.testing.assert_allclose(dense, expected, atol=1e-12)


def test_parallel_lines_double_admittance():
    net = Network(
        buses=(Bus(0, 110.0, kind="slack"), Bus(1, 110.0)),
        lines=(
            Line(0, 0, 1, r_ohm=1.0, x_ohm=10.0, i_max_ka=0.5),
            Line(1, 0, 1, r_ohm=1.0, x_ohm=10.0, i_max_ka=0.5),
        ),
        ext=ExtGrid(bus=0),
    )
    both = build_admittances(net).ybus.toarray()
    single = build_admittances(
        Network(
            buses=net.buses,
            lines=net.lines[:1],
            ext=net.ext,
        )
    ).ybus.toarray()
    np.testing.assert_allclose(both, 2.0 * single, rtol=1e-14)


def test_ybus_matches_elementwise_oracle(four_bus):
    adm = build_admittances(four_bus)
    np.testing.assert_allclose(adm.ybus.toarray(), dense_ybus(four_bus), rtol=1e-13, atol=1e-15)


def test_outage_equals_out_of_service(four_bus):
    outaged = build_admittances(four_bus, outage=1)
    lines = tuple(
        ln if ln.id != 1 else Line(ln.id, ln.from_bus, ln.to_bus, ln.r_ohm, ln.x_ohm,
                                   ln.b_total_us, ln.i_max_ka, in_service=False)
        for ln in four_bus.lines
    )
    switched = build_admittances(
        Network(
            buses=four_bus.buses, lines=lines, trafos=four_bus.trafos,
            loads=four_bus.loads, ders=four_bus.ders, ext=four_bus.ext,
        )
    )
    assert (outaged.ybus != switched.ybus).nnz == 0
    assert (outaged.yf != switched.yf).nnz == 0
    assert (outaged.yt != switched.yt).nnz == 0
    np.testing.assert_array_equal(outaged.i_max_pu, switched.i_max_pu)
    # rating row survives the outage so loadings stay aligned
    assert outaged.n_branch == len(four_bus.lines) + len(four_bus.trafos)


def test_branch_rating_conversion(four_bus):
    adm = build_admittances(four_bus)
    # line rating: i_max_ka over the bus current base base_mva/(sqrt3 vn)
    expected_line = 0.6 * np.sqrt(3.0) * 110.0 / 100.0
    assert adm.i_max_pu[0] == pytest.approx(expected_line, rel=1e-12)
    # transformer rating: sn_mva on the system base
    assert adm.i_max_pu[3] == pytest.approx(1.0, rel=1e-12)


def test_interface_metadata(four_bus):
    adm = build_admittances(four_bus)
    assert list(adm.interface_rows) == [3]
    assert list(adm.interface_hv) == [0]


def test_der_q_limits_curve():
    der = Der(0, bus=1, p_inst_mw=10.0, p_avail_mw=10.0, q_frac=0.33)
    # above the 20 percent knee the band is the full +-q_frac * p_inst
    assert der_q_limits(der, 5.0) == (pytest.approx(-3.3), pytest.approx(3.3))
    assert der_q_limits(der, 2.0) == (pytest.approx(-3.3), pytest.approx(3.3))
    assert der_q_limits(der, 10.0) == (pytest.approx(-3.3), pytest.approx(3.3))
    # below the knee the band ramps linearly to zero
    assert der_q_limits(der, 1.0) == (pytest.approx(-1.65), pytest.approx(1.65))
    assert der_q_limits(der, 0.0) == (0.0, 0.0)


def test_der_q_limits_continuity_and_symmetry():
    der = Der(0, bus=0, p_inst_mw=7.0, p_avail_mw=7.0, q_frac=0.4)
    knee = 0.2 * 7.0
    lo_before, hi_before = der_q_limits(der, knee - 1e-9)
    lo_at, hi_at = der_q_limits(der, knee)
    assert hi_at - hi_before < 1e-8
    for p in np.linspace(0.0, 7.0, 29):
        lo, hi = der_q_limits(der, float(p))
        assert lo == -hi
        assert hi >= 0.0


def test_aggregate_injections(four_bus):
    s = aggregate_injections(four_bus)
    base = four_bus.base_mva
    # bus 2: uncontrollable der runs at availability, unity power factor
    assert s[2] == pytest.approx((-40.0 + 6.0 - 1j * 12.0) / base)
    # bus 3: controllable der contributes its setpoints
    assert s[3] == pytest.approx((15.0 - 25.0 + 1j * (2.0 - 8.0)) / base)
    assert s[0] == 0j
    assert s[1] == 0j


def test_validate_passes_on_sane_network(four_bus):
    four_bus.validate(require_interface=True)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda n: Network(buses=(Bus(1, 110.0, kind="slack"), Bus(0, 110.0)), ext=ExtGrid(0)),
         "row order"),
        (lambda n: Network(buses=n.buses, lines=n.lines, trafos=n.trafos, loads=n.loads,
                           ders=n.ders, ext=ExtGrid(bus=1)), "slack"),
        (lambda n: Network(buses=n.buses, lines=(Line(0, 0, 9, 1.0, 1.0),), ext=n.ext),
         "out of range"),
        (lambda n: Network(buses=n.buses, lines=n.lines, trafos=n.trafos, loads=n.loads,
                           ders=(Der(0, 1, p_inst_mw=5.0, p_avail_mw=9.0),), ext=n.ext),
         "p_avail"),
    ],
)
def test_validate_rejects_defects(two_bus, mutate, match):
    with pytest.raises(ValueError, match=match):
        mutate(two_bus).validate()


def test_validate_requires_interface(two_bus):
    two_bus.validate()
    with pytest.raises(ValueError, match="interface"):
        two_bus.validate(require_interface=True)
