"""Shared fixtures: small hand-built networks with known behaviour."""

from __future__ import annotations

import pathlib
import sys

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from pqflex.grid import Bus, Der, ExtGrid, Line, Load, Network, Transformer

GRIDS_DIR = pathlib.Path(__file__).resolve().parent.parent / "grids"


@pytest.fixture
def two_bus() -> Network:
    """Slack feeding one load bus over a single reactance of 0.1 pu."""
    return Network(
        buses=(
            Bus(0, 110.0, kind="slack"),
            Bus(1, 110.0),
        ),
        lines=(Line(0, 0, 1, r_ohm=0.0, x_ohm=12.1, i_max_ka=0.5),),
        loads=(Load(0, 1, p_mw=30.0, q_mvar=10.0),),
        ext=ExtGrid(bus=0, v_pu=1.0),
        name="two_bus",
    )


@pytest.fixture
def ring3() -> Network:
    """Symmetric lossless ring: slack at 0, equal P-only loads at 1 and 2.

    Line 0 and 1 are the feeders, line 2 the cross tie between the load
    buses. By symmetry the cross tie carries no current in the base case,
    so the base solution is two independent two-bus systems in closed form.
    """
    x = 6.05  # 0.05 pu at 110 kV / 100 MVA
    return Network(
        buses=(
            Bus(0, 110.0, kind="slack"),
            Bus(1, 110.0),
            Bus(2, 110.0),
        ),
        lines=(
            Line(0, 0, 1, r_ohm=0.0, x_ohm=x, i_max_ka=0.4),
            Line(1, 0, 2, r_ohm=0.0, x_ohm=x, i_max_ka=0.4),
            Line(2, 1, 2, r_ohm=0.0, x_ohm=x, i_max_ka=0.4),
        ),
        loads=(
            Load(0, 1, p_mw=30.0, q_mvar=0.0),
            Load(1, 2, p_mw=30.0, q_mvar=0.0),
        ),
        ext=ExtGrid(bus=0, v_pu=1.0),
        name="ring3",
    )


@pytest.fixture
def four_bus() -> Network:
    """EHV slack behind an interface transformer feeding a meshed HV ring."""
    return Network(
        buses=(
            Bus(0, 220.0, kind="slack"),
            Bus(1, 110.0),
            Bus(2, 110.0),
            Bus(3, 110.0),
        ),
        lines=(
            Line(0, 1, 2, r_ohm=3.0, x_ohm=11.0, b_total_us=140.0, i_max_ka=0.6),
            Line(1, 2, 3, r_ohm=2.5, x_ohm=9.5, b_total_us=120.0, i_max_ka=0.6),
            Line(2, 1, 3, r_ohm=4.0, x_ohm=14.0, b_total_us=170.0, i_max_ka=0.6),
        ),
        trafos=(
            Transformer(
                0, hv_bus=0, lv_bus=1, sn_mva=100.0, vk_percent=12.0,
                vkr_percent=0.5, is_interface=True,
            ),
        ),
        loads=(
            Load(0, 2, p_mw=40.0, q_mvar=12.0),
            Load(1, 3, p_mw=25.0, q_mvar=8.0),
        ),
        ders=(
            Der(0, bus=3, p_inst_mw=30.0, p_avail_mw=20.0, p_set_mw=15.0, q_set_mvar=2.0),
            Der(1, bus=2, p_inst_mw=10.0, p_avail_mw=6.0, controllable=False),
        ),
        ext=ExtGrid(bus=0, v_pu=1.02),
        name="four_bus",
    )
