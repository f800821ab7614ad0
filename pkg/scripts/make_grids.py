"""Generate the committed grid fixture bundles under grids/.

Every network is built deterministically (fixed tables, seeded jitter
where values are rounded anyway) and written as a CSV bundle. The
self-check at the end solves each grid, prints electrical diagnostics
and fails hard if a fixture lost the properties the test suite and the
benchmark workflows rely on.

Run from the repository root:

    python3 scripts/make_grids.py [--out grids]
"""

from __future__ import annotations

import argparse
import pathlib
import sys
import time

import numpy as np

from pqflex.agent import AnnOpfAgent, EvalContext, baseline_max_p, flex_bounds, generate_samples
from pqflex.contingency import enumerate_cases, n1_analysis
from pqflex.grid import Bus, Der, ExtGrid, Line, Load, Network, Transformer, aggregate_injections, build_admittances
from pqflex.gridio import save_grid, save_profiles
from pqflex.pf import Scenario, solve
from pqflex.ppf import run_mcs

R_KM, X_KM, B_KM = 0.12, 0.39, 3.1  # 110 kV overhead line per km


def _lines(rows) -> tuple[Line, ...]:
    out = []
    for k, (f, t, km, imax) in enumerate(rows):
        out.append(
            Line(k, f, t, r_ohm=R_KM * km, x_ohm=X_KM * km, b_total_us=B_KM * km, i_max_ka=imax)
        )
    return tuple(out)


def grid_2bus() -> Network:
    return Network(
        buses=(Bus(0, 110.0, kind="slack"), Bus(1, 110.0)),
        lines=(Line(0, 0, 1, r_ohm=0.0, x_ohm=12.1, i_max_ka=0.5),),
        loads=(Load(0, 1, p_mw=30.0, q_mvar=10.0),),
        ext=ExtGrid(bus=0, v_pu=1.0),
        name="2bus",
    )


def grid_3ring() -> Network:
    x = 6.05
    return Network(
        buses=(Bus(0, 110.0, kind="slack"), Bus(1, 110.0), Bus(2, 110.0)),
        lines=(
            Line(0, 0, 1, r_ohm=0.0, x_ohm=x, i_max_ka=0.4),
            Line(1, 0, 2, r_ohm=0.0, x_ohm=x, i_max_ka=0.4),
            Line(2, 1, 2, r_ohm=0.0, x_ohm=x, i_max_ka=0.4),
        ),
        loads=(Load(0, 1, p_mw=30.0, q_mvar=0.0), Load(1, 2, p_mw=30.0, q_mvar=0.0)),
        ext=ExtGrid(bus=0, v_pu=1.0),
        name="3ring",
    )


def grid_4bus() -> Network:
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
            Transformer(0, hv_bus=0, lv_bus=1, sn_mva=100.0, vk_percent=12.0,
                        vkr_percent=0.5, is_interface=True),
        ),
        loads=(Load(0, 2, p_mw=40.0, q_mvar=12.0), Load(1, 3, p_mw=25.0, q_mvar=8.0)),
        ders=(
            Der(0, bus=3, p_inst_mw=30.0, p_avail_mw=20.0, p_set_mw=15.0, q_set_mvar=2.0),
            Der(1, bus=2, p_inst_mw=10.0, p_avail_mw=6.0, controllable=False),
        ),
        ext=ExtGrid(bus=0, v_pu=1.02),
        name="4bus",
    )


def grid_4bus_tight() -> Network:
    """Same ring, small loads, a strong unit behind two weak lines.

    Full feed-in of the bus-2 unit overloads lines 0 and 1; the bus-3 unit
    sits next to the transformer and never congests anything. A correct
    maximum-export dispatch therefore curtails only the bus-2 unit.
    """
    return Network(
        buses=(
            Bus(0, 220.0, kind="slack"),
            Bus(1, 110.0),
            Bus(2, 110.0),
            Bus(3, 110.0),
        ),
        lines=(
            Line(0, 1, 2, r_ohm=3.0, x_ohm=11.0, b_total_us=140.0, i_max_ka=0.10),
            Line(1, 2, 3, r_ohm=2.5, x_ohm=9.5, b_total_us=120.0, i_max_ka=0.10),
            Line(2, 1, 3, r_ohm=4.0, x_ohm=14.0, b_total_us=170.0, i_max_ka=0.6),
        ),
        trafos=(
            Transformer(0, hv_bus=0, lv_bus=1, sn_mva=100.0, vk_percent=12.0,
                        vkr_percent=0.5, is_interface=True),
        ),
        loads=(Load(0, 2, p_mw=10.0, q_mvar=3.0), Load(1, 3, p_mw=8.0, q_mvar=2.5)),
        ders=(
            Der(0, bus=2, p_inst_mw=40.0, p_avail_mw=35.0),
            Der(1, bus=3, p_inst_mw=20.0, p_avail_mw=15.0),
        ),
        ext=ExtGrid(bus=0, v_pu=1.02),
        name="4bus_tight",
    )


def grid_30bus() -> Network:
    """Meshed 110 kV area behind two interface transformers.

    Double backbone ring with cross ties, five two-bus sub-loops and four
    radial tails. Wind sits on the loop and tail buses so that full
    feed-in stresses the 0.25 kA loop corridors (N-1 signal) and lifts the
    remote voltages toward the 1.06 band edge (probabilistic signal).
    """
    buses = [Bus(0, 220.0, vmin_pu=0.90, vmax_pu=1.10, kind="slack")]
    buses += [Bus(i, 110.0, vmin_pu=0.95, vmax_pu=1.05) for i in range(1, 30)]

    rows = [
        # backbone ring A
        (1, 3, 14.0, 0.645), (3, 5, 11.0, 0.645), (5, 7, 12.0, 0.645),
        (7, 9, 10.0, 0.645), (9, 11, 13.0, 0.645), (11, 2, 15.0, 0.645),
        # backbone ring B
        (1, 4, 13.0, 0.645), (4, 6, 12.0, 0.645), (6, 8, 11.0, 0.645),
        (8, 10, 12.0, 0.645), (10, 12, 14.0, 0.645), (12, 2, 16.0, 0.645),
        # cross ties
        (3, 4, 8.0, 0.43), (5, 6, 7.0, 0.43), (7, 8, 9.0, 0.43),
        (9, 10, 8.0, 0.43), (11, 12, 7.0, 0.43),
        # sub-loops; the wind corridors (buses 17..20) are the weak spots
        (5, 13, 9.0, 0.30), (13, 14, 7.0, 0.30), (14, 6, 8.0, 0.30),
        (7, 15, 10.0, 0.30), (15, 16, 6.0, 0.30), (16, 8, 9.0, 0.30),
        (9, 17, 8.0, 0.09), (17, 18, 7.0, 0.09), (18, 10, 9.0, 0.09),
        (11, 19, 9.0, 0.09), (19, 20, 6.0, 0.09), (20, 12, 8.0, 0.09),
        (3, 21, 10.0, 0.30), (21, 22, 7.0, 0.30), (22, 4, 9.0, 0.30),
        # radial tails
        (14, 23, 11.0, 0.30), (23, 24, 9.0, 0.30),
        (16, 25, 10.0, 0.25), (25, 26, 8.0, 0.25),
        (18, 27, 9.0, 0.25), (27, 28, 7.0, 0.25),
        (20, 29, 12.0, 0.25),
    ]

    load_rows = [
        (3, 12.0), (4, 10.0), (5, 14.0), (6, 9.0), (7, 12.0), (8, 11.0),
        (9, 8.0), (10, 12.0), (11, 10.0), (12, 9.0), (13, 6.0), (15, 7.0),
        (16, 5.0), (18, 6.0), (20, 5.0), (21, 8.0), (22, 6.0), (25, 5.0),
        (26, 4.0), (28, 6.0), (29, 5.0),
    ]
    loads = tuple(
        Load(k, bus, p_mw=p, q_mvar=round(0.33 * p, 2)) for k, (bus, p) in enumerate(load_rows)
    )

    der_rows = [
        # controllable wind parks
        (9, 35.0, 28.0, True), (17, 30.0, 24.0, True), (19, 40.0, 30.0, True),
        (24, 25.0, 18.0, True), (27, 20.0, 15.0, True),
        # uncontrollable infeed
        (13, 6.0, 5.0, False), (15, 5.0, 4.0, False), (21, 8.0, 6.0, False),
        (26, 4.0, 3.0, False), (29, 5.0, 4.0, False),
    ]
    ders = tuple(
        Der(k, bus=bus, p_inst_mw=inst, p_avail_mw=avail, controllable=ctrl,
            q_frac=0.42 if ctrl else 0.33)
        for k, (bus, inst, avail, ctrl) in enumerate(der_rows)
    )

    trafos = (
        Transformer(0, hv_bus=0, lv_bus=1, sn_mva=120.0, vk_percent=10.0,
                    vkr_percent=0.4, tap_pos=-1, is_interface=True),
        Transformer(1, hv_bus=0, lv_bus=2, sn_mva=120.0, vk_percent=10.0,
                    vkr_percent=0.4, tap_pos=-1, is_interface=True),
    )

    return Network(
        buses=tuple(buses),
        lines=_lines(rows),
        trafos=trafos,
        loads=loads,
        ders=ders,
        ext=ExtGrid(bus=0, v_pu=1.03),
        name="30bus",
    )


PROFILES_30 = np.array([
    [1.00, 1.00, 0.60],
    [0.85, 0.90, 0.80],
    [0.70, 0.75, 1.00],
    [0.55, 0.60, 0.90],
    [0.50, 0.55, 0.40],
    [0.65, 0.70, 0.20],
    [0.90, 0.95, 0.10],
    [1.10, 1.10, 0.30],
    [1.15, 1.15, 0.55],
    [1.05, 1.05, 0.75],
    [0.80, 0.85, 0.95],
    [0.60, 0.65, 0.65],
])


def grid_100bus() -> Network:
    """Large meshed area behind three interface transformers.

    Three backbone rings between the interface buses, two-bus sub-loops
    and radial tails filling the remaining buses. Sized for benchmark
    work: healthy base case, moderate loadings, many N-1 cases.
    """
    rng = np.random.default_rng(1234)
    buses = [Bus(0, 220.0, vmin_pu=0.90, vmax_pu=1.10, kind="slack")]
    buses += [Bus(i, 110.0, vmin_pu=0.94, vmax_pu=1.06) for i in range(1, 100)]

    def km() -> float:
        return float(np.round(rng.uniform(6.0, 16.0), 1))

    rows: list[tuple[int, int, float, float]] = []
    ring1 = [1, 4, 5, 6, 7, 8, 9, 2]
    ring2 = [2, 10, 11, 12, 13, 14, 15, 3]
    ring3 = [3, 16, 17, 18, 19, 20, 21, 1]
    for ring in (ring1, ring2, ring3):
        for a, b in zip(ring, ring[1:]):
            rows.append((a, b, km(), 0.645))

    # two-bus sub-loops hang off consecutive backbone buses
    backbone = ring1[1:-1] + ring2[1:-1] + ring3[1:-1]  # buses 4..21
    nxt = 22
    loops = 0
    while loops < 25:
        u = backbone[loops % len(backbone)]
        v = backbone[(loops + 1) % len(backbone)]
        a, b = nxt, nxt + 1
        nxt += 2
        rows.append((u, a, km(), 0.35))
        rows.append((a, b, km(), 0.35))
        rows.append((b, v, km(), 0.35))
        loops += 1

    # radial tails on the loop buses until the bus budget is used up
    first_loop_bus = 22
    n_loop_buses = nxt - first_loop_bus
    k = 0
    while nxt < 100:
        host = first_loop_bus + (3 * k) % n_loop_buses
        rows.append((host, nxt, km(), 0.30))
        nxt += 1
        k += 1

    lines = _lines(rows)

    load_buses = [b for b in range(3, 100, 2)]
    loads = tuple(
        Load(k, bus, p_mw=float(np.round(rng.uniform(4.0, 13.0), 1)),
             q_mvar=float(np.round(rng.uniform(1.0, 4.0), 1)))
        for k, bus in enumerate(load_buses)
    )

    der_buses = [b for b in range(22, 100, 4)][:22]
    ctrl = []
    for k, bus in enumerate(der_buses):
        inst = float(np.round(rng.uniform(10.0, 24.0), 1))
        ctrl.append(Der(k, bus=bus, p_inst_mw=inst, p_avail_mw=round(0.7 * inst, 1)))
    unctrl_buses = [b for b in range(24, 100, 10)][:8]
    for j, bus in enumerate(unctrl_buses):
        inst = float(np.round(rng.uniform(3.0, 7.0), 1))
        ctrl.append(Der(len(ctrl), bus=bus, p_inst_mw=inst,
                        p_avail_mw=round(0.8 * inst, 1), controllable=False))

    trafos = tuple(
        Transformer(k, hv_bus=0, lv_bus=k + 1, sn_mva=180.0, vk_percent=11.0,
                    vkr_percent=0.4, tap_pos=-1, is_interface=True)
        for k in range(3)
    )

    return Network(
        buses=tuple(buses),
        lines=lines,
        trafos=trafos,
        loads=loads,
        ders=tuple(ctrl),
        ext=ExtGrid(bus=0, v_pu=1.02),
        name="100bus",
    )


PROFILES_100 = np.array([
    [1.00, 1.00, 0.60],
    [0.75, 0.80, 0.90],
    [0.55, 0.60, 0.30],
    [1.10, 1.10, 0.45],
])


# -- self-check ---------------------------------------------------------


def _describe(net: Network, require_interface: bool) -> dict:
    net.validate(require_interface=require_interface)
    adm = build_admittances(net)
    res = solve(Scenario(adm, aggregate_injections(net), net.ext.v_pu))
    out = {
        "buses": net.n_bus,
        "lines": len(net.lines),
        "converged": res.converged,
        "iterations": res.iterations,
        "vm_min": float(res.vm.min()),
        "vm_max": float(res.vm.max()),
        "lp_max": float(res.loading.max()),
        "p_mw": res.interface_p_mw,
        "q_mvar": res.interface_q_mvar,
    }
    if net.lines:
        cases = enumerate_cases(net)
        out["n1_cases"] = len(cases)
        if cases:
            n1 = n1_analysis(net)
            out["n1_all_conv"] = n1.all_converged
            out["n1_lp_max"] = float(n1.lp_n1.max())
    return out


def check_30bus(net: Network) -> None:
    ctx = EvalContext.create(net)
    load_p = np.array([l.p_mw for l in net.loads])
    load_q = np.array([l.q_mvar for l in net.loads])
    avail = np.array([d.p_avail_mw for d in net.ders])
    fb = flex_bounds(ctx, load_p, load_q, avail, net.ext.v_pu)
    print(f"  flex box: P [{fb.p_min:8.2f}, {fb.p_max:8.2f}] MW  "
          f"Q [{fb.q_min:8.2f}, {fb.q_max:8.2f}] Mvar")

    # probe corners of the reachable box: the feasible area must be a
    # strict subset, so at least one corner should violate something
    from pqflex.agent import evaluate_setpoints
    from pqflex.grid import der_q_limits

    avail_ctrl = avail[ctx.ctrl_mask]
    zeros = np.zeros_like(avail_ctrl)
    q_hi = np.array([der_q_limits(d, float(avail_ctrl[k]))[1] for k, d in enumerate(ctx.ctrl)])
    q_lo = np.array([der_q_limits(d, float(avail_ctrl[k]))[0] for k, d in enumerate(ctx.ctrl)])
    corners = {
        "P_max (avail, Q0)": (avail_ctrl, zeros),
        "P_min (zero, Q0) ": (zeros, zeros),
        "Q_max (avail, Qhi)": (avail_ctrl, q_hi),
        "Q_min (avail, Qlo)": (avail_ctrl, q_lo),
    }
    for label, (p, q) in corners.items():
        ev = evaluate_setpoints(ctx, load_p, load_q, avail, net.ext.v_pu,
                                p, q, fb.p_max, fb.q_max, fb)
        import dataclasses
        ders = []
        i = 0
        for d in net.ders:
            if d.controllable:
                ders.append(dataclasses.replace(d, p_set_mw=float(p[i]), q_set_mvar=float(q[i])))
                i += 1
            else:
                ders.append(d)
        op = net.with_ders(tuple(ders))
        n1 = n1_analysis(op, slack_v=net.ext.v_pu)
        print(f"  {label}: vm [{ev.vm.min():.4f}, {ev.vm.max():.4f}] "
              f"lp {ev.loading.max():6.1f}% l_v {ev.l_v:.4f} l_lp {ev.l_lp:6.2f} "
              f"n1_max {n1.lp_n1.max():6.1f}%")

    # N-1 and MCS at nominal dispatch (60% availability profile)
    import dataclasses
    ders = tuple(
        dataclasses.replace(d, p_set_mw=0.6 * d.p_avail_mw if d.controllable else 0.0,
                            p_avail_mw=d.p_avail_mw)
        for d in net.ders
    )
    op = net.with_ders(ders)
    n1 = n1_analysis(op)
    mcs = run_mcs(op, n_samples=300, seed=42)
    print(f"  nominal 60% dispatch: n1 lp_max {n1.lp_n1.max():6.1f}%  "
          f"mcs max viol prob {mcs.max_viol_prob:.3f}  conv {mcs.n_converged}/300")

    # label spread over a small on-the-fly sample set with random dispatch
    t0 = time.perf_counter()
    samples = generate_samples(net, 40, seed=5, profiles=PROFILES_30, ctx=ctx)
    agent = AnnOpfAgent.create(net, samples, hidden=(32,), seed=0)
    from pqflex.approx import build_security_datasets
    ds_n1, ds_ppf = build_security_datasets(ctx, samples, agent=agent,
                                            mcs_samples=120, mcs_seed=99)
    dt = time.perf_counter() - t0
    frac_n1 = float(np.mean(np.any(ds_n1.y > 100.0, axis=1)))
    frac_ppf = float(np.mean(np.any(ds_ppf.y > 0.10, axis=1)))
    print(f"  untrained-agent labels over 40 samples ({dt:.1f}s): "
          f"N-1 overload frac {frac_n1:.2f}  PPF violating frac {frac_ppf:.2f}")
    print(f"  n1 label range [{ds_n1.y.min():.1f}, {ds_n1.y.max():.1f}] "
          f"ppf label max {ds_ppf.y.max():.2f}")


def check_4bus_tight(net: Network) -> None:
    ctx = EvalContext.create(net)
    load_p = np.array([l.p_mw for l in net.loads])
    load_q = np.array([l.q_mvar for l in net.loads])
    avail = np.array([d.p_avail_mw for d in net.ders])
    p, q, ev = baseline_max_p(ctx, load_p, load_q, avail, net.ext.v_pu)
    print(f"  baseline dispatch {np.round(p, 2)} of avail "
          f"{avail[ctx.ctrl_mask]}  feasible {ev.l_v == 0 and ev.l_lp == 0}")
    if not (p[0] < avail[0] - 1e-9 and abs(p[1] - avail[1]) < 1e-9):
        raise SystemExit("4bus_tight: baseline must curtail unit 0 only")


def solve_timing(net: Network, n: int = 200) -> float:
    adm = build_admittances(net)
    s = aggregate_injections(net)
    res = solve(Scenario(adm, s, net.ext.v_pu))
    t0 = time.perf_counter()
    for _ in range(n):
        solve(Scenario(adm, s, net.ext.v_pu), init=res.v)
    return (time.perf_counter() - t0) / n * 1000.0


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="grids", help="output directory")
    args = ap.parse_args()
    out = pathlib.Path(args.out)

    nets = {
        "2bus": (grid_2bus(), False, None),
        "3ring": (grid_3ring(), False, None),
        "4bus": (grid_4bus(), True, None),
        "4bus_tight": (grid_4bus_tight(), True, None),
        "30bus": (grid_30bus(), True, PROFILES_30),
        "100bus": (grid_100bus(), True, PROFILES_100),
    }

    for name, (net, need_if, profiles) in nets.items():
        info = _describe(net, require_interface=need_if)
        if not info["converged"]:
            raise SystemExit(f"{name}: base power flow does not converge")
        save_grid(net, out / name)
        if profiles is not None:
            save_profiles(out / name / "profiles.csv", profiles)
        extras = "".join(
            f"  {k} {info[k]:.4g}" if isinstance(info[k], float) else f"  {k} {info[k]}"
            for k in info
        )
        print(f"{name}:{extras}")

    print("30bus details:")
    check_30bus(nets["30bus"][0])
    print("4bus_tight details:")
    check_4bus_tight(nets["4bus_tight"][0])
    print(f"solve timing: 30bus {solve_timing(nets['30bus'][0]):.2f} ms  "
          f"100bus {solve_timing(nets['100bus'][0]):.2f} ms (warm)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
