"""Acceptance gate.

One test per criterion, executed in order; every test prints a single
``criterion NN <label>: PASS/FAIL`` line so the gate can be read off the
captured output (or off ``pytest -v``, one test per criterion). Shared
models are trained once per session; each criterion's runtime budget is
charged with the training time of every artifact it consumes, so budgets
hold even though artifacts are reused.
"""

import contextlib
import copy
import math
import pathlib
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

from oracles import connected_after_removal, dense_ybus, gauss_seidel, power_mismatch

from pqflex.agent import (
    AnnOpfAgent,
    AugLossConfig,
    EvalContext,
    action_gradients,
    augmented_loss,
    baseline_optimize,
    compute_security_marks,
    der_q_limits,
    evaluate_setpoints,
    flex_bounds,
    generate_samples,
    penalties,
    scale_actions,
    train_stage1,
    train_stage2,
)
from pqflex.approx import build_security_datasets, train_approximator
from pqflex.area import estimate_area, verify_area
from pqflex.contingency import enumerate_cases, n1_analysis
from pqflex.grid import (
    Bus,
    ExtGrid,
    Line,
    Load,
    Network,
    Transformer,
    aggregate_injections,
    build_admittances,
)
from pqflex.gridio import load_grid, load_profiles
from pqflex.nn import Mlp, MlpConfig, backprop_action_grads
from pqflex.pf import Scenario, batch_solve, solve
from pqflex.ppf import run_mcs

GRIDS = pathlib.Path(__file__).resolve().parents[1] / "grids"


@contextlib.contextmanager
def verdict(num: int, label: str):
    try:
        yield
    except BaseException:
        print(f"\ncriterion {num:02d} {label}: FAIL", flush=True)
        raise
    print(f"\ncriterion {num:02d} {label}: PASS", flush=True)


def nominal_op(net):
    load_p = np.array([ld.p_mw for ld in net.loads], dtype=float)
    load_q = np.array([ld.q_mvar for ld in net.loads], dtype=float)
    avail = np.array([d.p_avail_mw for d in net.ders], dtype=float)
    return load_p, load_q, avail, float(net.ext.v_pu)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def pipe30():
    """Shared 30-bus training pipeline: three agents plus approximators."""
    net = load_grid(GRIDS / "30bus")
    profiles = load_profiles(GRIDS / "30bus" / "profiles.csv")
    ctx = EvalContext.create(net)
    ctx_unpen = EvalContext.create(net, loss_cfg=AugLossConfig(w_v=0.0, w_lp=0.0))
    t = {}

    samples, t["samples"] = timed(
        generate_samples, net, 500, seed=0, profiles=profiles, ctx=ctx)

    agent1 = AnnOpfAgent.create(net, samples, hidden=(500,), seed=0)
    agent_unpen = copy.deepcopy(agent1)
    _, t["stage1"] = timed(train_stage1, agent1, ctx, samples, epochs=30, seed=0)
    _, t["unpen"] = timed(
        train_stage1, agent_unpen, ctx_unpen, samples, epochs=30, seed=0)

    marks, t["marks"] = timed(
        compute_security_marks, ctx, agent1, samples,
        mcs_samples=200, mcs_seed=1000)
    agent2 = copy.deepcopy(agent1)
    _, t["stage2"] = timed(
        train_stage2, agent2, ctx, samples, marks, epochs=15, seed=1)

    (ds_on_n1, ds_on_ppf), t["ds_on"] = timed(
        build_security_datasets, ctx, samples, agent=agent1,
        mcs_samples=200, mcs_seed=2000)
    sp_p = samples.der_avail[:, ctx.ctrl_mask].copy()
    sp_q = np.zeros_like(sp_p)
    (ds_off_n1, ds_off_ppf), t["ds_off"] = timed(
        build_security_datasets, ctx, samples, setpoints=(sp_p, sp_q),
        mcs_samples=200, mcs_seed=2000)

    t0 = time.perf_counter()
    ax_n1, rep_n1 = train_approximator(
        ds_on_n1, hidden=(300,), epochs=300, seed=0, threshold=100.0)
    ax_ppf, rep_ppf = train_approximator(
        ds_on_ppf, hidden=(300,), epochs=300, seed=1, threshold=0.10)
    ax_n1_off, _ = train_approximator(
        ds_off_n1, hidden=(300,), epochs=300, seed=0, threshold=100.0)
    t["approx"] = time.perf_counter() - t0

    return {
        "net": net, "profiles": profiles, "ctx": ctx, "samples": samples,
        "agent_unpen": agent_unpen, "agent1": agent1, "agent2": agent2,
        "ax_n1": ax_n1, "ax_ppf": ax_ppf, "ax_n1_off": ax_n1_off,
        "rep_n1": rep_n1, "rep_ppf": rep_ppf,
        "ds_on_n1": ds_on_n1, "t": t,
    }


@pytest.fixture(scope="session")
def pipe100():
    """Lightly trained 100-bus agent and approximators for the timing runs."""
    net = load_grid(GRIDS / "100bus")
    profiles = load_profiles(GRIDS / "100bus" / "profiles.csv")
    ctx = EvalContext.create(net)
    samples = generate_samples(net, 100, seed=0, profiles=profiles, ctx=ctx)
    agent = AnnOpfAgent.create(net, samples, hidden=(500,), seed=0)
    train_stage1(agent, ctx, samples, epochs=3, seed=0)
    ds_n1, ds_ppf = build_security_datasets(
        ctx, samples, agent=agent, mcs_samples=100, mcs_seed=2000)
    ax_n1, _ = train_approximator(
        ds_n1, hidden=(300,), epochs=150, seed=0, threshold=100.0)
    ax_ppf, _ = train_approximator(
        ds_ppf, hidden=(300,), epochs=150, seed=1, threshold=0.10)
    return {"net": net, "ctx": ctx, "agent": agent,
            "ax_n1": ax_n1, "ax_ppf": ax_ppf}


# ---------------------------------------------------------------- criteria


def test_c01_power_flow_matches_gauss_seidel_oracle():
    with verdict(1, "power-flow oracle equivalence"):
        t_solver = 0.0
        for name in ("2bus", "4bus", "30bus"):
            net = load_grid(GRIDS / name)
            adm = build_admittances(net)
            s = aggregate_injections(net)
            t0 = time.perf_counter()
            res = solve(Scenario(adm=adm, s_inj=s, slack_v=net.ext.v_pu))
            t_solver += time.perf_counter() - t0
            assert res.converged, name

            yd = dense_ybus(net)
            v_gs, ok = gauss_seidel(yd, s, adm.slack_bus, net.ext.v_pu)
            assert ok, name
            assert np.max(np.abs(res.v - v_gs)) < 1e-6, name

            assert power_mismatch(yd, res.v, s, adm.slack_bus) < 1e-8, name

            # total balance: bus injections against summed branch losses
            s_bus = res.v * np.conj(yd @ res.v)
            s_loss = (res.v[adm.f_bus] * np.conj(res.i_from)
                      + res.v[adm.t_bus] * np.conj(res.i_to))
            assert abs(np.sum(s_bus) - np.sum(s_loss)) < 1e-6, name
        assert t_solver < 1.0


def test_c02_batch_equivalence_and_determinism(monkeypatch):
    with verdict(2, "batch equivalence and determinism"):
        t0 = time.perf_counter()
        net = load_grid(GRIDS / "30bus")
        adm = build_admittances(net)
        base = aggregate_injections(net)
        rng = np.random.default_rng(0)
        scens = [
            Scenario(
                adm=adm,
                s_inj=base * (1.0 + 0.1 * rng.standard_normal(len(base))),
                slack_v=net.ext.v_pu,
            )
            for _ in range(1000)
        ]
        seq = [solve(s) for s in scens]
        runs = {w: batch_solve(scens, workers=w) for w in (1, 2, 4)}
        monkeypatch.setenv("PQFLEX_WORKERS", "3")
        runs["env"] = batch_solve(scens)
        for tag, batch in runs.items():
            assert len(batch) == 1000, tag
            for a, b in zip(seq, batch):
                assert a.converged == b.converged, tag
                assert np.array_equal(a.v, b.v), tag
                assert np.array_equal(a.loading, b.loading), tag
        assert time.perf_counter() - t0 < 30.0


def test_c03_n1_matches_connectivity_and_per_case_solves():
    with verdict(3, "N-1 enumeration and per-case equivalence"):
        for name in ("2bus", "3ring", "4bus", "4bus_tight", "30bus", "100bus"):
            net = load_grid(GRIDS / name)
            expect = [
                ln.id for ln in net.lines
                if ln.in_service and connected_after_removal(net, ln.id)
            ]
            assert enumerate_cases(net) == expect, name

        for name in ("4bus", "30bus", "100bus"):
            net = load_grid(GRIDS / name)
            res = n1_analysis(net)
            for k, cid in enumerate(res.case_ids):
                lines = tuple(
                    replace(ln, in_service=False) if ln.id == cid else ln
                    for ln in net.lines
                )
                net_out = Network(
                    buses=net.buses, lines=lines, trafos=net.trafos,
                    loads=net.loads, ders=net.ders, ext=net.ext,
                    base_mva=net.base_mva, name=net.name,
                )
                ind = solve(Scenario(
                    adm=build_admittances(net_out),
                    s_inj=aggregate_injections(net_out),
                    slack_v=net_out.ext.v_pu,
                ))
                assert bool(res.case_converged[k]) == ind.converged, (name, cid)
                assert np.array_equal(res.case_loadings[k], ind.loading), (name, cid)

        # symmetric lossless ring: after outaging the direct feeder the two
        # surviving lines form one series path whose loading has a closed form
        p_mw, x_pu, v0, i_max = 30.0, 0.1, 1.0, 0.4
        ring = Network(
            buses=(Bus(0, 110.0, kind="slack"), Bus(1, 110.0), Bus(2, 110.0)),
            lines=(
                Line(0, 0, 1, r_ohm=0.0, x_ohm=12.1, i_max_ka=i_max),
                Line(1, 1, 2, r_ohm=0.0, x_ohm=12.1, i_max_ka=i_max),
                Line(2, 0, 2, r_ohm=0.0, x_ohm=12.1, i_max_ka=i_max),
            ),
            loads=(Load(0, 2, p_mw, 0.0),),
            ext=ExtGrid(0, v0),
        )
        ring.validate()
        res = n1_analysis(ring)
        k = res.case_ids.index(2)
        assert res.case_converged[k]
        x_chain = 2.0 * x_pu
        p_pu = p_mw / ring.base_mva
        vm2 = math.sqrt(v0**2 / 2.0 + math.sqrt(v0**4 / 4.0 - (x_chain * p_pu) ** 2))
        i_pu = p_pu / vm2
        i_base_ka = ring.base_mva / (math.sqrt(3.0) * 110.0)
        lp_hand = 100.0 * i_pu * i_base_ka / i_max
        assert abs(res.case_loadings[k][0] - lp_hand) < 1e-6
        assert abs(res.case_loadings[k][1] - lp_hand) < 1e-6
        assert res.case_loadings[k][2] == 0.0


def test_c04_probabilistic_power_flow_correctness():
    with verdict(4, "probabilistic power-flow correctness"):
        # zero sigma reduces to the deterministic violation indicator
        for name in ("4bus", "30bus"):
            net = load_grid(GRIDS / name)
            res = solve(Scenario(
                adm=build_admittances(net),
                s_inj=aggregate_injections(net),
                slack_v=net.ext.v_pu,
            ))
            vmin = np.array([b.vmin_pu for b in net.buses])
            vmax = np.array([b.vmax_pu for b in net.buses])
            indicator = ((res.vm < vmin) | (res.vm > vmax)).astype(float)
            mcs = run_mcs(net, n_samples=50, seed=0,
                          load_frac=0.0, extv_frac=0.0, der_frac=0.0)
            assert np.array_equal(mcs.viol_prob, indicator), name

        # lossless two-bus toy: P(v < vmin) has a closed form under the
        # Gaussian load model, Monte Carlo must land within 3 sigma of it
        net = Network(
            buses=(Bus(0, 110.0, kind="slack"), Bus(1, 110.0, vmin_pu=0.94)),
            lines=(Line(0, 0, 1, r_ohm=0.0, x_ohm=60.5, i_max_ka=5.0),),
            loads=(Load(0, 1, 60.0, 0.0),),
            ext=ExtGrid(0, 1.0),
        )
        net.validate()
        v0, x_pu, vmin, p0, frac, n = 1.0, 0.5, 0.94, 60.0, 0.10, 10_000
        p_crit = math.sqrt(v0**4 / 4.0 - (vmin**2 - v0**2 / 2.0) ** 2) / x_pu
        z = (p_crit * net.base_mva - p0) / (frac * p0)
        p_true = 0.5 * math.erfc(z / math.sqrt(2.0))
        tol = 3.0 * math.sqrt(p_true * (1.0 - p_true) / n)
        mcs = run_mcs(net, n_samples=n, seed=0,
                      load_frac=frac, extv_frac=0.0, der_frac=0.0)
        assert mcs.n_converged == n
        assert abs(mcs.viol_prob[1] - p_true) <= tol

        # bit-exact reproducibility under a fixed seed
        a = run_mcs(net, n_samples=500, seed=42)
        b = run_mcs(net, n_samples=500, seed=42)
        assert np.array_equal(a.viol_prob, b.viol_prob)
        assert np.array_equal(a.vm_mean, b.vm_mean)
        assert a.n_converged == b.n_converged


def test_c05_gradient_integrity():
    with verdict(5, "gradient integrity"):
        # backprop against central differences on a 26-parameter net
        mlp = Mlp(MlpConfig(n_in=3, hidden=(4,), n_out=2,
                            out_activation="tanh", seed=5))
        x = np.array([[0.3, -0.7, 1.1], [-0.2, 0.4, -0.9]])
        w = np.array([[1.0, -2.0], [0.5, 1.5]])

        def loss():
            out = mlp.forward(x)
            return 0.5 * float(np.sum(w * out * out))

        out = mlp.forward(x)
        _, acts = mlp._forward_cached(x)
        grads = mlp.backward(acts, w * out)
        h = 1e-6
        worst = 0.0
        scale = 0.0
        for arr, g in zip(mlp.params, grads):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + h
                lp = loss()
                arr[idx] = old - h
                lm = loss()
                arr[idx] = old
                fd = (lp - lm) / (2.0 * h)
                worst = max(worst, abs(g[idx] - fd))
                scale = max(scale, abs(fd))
        assert worst / scale < 1e-5

        # finite-difference action gradients are step-size consistent
        net = load_grid(GRIDS / "4bus")
        ctx = EvalContext.create(net)
        load_p, load_q, avail, ext_v = nominal_op(net)
        fb = flex_bounds(ctx, load_p, load_q, avail, ext_v)
        raw = np.array([0.3, 0.2])
        r_p = 0.7 * fb.p_min + 0.3 * fb.p_max
        r_q = 0.5 * (fb.q_min + fb.q_max)
        g1, _ = action_gradients(ctx, load_p, load_q, avail, ext_v,
                                 raw, r_p, r_q, fb, h=1e-3)
        g2, _ = action_gradients(ctx, load_p, load_q, avail, ext_v,
                                 raw, r_p, r_q, fb, h=1e-4)
        assert np.max(np.abs(g1 - g2)) / np.max(np.abs(g2)) < 1e-3

        # end-to-end parameter gradient through the power flow
        tiny = Mlp(MlpConfig(n_in=5, hidden=(4,), n_out=2,
                             out_activation="tanh", seed=3))
        feats = np.array([0.4, -0.2, 0.1, 0.5, -0.3])

        def full_loss():
            raw_a = tiny.forward(feats[None, :])[0]
            p_set, q_set = scale_actions(raw_a, ctx.ctrl, avail[ctx.ctrl_mask])
            ev = evaluate_setpoints(ctx, load_p, load_q, avail, ext_v,
                                    p_set, q_set, r_p, r_q, fb)
            return ev.loss

        raw0 = tiny.forward(feats[None, :])[0]
        g_act, _ = action_gradients(ctx, load_p, load_q, avail, ext_v,
                                    raw0, r_p, r_q, fb, h=1e-3)
        g_bp = backprop_action_grads(tiny, feats[None, :], g_act[None, :])
        h = 1e-5
        worst = 0.0
        scale = 0.0
        for arr, g in zip(tiny.params, g_bp):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + h
                lp = full_loss()
                arr[idx] = old - h
                lm = full_loss()
                arr[idx] = old
                fd = (lp - lm) / (2.0 * h)
                worst = max(worst, abs(g[idx] - fd))
                scale = max(scale, abs(fd))
        assert worst / scale < 1e-4


def test_c06_constraint_scaling_fidelity():
    with verdict(6, "constraint scaling fidelity"):
        cfg = AugLossConfig()
        assert cfg.w_v == 100.0
        assert cfg.w_lp == 1.0
        rng = np.random.default_rng(6)
        for _ in range(200):
            vm = rng.uniform(0.85, 1.15, 12)
            lo = rng.uniform(0.88, 0.95, 12)
            hi = rng.uniform(1.04, 1.12, 12)
            loading = rng.uniform(0.0, 180.0, 9)
            lim = rng.uniform(80.0, 120.0, 9)
            l_v, l_lp = penalties(vm, loading, lo, hi, lim)
            l_v_ref = float(np.sum(np.maximum(lo - vm, 0.0)
                                   + np.maximum(vm - hi, 0.0)))
            l_lp_ref = float(np.sum(np.maximum(loading - lim, 0.0)))
            assert l_v == pytest.approx(l_v_ref, abs=1e-15)
            assert l_lp == pytest.approx(l_lp_ref, abs=1e-15)
            obj = float(rng.uniform(0.0, 2.0))
            assert augmented_loss(obj, l_v, l_lp, cfg) == pytest.approx(
                obj + 100.0 * l_v + 1.0 * l_lp, rel=1e-15)

        # device limits survive a million random draws
        net = load_grid(GRIDS / "4bus_tight")
        ctx = EvalContext.create(net)
        inst = np.array([d.p_inst_mw for d in ctx.ctrl])
        n_bad = 0
        for _ in range(1_000_000):
            raw = rng.uniform(-1.5, 1.5, ctx.n_actions)
            avail = rng.uniform(0.0, 1.2) * inst
            p_set, q_set = scale_actions(raw, ctx.ctrl, avail)
            for k, d in enumerate(ctx.ctrl):
                cap = min(avail[k], d.p_inst_mw)
                if not -1e-12 <= p_set[k] <= cap + 1e-12:
                    n_bad += 1
                q_lo, q_hi = der_q_limits(d, p_set[k])
                if not q_lo - 1e-12 <= q_set[k] <= q_hi + 1e-12:
                    n_bad += 1
        assert n_bad == 0


def test_c07_approximator_quality(pipe30):
    with verdict(7, "approximator desk-scale quality"):
        rep_n1 = pipe30["rep_n1"]
        rep_ppf = pipe30["rep_ppf"]
        assert rep_n1["n_train"] + rep_n1["n_test"] == 500 - rep_n1["n_excluded"]
        assert rep_n1["class_accuracy"] >= 0.90
        assert rep_ppf["class_accuracy"] >= 0.90

        # models trained on agent-dispatched states must beat models trained
        # on full-availability dispatch when judged on agent-dispatched states
        ds = pipe30["ds_on_n1"]
        n_train = rep_n1["n_train"]
        x_test, y_test = ds.x[n_train:], ds.y[n_train:]
        mae_off = float(np.mean(np.abs(
            pipe30["ax_n1_off"].predict(x_test) - y_test)))
        assert rep_n1["mae_test_pp"] < mae_off

        t = pipe30["t"]
        budget = (t["samples"] + t["stage1"] + t["ds_on"] + t["ds_off"]
                  + t["approx"])
        assert budget < 600.0


def test_c08_feasibility_guarantee(pipe30):
    with verdict(8, "postprocessing feasibility guarantee"):
        runs = 0
        for name, n_grid, seeds in (
            ("4bus", 8, (0, 1, 2)),
            ("4bus_tight", 8, (0, 1, 2)),
            ("30bus", 8, (0, 1, 2)),
            ("100bus", 5, (0,)),
        ):
            net = load_grid(GRIDS / name)
            ctx = EvalContext.create(net)
            load_p, load_q, avail, ext_v = nominal_op(net)
            for seed in seeds:
                probe = generate_samples(net, 30, seed=seed, ctx=ctx)
                agent = AnnOpfAgent.create(net, probe, hidden=(32,), seed=seed)
                area = estimate_area(ctx, agent, load_p, load_q, avail,
                                     ext_v, n=n_grid)
                rep = verify_area(ctx, agent, area, load_p, load_q, avail,
                                  ext_v, mcs_samples=100, mcs_seed=7000 + seed)
                assert rep.hard_violations_in_feasible == 0, (name, seed)
                runs += 1

        # the trained agents, screened by their approximators, must hold too
        ctx = pipe30["ctx"]
        load_p, load_q, avail, ext_v = nominal_op(pipe30["net"])
        for agent in (pipe30["agent_unpen"], pipe30["agent1"], pipe30["agent2"]):
            area = estimate_area(ctx, agent, load_p, load_q, avail, ext_v,
                                 n=10, approx_n1=pipe30["ax_n1"],
                                 approx_ppf=pipe30["ax_ppf"])
            rep = verify_area(ctx, agent, area, load_p, load_q, avail, ext_v,
                              mcs_samples=100, mcs_seed=7100)
            assert rep.hard_violations_in_feasible == 0
            runs += 1
        assert runs == 13


def test_c09_training_effect_ordering(pipe30):
    with verdict(9, "training-effect ordering"):
        ctx = pipe30["ctx"]
        load_p, load_q, avail, ext_v = nominal_op(pipe30["net"])
        counts = {}
        t_sweeps = 0.0
        for tag in ("agent_unpen", "agent1", "agent2"):
            area, dt = timed(
                estimate_area, ctx, pipe30[tag], load_p, load_q, avail,
                ext_v, n=20, approx_n1=pipe30["ax_n1"],
                approx_ppf=pipe30["ax_ppf"])
            counts[tag] = area.counts
            t_sweeps += dt
        assert (counts["agent_unpen"]["hard_violation"]
                > counts["agent1"]["hard_violation"])
        assert counts["agent2"]["feasible"] >= counts["agent1"]["feasible"]

        t = pipe30["t"]
        budget = (t["samples"] + t["stage1"] + t["unpen"] + t["marks"]
                  + t["stage2"] + t_sweeps)
        assert budget < 1200.0


def test_c10_baseline_comparison(pipe30):
    with verdict(10, "dispatch baseline comparison"):
        # congestion free: the maximizing baseline releases every unit fully
        net = load_grid(GRIDS / "4bus")
        ctx = EvalContext.create(net)
        load_p, load_q, avail, ext_v = nominal_op(net)
        res = baseline_optimize(ctx, load_p, load_q, avail, ext_v, mode="max_p")
        assert res.feasible
        avail_ctrl = avail[ctx.ctrl_mask]
        assert np.allclose(res.p_set, avail_ctrl, atol=0.05)

        # congested: only the unit behind the bottleneck is curtailed
        net_t = load_grid(GRIDS / "4bus_tight")
        ctx_t = EvalContext.create(net_t)
        load_p, load_q, avail, ext_v = nominal_op(net_t)
        res_t = baseline_optimize(ctx_t, load_p, load_q, avail, ext_v,
                                  mode="max_p")
        assert res_t.feasible
        avail_ctrl = avail[ctx_t.ctrl_mask]
        curtail = avail_ctrl - res_t.p_set
        assert curtail[0] > 3.0  # bottleneck unit backed off
        assert abs(curtail[1]) < 0.5  # unconstrained unit untouched

        # the trained model tracks the baseline maximum across the profiles
        ctx = pipe30["ctx"]
        agent1 = pipe30["agent1"]
        profiles = pipe30["profiles"]
        lp0, lq0, av0, ev0 = nominal_op(pipe30["net"])
        hits = 0
        for step in range(len(profiles)):
            lp = lp0 * profiles[step, 0]
            lq = lq0 * profiles[step, 1]
            av = av0 * profiles[step, 2]
            fb = flex_bounds(ctx, lp, lq, av, ev0)
            base = baseline_optimize(ctx, lp, lq, av, ev0, mode="max_p")
            p_set, q_set = agent1.setpoints(ctx, lp, lq, av, ev0,
                                            fb.p_max, base.eval.q_t)
            ev = evaluate_setpoints(ctx, lp, lq, av, ev0, p_set, q_set,
                                    fb.p_max, base.eval.q_t, fb)
            err = abs(ev.p_t - base.eval.p_t) / (fb.p_max - fb.p_min)
            hits += int(ev.converged and err <= 0.05)
        assert hits >= 0.8 * len(profiles)


def test_c11_performance(pipe100):
    with verdict(11, "estimation performance"):
        ctx = pipe100["ctx"]
        agent = pipe100["agent"]
        load_p, load_q, avail, ext_v = nominal_op(pipe100["net"])
        t0 = time.perf_counter()
        area = estimate_area(ctx, agent, load_p, load_q, avail, ext_v, n=20,
                             approx_n1=pipe100["ax_n1"],
                             approx_ppf=pipe100["ax_ppf"])
        wall = time.perf_counter() - t0
        assert len(area.points) == 400
        assert wall < 5.0
        assert area.ann_ms_per_point <= 1.0

        # per-point cost of the iterative reference on the same task
        fb = area.bounds
        targets = [
            (fb.p_min + 0.3 * (fb.p_max - fb.p_min),
             fb.q_min + 0.3 * (fb.q_max - fb.q_min)),
            (fb.p_min + 0.7 * (fb.p_max - fb.p_min),
             fb.q_min + 0.6 * (fb.q_max - fb.q_min)),
            (fb.p_min + 0.5 * (fb.p_max - fb.p_min),
             fb.q_min + 0.5 * (fb.q_max - fb.q_min)),
        ]
        t0 = time.perf_counter()
        for r_p, r_q in targets:
            baseline_optimize(ctx, load_p, load_q, avail, ext_v,
                              mode="requirement", r_p=r_p, r_q=r_q,
                              bounds=fb)
        base_ms = (time.perf_counter() - t0) * 1000.0 / len(targets)
        assert base_ms / area.ann_ms_per_point >= 100.0
