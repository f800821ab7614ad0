"""Feasible PQ flexibility area estimation and its independent audit.

A requirement grid spans the reachable interface PQ box. Every grid point
is handed to the agent, the resulting setpoints are checked with one exact
power flow (hard limits), then the trained approximators screen N-1
loading and voltage robustness. Only points that clear all three gates are
reported feasible; everything else keeps its first failure as the label,
so the published area never contains a hard violation by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .agent import (
    AnnOpfAgent,
    EvalContext,
    FlexBounds,
    evaluate_setpoints,
    flex_bounds,
)
from .approx import Approximator, approx_features
from .contingency import build_outage_variants, n1_analysis
from .grid import with_operating_point
from .pf import Scenario, solve
from .ppf import run_mcs

__all__ = [
    "AreaPoint",
    "AreaResult",
    "VerifyReport",
    "requirement_grid",
    "estimate_area",
    "feasible_hull",
    "verify_area",
]

FEASIBLE = "feasible"
HARD = "hard_violation"
SOFT = "soft_violation"
NON_CONV = "non_convergent"


@dataclass
class AreaPoint:
    r_p: float
    r_q: float
    p_t: float
    q_t: float
    label: str
    detail: str = ""
    objective: float = float("nan")
    # aggregate DER dispatch behind the point, summed over controllable units
    p_sp_mw: float = float("nan")
    q_sp_mvar: float = float("nan")


@dataclass
class AreaResult:
    points: list[AreaPoint]
    bounds: FlexBounds
    n_grid: int
    counts: dict[str, int]
    hull: np.ndarray | None
    runtime_s: float
    ann_ms_per_point: float

    def select(self, label: str) -> list[AreaPoint]:
        return [p for p in self.points if p.label == label]


def requirement_grid(bounds: FlexBounds, n: int) -> np.ndarray:
    """(n*n, 2) requirement points, row-major: P outer, Q varies fastest."""
    if n < 2:
        raise ValueError("grid needs at least 2 points per axis")
    p = np.linspace(bounds.p_min, bounds.p_max, n)
    q = np.linspace(bounds.q_min, bounds.q_max, n)
    pp, qq = np.meshgrid(p, q, indexing="ij")
    return np.column_stack([pp.ravel(), qq.ravel()])


def feasible_hull(points: list[AreaPoint]) -> np.ndarray | None:
    """Convex hull vertices of the realized feasible points.

    Purely cosmetic: the published result is the point classification, the
    hull only outlines it in plots and may legitimately cover infeasible
    notches of a non-convex region.
    """
    feas = np.array([[p.p_t, p.q_t] for p in points if p.label == FEASIBLE])
    if len(feas) < 3:
        return None
    from scipy.spatial import ConvexHull, QhullError

    try:
        hull = ConvexHull(feas)
    except QhullError:
        return None
    return feas[hull.vertices]


def _screen_point(
    ctx: EvalContext,
    agent: AnnOpfAgent,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    r_p: float,
    r_q: float,
    bounds: FlexBounds,
    approx_n1: Approximator | None,
    approx_ppf: Approximator | None,
    warm: np.ndarray | None,
):
    p_set, q_set = agent.setpoints(ctx, load_p, load_q, der_avail, ext_v, r_p, r_q)
    ev = evaluate_setpoints(
        ctx, load_p, load_q, der_avail, ext_v, p_set, q_set,
        r_p, r_q, bounds, warm=warm,
    )
    if not ev.converged:
        return AreaPoint(r_p, r_q, float("nan"), float("nan"), NON_CONV,
                         "power flow diverged"), ev, p_set, q_set
    if ev.l_v > 0.0 or ev.l_lp > 0.0:
        bits = []
        if ev.l_v > 0.0:
            bits.append(f"voltage band excess {ev.l_v:.4f} pu")
        if ev.l_lp > 0.0:
            bits.append(f"loading excess {ev.l_lp:.2f} %")
        return AreaPoint(r_p, r_q, ev.p_t, ev.q_t, HARD, ", ".join(bits),
                         ev.objective), ev, p_set, q_set
    s_inj = ctx.injections(load_p, load_q, der_avail, p_set, q_set)
    if approx_n1 is not None:
        feats = approx_features(approx_n1.feature, ctx, ev.vm, ev.loading, s_inj, q_set)
        pred = approx_n1.predict(feats)
        worst = int(np.argmax(pred))
        if pred[worst] > approx_n1.threshold:
            detail = (f"predicted post-contingency loading {pred[worst]:.1f} % "
                      f"on line {worst}")
            return AreaPoint(r_p, r_q, ev.p_t, ev.q_t, SOFT, detail,
                             ev.objective), ev, p_set, q_set
    if approx_ppf is not None:
        feats = approx_features(approx_ppf.feature, ctx, ev.vm, ev.loading, s_inj, q_set)
        pred = approx_ppf.predict(feats)
        worst = int(np.argmax(pred))
        if pred[worst] > approx_ppf.threshold:
            detail = (f"predicted violation probability {pred[worst]:.2f} "
                      f"at bus {worst}")
            return AreaPoint(r_p, r_q, ev.p_t, ev.q_t, SOFT, detail,
                             ev.objective), ev, p_set, q_set
    return AreaPoint(r_p, r_q, ev.p_t, ev.q_t, FEASIBLE, "",
                     ev.objective), ev, p_set, q_set


def estimate_area(
    ctx: EvalContext,
    agent: AnnOpfAgent,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    n: int = 20,
    approx_n1: Approximator | None = None,
    approx_ppf: Approximator | None = None,
) -> AreaResult:
    """Sweep the requirement grid and classify every point."""
    agent.check_compatible(ctx.net)
    t0 = time.perf_counter()
    bounds = flex_bounds(ctx, load_p, load_q, der_avail, ext_v)
    grid = requirement_grid(bounds, n)
    points: list[AreaPoint] = []
    warm = None
    ann_time = 0.0
    for r_p, r_q in grid:
        t_ann = time.perf_counter()
        agent.setpoints(ctx, load_p, load_q, der_avail, ext_v, float(r_p), float(r_q))
        ann_time += time.perf_counter() - t_ann
        point, ev, p_set, q_set = _screen_point(
            ctx, agent, load_p, load_q, der_avail, ext_v,
            float(r_p), float(r_q), bounds, approx_n1, approx_ppf, warm,
        )
        point.p_sp_mw = float(np.sum(p_set))
        point.q_sp_mvar = float(np.sum(q_set))
        if ev.converged:
            warm = ev.v
        points.append(point)
    counts = {k: 0 for k in (FEASIBLE, HARD, SOFT, NON_CONV)}
    for p in points:
        counts[p.label] += 1
    return AreaResult(
        points=points,
        bounds=bounds,
        n_grid=n,
        counts=counts,
        hull=feasible_hull(points),
        runtime_s=time.perf_counter() - t0,
        ann_ms_per_point=1000.0 * ann_time / len(grid),
    )


@dataclass
class VerifyReport:
    """Exact re-screening of an estimated area.

    ``hard_violations_in_feasible`` must be zero for any correct pipeline:
    feasibility was decided on an exact power flow in the first place, and
    this audit recomputes it from scratch. The approximator-induced rates
    quantify screening quality: a false feasible passed the approximators
    but fails the exact screens, a false infeasible was soft-rejected yet
    holds up exactly.
    """

    n_feasible: int
    n_soft: int
    hard_violations_in_feasible: int
    false_feasible: int
    false_infeasible: int
    details: list[str] = field(default_factory=list)

    @property
    def false_feasible_rate(self) -> float:
        return self.false_feasible / self.n_feasible if self.n_feasible else 0.0

    @property
    def false_infeasible_rate(self) -> float:
        return self.false_infeasible / self.n_soft if self.n_soft else 0.0


def verify_area(
    ctx: EvalContext,
    agent: AnnOpfAgent,
    area: AreaResult,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    mcs_samples: int = 200,
    mcs_seed: int = 7000,
) -> VerifyReport:
    """Audit the classified points with exact power-flow-based screens."""
    variants = build_outage_variants(ctx.net)
    report = VerifyReport(
        n_feasible=area.counts[FEASIBLE],
        n_soft=area.counts[SOFT],
        hard_violations_in_feasible=0,
        false_feasible=0,
        false_infeasible=0,
    )
    cfg = ctx.loss_cfg
    for k, point in enumerate(area.points):
        if point.label not in (FEASIBLE, SOFT):
            continue
        p_set, q_set = agent.setpoints(
            ctx, load_p, load_q, der_avail, ext_v, point.r_p, point.r_q
        )
        s_inj = ctx.injections(load_p, load_q, der_avail, p_set, q_set)
        base = solve(Scenario(adm=ctx.adm, s_inj=s_inj, slack_v=ext_v))
        hard_ok = base.converged
        if hard_ok:
            l_v = float(np.sum(np.maximum(ctx.vmin - base.vm, 0.0)
                               + np.maximum(base.vm - ctx.vmax, 0.0)))
            l_lp = float(np.sum(np.maximum(base.loading - ctx.lp_limit, 0.0)))
            hard_ok = l_v == 0.0 and l_lp == 0.0
        if point.label == FEASIBLE and not hard_ok:
            report.hard_violations_in_feasible += 1
            report.details.append(
                f"point ({point.r_p:.2f}, {point.r_q:.2f}): hard violation "
                "slipped through"
            )
            continue
        if not hard_ok:
            continue  # soft point that is in truth hard-infeasible
        n1 = n1_analysis(ctx.net, s_inj=s_inj, slack_v=ext_v,
                         variants=variants, warm=base.v)
        n1_ok = bool(np.all(n1.lp_n1 <= cfg.lp_max))
        op_net = with_operating_point(
            ctx.net, load_p=load_p, load_q=load_q, der_avail=der_avail,
            p_set=p_set, q_set=q_set, ext_v=ext_v,
        )
        mcs = run_mcs(op_net, n_samples=mcs_samples, seed=mcs_seed + k,
                      adm=ctx.adm, workers=ctx.workers)
        ppf_ok = bool(np.all(mcs.viol_prob <= cfg.prob_threshold))
        secure = n1_ok and ppf_ok
        if point.label == FEASIBLE and not secure:
            report.false_feasible += 1
            why = [] if n1_ok else ["post-contingency overload"]
            if not ppf_ok:
                why.append("voltage robustness")
            report.details.append(
                f"point ({point.r_p:.2f}, {point.r_q:.2f}): {', '.join(why)}"
            )
        elif point.label == SOFT and secure:
            report.false_infeasible += 1
    return report
