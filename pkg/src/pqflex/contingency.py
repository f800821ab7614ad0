"""N-1 line contingency screening via repeated AC power flow.

A contingency case is the outage of one in-service line whose removal
keeps the in-service graph connected (bridges and radial spurs are
excluded, their loss is an islanding event rather than a loading
problem). Per branch the figure of merit is the maximum loading over all
cases, the base case excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .grid import AdmittanceSet, Network, aggregate_injections, build_admittances
from .pf import Scenario, solve

__all__ = ["N1Result", "enumerate_cases", "build_outage_variants", "n1_analysis"]


@dataclass
class N1Result:
    case_ids: list[int]
    case_converged: np.ndarray  # bool, one per case
    case_loadings: np.ndarray  # (n_cases, n_branch), percent; inf where diverged
    lp_n1: np.ndarray  # per-branch max over cases, zeros when no cases

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.case_converged))


def _service_graph(net: Network) -> nx.MultiGraph:
    g = nx.MultiGraph()
    for ln in net.lines:
        if ln.in_service:
            g.add_edge(ln.from_bus, ln.to_bus, key=("line", ln.id))
    for t in net.trafos:
        if t.in_service:
            g.add_edge(t.hv_bus, t.lv_bus, key=("trafo", t.id))
    return g


def enumerate_cases(net: Network) -> list[int]:
    """Ids of in-service lines that can be outaged without islanding.

    A line survives the screen when a parallel in-service branch spans the
    same bus pair or when the collapsed simple edge is not a bridge.
    """
    g = _service_graph(net)
    if g.number_of_nodes() and not nx.is_connected(g):
        raise ValueError("in-service grid is not connected")
    simple = nx.Graph(g)
    bridges = set()
    for a, b in nx.bridges(simple):
        bridges.add((a, b))
        bridges.add((b, a))
    cases = []
    for ln in net.lines:
        if not ln.in_service:
            continue
        if g.number_of_edges(ln.from_bus, ln.to_bus) > 1:
            cases.append(ln.id)
        elif (ln.from_bus, ln.to_bus) not in bridges:
            cases.append(ln.id)
    return cases


def build_outage_variants(
    net: Network, case_ids: list[int] | None = None
) -> list[tuple[int, AdmittanceSet]]:
    """Admittance sets for each outage case, reusable across operating points."""
    if case_ids is None:
        case_ids = enumerate_cases(net)
    return [(cid, build_admittances(net, outage=cid)) for cid in case_ids]


def n1_analysis(
    net: Network,
    s_inj: np.ndarray | None = None,
    slack_v: float | None = None,
    variants: list[tuple[int, AdmittanceSet]] | None = None,
    warm: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> N1Result:
    """Solve every outage case at one operating point.

    A non-converged case is treated as insecure everywhere: its loading row
    is +inf, which propagates into ``lp_n1`` for every branch. The base
    case does not enter ``lp_n1``.
    """
    if s_inj is None:
        s_inj = aggregate_injections(net)
    if slack_v is None:
        slack_v = net.ext.v_pu
    if variants is None:
        variants = build_outage_variants(net)
    n_branch = len(net.lines) + len(net.trafos)
    case_ids = [cid for cid, _ in variants]
    loadings = np.zeros((len(variants), n_branch))
    converged = np.zeros(len(variants), dtype=bool)
    for k, (_, adm) in enumerate(variants):
        res = solve(Scenario(adm=adm, s_inj=s_inj, slack_v=slack_v), init=warm,
                    tol=tol, max_iter=max_iter)
        converged[k] = res.converged
        loadings[k] = res.loading if res.converged else np.inf
    lp_n1 = loadings.max(axis=0) if len(variants) else np.zeros(n_branch)
    return N1Result(
        case_ids=case_ids,
        case_converged=converged,
        case_loadings=loadings,
        lp_n1=lp_n1,
    )
