"""Newton-Raphson AC power flow in polar coordinates.

The grid has one slack bus (the external-grid connection) and PQ buses
everywhere else. Convergence means the infinity norm of the complex power
mismatch drops below ``tol`` (1e-8 pu by default) within ``max_iter``
iterations. The Jacobian is assembled vectorized on a sparsity pattern
precomputed once per :class:`~pqflex.grid.AdmittanceSet` and factorized
with SuperLU.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import AdmittanceSet

__all__ = [
    "Scenario",
    "PfResult",
    "solve",
    "batch_solve",
    "branch_currents",
    "loading_percent",
]

_pattern_lock = threading.Lock()


@dataclass(frozen=True)
class Scenario:
    """One power-flow case: admittances, injections and slack voltage."""

    adm: AdmittanceSet
    s_inj: np.ndarray  # complex per-bus injection, pu, generation positive
    slack_v: float = 1.0


@dataclass
class PfResult:
    converged: bool
    v: np.ndarray
    iterations: int
    max_mismatch: float
    i_from: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=complex))
    i_to: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=complex))
    loading: np.ndarray = field(default_factory=lambda: np.empty(0))
    interface_p_mw: float = float("nan")
    interface_q_mvar: float = float("nan")

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)


class _NrPattern:
    """Index workspace tying ybus entries to Jacobian slots.

    For every non-slack (row, col) entry of ybus the four partials
    dP/dVa, dP/dVm, dQ/dVa, dQ/dVm land in one CSC matrix. Building a
    template once with integer markers yields the permutation that maps
    freshly computed block data straight into CSC order, so per-iteration
    work is pure ndarray math plus one factorization.
    """

    def __init__(self, adm: AdmittanceSet):
        coo = adm.ybus.tocoo()
        self.r = coo.row
        self.c = coo.col
        self.y = coo.data.copy()
        self.diag = (self.r == self.c).astype(float)
        nb = adm.n_bus
        self.pq = np.array([i for i in range(nb) if i != adm.slack_bus], dtype=np.int64)
        pos = np.full(nb, -1, dtype=np.int64)
        pos[self.pq] = np.arange(len(self.pq))
        self.mask = (pos[self.r] >= 0) & (pos[self.c] >= 0)
        mr = pos[self.r[self.mask]]
        mc = pos[self.c[self.mask]]
        npq = len(self.pq)
        jr = np.concatenate([mr, mr, mr + npq, mr + npq])
        jc = np.concatenate([mc, mc + npq, mc, mc + npq])
        nnz = 4 * len(mr)
        template = sp.csc_matrix(
            (np.arange(1, nnz + 1), (jr, jc)), shape=(2 * npq, 2 * npq)
        )
        self.order = template.data - 1
        self.indices = template.indices
        self.indptr = template.indptr
        self.shape = (2 * npq, 2 * npq)


def _pattern(adm: AdmittanceSet) -> _NrPattern:
    pat = adm._nr_cache
    if pat is None:
        with _pattern_lock:
            pat = adm._nr_cache
            if pat is None:
                pat = _NrPattern(adm)
                adm._nr_cache = pat
    return pat


def solve(
    scenario: Scenario,
    init: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> PfResult:
    """Solve one AC power flow.

    ``init`` is an optional complex warm-start voltage vector; the default
    is a flat start at the slack magnitude. The result always carries the
    last iterate so callers can inspect or reuse it even on divergence.
    """
    adm = scenario.adm
    pat = _pattern(adm)
    nb = adm.n_bus
    slack = adm.slack_bus
    if init is not None:
        v = init.astype(complex, copy=True)
    else:
        v = np.full(nb, complex(scenario.slack_v), dtype=complex)
    v[slack] = complex(scenario.slack_v)
    vm = np.abs(v)
    va = np.angle(v)

    pq = pat.pq
    npq = len(pq)
    s_sched = scenario.s_inj
    converged = False
    niter = 0
    mismatch = np.inf
    for it in range(max_iter + 1):
        ibus = adm.ybus @ v
        mis = v * np.conj(ibus) - s_sched
        f = np.concatenate([mis.real[pq], mis.imag[pq]])
        mismatch = float(np.max(np.abs(f))) if npq else 0.0
        if mismatch < tol:
            converged = True
            break
        if it == max_iter:
            break
        vr = v[pat.r]
        vnorm = v / np.abs(v)
        ib_r = ibus[pat.r]
        a = pat.y * v[pat.c]
        ds_dva = 1j * vr * np.conj(pat.diag * ib_r - a)
        ds_dvm = vr * np.conj(pat.y * vnorm[pat.c]) + pat.diag * np.conj(ib_r) * vnorm[pat.r]
        m = pat.mask
        data = np.concatenate(
            [ds_dva.real[m], ds_dvm.real[m], ds_dva.imag[m], ds_dvm.imag[m]]
        )[pat.order]
        jac = sp.csc_matrix((data, pat.indices, pat.indptr), shape=pat.shape)
        try:
            dx = splu(jac).solve(-f)
        except RuntimeError:
            break  # singular Jacobian, report divergence
        if not np.all(np.isfinite(dx)):
            break
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        if np.any(vm <= 0):
            break  # iterate left the physical region
        v = vm * np.exp(1j * va)
        v[slack] = complex(scenario.slack_v)
        niter = it + 1

    i_f, i_t = branch_currents(v, adm)
    lp = loading_percent(adm, i_f, i_t)
    p_mw, q_mvar = _interface_flow(v, adm)
    return PfResult(
        converged=converged,
        v=v,
        iterations=niter,
        max_mismatch=mismatch,
        i_from=i_f,
        i_to=i_t,
        loading=lp,
        interface_p_mw=p_mw,
        interface_q_mvar=q_mvar,
    )


def batch_solve(
    scenarios: list[Scenario],
    inits: list[np.ndarray | None] | None = None,
    workers: int | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> list[PfResult]:
    """Solve many scenarios, results in input order.

    Each case is an independent call of :func:`solve`, so the outputs are
    bit-identical to a sequential loop no matter how many workers run.
    ``workers`` defaults to the PQFLEX_WORKERS environment variable, else 1.
    """
    if inits is None:
        inits = [None] * len(scenarios)
    if len(inits) != len(scenarios):
        raise ValueError("inits length must match scenarios")
    if workers is None:
        workers = int(os.environ.get("PQFLEX_WORKERS", "1"))
    if workers <= 1 or len(scenarios) < 2:
        return [solve(s, v0, tol=tol, max_iter=max_iter) for s, v0 in zip(scenarios, inits)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(solve, s, v0, tol, max_iter) for s, v0 in zip(scenarios, inits)]
        return [f.result() for f in futs]


def branch_currents(v: np.ndarray, adm: AdmittanceSet) -> tuple[np.ndarray, np.ndarray]:
    """Complex branch current phasors at the from and to ends, pu."""
    return adm.yf @ v, adm.yt @ v


def loading_percent(adm: AdmittanceSet, i_from: np.ndarray, i_to: np.ndarray) -> np.ndarray:
    """Loading in percent: worse-end current magnitude over the rating."""
    imax = np.maximum(np.abs(i_from), np.abs(i_to))
    return imax / adm.i_max_pu * 100.0


def _interface_flow(v: np.ndarray, adm: AdmittanceSet) -> tuple[float, float]:
    """Aggregated PQ exchange with the external grid in MW / Mvar.

    Measured on the HV side of every interface transformer; positive means
    export toward the external grid, hence the sign flip of the flow going
    into the transformer.
    """
    if len(adm.interface_rows) == 0:
        return float("nan"), float("nan")
    i_f = (adm.yf[adm.interface_rows]) @ v
    s = v[adm.interface_hv] * np.conj(i_f)
    total = -np.sum(s) * adm.base_mva
    return float(total.real), float(total.imag)
