"""Monte Carlo probabilistic power flow for voltage-band robustness.

Loads, the external-grid voltage and DER availabilities are perturbed with
independent Gaussian noise proportional to their nominal values; every
sample is a full AC power flow. The per-bus output is the probability of
leaving the voltage band. Sampling is driven by one seeded generator with
a fixed draw order, so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import AdmittanceSet, Network, aggregate_injections, build_admittances, der_q_limits
from .pf import Scenario, batch_solve, solve

__all__ = ["McsResult", "run_mcs", "sample_injections"]


@dataclass
class McsResult:
    viol_prob: np.ndarray  # per bus, in [0, 1]
    n_samples: int
    n_converged: int
    vm_mean: np.ndarray  # over converged samples
    max_viol_prob: float


def sample_injections(
    net: Network,
    n_samples: int,
    rng: np.random.Generator,
    load_frac: float = 0.10,
    extv_frac: float = 0.01,
    der_frac: float = 0.10,
    perturb_der_avail: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw perturbed per-bus injections and slack voltages.

    Returns ``(s_inj, slack_v)`` with shapes (n_samples, n_bus) complex and
    (n_samples,). Draw order is fixed: load P block, load Q block, external
    voltage, DER availability. Sigma scales with the magnitude of the
    nominal value, so exact zeros stay exact. Controllable DER setpoints
    are clipped to the sampled availability and their reactive setpoint to
    the capability band at the clipped active power; uncontrollable units
    inject the sampled availability at unity power factor.
    """
    nb = net.n_bus
    n_load = len(net.loads)
    n_der = len(net.ders)
    load_p0 = np.array([ld.p_mw for ld in net.loads])
    load_q0 = np.array([ld.q_mvar for ld in net.loads])
    load_p = load_p0 + load_frac * np.abs(load_p0) * rng.standard_normal((n_samples, n_load))
    load_q = load_q0 + load_frac * np.abs(load_q0) * rng.standard_normal((n_samples, n_load))
    slack_v = net.ext.v_pu * (1.0 + extv_frac * rng.standard_normal(n_samples))
    avail0 = np.array([d.p_avail_mw for d in net.ders])
    if perturb_der_avail and n_der:
        avail = avail0 + der_frac * np.abs(avail0) * rng.standard_normal((n_samples, n_der))
        inst = np.array([d.p_inst_mw for d in net.ders])
        avail = np.clip(avail, 0.0, inst)
    else:
        avail = np.broadcast_to(avail0, (n_samples, n_der)).copy()

    s = np.zeros((n_samples, nb), dtype=complex)
    load_bus = np.array([ld.bus for ld in net.loads], dtype=np.int64)
    for j in range(n_load):
        s[:, load_bus[j]] -= load_p[:, j] + 1j * load_q[:, j]
    for j, d in enumerate(net.ders):
        if d.controllable:
            p = np.minimum(d.p_set_mw, avail[:, j])
            q_lo = np.empty(n_samples)
            q_hi = np.empty(n_samples)
            for i in range(n_samples):
                q_lo[i], q_hi[i] = der_q_limits(d, float(p[i]))
            q = np.clip(d.q_set_mvar, q_lo, q_hi)
        else:
            p = avail[:, j]
            q = np.zeros(n_samples)
        s[:, d.bus] += p + 1j * q
    return s / net.base_mva, slack_v


def run_mcs(
    net: Network,
    n_samples: int = 1000,
    seed: int = 0,
    load_frac: float = 0.10,
    extv_frac: float = 0.01,
    der_frac: float = 0.10,
    perturb_der_avail: bool = True,
    adm: AdmittanceSet | None = None,
    workers: int | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> McsResult:
    """Estimate per-bus voltage-band violation probabilities.

    All samples share the deterministic base solution as warm start, so the
    result does not depend on execution order or worker count. Samples
    whose power flow fails to converge count as violating at every bus.
    """
    if adm is None:
        adm = build_admittances(net)
    rng = np.random.default_rng(seed)
    s_all, v_all = sample_injections(
        net, n_samples, rng,
        load_frac=load_frac, extv_frac=extv_frac, der_frac=der_frac,
        perturb_der_avail=perturb_der_avail,
    )
    base = solve(
        Scenario(adm=adm, s_inj=aggregate_injections(net), slack_v=net.ext.v_pu),
        tol=tol, max_iter=max_iter,
    )
    warm = base.v if base.converged else None
    scenarios = [
        Scenario(adm=adm, s_inj=s_all[i], slack_v=float(v_all[i]))
        for i in range(n_samples)
    ]
    results = batch_solve(
        scenarios, inits=[warm] * n_samples, workers=workers, tol=tol, max_iter=max_iter
    )
    vmin = net.bus_vmin()
    vmax = net.bus_vmax()
    viol = np.zeros(net.n_bus)
    vm_sum = np.zeros(net.n_bus)
    n_conv = 0
    for res in results:
        if not res.converged:
            viol += 1.0
            continue
        n_conv += 1
        vm = res.vm
        vm_sum += vm
        viol += ((vm < vmin) | (vm > vmax)).astype(float)
    viol_prob = viol / n_samples
    vm_mean = vm_sum / n_conv if n_conv else np.full(net.n_bus, np.nan)
    return McsResult(
        viol_prob=viol_prob,
        n_samples=n_samples,
        n_converged=n_conv,
        vm_mean=vm_mean,
        max_viol_prob=float(viol_prob.max()),
    )
