"""Static grid model: buses, branches, injections and admittance assembly.

All electrical quantities live in a per-unit system on a common MVA base
(``Network.base_mva``, default 100 MVA) with the voltage base given per bus
by ``vn_kv``. Branch admittances are stamped into a sparse bus admittance
matrix plus from/to branch admittance matrices so that branch currents are
plain matrix-vector products with the complex bus voltage vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Bus",
    "Line",
    "Transformer",
    "Load",
    "Der",
    "ExtGrid",
    "Network",
    "AdmittanceSet",
    "build_admittances",
    "der_q_limits",
    "aggregate_injections",
    "with_operating_point",
]


@dataclass(frozen=True)
class Bus:
    """Single electrical node. ``kind`` is 'slack' or 'pq'."""

    id: int
    vn_kv: float
    vmin_pu: float = 0.9
    vmax_pu: float = 1.1
    kind: str = "pq"


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float
    b_total_us: float = 0.0
    i_max_ka: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Transformer:
    """Two-winding transformer, HV side at ``hv_bus``.

    Short-circuit data vk/vkr in percent on the transformer's own ``sn_mva``
    base. The tap changer sits on the HV side and shifts the ratio by
    ``tap_step`` percent per position; the transformer is modelled as an
    ideal ratio in series with the short-circuit impedance.
    """

    id: int
    hv_bus: int
    lv_bus: int
    sn_mva: float
    vk_percent: float
    vkr_percent: float = 0.0
    tap_pos: int = 0
    tap_step: float = 1.5
    is_interface: bool = False
    in_service: bool = True


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p_mw: float
    q_mvar: float


@dataclass(frozen=True)
class Der:
    """Distributed generator. ``p_avail_mw`` is the current availability
    (e.g. wind), ``p_set_mw``/``q_set_mvar`` the dispatched setpoints.
    Controllable units accept setpoints, uncontrollable ones always run
    at availability with zero reactive power."""

    id: int
    bus: int
    p_inst_mw: float
    p_avail_mw: float
    p_set_mw: float = 0.0
    q_set_mvar: float = 0.0
    controllable: bool = True
    q_frac: float = 0.33


@dataclass(frozen=True)
class ExtGrid:
    """Slack connection point of the external (EHV) grid."""

    bus: int
    v_pu: float = 1.0


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...] = ()
    trafos: tuple[Transformer, ...] = ()
    loads: tuple[Load, ...] = ()
    ders: tuple[Der, ...] = ()
    ext: ExtGrid = ExtGrid(bus=0)
    base_mva: float = 100.0
    name: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        return self.ext.bus

    def bus_vmin(self) -> np.ndarray:
        return np.array([b.vmin_pu for b in self.buses])

    def bus_vmax(self) -> np.ndarray:
        return np.array([b.vmax_pu for b in self.buses])

    def controllable_ders(self) -> tuple[Der, ...]:
        return tuple(d for d in self.ders if d.controllable)

    def with_ders(self, ders: tuple[Der, ...]) -> "Network":
        return replace(self, ders=ders)

    def validate(self, require_interface: bool = False) -> None:
        """Raise ValueError on structural defects.

        Checks index ranges, id ordering, slack placement and positivity
        of ratings. With ``require_interface`` at least one in-service
        interface transformer must exist (needed by every workflow that
        measures the PQ exchange with the external grid).
        """
        n = self.n_bus
        if n == 0:
            raise ValueError("network has no buses")
        for i, b in enumerate(self.buses):
            if b.id != i:
                raise ValueError(f"bus id {b.id} at row {i}: ids must equal row order")
            if b.vn_kv <= 0:
                raise ValueError(f"bus {i}: vn_kv must be positive")
            if not (0 < b.vmin_pu < b.vmax_pu):
                raise ValueError(f"bus {i}: need 0 < vmin_pu < vmax_pu")
        if not (0 <= self.ext.bus < n):
            raise ValueError("ext grid bus out of range")
        if self.buses[self.ext.bus].kind != "slack":
            raise ValueError("ext grid must sit on the slack bus")
        if sum(1 for b in self.buses if b.kind == "slack") != 1:
            raise ValueError("exactly one slack bus required")
        if self.ext.v_pu <= 0:
            raise ValueError("ext grid voltage must be positive")
        if self.base_mva <= 0:
            raise ValueError("base_mva must be positive")
        for ln in self.lines:
            if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
                raise ValueError(f"line {ln.id}: bus index out of range")
            if ln.from_bus == ln.to_bus:
                raise ValueError(f"line {ln.id}: from and to bus coincide")
            if ln.r_ohm < 0 or ln.x_ohm == 0 and ln.r_ohm == 0:
                raise ValueError(f"line {ln.id}: series impedance must be nonzero, r >= 0")
            if ln.i_max_ka <= 0:
                raise ValueError(f"line {ln.id}: i_max_ka must be positive")
            if self.buses[ln.from_bus].vn_kv != self.buses[ln.to_bus].vn_kv:
                raise ValueError(f"line {ln.id}: connects different voltage levels")
        for t in self.trafos:
            if not (0 <= t.hv_bus < n and 0 <= t.lv_bus < n):
                raise ValueError(f"trafo {t.id}: bus index out of range")
            if t.hv_bus == t.lv_bus:
                raise ValueError(f"trafo {t.id}: hv and lv bus coincide")
            if t.sn_mva <= 0 or t.vk_percent <= 0:
                raise ValueError(f"trafo {t.id}: sn_mva and vk_percent must be positive")
            if t.vkr_percent < 0 or t.vkr_percent >= t.vk_percent:
                raise ValueError(f"trafo {t.id}: need 0 <= vkr < vk")
        for el, what in ((self.loads, "load"), (self.ders, "der")):
            for e in el:
                if not (0 <= e.bus < n):
                    raise ValueError(f"{what} {e.id}: bus index out of range")
        for d in self.ders:
            if d.p_inst_mw <= 0:
                raise ValueError(f"der {d.id}: p_inst_mw must be positive")
            if d.p_avail_mw < 0 or d.p_avail_mw > d.p_inst_mw:
                raise ValueError(f"der {d.id}: need 0 <= p_avail <= p_inst")
            if not (0 <= d.q_frac <= 1):
                raise ValueError(f"der {d.id}: q_frac outside [0, 1]")
        if require_interface:
            if not any(t.is_interface and t.in_service for t in self.trafos):
                raise ValueError("no in-service interface transformer")


@dataclass
class AdmittanceSet:
    """Assembled sparse admittances plus branch metadata.

    Treated as immutable after construction and safe to share between
    threads. Branch rows are all lines (in id order) followed by all
    transformers; out-of-service branches keep their row with zero stamps
    so ratings and loadings stay aligned across contingency variants.
    """

    ybus: sp.csr_matrix
    yf: sp.csr_matrix
    yt: sp.csr_matrix
    f_bus: np.ndarray
    t_bus: np.ndarray
    i_max_pu: np.ndarray
    branch_active: np.ndarray
    n_line: int
    slack_bus: int
    interface_rows: np.ndarray
    interface_hv: np.ndarray
    base_mva: float = 100.0
    _nr_cache: object = field(default=None, repr=False, compare=False)

    @property
    def n_bus(self) -> int:
        return self.ybus.shape[0]

    @property
    def n_branch(self) -> int:
        return len(self.f_bus)


def _line_admittance(line: Line, vn_kv: float, base_mva: float):
    """Pi-model stamps (yff, yft, ytf, ytt) of a line in per unit."""
    z_base = vn_kv * vn_kv / base_mva
    ys = 1.0 / complex(line.r_ohm / z_base, line.x_ohm / z_base)
    # total charging susceptance in micro-Siemens, split half per end
    b_sh = 0.5j * line.b_total_us * 1e-6 * z_base
    return ys + b_sh, -ys, -ys, ys + b_sh


def _trafo_admittance(trafo: Transformer, base_mva: float):
    """Stamps of a transformer with ideal HV-side ratio n = 1 + tap shift."""
    z = trafo.vk_percent / 100.0 * base_mva / trafo.sn_mva
    r = trafo.vkr_percent / 100.0 * base_mva / trafo.sn_mva
    x = math.sqrt(z * z - r * r)
    ys = 1.0 / complex(r, x)
    n = 1.0 + trafo.tap_pos * trafo.tap_step / 100.0
    return ys / (n * n), -ys / n, -ys / n, ys


def build_admittances(net: Network, outage: int | None = None) -> AdmittanceSet:
    """Assemble ybus/yf/yt for the grid, optionally with one line outaged.

    ``outage`` is a line id; the outaged line is treated exactly like an
    out-of-service one (zero stamps, rating kept). Branch row order and
    ratings are identical for every outage variant of the same network.
    """
    nb = net.n_bus
    branches = []
    for ln in net.lines:
        vn = net.buses[ln.from_bus].vn_kv
        active = ln.in_service and ln.id != outage
        stamps = _line_admittance(ln, vn, net.base_mva) if active else (0j, 0j, 0j, 0j)
        # rated current in pu of the bus current base I_b = base_mva / (sqrt(3) vn)
        imax = ln.i_max_ka * math.sqrt(3.0) * vn / net.base_mva
        branches.append((ln.from_bus, ln.to_bus, stamps, imax, active))
    for t in net.trafos:
        active = t.in_service
        stamps = _trafo_admittance(t, net.base_mva) if active else (0j, 0j, 0j, 0j)
        branches.append((t.hv_bus, t.lv_bus, stamps, t.sn_mva / net.base_mva, active))

    nbr = len(branches)
    f = np.array([b[0] for b in branches], dtype=np.int64)
    t_ = np.array([b[1] for b in branches], dtype=np.int64)
    yff = np.array([b[2][0] for b in branches], dtype=complex)
    yft = np.array([b[2][1] for b in branches], dtype=complex)
    ytf = np.array([b[2][2] for b in branches], dtype=complex)
    ytt = np.array([b[2][3] for b in branches], dtype=complex)

    rows = np.arange(nbr)
    yf_m = sp.csr_matrix(
        (np.concatenate([yff, yft]), (np.tile(rows, 2), np.concatenate([f, t_]))),
        shape=(nbr, nb),
    )
    yt_m = sp.csr_matrix(
        (np.concatenate([ytf, ytt]), (np.tile(rows, 2), np.concatenate([f, t_]))),
        shape=(nbr, nb),
    )
    # explicit zero diagonal keeps every bus inside the ybus sparsity
    # pattern even when isolated, so Jacobian indexing never changes shape
    diag = np.arange(nb)
    ybus = sp.csr_matrix(
        (
            np.concatenate([yff, ytt, yft, ytf, np.zeros(nb, dtype=complex)]),
            (
                np.concatenate([f, t_, f, t_, diag]),
                np.concatenate([f, t_, t_, f, diag]),
            ),
        ),
        shape=(nb, nb),
    )
    ybus.sum_duplicates()

    iface_rows = []
    iface_hv = []
    for k, t in enumerate(net.trafos):
        if t.is_interface and t.in_service:
            iface_rows.append(len(net.lines) + k)
            iface_hv.append(t.hv_bus)
    return AdmittanceSet(
        ybus=ybus,
        yf=yf_m,
        yt=yt_m,
        f_bus=f,
        t_bus=t_,
        i_max_pu=np.array([b[3] for b in branches]),
        branch_active=np.array([b[4] for b in branches], dtype=bool),
        n_line=len(net.lines),
        slack_bus=net.slack_bus,
        interface_rows=np.array(iface_rows, dtype=np.int64),
        interface_hv=np.array(iface_hv, dtype=np.int64),
        base_mva=net.base_mva,
    )


def with_operating_point(
    net: Network,
    load_p: np.ndarray | None = None,
    load_q: np.ndarray | None = None,
    der_avail: np.ndarray | None = None,
    p_set: np.ndarray | None = None,
    q_set: np.ndarray | None = None,
    ext_v: float | None = None,
) -> Network:
    """Copy of the network with element values replaced.

    ``p_set``/``q_set`` address only controllable DERs, in their order of
    appearance; the other arrays address all loads respectively all DERs.
    """
    loads = net.loads
    if load_p is not None or load_q is not None:
        lp = load_p if load_p is not None else [ld.p_mw for ld in net.loads]
        lq = load_q if load_q is not None else [ld.q_mvar for ld in net.loads]
        loads = tuple(
            replace(ld, p_mw=float(lp[i]), q_mvar=float(lq[i]))
            for i, ld in enumerate(net.loads)
        )
    ders = list(net.ders)
    if der_avail is not None:
        ders = [replace(d, p_avail_mw=float(der_avail[i])) for i, d in enumerate(ders)]
    if p_set is not None or q_set is not None:
        k = 0
        for i, d in enumerate(ders):
            if d.controllable:
                ders[i] = replace(
                    d,
                    p_set_mw=float(p_set[k]) if p_set is not None else d.p_set_mw,
                    q_set_mvar=float(q_set[k]) if q_set is not None else d.q_set_mvar,
                )
                k += 1
    ext = net.ext if ext_v is None else ExtGrid(bus=net.ext.bus, v_pu=float(ext_v))
    return replace(net, loads=loads, ders=tuple(ders), ext=ext)


def der_q_limits(der: Der, p_mw: float) -> tuple[float, float]:
    """Symmetric reactive band (q_min, q_max) in Mvar at active power p.

    Full band +-q_frac*p_inst above 20 percent of installed power, ramping
    linearly to zero below that knee (grid-code style capability curve).
    """
    knee = 0.2 * der.p_inst_mw
    full = der.q_frac * der.p_inst_mw
    if p_mw >= knee:
        q = full
    elif p_mw <= 0.0:
        q = 0.0
    else:
        q = p_mw / knee * full
    return -q, q


def aggregate_injections(net: Network) -> np.ndarray:
    """Complex per-bus injection S = P + jQ in pu (generation positive).

    DER setpoints minus loads; uncontrollable DERs inject their availability
    at unity power factor regardless of stored setpoints.
    """
    s = np.zeros(net.n_bus, dtype=complex)
    for d in net.ders:
        if d.controllable:
            s[d.bus] += complex(d.p_set_mw, d.q_set_mvar)
        else:
            s[d.bus] += complex(d.p_avail_mw, 0.0)
    for ld in net.loads:
        s[ld.bus] -= complex(ld.p_mw, ld.q_mvar)
    return s / net.base_mva
