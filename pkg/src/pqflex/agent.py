"""Setpoint agent: a network that maps grid state plus a PQ requirement at
the interface to DER setpoints, trained against power-flow feedback.

There is no labelled optimum anywhere in here. The training signal is an
augmented loss evaluated by running the AC power flow on the agent's own
setpoints: distance of the realized interface PQ from the requested one,
normalized by the reachable span, plus weighted voltage-band and loading
penalties. Gradients with respect to the actions come from central finite
differences through the power flow and are pushed into the network by
backpropagation.

Stage 1 trains against base-case limits only. Stage 2 re-trains with
per-sample tightened limits derived from exact N-1 and Monte Carlo
screening of the stage-1 solutions, which buys back security margin at a
small cost in tracking accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contingency import build_outage_variants, n1_analysis
from .grid import (
    AdmittanceSet,
    Der,
    Network,
    build_admittances,
    der_q_limits,
    with_operating_point,
)
from .nn import (
    Mlp,
    MlpConfig,
    Standardizer,
    AdamState,
    adam_step,
    backprop_action_grads,
    load_mlp,
    save_mlp,
)
from .pf import PfResult, Scenario, batch_solve, solve
from .ppf import run_mcs

__all__ = [
    "AugLossConfig",
    "SampleSet",
    "FlexBounds",
    "EvalContext",
    "EvalResult",
    "AnnOpfAgent",
    "SecurityMarks",
    "scale_actions",
    "flex_bounds",
    "build_features",
    "objective",
    "penalties",
    "augmented_loss",
    "evaluate_setpoints",
    "action_gradients",
    "generate_samples",
    "train_stage1",
    "train_stage2",
    "compute_security_marks",
    "baseline_max_p",
    "baseline_optimize",
    "BaselineResult",
    "BASELINE_MODES",
    "save_agent",
    "load_agent",
]

DIVERGED_LOSS_FACTOR = 10.0  # loss of a non-converged sample: factor * w_v


@dataclass(frozen=True)
class AugLossConfig:
    """Weights and limits of the augmented training loss."""

    w_v: float = 100.0
    w_lp: float = 1.0
    lp_max: float = 100.0
    robust_margin_v: float = 0.01
    prob_threshold: float = 0.10

    def __post_init__(self):
        # zero weights are legitimate: an unpenalized agent is the natural
        # ablation reference, it tracks requirements with no regard for limits
        if self.w_v < 0 or self.w_lp < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.lp_max <= 0:
            raise ValueError("lp_max must be positive")
        if not (0 <= self.prob_threshold <= 1):
            raise ValueError("prob_threshold outside [0, 1]")


@dataclass
class FlexBounds:
    p_min: float
    p_max: float
    q_min: float
    q_max: float

    @property
    def p_span(self) -> float:
        return max(self.p_max - self.p_min, 1e-9)

    @property
    def q_span(self) -> float:
        return max(self.q_max - self.q_min, 1e-9)


@dataclass
class SampleSet:
    """Training scenarios: grid state plus requested interface PQ."""

    load_p: np.ndarray  # (n, n_load) MW
    load_q: np.ndarray  # (n, n_load) Mvar
    der_avail: np.ndarray  # (n, n_der) MW
    ext_v: np.ndarray  # (n,)
    r_p: np.ndarray  # (n,) requested interface P, MW
    r_q: np.ndarray  # (n,) requested interface Q, Mvar
    bounds: np.ndarray  # (n, 4) p_min, p_max, q_min, q_max per sample

    def __len__(self) -> int:
        return len(self.r_p)

    def row_bounds(self, i: int) -> FlexBounds:
        return FlexBounds(*self.bounds[i])


@dataclass
class EvalContext:
    """Everything an evaluation of one operating point needs, built once."""

    net: Network
    adm: AdmittanceSet
    ctrl: tuple[Der, ...]
    loss_cfg: AugLossConfig
    vmin: np.ndarray
    vmax: np.ndarray
    lp_limit: np.ndarray
    load_bus: np.ndarray
    der_bus: np.ndarray
    ctrl_mask: np.ndarray
    workers: int | None = None

    @classmethod
    def create(
        cls,
        net: Network,
        loss_cfg: AugLossConfig | None = None,
        adm: AdmittanceSet | None = None,
        workers: int | None = None,
        vmin: float | None = None,
        vmax: float | None = None,
    ) -> "EvalContext":
        """Build the context; scalar vmin/vmax override every bus band."""
        loss_cfg = loss_cfg or AugLossConfig()
        adm = adm if adm is not None else build_admittances(net)
        n_bus = len(net.buses)
        return cls(
            net=net,
            adm=adm,
            ctrl=net.controllable_ders(),
            loss_cfg=loss_cfg,
            vmin=np.full(n_bus, vmin) if vmin is not None else net.bus_vmin(),
            vmax=np.full(n_bus, vmax) if vmax is not None else net.bus_vmax(),
            lp_limit=np.full(adm.n_branch, loss_cfg.lp_max),
            load_bus=np.array([ld.bus for ld in net.loads], dtype=np.int64),
            der_bus=np.array([d.bus for d in net.ders], dtype=np.int64),
            ctrl_mask=np.array([d.controllable for d in net.ders], dtype=bool),
            workers=workers,
        )

    @property
    def n_actions(self) -> int:
        return 2 * len(self.ctrl)

    def injections(
        self,
        load_p: np.ndarray,
        load_q: np.ndarray,
        der_avail: np.ndarray,
        p_set: np.ndarray,
        q_set: np.ndarray,
    ) -> np.ndarray:
        """Per-bus complex injection in pu for one operating point."""
        s = np.zeros(self.net.n_bus, dtype=complex)
        np.add.at(s, self.load_bus, -(load_p + 1j * load_q))
        uc = ~self.ctrl_mask
        np.add.at(s, self.der_bus[uc], der_avail[uc].astype(complex))
        np.add.at(s, self.der_bus[self.ctrl_mask], p_set + 1j * q_set)
        return s / self.net.base_mva


@dataclass
class EvalResult:
    converged: bool
    p_t: float
    q_t: float
    objective: float
    l_v: float
    l_lp: float
    loss: float
    vm: np.ndarray
    loading: np.ndarray
    v: np.ndarray  # complex, reusable as warm start


def scale_actions(
    raw: np.ndarray, ctrl: tuple[Der, ...], der_avail_ctrl: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Map raw actions in (-1, 1) to feasible DER setpoints.

    Active power spans [0, available]; reactive power spans the capability
    band evaluated at the chosen active power, so any raw vector lands on
    an admissible setpoint. Inputs are clamped to the open interval first,
    which silently saturates finite-difference probes at the box edge.
    """
    raw = np.clip(np.asarray(raw, dtype=float), -1.0 + 1e-9, 1.0 - 1e-9)
    nc = len(ctrl)
    p_raw = raw[:nc]
    q_raw = raw[nc:]
    p_set = np.empty(nc)
    q_set = np.empty(nc)
    for k, d in enumerate(ctrl):
        cap = min(float(der_avail_ctrl[k]), d.p_inst_mw)
        cap = max(cap, 0.0)
        p_set[k] = 0.5 * (p_raw[k] + 1.0) * cap
        q_lo, q_hi = der_q_limits(d, p_set[k])
        q_set[k] = q_lo + 0.5 * (q_raw[k] + 1.0) * (q_hi - q_lo)
    return p_set, q_set


def flex_bounds(
    ctx: EvalContext,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    warm: np.ndarray | None = None,
) -> FlexBounds:
    """Reachable interface PQ span from four extreme-dispatch probes.

    Full active feed-in at neutral reactive power maximizes export, zero
    feed-in minimizes it; the reactive extremes run full feed-in with the
    capability band pinned at either edge. Non-converged probes fall back
    to the base interface flow so downstream normalization stays finite.
    """
    avail_ctrl = der_avail[ctx.ctrl_mask]
    nc = len(ctx.ctrl)
    probes = []
    for p_mode, q_mode in (("avail", "zero"), ("zero", "zero"),
                           ("avail", "hi"), ("avail", "lo")):
        p = avail_ctrl.copy() if p_mode == "avail" else np.zeros(nc)
        q = np.empty(nc)
        for k, d in enumerate(ctx.ctrl):
            lo, hi = der_q_limits(d, float(p[k]))
            q[k] = {"zero": 0.0, "hi": hi, "lo": lo}[q_mode]
        probes.append(ctx.injections(load_p, load_q, der_avail, p, q))
    scenarios = [Scenario(adm=ctx.adm, s_inj=s, slack_v=ext_v) for s in probes]
    results = batch_solve(scenarios, inits=[warm] * 4, workers=ctx.workers)
    flows = []
    fallback = None
    for res in results:
        if res.converged:
            fallback = (res.interface_p_mw, res.interface_q_mvar)
            break
    for res in results:
        if res.converged:
            flows.append((res.interface_p_mw, res.interface_q_mvar))
        elif fallback is not None:
            flows.append(fallback)
        else:
            flows.append((0.0, 0.0))
    return FlexBounds(
        p_min=min(flows[1][0], flows[0][0]),
        p_max=max(flows[1][0], flows[0][0]),
        q_min=min(flows[3][1], flows[2][1]),
        q_max=max(flows[3][1], flows[2][1]),
    )


def build_features(
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: np.ndarray,
    r_p: np.ndarray,
    r_q: np.ndarray,
) -> np.ndarray:
    """Raw feature rows: loads, availabilities, slack voltage, requirement."""
    return np.column_stack([
        np.atleast_2d(load_p),
        np.atleast_2d(load_q),
        np.atleast_2d(der_avail),
        np.atleast_1d(ext_v)[:, None],
        np.atleast_1d(r_p)[:, None],
        np.atleast_1d(r_q)[:, None],
    ])


def objective(p_t: float, q_t: float, r_p: float, r_q: float, bounds: FlexBounds) -> float:
    """Requirement tracking error, each axis normalized by its reachable span."""
    return abs(p_t - r_p) / bounds.p_span + abs(q_t - r_q) / bounds.q_span


def penalties(
    vm: np.ndarray,
    loading: np.ndarray,
    vmin: np.ndarray,
    vmax: np.ndarray,
    lp_limit: np.ndarray,
) -> tuple[float, float]:
    """Voltage-band and loading-limit excess, summed over buses / branches.

    Voltage excess is in pu, loading excess in percent points; the limits
    are arrays so per-sample tightened limits plug in without special
    cases.
    """
    l_v = float(np.sum(np.maximum(vmin - vm, 0.0) + np.maximum(vm - vmax, 0.0)))
    l_lp = float(np.sum(np.maximum(loading - lp_limit, 0.0)))
    return l_v, l_lp


def augmented_loss(obj: float, l_v: float, l_lp: float, cfg: AugLossConfig) -> float:
    return obj + cfg.w_v * l_v + cfg.w_lp * l_lp


@dataclass
class _Limits:
    vmin: np.ndarray
    vmax: np.ndarray
    lp_limit: np.ndarray


def _result_to_eval(
    res: PfResult,
    r_p: float,
    r_q: float,
    bounds: FlexBounds,
    cfg: AugLossConfig,
    lim: _Limits,
) -> EvalResult:
    if not res.converged:
        return EvalResult(
            converged=False,
            p_t=float("nan"),
            q_t=float("nan"),
            objective=float("nan"),
            l_v=float("nan"),
            l_lp=float("nan"),
            loss=DIVERGED_LOSS_FACTOR * cfg.w_v,
            vm=res.vm,
            loading=res.loading,
            v=res.v,
        )
    obj = objective(res.interface_p_mw, res.interface_q_mvar, r_p, r_q, bounds)
    # inactive branches keep zero loading, they never contribute here
    l_v, l_lp = penalties(res.vm, res.loading, lim.vmin, lim.vmax, lim.lp_limit)
    return EvalResult(
        converged=True,
        p_t=res.interface_p_mw,
        q_t=res.interface_q_mvar,
        objective=obj,
        l_v=l_v,
        l_lp=l_lp,
        loss=augmented_loss(obj, l_v, l_lp, cfg),
        vm=res.vm,
        loading=res.loading,
        v=res.v,
    )


def _limits_for(ctx: EvalContext, override: tuple | None) -> _Limits:
    if override is None:
        return _Limits(ctx.vmin, ctx.vmax, ctx.lp_limit)
    return _Limits(*override)


def evaluate_setpoints(
    ctx: EvalContext,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    p_set: np.ndarray,
    q_set: np.ndarray,
    r_p: float,
    r_q: float,
    bounds: FlexBounds,
    limits: tuple | None = None,
    warm: np.ndarray | None = None,
) -> EvalResult:
    """Run one power flow and score it under the augmented loss."""
    s = ctx.injections(load_p, load_q, der_avail, p_set, q_set)
    res = solve(Scenario(adm=ctx.adm, s_inj=s, slack_v=ext_v), init=warm)
    return _result_to_eval(res, r_p, r_q, bounds, ctx.loss_cfg, _limits_for(ctx, limits))


def action_gradients(
    ctx: EvalContext,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    raw: np.ndarray,
    r_p: float,
    r_q: float,
    bounds: FlexBounds,
    limits: tuple | None = None,
    h: float = 1e-3,
    warm: np.ndarray | None = None,
    loss_fn=None,
) -> tuple[np.ndarray, EvalResult]:
    """Finite-difference gradient of the augmented loss in raw actions.

    One batch holds the base point plus both central probes per action
    dimension. Central differences are used wherever both probes converge;
    a non-converged probe degrades that dimension to the one-sided quotient
    against the base, and a non-converged base zeroes the whole gradient
    (the diverged-sample loss is constant by design, there is nothing to
    descend along). ``loss_fn`` swaps the differenced quantity for another
    scalar of the evaluation, e.g. an extremal-dispatch objective.
    """
    n_a = ctx.n_actions
    avail_ctrl = der_avail[ctx.ctrl_mask]
    lim = _limits_for(ctx, limits)
    score = loss_fn if loss_fn is not None else (lambda ev: ev.loss)

    def inj(raw_vec: np.ndarray) -> np.ndarray:
        p_set, q_set = scale_actions(raw_vec, ctx.ctrl, avail_ctrl)
        return ctx.injections(load_p, load_q, der_avail, p_set, q_set)

    scenarios = [Scenario(adm=ctx.adm, s_inj=inj(raw), slack_v=ext_v)]
    for i in range(n_a):
        up = raw.copy()
        up[i] += h
        dn = raw.copy()
        dn[i] -= h
        scenarios.append(Scenario(adm=ctx.adm, s_inj=inj(up), slack_v=ext_v))
        scenarios.append(Scenario(adm=ctx.adm, s_inj=inj(dn), slack_v=ext_v))
    results = batch_solve(scenarios, inits=[warm] * len(scenarios), workers=ctx.workers)
    evals = [
        _result_to_eval(res, r_p, r_q, bounds, ctx.loss_cfg, lim) for res in results
    ]
    base = evals[0]
    grad = np.zeros(n_a)
    if not base.converged:
        return grad, base
    base_score = score(base)
    for i in range(n_a):
        up, dn = evals[1 + 2 * i], evals[2 + 2 * i]
        if up.converged and dn.converged:
            grad[i] = (score(up) - score(dn)) / (2.0 * h)
        elif up.converged:
            grad[i] = (score(up) - base_score) / h
        elif dn.converged:
            grad[i] = (base_score - score(dn)) / h
        # both diverged: leave zero, the neighbourhood gives no signal
    return grad, base


class AnnOpfAgent:
    """Network plus feature scaling plus the structural sizes it expects."""

    def __init__(self, mlp: Mlp, x_std: Standardizer, n_load: int, n_der: int, n_ctrl: int):
        self.mlp = mlp
        self.x_std = x_std
        self.n_load = n_load
        self.n_der = n_der
        self.n_ctrl = n_ctrl

    @classmethod
    def create(
        cls,
        net: Network,
        samples: SampleSet,
        hidden: tuple[int, ...] = (100, 100),
        seed: int = 0,
    ) -> "AnnOpfAgent":
        n_ctrl = len(net.controllable_ders())
        feats = build_features(
            samples.load_p, samples.load_q, samples.der_avail,
            samples.ext_v, samples.r_p, samples.r_q,
        )
        x_std = Standardizer().fit(feats)
        mlp = Mlp(MlpConfig(
            n_in=feats.shape[1],
            hidden=hidden,
            n_out=2 * n_ctrl,
            out_activation="tanh",
            seed=seed,
        ))
        return cls(mlp, x_std, len(net.loads), len(net.ders), n_ctrl)

    def check_compatible(self, net: Network) -> None:
        if (
            len(net.loads) != self.n_load
            or len(net.ders) != self.n_der
            or len(net.controllable_ders()) != self.n_ctrl
        ):
            raise ValueError("agent was trained for a different grid structure")

    def raw_actions(self, feats_raw: np.ndarray) -> np.ndarray:
        return self.mlp.forward(self.x_std.transform(feats_raw))

    def setpoints(
        self,
        ctx: EvalContext,
        load_p: np.ndarray,
        load_q: np.ndarray,
        der_avail: np.ndarray,
        ext_v: float,
        r_p: float,
        r_q: float,
    ) -> tuple[np.ndarray, np.ndarray]:
        feats = build_features(
            load_p[None, :], load_q[None, :], der_avail[None, :],
            np.array([ext_v]), np.array([r_p]), np.array([r_q]),
        )
        raw = self.raw_actions(feats)[0]
        return scale_actions(raw, ctx.ctrl, der_avail[ctx.ctrl_mask])


def generate_samples(
    net: Network,
    n: int,
    seed: int = 0,
    profiles: np.ndarray | None = None,
    common_noise: float = 0.05,
    device_noise: float = 0.01,
    extv_frac: float = 0.01,
    ctx: EvalContext | None = None,
) -> SampleSet:
    """Draw training scenarios around nominal values or profile steps.

    ``profiles`` rows are (load_p, load_q, der_avail) scalings; per sample
    one row is drawn and jittered with a common lognormal-free factor per
    category plus independent per-device noise. The requirement is uniform
    inside the sample's own reachable PQ box from :func:`flex_bounds`.
    """
    rng = np.random.default_rng(seed)
    ctx = ctx or EvalContext.create(net)
    n_load = len(net.loads)
    n_der = len(net.ders)
    p0 = np.array([ld.p_mw for ld in net.loads])
    q0 = np.array([ld.q_mvar for ld in net.loads])
    inst = np.array([d.p_inst_mw for d in net.ders])
    avail_frac0 = np.array([
        d.p_avail_mw / d.p_inst_mw if d.p_inst_mw > 0 else 0.0 for d in net.ders
    ])

    if profiles is not None and len(profiles):
        steps = rng.integers(0, len(profiles), size=n)
        scale_lp = profiles[steps, 0]
        scale_lq = profiles[steps, 1]
        scale_av = profiles[steps, 2]
    else:
        scale_lp = np.ones(n)
        scale_lq = np.ones(n)
        scale_av = np.ones(n)

    common = 1.0 + common_noise * rng.standard_normal((n, 3))
    load_p = np.clip(
        p0 * (scale_lp * common[:, 0])[:, None]
        * (1.0 + device_noise * rng.standard_normal((n, n_load))),
        0.0, None,
    )
    load_q = (
        q0 * (scale_lq * common[:, 1])[:, None]
        * (1.0 + device_noise * rng.standard_normal((n, n_load)))
    )
    avail = np.clip(
        avail_frac0 * (scale_av * common[:, 2])[:, None]
        * (1.0 + device_noise * rng.standard_normal((n, n_der))),
        0.0, 1.0,
    ) * inst
    ext_v = net.ext.v_pu * (1.0 + extv_frac * rng.standard_normal(n))

    bounds = np.empty((n, 4))
    r_p = np.empty(n)
    r_q = np.empty(n)
    warm = None
    for i in range(n):
        fb = flex_bounds(ctx, load_p[i], load_q[i], avail[i], float(ext_v[i]), warm=warm)
        bounds[i] = (fb.p_min, fb.p_max, fb.q_min, fb.q_max)
        r_p[i] = rng.uniform(fb.p_min, fb.p_max)
        r_q[i] = rng.uniform(fb.q_min, fb.q_max)
    return SampleSet(
        load_p=load_p, load_q=load_q, der_avail=avail,
        ext_v=ext_v, r_p=r_p, r_q=r_q, bounds=bounds,
    )


def _train_loop(
    agent: AnnOpfAgent,
    ctx: EvalContext,
    samples: SampleSet,
    epochs: int,
    batch_size: int,
    lr: float,
    h: float,
    seed: int,
    per_sample_limits: list[tuple] | None,
) -> dict:
    feats_raw = build_features(
        samples.load_p, samples.load_q, samples.der_avail,
        samples.ext_v, samples.r_p, samples.r_q,
    )
    x = agent.x_std.transform(feats_raw)
    n = len(samples)
    rng = np.random.default_rng(seed)
    state = AdamState.for_params(agent.mlp.params)
    warm_cache: list[np.ndarray | None] = [None] * n
    hist: dict = {"loss": [], "objective": [], "l_v": [], "l_lp": [], "diverged": []}
    for _ in range(epochs):
        order = rng.permutation(n)
        tot_loss = 0.0
        tot_obj = 0.0
        tot_lv = 0.0
        tot_lp = 0.0
        n_div = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            raw_batch = agent.mlp.forward(x[idx])
            grads_out = np.zeros_like(raw_batch)
            for j, i in enumerate(idx):
                lim = per_sample_limits[i] if per_sample_limits is not None else None
                grad, base = action_gradients(
                    ctx,
                    samples.load_p[i], samples.load_q[i], samples.der_avail[i],
                    float(samples.ext_v[i]),
                    raw_batch[j].copy(),
                    float(samples.r_p[i]), float(samples.r_q[i]),
                    samples.row_bounds(i),
                    limits=lim,
                    h=h,
                    warm=warm_cache[i],
                )
                grads_out[j] = grad / len(idx)
                tot_loss += base.loss
                if base.converged:
                    warm_cache[i] = base.v
                    tot_obj += base.objective
                    tot_lv += base.l_v
                    tot_lp += base.l_lp
                else:
                    n_div += 1
            param_grads = backprop_action_grads(agent.mlp, x[idx], grads_out)
            adam_step(agent.mlp.params, param_grads, state, lr=lr)
        n_conv = max(n - n_div, 1)
        hist["loss"].append(tot_loss / n)
        hist["objective"].append(tot_obj / n_conv)
        hist["l_v"].append(tot_lv / n_conv)
        hist["l_lp"].append(tot_lp / n_conv)
        hist["diverged"].append(n_div)
    return hist


def train_stage1(
    agent: AnnOpfAgent,
    ctx: EvalContext,
    samples: SampleSet,
    epochs: int = 30,
    batch_size: int = 256,
    lr: float = 1e-3,
    h: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Train against base-case limits. Returns per-epoch history."""
    agent.check_compatible(ctx.net)
    return _train_loop(agent, ctx, samples, epochs, batch_size, lr, h, seed, None)


@dataclass
class SecurityMarks:
    """Per-sample tightened limits from exact screening of frozen solutions."""

    vmin: np.ndarray  # (n, n_bus)
    vmax: np.ndarray  # (n, n_bus)
    lp_limit: np.ndarray  # (n, n_branch)
    n1_marked: np.ndarray  # (n,) bool
    ppf_marked: np.ndarray  # (n,) bool

    def row(self, i: int) -> tuple:
        return (self.vmin[i], self.vmax[i], self.lp_limit[i])


def compute_security_marks(
    ctx: EvalContext,
    agent: AnnOpfAgent | None,
    samples: SampleSet,
    mcs_samples: int = 200,
    mcs_seed: int = 1000,
    workers: int | None = None,
    setpoints: tuple[np.ndarray, np.ndarray] | None = None,
) -> SecurityMarks:
    """Screen every sample's frozen solution with exact N-1 and Monte Carlo.

    Lines whose worst post-contingency loading exceeds the limit get their
    base-case limit cut by that overshoot relative to the frozen loading;
    buses whose violation probability exceeds the threshold get the band
    edge the frozen voltage leans toward pulled in by the robust margin.

    The frozen solutions come from the agent, or from explicit per-sample
    ``setpoints`` arrays of shape (n, n_ctrl) when screening an externally
    proposed dispatch.
    """
    if (agent is None) == (setpoints is None):
        raise ValueError("provide exactly one of agent or setpoints")
    cfg = ctx.loss_cfg
    n = len(samples)
    marks = SecurityMarks(
        vmin=np.tile(ctx.vmin, (n, 1)),
        vmax=np.tile(ctx.vmax, (n, 1)),
        lp_limit=np.tile(ctx.lp_limit, (n, 1)),
        n1_marked=np.zeros(n, dtype=bool),
        ppf_marked=np.zeros(n, dtype=bool),
    )
    variants = build_outage_variants(ctx.net)
    mid_band = 0.5 * (ctx.vmin + ctx.vmax)
    warm = None
    for i in range(n):
        if agent is not None:
            p_set, q_set = agent.setpoints(
                ctx,
                samples.load_p[i], samples.load_q[i], samples.der_avail[i],
                float(samples.ext_v[i]), float(samples.r_p[i]), float(samples.r_q[i]),
            )
        else:
            p_set, q_set = setpoints[0][i], setpoints[1][i]
        s_inj = ctx.injections(
            samples.load_p[i], samples.load_q[i], samples.der_avail[i], p_set, q_set
        )
        base = solve(Scenario(adm=ctx.adm, s_inj=s_inj, slack_v=float(samples.ext_v[i])),
                     init=warm)
        if not base.converged:
            # hard-infeasible sample: nothing to tighten, stage 2 sees the
            # same diverged constant loss as stage 1
            continue
        warm = base.v
        n1 = n1_analysis(
            ctx.net, s_inj=s_inj, slack_v=float(samples.ext_v[i]),
            variants=variants, warm=base.v,
        )
        over = n1.lp_n1 > cfg.lp_max
        if np.any(over):
            marks.n1_marked[i] = True
            d = n1.lp_n1[over] - cfg.lp_max
            tightened = np.maximum(base.loading[over] - d, 0.0)
            marks.lp_limit[i, over] = np.minimum(cfg.lp_max, tightened)
        op_net = with_operating_point(
            ctx.net,
            load_p=samples.load_p[i], load_q=samples.load_q[i],
            der_avail=samples.der_avail[i],
            p_set=p_set, q_set=q_set, ext_v=float(samples.ext_v[i]),
        )
        mcs = run_mcs(
            op_net, n_samples=mcs_samples, seed=mcs_seed + i,
            adm=ctx.adm, workers=workers or ctx.workers,
        )
        risky = mcs.viol_prob > cfg.prob_threshold
        if np.any(risky):
            marks.ppf_marked[i] = True
            for b in np.nonzero(risky)[0]:
                if base.vm[b] >= mid_band[b]:
                    marks.vmax[i, b] = ctx.vmax[b] - cfg.robust_margin_v
                else:
                    marks.vmin[i, b] = ctx.vmin[b] + cfg.robust_margin_v
    return marks


def train_stage2(
    agent: AnnOpfAgent,
    ctx: EvalContext,
    samples: SampleSet,
    marks: SecurityMarks,
    epochs: int = 15,
    batch_size: int = 256,
    lr: float = 5e-4,
    h: float = 1e-3,
    seed: int = 1,
) -> dict:
    """Re-train under the per-sample tightened limits."""
    agent.check_compatible(ctx.net)
    limits = [marks.row(i) for i in range(len(samples))]
    return _train_loop(agent, ctx, samples, epochs, batch_size, lr, h, seed, limits)


def marked_counts(ctx: EvalContext, marks: SecurityMarks) -> tuple[int, int]:
    """Distinct lines and buses tightened by the screening in any sample."""
    lines = np.any(marks.lp_limit < ctx.lp_limit[None, :] - 1e-12, axis=0)
    buses = np.any(
        (marks.vmin > ctx.vmin[None, :] + 1e-12)
        | (marks.vmax < ctx.vmax[None, :] - 1e-12),
        axis=0,
    )
    return int(np.sum(lines)), int(np.sum(buses))


def append_telemetry(
    path,
    hist: dict,
    marked_lines: int = 0,
    marked_buses: int = 0,
) -> None:
    """Append one row per epoch to the training CSV log.

    Epoch numbering continues from whatever the log already holds, so a
    stage-2 run appends after its stage-1 rows instead of restarting at 0.
    """
    import csv
    import os

    start = 0
    exists = os.path.exists(path)
    if exists:
        with open(path, newline="") as f:
            start = max(sum(1 for _ in f) - 1, 0)
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if not exists:
            w.writerow(["epoch", "objective", "l_v", "l_lp",
                        "marked_lines", "marked_buses"])
        for k in range(len(hist["objective"])):
            w.writerow([start + k, f"{hist['objective'][k]:.10g}",
                        f"{hist['l_v'][k]:.10g}", f"{hist['l_lp'][k]:.10g}",
                        marked_lines, marked_buses])


def baseline_max_p(
    ctx: EvalContext,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    curtail_step: float = 0.05,
    max_rounds: int = 400,
) -> tuple[np.ndarray, np.ndarray, EvalResult]:
    """Greedy maximum-export dispatch honouring base-case limits.

    Starts from full available feed-in at unity power factor. While limits
    are violated, finite-difference sensitivities of the total violation
    with respect to each unit's active power pick the most effective unit,
    which is curtailed one step; units with no leverage on the violation
    are never touched. Plain, slow and transparent on purpose: this is the
    reference the trained agent is measured against.
    """
    nc = len(ctx.ctrl)
    avail_ctrl = np.minimum(der_avail[ctx.ctrl_mask],
                            np.array([d.p_inst_mw for d in ctx.ctrl]))
    p = avail_ctrl.copy()
    q = np.zeros(nc)
    dummy = FlexBounds(0.0, 1.0, 0.0, 1.0)

    def run(p_vec: np.ndarray) -> EvalResult:
        return evaluate_setpoints(
            ctx, load_p, load_q, der_avail, ext_v, p_vec, q,
            r_p=0.0, r_q=0.0, bounds=dummy,
        )

    def total_violation(ev: EvalResult) -> float:
        if not ev.converged:
            return float("inf")
        return ctx.loss_cfg.w_v * ev.l_v + ctx.loss_cfg.w_lp * ev.l_lp

    base = run(p)
    for _ in range(max_rounds):
        viol = total_violation(base)
        if viol <= 0.0:
            break
        step = curtail_step * np.maximum(avail_ctrl, 1e-6)
        best_k = -1
        best_gain = 0.0
        best_eval = None
        for k in range(nc):
            if p[k] <= 1e-9:
                continue
            trial = p.copy()
            trial[k] = max(0.0, trial[k] - step[k])
            ev = run(trial)
            gain = viol - total_violation(ev)
            if gain > best_gain + 1e-12:
                best_gain = gain
                best_k = k
                best_eval = ev
        if best_k < 0:
            break  # curtailment has no leverage on the remaining violation
        p[best_k] = max(0.0, p[best_k] - step[best_k])
        base = best_eval
    return p, q, base


BASELINE_MODES = ("requirement", "max_p", "max_q", "min_q")


@dataclass
class BaselineResult:
    p_set: np.ndarray
    q_set: np.ndarray
    eval: EvalResult
    feasible: bool
    iterations: int
    best_score: float


def _mode_functions(mode: str, bounds: FlexBounds, cfg: AugLossConfig):
    """Scalar triple (drive, pen, composite) to minimize for one mode.

    The drive steers feasible iterates, the penalty alone steers the
    restoration steps out of the infeasible region, and their sum ranks
    iterates overall. Non-converged evaluations always score as their own
    (constant) loss so nothing is differenced across the divergence edge.
    """

    def pen(ev: EvalResult) -> float:
        if not ev.converged:
            return ev.loss
        return cfg.w_v * ev.l_v + cfg.w_lp * ev.l_lp

    def drive(ev: EvalResult) -> float:
        if not ev.converged:
            return ev.loss
        if mode == "requirement":
            return ev.objective
        if mode == "max_p":
            return -(ev.p_t - bounds.p_min) / bounds.p_span
        if mode == "max_q":
            return -(ev.q_t - bounds.q_min) / bounds.q_span
        return (ev.q_t - bounds.q_min) / bounds.q_span

    def composite(ev: EvalResult) -> float:
        if not ev.converged:
            return ev.loss
        return drive(ev) + pen(ev)

    return drive, pen, composite


def baseline_optimize(
    ctx: EvalContext,
    load_p: np.ndarray,
    load_q: np.ndarray,
    der_avail: np.ndarray,
    ext_v: float,
    mode: str = "max_p",
    r_p: float | None = None,
    r_q: float | None = None,
    bounds: FlexBounds | None = None,
    iters: int = 200,
    lr: float = 0.08,
    decay: float = 0.98,
    h: float = 1e-3,
) -> BaselineResult:
    """Projected gradient descent directly on the raw action box.

    No network involved: the raw actions themselves are the iterate, and
    both step rules work in the MW-scaled metric so units of different size
    move equitably. A feasible iterate takes a normalized steepest-descent
    step on the mode objective with geometric decay; an infeasible one
    takes a Polyak restoration step on the violation penalty alone, which
    in that metric is the minimal-MW correction and therefore curtails in
    proportion to constraint sensitivity. Every update is projected back
    into the open action box. Feasibility means exactly zero violation; the
    best feasible iterate is returned, or the best infeasible one (flagged)
    if none was found. Slow and dispatch-agnostic on purpose: this is the
    per-point reference the trained agent is benchmarked against.
    """
    if mode not in BASELINE_MODES:
        raise ValueError(f"unknown baseline mode {mode!r}")
    if mode == "requirement" and (r_p is None or r_q is None):
        raise ValueError("requirement mode needs r_p and r_q")
    if bounds is None:
        bounds = flex_bounds(ctx, load_p, load_q, der_avail, ext_v)
    drive_fn, pen_fn, composite = _mode_functions(mode, bounds, ctx.loss_cfg)
    # placeholder requirement for the extremal modes; their drive ignores it
    rp = r_p if r_p is not None else 0.5 * (bounds.p_min + bounds.p_max)
    rq = r_q if r_q is not None else 0.5 * (bounds.q_min + bounds.q_max)

    n_a = ctx.n_actions
    avail_ctrl = der_avail[ctx.ctrl_mask]
    raw = np.zeros(n_a)
    if n_a == 0:
        ev = evaluate_setpoints(
            ctx, load_p, load_q, der_avail, ext_v,
            np.zeros(0), np.zeros(0), rp, rq, bounds,
        )
        ok = ev.converged and ev.l_v == 0.0 and ev.l_lp == 0.0
        return BaselineResult(
            p_set=np.zeros(0), q_set=np.zeros(0), eval=ev,
            feasible=ok, iterations=0, best_score=composite(ev),
        )
    # half-widths of each action's physical range, the preconditioner that
    # maps the raw box onto MW-comparable coordinates
    nc = len(ctx.ctrl)
    scale = np.empty(n_a)
    for k, d in enumerate(ctx.ctrl):
        cap = max(min(float(avail_ctrl[k]), d.p_inst_mw), 0.0)
        scale[k] = max(0.5 * cap, 1e-9)
        scale[nc + k] = max(d.q_frac * d.p_inst_mw, 1e-9)
    lr_mw = lr * float(np.max(scale))
    warm = None
    best_raw = None
    best_score = float("inf")
    best_eval = None
    best_any_raw = raw.copy()
    best_any_score = float("inf")
    best_any_eval = None
    stall = 0
    it = 0
    for it in range(1, iters + 1):
        p_set, q_set = scale_actions(raw, ctx.ctrl, avail_ctrl)
        base = evaluate_setpoints(
            ctx, load_p, load_q, der_avail, ext_v, p_set, q_set, rp, rq,
            bounds, warm=warm,
        )
        if not base.converged:
            # pull back toward the best converged iterate and try again
            if best_any_eval is None:
                break
            raw = 0.5 * (raw + best_any_raw)
            warm = None
            continue
        warm = base.v
        cur = composite(base)
        if cur < best_any_score:
            best_any_score = cur
            best_any_raw = raw.copy()
            best_any_eval = base
        infeas = base.l_v > 0.0 or base.l_lp > 0.0
        if not infeas and cur < best_score:
            best_score = cur
            best_raw = raw.copy()
            best_eval = base
        grad, _ = action_gradients(
            ctx, load_p, load_q, der_avail, ext_v, raw, rp, rq, bounds,
            h=h, warm=warm, loss_fn=pen_fn if infeas else drive_fn,
        )
        g_mw = grad / scale
        gmax = float(np.max(np.abs(g_mw)))
        if gmax <= 1e-12:
            break
        if infeas:
            # Polyak step toward zero penalty, capped at half the largest range
            step_mw = g_mw * (pen_fn(base) / float(g_mw @ g_mw))
            cap = 0.5 * float(np.max(scale))
            smax = float(np.max(np.abs(step_mw)))
            if smax > cap:
                step_mw *= cap / smax
        else:
            step_mw = lr_mw * (decay ** it) * g_mw / gmax
        new_raw = np.clip(raw - step_mw / scale, -0.999999, 0.999999)
        if float(np.max(np.abs(new_raw - raw))) < 1e-9:
            stall += 1
            if stall >= 3:
                break
        else:
            stall = 0
        raw = new_raw

    feasible = best_raw is not None
    if not feasible:
        best_raw = best_any_raw
        best_eval = best_any_eval
        best_score = best_any_score
    p_set, q_set = scale_actions(best_raw, ctx.ctrl, avail_ctrl)
    if best_eval is None:
        best_eval = evaluate_setpoints(
            ctx, load_p, load_q, der_avail, ext_v, p_set, q_set, rp, rq, bounds,
        )
    return BaselineResult(
        p_set=p_set, q_set=q_set, eval=best_eval,
        feasible=feasible, iterations=it, best_score=best_score,
    )


def save_agent(path, agent: AnnOpfAgent, meta: dict | None = None) -> None:
    extras = {
        "feat_mean": agent.x_std.mean,
        "feat_std": agent.x_std.std,
        "sizes": np.array([agent.n_load, agent.n_der, agent.n_ctrl], dtype=np.int64),
    }
    save_mlp(path, agent.mlp, extras=extras, meta=meta or {})


def load_agent(path) -> tuple[AnnOpfAgent, dict]:
    mlp, extras, meta = load_mlp(path)
    std = Standardizer(mean=extras["feat_mean"], std=extras["feat_std"])
    sizes = extras["sizes"]
    return AnnOpfAgent(mlp, std, int(sizes[0]), int(sizes[1]), int(sizes[2])), meta
