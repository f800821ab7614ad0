"""HTTP service exposing every pipeline over JSON.

Grids and model artifacts are referenced by server-side paths; parsed
grids are cached by content hash so repeated calls skip the CSV round
trip. Error contract: invalid input (bad bundle, bad reference, model
mismatch) maps to HTTP 400, a diverging base power flow to HTTP 409, so
callers can tell bad data from bad numerics without parsing messages.
"""

from __future__ import annotations

import hashlib
import pathlib
import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..agent import (
    AnnOpfAgent,
    EvalContext,
    append_telemetry,
    baseline_optimize,
    compute_security_marks,
    evaluate_setpoints,
    flex_bounds,
    generate_samples,
    load_agent,
    marked_counts,
    save_agent,
    train_stage1,
    train_stage2,
)
from ..approx import (
    build_security_datasets,
    load_approximator,
    save_approximator,
    save_dataset,
    train_approximator,
)
from ..area import estimate_area, verify_area
from ..config import RunConfig, default_workers
from ..contingency import build_outage_variants, n1_analysis
from ..grid import Network, aggregate_injections, build_admittances, with_operating_point
from ..gridio import grid_sha, load_grid, load_profiles, load_samples, save_samples
from ..pf import Scenario, solve
from ..ppf import run_mcs
from . import schemas as sc
from .schemas import clean

__all__ = ["NumericalFailure", "create_app"]


class NumericalFailure(Exception):
    """Base-case power flow (or every probe of one) failed to converge."""


def _file_sha(path) -> str:
    return hashlib.sha256(pathlib.Path(path).read_bytes()).hexdigest()[:12]


class _GridCache:
    """Parsed bundles keyed by directory, invalidated by content hash."""

    def __init__(self):
        self._entries: dict[str, dict] = {}

    def get(self, path: str) -> dict:
        root = pathlib.Path(path).resolve()
        sha = grid_sha(root)
        hit = self._entries.get(str(root))
        if hit is not None and hit["sha"] == sha:
            return hit
        net = load_grid(root)
        entry = {
            "root": root,
            "sha": sha,
            "net": net,
            "adm": build_admittances(net),
            "variants": None,
        }
        self._entries[str(root)] = entry
        return entry

    def variants(self, entry: dict):
        if entry["variants"] is None:
            entry["variants"] = build_outage_variants(entry["net"])
        return entry["variants"]


def _operating_point(net: Network, root: pathlib.Path, step: int | None):
    load_p = np.array([ld.p_mw for ld in net.loads], dtype=float)
    load_q = np.array([ld.q_mvar for ld in net.loads], dtype=float)
    der_avail = np.array([d.p_avail_mw for d in net.ders], dtype=float)
    ext_v = float(net.ext.v_pu)
    if step is not None:
        prof = load_profiles(root / "profiles.csv")
        if not 0 <= step < len(prof):
            raise ValueError(
                f"profile step {step} outside 0..{len(prof) - 1}"
            )
        load_p = load_p * prof[step, 0]
        load_q = load_q * prof[step, 1]
        der_avail = der_avail * prof[step, 2]
    return load_p, load_q, der_avail, ext_v


def _meta_warnings(meta: dict, label: str, cfg_sha: str, gsha: str) -> list[str]:
    out = []
    got = meta.get("config_sha")
    if got is not None and got != cfg_sha:
        out.append(f"{label}: trained under config {got}, running under {cfg_sha}")
    got = meta.get("grid_sha")
    if got is not None and got != gsha:
        out.append(f"{label}: trained on grid {got}, running on {gsha}")
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="pqflex", version=__version__)
    cache = _GridCache()
    workers = default_workers()

    @app.exception_handler(ValueError)
    async def _val(_req: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def _fnf(_req: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(NumericalFailure)
    async def _num(_req: Request, exc: NumericalFailure):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    def setup(req, command: str):
        """Shared per-request plumbing: grid, config, seed, manifest stub."""
        entry = cache.get(req.grid)
        cfg = req.config if req.config is not None else RunConfig()
        seed = req.seed if req.seed is not None else cfg.training.seed
        ctx = EvalContext.create(
            entry["net"],
            loss_cfg=cfg.loss_config(),
            adm=entry["adm"],
            workers=workers,
            vmin=cfg.limits.vmin,
            vmax=cfg.limits.vmax,
        )
        manifest = sc.Manifest(
            version=__version__,
            command=command,
            grid=str(entry["root"]),
            grid_sha=entry["sha"],
            config_sha=cfg.sha(),
            seed=seed,
            workers=workers,
            profile_step=getattr(req, "profile_step", None),
        )
        return entry, cfg, seed, ctx, manifest

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/pf", response_model=sc.PfResponse)
    def pf(req: sc.PfRequest):
        entry, cfg, seed, ctx, manifest = setup(req, "pf")
        net = entry["net"]
        load_p, load_q, der_avail, ext_v = _operating_point(
            net, entry["root"], req.profile_step
        )
        net_op = with_operating_point(
            net, load_p=load_p, load_q=load_q, der_avail=der_avail, ext_v=ext_v
        )
        adm = entry["adm"]
        res = solve(Scenario(adm=adm, s_inj=aggregate_injections(net_op), slack_v=ext_v))
        if not res.converged:
            raise NumericalFailure(
                f"base power flow diverged after {res.iterations} iterations, "
                f"max mismatch {res.max_mismatch:.3e} pu"
            )
        s_bus = res.v * np.conj(adm.ybus @ res.v) * net.base_mva
        buses = [
            sc.BusRow(
                id=b.id,
                vn_kv=b.vn_kv,
                vm_pu=float(res.vm[i]),
                va_deg=float(np.degrees(np.angle(res.v[i]))),
                p_mw=float(s_bus[i].real),
                q_mvar=float(s_bus[i].imag),
            )
            for i, b in enumerate(net.buses)
        ]
        s_from = res.v[adm.f_bus] * np.conj(res.i_from) * net.base_mva
        branches = []
        for row, el in enumerate(list(net.lines) + list(net.trafos)):
            kind = "line" if row < len(net.lines) else "trafo"
            branches.append(sc.BranchRow(
                id=el.id,
                kind=kind,
                from_bus=el.from_bus if kind == "line" else el.hv_bus,
                to_bus=el.to_bus if kind == "line" else el.lv_bus,
                in_service=el.in_service,
                loading_pct=float(res.loading[row]),
                p_from_mw=float(s_from[row].real),
                q_from_mvar=float(s_from[row].imag),
            ))
        return sc.PfResponse(
            converged=True,
            iterations=res.iterations,
            max_mismatch=float(res.max_mismatch),
            interface_p_mw=clean(res.interface_p_mw),
            interface_q_mvar=clean(res.interface_q_mvar),
            buses=buses,
            branches=branches,
            manifest=manifest,
        )

    @app.post("/n1", response_model=sc.N1Response)
    def n1(req: sc.N1Request):
        entry, cfg, seed, ctx, manifest = setup(req, "n1")
        net = entry["net"]
        load_p, load_q, der_avail, ext_v = _operating_point(
            net, entry["root"], req.profile_step
        )
        net_op = with_operating_point(
            net, load_p=load_p, load_q=load_q, der_avail=der_avail, ext_v=ext_v
        )
        s_inj = aggregate_injections(net_op)
        base = solve(Scenario(adm=entry["adm"], s_inj=s_inj, slack_v=ext_v))
        if not base.converged:
            raise NumericalFailure("base power flow diverged, no N-1 screening")
        rep = n1_analysis(
            net_op, s_inj=s_inj, slack_v=ext_v,
            variants=cache.variants(entry), warm=base.v,
        )
        n_line = len(net.lines)
        cases = []
        for k, cid in enumerate(rep.case_ids):
            lp = float(np.max(rep.case_loadings[k])) if rep.case_converged[k] else None
            cases.append(sc.N1CaseRow(
                branch_id=cid,
                kind="line" if cid < n_line else "trafo",
                converged=bool(rep.case_converged[k]),
                lp_max=lp,
            ))
        lp_max = cfg.limits.lp_max
        return sc.N1Response(
            n_cases=len(cases),
            all_converged=rep.all_converged,
            secure=bool(np.all(rep.lp_n1 <= lp_max)),
            lp_limit=lp_max,
            cases=cases,
            lp_n1=[clean(x) for x in rep.lp_n1],
            manifest=manifest,
        )

    @app.post("/ppf", response_model=sc.PpfResponse)
    def ppf(req: sc.PpfRequest):
        entry, cfg, seed, ctx, manifest = setup(req, "ppf")
        net = entry["net"]
        load_p, load_q, der_avail, ext_v = _operating_point(
            net, entry["root"], req.profile_step
        )
        net_op = with_operating_point(
            net, load_p=load_p, load_q=load_q, der_avail=der_avail, ext_v=ext_v
        )
        unc = cfg.uncertainty
        mcs = run_mcs(
            net_op,
            n_samples=unc.n_samples,
            seed=seed,
            load_frac=unc.load_frac,
            extv_frac=unc.extv_frac,
            der_frac=unc.der_frac,
            perturb_der_avail=unc.perturb_der_avail,
            adm=entry["adm"],
            workers=workers,
        )
        if mcs.n_converged == 0:
            raise NumericalFailure("no Monte Carlo sample converged")
        thr = cfg.penalties.prob_threshold
        return sc.PpfResponse(
            n_samples=mcs.n_samples,
            n_converged=mcs.n_converged,
            max_viol_prob=float(mcs.max_viol_prob),
            prob_threshold=thr,
            exceeds=bool(mcs.max_viol_prob > thr),
            viol_prob=[float(x) for x in mcs.viol_prob],
            vm_mean=[clean(x) for x in mcs.vm_mean],
            manifest=manifest,
        )

    @app.post("/samples", response_model=sc.GenSamplesResponse)
    def gen_samples(req: sc.GenSamplesRequest):
        entry, cfg, seed, ctx, manifest = setup(req, "gen-samples")
        profiles = None
        prof_file = entry["root"] / "profiles.csv"
        if prof_file.exists():
            profiles = load_profiles(prof_file)
        tr = cfg.training
        samples = generate_samples(
            entry["net"],
            tr.n_samples,
            seed=seed,
            profiles=profiles,
            common_noise=tr.common_noise,
            device_noise=tr.device_noise,
            extv_frac=cfg.uncertainty.extv_frac,
            ctx=ctx,
        )
        out = pathlib.Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_samples(out, samples)
        manifest.artifacts[str(out)] = _file_sha(out)
        return sc.GenSamplesResponse(
            n=len(samples),
            out=str(out),
            used_profiles=profiles is not None,
            manifest=manifest,
        )

    @app.post("/train/stage1", response_model=sc.TrainStage1Response)
    def stage1(req: sc.TrainStage1Request):
        entry, cfg, seed, ctx, manifest = setup(req, "train-stage1")
        samples = load_samples(req.samples)
        manifest.artifacts[req.samples] = _file_sha(req.samples)
        agent = AnnOpfAgent.create(
            entry["net"], samples, hidden=cfg.annopf.hidden, seed=seed
        )
        tr = cfg.training
        hist = train_stage1(
            agent, ctx, samples,
            epochs=tr.epochs_stage1, batch_size=tr.batch_size,
            lr=tr.lr_stage1, h=tr.fd_step, seed=seed,
        )
        out = pathlib.Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_agent(out, agent, meta={
            "stage": 1, "config_sha": cfg.sha(), "grid_sha": entry["sha"],
            "seed": seed,
        })
        manifest.artifacts[str(out)] = _file_sha(out)
        tele = out.with_suffix(out.suffix + ".telemetry.csv")
        append_telemetry(tele, hist)
        manifest.artifacts[str(tele)] = _file_sha(tele)
        losses = [float(x) for x in hist["loss"]]
        return sc.TrainStage1Response(
            epochs=len(losses),
            final_loss=losses[-1],
            history=losses,
            out=str(out),
            manifest=manifest,
        )

    @app.post("/train/approx", response_model=sc.TrainApproxResponse)
    def train_approx(req: sc.TrainApproxRequest):
        entry, cfg, seed, ctx, manifest = setup(req, "train-approx")
        samples = load_samples(req.samples)
        agent, meta = load_agent(req.agent)
        warnings = _meta_warnings(meta, "agent", cfg.sha(), entry["sha"])
        manifest.artifacts[req.samples] = _file_sha(req.samples)
        manifest.artifacts[req.agent] = _file_sha(req.agent)
        ap = cfg.approximators
        ds_n1, ds_ppf = build_security_datasets(
            ctx, samples, agent=agent,
            n1_feature=ap.n1_feature, ppf_feature=ap.ppf_feature,
            mcs_samples=ap.label_mcs_samples, mcs_seed=2000 + seed,
            workers=workers,
        )
        apx_n1, rep_n1 = train_approximator(
            ds_n1, hidden=ap.hidden, epochs=ap.epochs, lr=ap.lr,
            batch_size=ap.batch_size, seed=seed, train_frac=ap.train_frac,
            threshold=cfg.limits.lp_max,
        )
        apx_ppf, rep_ppf = train_approximator(
            ds_ppf, hidden=ap.hidden, epochs=ap.epochs, lr=ap.lr,
            batch_size=ap.batch_size, seed=seed + 1, train_frac=ap.train_frac,
            threshold=cfg.penalties.prob_threshold,
        )
        for path, apx in ((req.out_n1, apx_n1), (req.out_ppf, apx_ppf)):
            p = pathlib.Path(path)
            p.parent.mkdir(parents=True, exist_ok=True)
            save_approximator(p, apx, meta={
                "config_sha": cfg.sha(), "grid_sha": entry["sha"], "seed": seed,
            })
            manifest.artifacts[str(p)] = _file_sha(p)
        return sc.TrainApproxResponse(
            n1_report=rep_n1,
            ppf_report=rep_ppf,
            out_n1=req.out_n1,
            out_ppf=req.out_ppf,
            manifest=manifest,
            warnings=warnings,
        )

    @app.post("/train/stage2", response_model=sc.TrainStage2Response)
    def stage2(req: sc.TrainStage2Request):
        entry, cfg, seed, ctx, manifest = setup(req, "train-stage2")
        samples = load_samples(req.samples)
        agent, meta = load_agent(req.agent)
        warnings = _meta_warnings(meta, "agent", cfg.sha(), entry["sha"])
        manifest.artifacts[req.samples] = _file_sha(req.samples)
        manifest.artifacts[req.agent] = _file_sha(req.agent)
        tr = cfg.training
        marks = compute_security_marks(
            ctx, agent, samples,
            mcs_samples=tr.marks_mcs_samples, mcs_seed=1000 + seed,
            workers=workers,
        )
        hist = train_stage2(
            agent, ctx, samples, marks,
            epochs=tr.epochs_stage2, batch_size=tr.batch_size,
            lr=tr.lr_stage2, h=tr.fd_step, seed=seed + 1,
        )
        out = pathlib.Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_agent(out, agent, meta={
            "stage": 2, "config_sha": cfg.sha(), "grid_sha": entry["sha"],
            "seed": seed,
        })
        manifest.artifacts[str(out)] = _file_sha(out)
        losses = [float(x) for x in hist["loss"]]
        return sc.TrainStage2Response(
            epochs=len(losses),
            final_loss=losses[-1],
            history=losses,
            out=str(out),
            manifest=manifest,
            warnings=warnings,
        )

    def _load_models(req, cfg, gsha, manifest):
        agent, meta = load_agent(req.agent)
        warnings = _meta_warnings(meta, "agent", cfg.sha(), gsha)
        manifest.artifacts[req.agent] = _file_sha(req.agent)
        apx_n1 = apx_ppf = None
        if req.approx_n1 is not None:
            apx_n1, m = load_approximator(req.approx_n1)
            warnings += _meta_warnings(m, "approx_n1", cfg.sha(), gsha)
            manifest.artifacts[req.approx_n1] = _file_sha(req.approx_n1)
        if req.approx_ppf is not None:
            apx_ppf, m = load_approximator(req.approx_ppf)
            warnings += _meta_warnings(m, "approx_ppf", cfg.sha(), gsha)
            manifest.artifacts[req.approx_ppf] = _file_sha(req.approx_ppf)
        return agent, apx_n1, apx_ppf, warnings

    def _area_rows(area):
        rows = []
        for p in area.points:
            rows.append(sc.AreaPointRow(
                r_p=p.r_p,
                r_q=p.r_q,
                p_sp_mw=clean(p.p_sp_mw),
                q_sp_mvar=clean(p.q_sp_mvar),
                achieved_p_mw=clean(p.p_t),
                achieved_q_mvar=clean(p.q_t),
                label=p.label,
                detail=p.detail,
                objective=clean(p.objective),
            ))
        return rows

    def _run_estimate(req, command):
        entry, cfg, seed, ctx, manifest = setup(req, command)
        net = entry["net"]
        load_p, load_q, der_avail, ext_v = _operating_point(
            net, entry["root"], req.profile_step
        )
        agent, apx_n1, apx_ppf, warnings = _load_models(
            req, cfg, entry["sha"], manifest
        )
        n = req.n if req.n is not None else cfg.estimation.n
        area = estimate_area(
            ctx, agent, load_p, load_q, der_avail, ext_v, n=n,
            approx_n1=apx_n1, approx_ppf=apx_ppf,
        )
        if area.counts["non_convergent"] == len(area.points):
            raise NumericalFailure("every grid point diverged")
        op = (load_p, load_q, der_avail, ext_v)
        return entry, cfg, seed, ctx, manifest, agent, area, op, warnings

    @app.post("/area/estimate", response_model=sc.EstimateAreaResponse)
    def area_estimate(req: sc.EstimateAreaRequest):
        _, _, _, _, manifest, _, area, _, warnings = _run_estimate(
            req, "estimate-area"
        )
        return sc.EstimateAreaResponse(
            n_grid=area.n_grid,
            bounds=sc.BoundsBox(
                p_min=area.bounds.p_min, p_max=area.bounds.p_max,
                q_min=area.bounds.q_min, q_max=area.bounds.q_max,
            ),
            counts=area.counts,
            points=_area_rows(area),
            hull=None if area.hull is None else area.hull.tolist(),
            runtime_s=area.runtime_s,
            ann_ms_per_point=area.ann_ms_per_point,
            manifest=manifest,
            warnings=warnings,
        )

    @app.post("/area/verify", response_model=sc.VerifyAreaResponse)
    def area_verify(req: sc.VerifyAreaRequest):
        entry, cfg, seed, ctx, manifest, agent, area, op, warnings = _run_estimate(
            req, "verify-area"
        )
        load_p, load_q, der_avail, ext_v = op
        mcs_samples = (
            req.mcs_samples if req.mcs_samples is not None
            else cfg.estimation.verify_mcs_samples
        )
        rep = verify_area(
            ctx, agent, area, load_p, load_q, der_avail, ext_v,
            mcs_samples=mcs_samples, mcs_seed=7000 + seed,
        )
        return sc.VerifyAreaResponse(
            counts=area.counts,
            n_feasible=rep.n_feasible,
            n_soft=rep.n_soft,
            hard_violations_in_feasible=rep.hard_violations_in_feasible,
            false_feasible=rep.false_feasible,
            false_infeasible=rep.false_infeasible,
            false_feasible_rate=rep.false_feasible_rate,
            false_infeasible_rate=rep.false_infeasible_rate,
            details=rep.details,
            manifest=manifest,
            warnings=warnings,
        )

    @app.post("/baseline", response_model=sc.BaselineResponse)
    def baseline(req: sc.BaselineRequest):
        entry, cfg, seed, ctx, manifest = setup(req, "baseline")
        net = entry["net"]
        load_p, load_q, der_avail, ext_v = _operating_point(
            net, entry["root"], req.profile_step
        )
        kw = {} if req.iters is None else {"iters": req.iters}
        res = baseline_optimize(
            ctx, load_p, load_q, der_avail, ext_v,
            mode=req.mode, r_p=req.r_p, r_q=req.r_q,
            h=cfg.training.fd_step, **kw,
        )
        if not res.eval.converged:
            raise NumericalFailure("no converged operating point found")
        units = [
            sc.BaselineUnitRow(
                der_id=d.id, bus=d.bus,
                p_mw=float(res.p_set[k]), q_mvar=float(res.q_set[k]),
                p_avail_mw=float(der_avail[ctx.ctrl_mask][k]),
            )
            for k, d in enumerate(ctx.ctrl)
        ]
        return sc.BaselineResponse(
            mode=req.mode,
            feasible=res.feasible,
            iterations=res.iterations,
            best_score=clean(res.best_score),
            converged=res.eval.converged,
            p_t=clean(res.eval.p_t),
            q_t=clean(res.eval.q_t),
            l_v=float(res.eval.l_v),
            l_lp=float(res.eval.l_lp),
            objective=clean(res.eval.objective) if req.mode == "requirement" else None,
            units=units,
            manifest=manifest,
        )

    @app.post("/bench", response_model=sc.BenchResponse)
    def bench(req: sc.BenchRequest):
        entry, cfg, seed, ctx, manifest = setup(req, "bench")
        net = entry["net"]
        load_p, load_q, der_avail, ext_v = _operating_point(
            net, entry["root"], req.profile_step
        )
        agent, apx_n1, apx_ppf, warnings = _load_models(
            req, cfg, entry["sha"], manifest
        )
        n = req.n if req.n is not None else cfg.estimation.n
        area = estimate_area(
            ctx, agent, load_p, load_q, der_avail, ext_v, n=n,
            approx_n1=apx_n1, approx_ppf=apx_ppf,
        )
        n_points = len(area.points)
        total_ms = 1000.0 * area.runtime_s
        prediction_ms = area.ann_ms_per_point * n_points
        # time the per-point reference on a few evenly spaced grid requirements
        bounds = area.bounds
        k = min(req.baseline_points, n_points)
        idx = np.linspace(0, n_points - 1, k).astype(int)
        from ..area import requirement_grid

        grid = requirement_grid(bounds, n)
        t0 = time.perf_counter()
        for i in idx:
            baseline_optimize(
                ctx, load_p, load_q, der_avail, ext_v, mode="requirement",
                r_p=float(grid[i, 0]), r_q=float(grid[i, 1]), bounds=bounds,
                h=cfg.training.fd_step,
            )
        baseline_ms = 1000.0 * (time.perf_counter() - t0) / k
        ann_ms = area.ann_ms_per_point
        return sc.BenchResponse(
            n=n,
            n_points=n_points,
            prediction_ms=prediction_ms,
            postprocessing_ms=total_ms - prediction_ms,
            total_ms=total_ms,
            ann_ms_per_point=ann_ms,
            baseline_ms_per_point=baseline_ms,
            speedup=baseline_ms / ann_ms if ann_ms > 0 else 0.0,
            counts=area.counts,
            manifest=manifest,
            warnings=warnings,
        )

    return app
