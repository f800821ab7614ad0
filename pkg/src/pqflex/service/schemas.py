"""Request and response models of the HTTP service.

Requests carry server-side file paths for grids and model artifacts plus
an optional inline run configuration; responses are fully JSON-safe, every
non-finite float is mapped to null before serialization.
"""

from __future__ import annotations

import math

from pydantic import BaseModel, ConfigDict, Field

from ..config import RunConfig

__all__ = [
    "AreaPointRow",
    "BaselineRequest",
    "BaselineResponse",
    "BenchRequest",
    "BenchResponse",
    "BranchRow",
    "BusRow",
    "EstimateAreaRequest",
    "EstimateAreaResponse",
    "GenSamplesRequest",
    "GenSamplesResponse",
    "Manifest",
    "N1CaseRow",
    "N1Request",
    "N1Response",
    "PfRequest",
    "PfResponse",
    "PpfRequest",
    "PpfResponse",
    "TrainApproxRequest",
    "TrainApproxResponse",
    "TrainStage1Request",
    "TrainStage1Response",
    "TrainStage2Request",
    "TrainStage2Response",
    "VerifyAreaRequest",
    "VerifyAreaResponse",
    "clean",
]


def clean(x) -> float | None:
    """Finite float or None; JSON has no place for nan or inf."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


class _Req(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: str
    config: RunConfig | None = None
    seed: int | None = None


class PfRequest(_Req):
    profile_step: int | None = None


class N1Request(_Req):
    profile_step: int | None = None


class PpfRequest(_Req):
    profile_step: int | None = None


class GenSamplesRequest(_Req):
    out: str


class TrainStage1Request(_Req):
    samples: str
    out: str


class TrainApproxRequest(_Req):
    agent: str
    samples: str
    out_n1: str
    out_ppf: str


class TrainStage2Request(_Req):
    agent: str
    samples: str
    out: str


class EstimateAreaRequest(_Req):
    agent: str
    approx_n1: str | None = None
    approx_ppf: str | None = None
    n: int | None = Field(default=None, ge=2)
    profile_step: int | None = None


class VerifyAreaRequest(EstimateAreaRequest):
    mcs_samples: int | None = Field(default=None, ge=1)


class BaselineRequest(_Req):
    mode: str = "max_p"
    r_p: float | None = None
    r_q: float | None = None
    iters: int | None = Field(default=None, ge=1)
    profile_step: int | None = None


class BenchRequest(_Req):
    agent: str
    approx_n1: str | None = None
    approx_ppf: str | None = None
    n: int | None = Field(default=None, ge=2)
    baseline_points: int = Field(default=3, ge=1)
    profile_step: int | None = None


# -- responses ----------------------------------------------------------


class Manifest(BaseModel):
    """Reproduction record attached to every response."""

    version: str
    command: str
    grid: str
    grid_sha: str
    config_sha: str
    seed: int
    workers: int | None = None
    profile_step: int | None = None
    artifacts: dict[str, str] = {}


class BusRow(BaseModel):
    id: int
    vn_kv: float
    vm_pu: float
    va_deg: float
    p_mw: float
    q_mvar: float


class BranchRow(BaseModel):
    id: int
    kind: str
    from_bus: int
    to_bus: int
    in_service: bool
    loading_pct: float
    p_from_mw: float
    q_from_mvar: float


class PfResponse(BaseModel):
    converged: bool
    iterations: int
    max_mismatch: float
    interface_p_mw: float | None
    interface_q_mvar: float | None
    buses: list[BusRow]
    branches: list[BranchRow]
    manifest: Manifest
    warnings: list[str] = []


class N1CaseRow(BaseModel):
    branch_id: int
    kind: str
    converged: bool
    lp_max: float | None


class N1Response(BaseModel):
    n_cases: int
    all_converged: bool
    secure: bool
    lp_limit: float
    cases: list[N1CaseRow]
    lp_n1: list[float | None]
    manifest: Manifest
    warnings: list[str] = []


class PpfResponse(BaseModel):
    n_samples: int
    n_converged: int
    max_viol_prob: float
    prob_threshold: float
    exceeds: bool
    viol_prob: list[float]
    vm_mean: list[float | None]
    manifest: Manifest
    warnings: list[str] = []


class GenSamplesResponse(BaseModel):
    n: int
    out: str
    used_profiles: bool
    manifest: Manifest
    warnings: list[str] = []


class TrainStage1Response(BaseModel):
    epochs: int
    final_loss: float
    history: list[float]
    out: str
    manifest: Manifest
    warnings: list[str] = []


class TrainApproxResponse(BaseModel):
    n1_report: dict
    ppf_report: dict
    out_n1: str
    out_ppf: str
    manifest: Manifest
    warnings: list[str] = []


class TrainStage2Response(BaseModel):
    epochs: int
    final_loss: float
    history: list[float]
    out: str
    manifest: Manifest
    warnings: list[str] = []


class AreaPointRow(BaseModel):
    r_p: float
    r_q: float
    p_sp_mw: float | None
    q_sp_mvar: float | None
    achieved_p_mw: float | None
    achieved_q_mvar: float | None
    label: str
    detail: str
    objective: float | None


class BoundsBox(BaseModel):
    p_min: float
    p_max: float
    q_min: float
    q_max: float


class EstimateAreaResponse(BaseModel):
    n_grid: int
    bounds: BoundsBox
    counts: dict[str, int]
    points: list[AreaPointRow]
    hull: list[list[float]] | None
    runtime_s: float
    ann_ms_per_point: float
    manifest: Manifest
    warnings: list[str] = []


class VerifyAreaResponse(BaseModel):
    counts: dict[str, int]
    n_feasible: int
    n_soft: int
    hard_violations_in_feasible: int
    false_feasible: int
    false_infeasible: int
    false_feasible_rate: float
    false_infeasible_rate: float
    details: list[str]
    manifest: Manifest
    warnings: list[str] = []


class BaselineUnitRow(BaseModel):
    der_id: int
    bus: int
    p_mw: float
    q_mvar: float
    p_avail_mw: float


class BaselineResponse(BaseModel):
    mode: str
    feasible: bool
    iterations: int
    best_score: float | None
    converged: bool
    p_t: float | None
    q_t: float | None
    l_v: float
    l_lp: float
    objective: float | None
    units: list[BaselineUnitRow]
    manifest: Manifest
    warnings: list[str] = []


class BenchResponse(BaseModel):
    n: int
    n_points: int
    prediction_ms: float
    postprocessing_ms: float
    total_ms: float
    ann_ms_per_point: float
    baseline_ms_per_point: float
    speedup: float
    counts: dict[str, int]
    manifest: Manifest
    warnings: list[str] = []
