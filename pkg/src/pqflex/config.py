"""Run configuration: one validated object covering every pipeline stage.

Stored as JSON next to the artifacts it produced; the sha field of the
serialized content travels inside model files so stale model/config pairs
are detectable. Unknown keys are rejected everywhere, a typo in a config
file must fail loudly before any compute is spent.
"""

from __future__ import annotations

import hashlib
import json
import os
import pathlib

from pydantic import BaseModel, ConfigDict, Field

__all__ = [
    "AnnOpfSettings",
    "ApproximatorSettings",
    "EstimationSettings",
    "LimitSettings",
    "PenaltySettings",
    "RunConfig",
    "TrainingSettings",
    "UncertaintySettings",
    "default_workers",
]

WORKERS_ENV = "PQFLEX_WORKERS"


def default_workers() -> int | None:
    """Parallelism degree from the environment, None means sequential."""
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return None if n == 1 else n


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LimitSettings(_Section):
    """Operational limits; vmin/vmax override every bus band when set."""

    vmin: float | None = Field(default=None, gt=0.0)
    vmax: float | None = Field(default=None, gt=0.0)
    lp_max: float = Field(default=100.0, gt=0.0)


class UncertaintySettings(_Section):
    n_samples: int = Field(default=1000, ge=1)
    load_frac: float = Field(default=0.10, ge=0.0)
    extv_frac: float = Field(default=0.01, ge=0.0)
    der_frac: float = Field(default=0.10, ge=0.0)
    perturb_der_avail: bool = True


class TrainingSettings(_Section):
    seed: int = 0
    epochs_stage1: int = Field(default=30, ge=1)
    epochs_stage2: int = Field(default=15, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr_stage1: float = Field(default=1e-3, gt=0.0)
    lr_stage2: float = Field(default=5e-4, gt=0.0)
    fd_step: float = Field(default=1e-3, gt=0.0)
    n_samples: int = Field(default=500, ge=1)
    common_noise: float = Field(default=0.05, ge=0.0)
    device_noise: float = Field(default=0.01, ge=0.0)
    marks_mcs_samples: int = Field(default=200, ge=1)


class ApproximatorSettings(_Section):
    hidden: tuple[int, ...] = (300,)
    epochs: int = Field(default=300, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    train_frac: float = Field(default=0.8, gt=0.0, lt=1.0)
    n1_feature: str = "lp"
    ppf_feature: str = "v"
    label_mcs_samples: int = Field(default=200, ge=1)


class AnnOpfSettings(_Section):
    hidden: tuple[int, ...] = (500,)


class EstimationSettings(_Section):
    n: int = Field(default=20, ge=2)
    verify_mcs_samples: int = Field(default=200, ge=1)


class PenaltySettings(_Section):
    w_v: float = Field(default=100.0, ge=0.0)
    w_lp: float = Field(default=1.0, ge=0.0)
    prob_threshold: float = Field(default=0.10, ge=0.0, le=1.0)
    robust_margin_v: float = Field(default=0.01, ge=0.0)


class RunConfig(_Section):
    """Everything the command line and service need beyond the grid files."""

    limits: LimitSettings = LimitSettings()
    uncertainty: UncertaintySettings = UncertaintySettings()
    training: TrainingSettings = TrainingSettings()
    approximators: ApproximatorSettings = ApproximatorSettings()
    annopf: AnnOpfSettings = AnnOpfSettings()
    estimation: EstimationSettings = EstimationSettings()
    penalties: PenaltySettings = PenaltySettings()

    def sha(self) -> str:
        blob = json.dumps(self.model_dump(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @classmethod
    def from_file(cls, path: str | pathlib.Path) -> "RunConfig":
        return cls.model_validate_json(pathlib.Path(path).read_text())

    def to_file(self, path: str | pathlib.Path) -> None:
        pathlib.Path(path).write_text(self.model_dump_json(indent=2) + "\n")

    def loss_config(self):
        from .agent import AugLossConfig

        return AugLossConfig(
            w_v=self.penalties.w_v,
            w_lp=self.penalties.w_lp,
            lp_max=self.limits.lp_max,
            robust_margin_v=self.penalties.robust_margin_v,
            prob_threshold=self.penalties.prob_threshold,
        )
