"""Supervised approximators for the expensive security screens.

Running exact N-1 and Monte Carlo voltage screening on every candidate
point of a flexibility sweep costs hundreds of power flows per point. The
approximators learn those outputs from cheap base-case quantities: one
network maps base-case line loadings to worst post-contingency loadings,
the other maps base-case voltage magnitudes to per-bus violation
probabilities. Both are trained on operating points produced by the
setpoint agent itself, which is exactly the distribution they later see.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import AnnOpfAgent, EvalContext, SampleSet
from .contingency import build_outage_variants, n1_analysis
from .grid import with_operating_point
from .nn import Mlp, MlpConfig, Standardizer, load_mlp, save_mlp, train_supervised
from .pf import Scenario, solve
from .ppf import run_mcs

__all__ = [
    "ApproxDataset",
    "Approximator",
    "approx_features",
    "build_security_datasets",
    "train_approximator",
    "save_approximator",
    "load_approximator",
    "save_dataset",
    "load_dataset",
    "FEATURE_CHOICES",
]

FEATURE_CHOICES = ("lp", "v", "pq", "lp_v", "v_qder")


@dataclass
class ApproxDataset:
    x: np.ndarray
    y: np.ndarray
    kind: str  # "n1" or "ppf"
    feature: str
    n_excluded: int  # rows dropped for non-finite labels or diverged bases
    seed: int | None = None  # labeling seed, carried for reproducibility


@dataclass
class Approximator:
    mlp: Mlp
    x_std: Standardizer
    y_std: Standardizer
    kind: str
    feature: str
    threshold: float  # lp_max respectively prob_threshold

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        out = self.mlp.forward(self.x_std.transform(np.atleast_2d(x_raw)))
        out = self.y_std.inverse_transform(out)
        return out[0] if np.asarray(x_raw).ndim == 1 else out

    def classify(self, x_raw: np.ndarray) -> np.ndarray:
        """Row-wise insecurity flag: any output beyond the threshold."""
        pred = np.atleast_2d(self.predict(x_raw))
        return np.any(pred > self.threshold, axis=1)


def _active_line_rows(ctx: EvalContext) -> np.ndarray:
    n_line = ctx.adm.n_line
    return np.nonzero(ctx.adm.branch_active[:n_line])[0]


def approx_features(
    kind: str,
    ctx: EvalContext,
    vm: np.ndarray,
    loading: np.ndarray,
    s_inj: np.ndarray,
    q_set: np.ndarray,
) -> np.ndarray:
    """Feature vector of one solved base case for the chosen input set.

    Complex voltage pairs (magnitude, angle) looked attractive but carry
    the slack angle as a dead input and performed no better, so they are
    rejected outright rather than half supported.
    """
    if kind == "v_delta":
        raise NotImplementedError("voltage magnitude-angle features are not supported")
    lines = _active_line_rows(ctx)
    if kind == "lp":
        return loading[lines]
    if kind == "v":
        return vm
    if kind == "pq":
        return np.concatenate([s_inj.real, s_inj.imag])
    if kind == "lp_v":
        return np.concatenate([loading[lines], vm])
    if kind == "v_qder":
        return np.concatenate([vm, q_set])
    raise ValueError(f"unknown feature choice {kind!r}")


def build_security_datasets(
    ctx: EvalContext,
    samples: SampleSet,
    agent: AnnOpfAgent | None = None,
    setpoints: tuple[np.ndarray, np.ndarray] | None = None,
    n1_feature: str = "lp",
    ppf_feature: str = "v",
    mcs_samples: int = 200,
    mcs_seed: int = 2000,
    workers: int | None = None,
) -> tuple[ApproxDataset, ApproxDataset]:
    """Exact screening labels for every sample's frozen dispatch.

    Returns the N-1 dataset (labels: worst post-contingency loading per
    in-service line, percent) and the voltage-robustness dataset (labels:
    per-bus violation probability). Samples with a diverged base case are
    dropped from both; N-1 rows with infinite labels (some contingency
    diverged) are dropped from the N-1 set only, and both exclusions are
    counted.
    """
    if (agent is None) == (setpoints is None):
        raise ValueError("provide exactly one of agent or setpoints")
    variants = build_outage_variants(ctx.net)
    lines = _active_line_rows(ctx)
    n = len(samples)
    x_n1, y_n1, x_ppf, y_ppf = [], [], [], []
    n_excl_n1 = 0
    n_excl_ppf = 0
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
        base = solve(
            Scenario(adm=ctx.adm, s_inj=s_inj, slack_v=float(samples.ext_v[i])),
            init=warm,
        )
        if not base.converged:
            n_excl_n1 += 1
            n_excl_ppf += 1
            continue
        warm = base.v
        feat_n1 = approx_features(n1_feature, ctx, base.vm, base.loading, s_inj, q_set)
        feat_ppf = approx_features(ppf_feature, ctx, base.vm, base.loading, s_inj, q_set)

        n1 = n1_analysis(
            ctx.net, s_inj=s_inj, slack_v=float(samples.ext_v[i]),
            variants=variants, warm=base.v,
        )
        labels = n1.lp_n1[lines]
        if np.all(np.isfinite(labels)):
            x_n1.append(feat_n1)
            y_n1.append(labels)
        else:
            n_excl_n1 += 1

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
        x_ppf.append(feat_ppf)
        y_ppf.append(mcs.viol_prob)
    ds_n1 = ApproxDataset(
        x=np.array(x_n1), y=np.array(y_n1), kind="n1",
        feature=n1_feature, n_excluded=n_excl_n1, seed=mcs_seed,
    )
    ds_ppf = ApproxDataset(
        x=np.array(x_ppf), y=np.array(y_ppf), kind="ppf",
        feature=ppf_feature, n_excluded=n_excl_ppf, seed=mcs_seed,
    )
    return ds_n1, ds_ppf


def save_dataset(ds: ApproxDataset, path) -> None:
    """Persist one dataset as CSV plus a JSON sidecar.

    The CSV holds one row per sample, feature columns first, label columns
    after; the sidecar records dimensions, kind, feature choice, exclusion
    count and the labeling seed.
    """
    import csv
    import json
    import pathlib

    path = pathlib.Path(path)
    n_x, n_y = ds.x.shape[1], ds.y.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(n_x)] + [f"y{i}" for i in range(n_y)])
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([f"{v:.17g}" for v in xi] + [f"{v:.17g}" for v in yi])
    meta = {
        "kind": ds.kind, "feature": ds.feature, "n_rows": int(len(ds.x)),
        "n_features": int(n_x), "n_labels": int(n_y),
        "n_excluded": int(ds.n_excluded), "seed": ds.seed,
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, indent=1) + "\n")


def load_dataset(path) -> ApproxDataset:
    import json
    import pathlib

    path = pathlib.Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".meta.json").read_text())
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_x = meta["n_features"]
    return ApproxDataset(
        x=raw[:, :n_x], y=raw[:, n_x:], kind=meta["kind"],
        feature=meta["feature"], n_excluded=meta["n_excluded"],
        seed=meta["seed"],
    )


def split_dataset(
    ds: ApproxDataset, train_frac: float = 0.8, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle split into train and test arrays."""
    n = len(ds.x)
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(train_frac * n))
    tr, te = order[:k], order[k:]
    return ds.x[tr], ds.y[tr], ds.x[te], ds.y[te]


def train_approximator(
    ds: ApproxDataset,
    hidden: tuple[int, ...] = (300,),
    epochs: int = 300,
    lr: float = 1e-3,
    batch_size: int = 256,
    seed: int = 0,
    train_frac: float = 0.8,
    threshold: float | None = None,
) -> tuple[Approximator, dict]:
    """Fit one approximator and report errors in percentage points.

    The report carries train/test MAE, sample-level classification accuracy
    on the held-out split and the exclusion count from dataset building.
    Probabilities are scaled by 100 for the MAE so both model kinds report
    in comparable percentage points.
    """
    if ds.kind not in ("n1", "ppf"):
        raise ValueError(f"unknown dataset kind {ds.kind!r}")
    if threshold is None:
        threshold = 100.0 if ds.kind == "n1" else 0.10
    x_tr, y_tr, x_te, y_te = split_dataset(ds, train_frac, seed)
    x_std = Standardizer().fit(x_tr)
    if ds.kind == "n1":
        # percent-scale labels would sit deep in the linear tail of the
        # loss where gradients saturate, so the regression target is
        # standardized and predictions are mapped back
        y_std = Standardizer().fit(y_tr)
    else:
        y_std = Standardizer(mean=np.zeros(ds.y.shape[1]), std=np.ones(ds.y.shape[1]))
    out_act = "identity" if ds.kind == "n1" else "sigmoid"
    mlp = Mlp(MlpConfig(
        n_in=ds.x.shape[1], hidden=hidden, n_out=ds.y.shape[1],
        out_activation=out_act, seed=seed,
    ))
    train_supervised(
        mlp, x_std.transform(x_tr), y_std.transform(y_tr),
        epochs=epochs, batch_size=batch_size, lr=lr, seed=seed + 1,
    )
    approx = Approximator(mlp=mlp, x_std=x_std, y_std=y_std, kind=ds.kind,
                          feature=ds.feature, threshold=threshold)
    scale = 1.0 if ds.kind == "n1" else 100.0
    pred_tr = approx.predict(x_tr)
    pred_te = approx.predict(x_te)
    true_flags = np.any(y_te > threshold, axis=1)
    pred_flags = approx.classify(x_te)
    report = {
        "mae_train_pp": float(np.mean(np.abs(pred_tr - y_tr)) * scale),
        "mae_test_pp": float(np.mean(np.abs(pred_te - y_te)) * scale),
        "class_accuracy": float(np.mean(true_flags == pred_flags)) if len(y_te) else float("nan"),
        "n_train": len(x_tr),
        "n_test": len(x_te),
        "n_excluded": ds.n_excluded,
    }
    return approx, report


def mae_pp(approx: Approximator, x: np.ndarray, y: np.ndarray) -> float:
    """Mean absolute error in percentage points on an arbitrary set."""
    scale = 1.0 if approx.kind == "n1" else 100.0
    return float(np.mean(np.abs(approx.predict(x) - y)) * scale)


def save_approximator(path, approx: Approximator, meta: dict | None = None) -> None:
    extras = {
        "feat_mean": approx.x_std.mean,
        "feat_std": approx.x_std.std,
        "label_mean": approx.y_std.mean,
        "label_std": approx.y_std.std,
    }
    header = {
        "kind": approx.kind,
        "feature": approx.feature,
        "threshold": approx.threshold,
    }
    header.update(meta or {})
    save_mlp(path, approx.mlp, extras=extras, meta=header)


def load_approximator(path) -> tuple[Approximator, dict]:
    mlp, extras, meta = load_mlp(path)
    approx = Approximator(
        mlp=mlp,
        x_std=Standardizer(mean=extras["feat_mean"], std=extras["feat_std"]),
        y_std=Standardizer(mean=extras["label_mean"], std=extras["label_std"]),
        kind=meta["kind"],
        feature=meta["feature"],
        threshold=float(meta["threshold"]),
    )
    return approx, meta
