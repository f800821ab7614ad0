"""Command line front end.

Every subcommand is a thin client of the JSON service: by default the app
runs in-process, with ``--server`` the same requests go to a remote
instance, and ``serve`` starts one. Results print as JSON (``pf`` also as
text tables); ``--out`` writes the payload to a file plus a
``<out>.manifest.json`` sidecar recording grid/config hashes and seeds.

Exit codes: 0 success, 1 validation error (bad flags, bad files, bad
references), 2 numerical failure (diverging power flow).
"""

from __future__ import annotations

import argparse
import csv
import json
import pathlib
import sys

from .config import RunConfig

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors, the contract here reserves 2 for
    # numerical failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"error: {message}")


def _add_common(p, grid=True, seed=False, profile=False):
    if grid:
        p.add_argument("--grid", required=True, help="grid bundle directory")
    p.add_argument("--config", help="run configuration JSON file")
    if seed:
        p.add_argument("--seed", type=int, help="override the configured seed")
    if profile:
        p.add_argument("--profile-step", type=int, dest="profile_step",
                       help="scale the operating point by this profiles.csv row")
    p.add_argument("--out", help="write the result payload to this file")
    p.add_argument("--server", help="service URL (default: run in-process)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pqflex", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pf", help="single power flow, bus and branch tables")
    _add_common(p, profile=True)

    p = sub.add_parser("n1", help="full N-1 contingency screen")
    _add_common(p, profile=True)

    p = sub.add_parser("ppf", help="Monte Carlo voltage violation probabilities")
    _add_common(p, seed=True, profile=True)

    p = sub.add_parser("gen-samples", help="draw training scenarios to an npz file")
    _add_common(p, seed=True)

    p = sub.add_parser("train-stage1", help="train the dispatch network on base-case limits")
    _add_common(p, seed=True)
    p.add_argument("--samples", required=True, help="training samples npz")

    p = sub.add_parser("train-approx", help="train both security approximators")
    _add_common(p, seed=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--agent", required=True, help="trained dispatch model file")
    p.add_argument("--out-n1", required=True, dest="out_n1")
    p.add_argument("--out-ppf", required=True, dest="out_ppf")

    p = sub.add_parser("train-stage2", help="re-train under tightened per-sample limits")
    _add_common(p, seed=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--agent", required=True)

    p = sub.add_parser("estimate-area", help="sweep the requirement grid, write the area CSV")
    _add_common(p, seed=True, profile=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--approx-n1", dest="approx_n1")
    p.add_argument("--approx-ppf", dest="approx_ppf")
    p.add_argument("--n", type=int, help="grid resolution per axis")

    p = sub.add_parser("verify-area", help="re-screen a sweep with exact checks")
    _add_common(p, seed=True, profile=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--approx-n1", dest="approx_n1")
    p.add_argument("--approx-ppf", dest="approx_ppf")
    p.add_argument("--n", type=int)
    p.add_argument("--mcs-samples", type=int, dest="mcs_samples")

    p = sub.add_parser("baseline", help="model-free dispatch optimization reference")
    _add_common(p, seed=True, profile=True)
    p.add_argument("--mode", default="max_p",
                   choices=("max_p", "max_q", "min_q", "requirement"))
    p.add_argument("--r-p", type=float, dest="r_p", help="requirement P, MW")
    p.add_argument("--r-q", type=float, dest="r_q", help="requirement Q, Mvar")
    p.add_argument("--iters", type=int)

    p = sub.add_parser("bench", help="sweep timing and per-point speedup")
    _add_common(p, seed=True, profile=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--approx-n1", dest="approx_n1")
    p.add_argument("--approx-ppf", dest="approx_ppf")
    p.add_argument("--n", type=int)
    p.add_argument("--baseline-points", type=int, default=3, dest="baseline_points")

    p = sub.add_parser("serve", help="run the service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    return ap


def _client(args):
    if getattr(args, "server", None):
        import httpx

        return httpx.Client(base_url=args.server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _payload(args, fields) -> dict:
    body = {"grid": args.grid}
    if args.config:
        body["config"] = RunConfig.from_file(args.config).model_dump()
    if getattr(args, "seed", None) is not None:
        body["seed"] = args.seed
    for f in fields:
        v = getattr(args, f, None)
        if v is not None:
            body[f] = v
    return body


def _print_pf(doc) -> None:
    print(f"converged in {doc['iterations']} iterations, "
          f"max mismatch {doc['max_mismatch']:.3e} pu")
    if doc["interface_p_mw"] is not None:
        print(f"interface exchange: {doc['interface_p_mw']:+.3f} MW, "
              f"{doc['interface_q_mvar']:+.3f} Mvar")
    print()
    print(f"{'bus':>4} {'vn_kv':>7} {'vm_pu':>8} {'va_deg':>8} "
          f"{'p_mw':>10} {'q_mvar':>10}")
    for b in doc["buses"]:
        print(f"{b['id']:>4} {b['vn_kv']:>7.1f} {b['vm_pu']:>8.4f} "
              f"{b['va_deg']:>8.3f} {b['p_mw']:>10.3f} {b['q_mvar']:>10.3f}")
    print()
    print(f"{'branch':>6} {'kind':>5} {'from':>4} {'to':>4} {'loading%':>9} "
          f"{'p_from_mw':>10} {'q_from_mvar':>11}")
    for br in doc["branches"]:
        print(f"{br['id']:>6} {br['kind']:>5} {br['from_bus']:>4} "
              f"{br['to_bus']:>4} {br['loading_pct']:>9.2f} "
              f"{br['p_from_mw']:>10.3f} {br['q_from_mvar']:>11.3f}")


def _write_area_csv(path: pathlib.Path, doc) -> None:
    cols = ("r_p", "r_q", "p_sp_mw", "q_sp_mvar",
            "achieved_p_mw", "achieved_q_mvar", "class", "detail")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for pt in doc["points"]:
            w.writerow([
                pt["r_p"], pt["r_q"], pt["p_sp_mw"], pt["q_sp_mvar"],
                pt["achieved_p_mw"], pt["achieved_q_mvar"],
                pt["label"], pt["detail"],
            ])


def _emit(args, doc) -> None:
    """Print respectively write one command's result payload."""
    command = args.command
    out = getattr(args, "out", None)
    for w in doc.get("warnings", ()):
        print(f"warning: {w}", file=sys.stderr)
    if command == "pf":
        _print_pf(doc)
    if out is None:
        if command != "pf":
            print(json.dumps(doc, indent=2))
        return
    path = pathlib.Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if command == "estimate-area":
        _write_area_csv(path, doc)
        summary = {k: v for k, v in doc.items() if k != "points"}
        path.with_suffix(path.suffix + ".summary.json").write_text(
            json.dumps(summary, indent=2) + "\n"
        )
    else:
        path.write_text(json.dumps(doc, indent=2) + "\n")
    if "manifest" in doc:
        path.with_suffix(path.suffix + ".manifest.json").write_text(
            json.dumps(doc["manifest"], indent=2) + "\n"
        )
    print(f"wrote {path}")


_ROUTES = {
    "pf": ("/pf", ("profile_step",)),
    "n1": ("/n1", ("profile_step",)),
    "ppf": ("/ppf", ("profile_step",)),
    "gen-samples": ("/samples", ("out",)),
    "train-stage1": ("/train/stage1", ("samples", "out")),
    "train-approx": ("/train/approx", ("samples", "agent", "out_n1", "out_ppf")),
    "train-stage2": ("/train/stage2", ("samples", "agent", "out")),
    "estimate-area": ("/area/estimate",
                      ("agent", "approx_n1", "approx_ppf", "n", "profile_step")),
    "verify-area": ("/area/verify",
                    ("agent", "approx_n1", "approx_ppf", "n", "profile_step",
                     "mcs_samples")),
    "baseline": ("/baseline", ("mode", "r_p", "r_q", "iters", "profile_step")),
    "bench": ("/bench", ("agent", "approx_n1", "approx_ppf", "n",
                         "baseline_points", "profile_step")),
}

# these commands create their artifact server-side, the CLI must not
# overwrite it with the JSON payload afterwards
_SERVER_SIDE_OUT = {"gen-samples", "train-stage1", "train-stage2"}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, int) or exc.code is None:
            return int(exc.code or 0)
        print(exc.code, file=sys.stderr)
        return 1

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    route, fields = _ROUTES[args.command]
    if args.command in _SERVER_SIDE_OUT and not args.out:
        print("error: this command requires --out", file=sys.stderr)
        return 1
    if args.command == "estimate-area" and not args.out:
        print("error: estimate-area requires --out for the area CSV",
              file=sys.stderr)
        return 1
    try:
        body = _payload(args, fields)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        with _client(args) as client:
            resp = client.post(route, json=body)
    except Exception as exc:  # connection trouble, unreachable server
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if resp.status_code in (400, 422):
        try:
            detail = resp.json()["detail"]
        except Exception:
            detail = resp.text
        print(f"error: {detail}", file=sys.stderr)
        return 1
    if resp.status_code == 409:
        print(f"numerical failure: {resp.json()['detail']}", file=sys.stderr)
        return 2
    if resp.status_code != 200:
        print(f"error: service returned {resp.status_code}: {resp.text}",
              file=sys.stderr)
        return 2

    doc = resp.json()
    if args.command in _SERVER_SIDE_OUT:
        # artifact already on disk, print the summary and drop the sidecar
        for w in doc.get("warnings", ()):
            print(f"warning: {w}", file=sys.stderr)
        print(json.dumps({k: v for k, v in doc.items() if k != "history"},
                         indent=2))
        out = pathlib.Path(args.out)
        out.with_suffix(out.suffix + ".manifest.json").write_text(
            json.dumps(doc["manifest"], indent=2) + "\n"
        )
        return 0
    _emit(args, doc)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
