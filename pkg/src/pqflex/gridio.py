"""Grid bundle I/O.

A grid lives in a directory of plain CSV tables (one per element type)
plus a small ``manifest.json`` carrying the name, the MVA base and a
content hash over the tables. The hash lets downstream artifacts (trained
models, sample sets) record which grid they belong to.

Time series scalings for load and DER availability sit in an optional
``profiles.csv`` with one row per study step.
"""

from __future__ import annotations

import csv
import hashlib
import json
import pathlib

import numpy as np

from .grid import Bus, Der, ExtGrid, Line, Load, Network, Transformer

__all__ = [
    "load_grid",
    "save_grid",
    "grid_sha",
    "load_profiles",
    "save_profiles",
    "save_samples",
    "load_samples",
]

FORMAT_VERSION = 1

_TABLES = ("bus", "line", "trafo", "load", "der", "extgrid")

_BUS_COLS = ("id", "vn_kv", "vmin_pu", "vmax_pu", "kind")
_LINE_COLS = ("id", "from_bus", "to_bus", "r_ohm", "x_ohm", "b_total_us", "i_max_ka", "in_service")
_TRAFO_COLS = (
    "id",
    "hv_bus",
    "lv_bus",
    "sn_mva",
    "vk_percent",
    "vkr_percent",
    "tap_pos",
    "tap_step",
    "is_interface",
    "in_service",
)
_LOAD_COLS = ("id", "bus", "p_mw", "q_mvar")
_DER_COLS = ("id", "bus", "p_inst_mw", "p_avail_mw", "p_set_mw", "q_set_mvar", "controllable", "q_frac")
_EXT_COLS = ("bus", "v_pu")


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1"):
        return True
    if t in ("false", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _write_table(path: pathlib.Path, cols, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_table(path: pathlib.Path, cols) -> list[tuple[int, dict]]:
    """Rows of one table as (csv line number, row dict) pairs."""
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        have = set(reader.fieldnames or ())
        missing = set(cols) - have
        if missing:
            raise ValueError(f"{path.name}: missing columns {sorted(missing)}")
        extra = have - set(cols)
        if extra:
            raise ValueError(f"{path.name}: unknown columns {sorted(extra)}")
        out = []
        for row in reader:
            out.append((reader.line_num, row))
        return out


def _build(path: pathlib.Path, cols, make):
    """Construct one element per row, failures point at file and line."""
    out = []
    for lineno, row in _read_table(path, cols):
        try:
            out.append(make(row))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{path.name} line {lineno}: {exc}") from None
    return tuple(out)


def grid_sha(path: str | pathlib.Path) -> str:
    """Content hash over the element tables, independent of the manifest."""
    root = pathlib.Path(path)
    h = hashlib.sha256()
    for table in _TABLES:
        f = root / f"{table}.csv"
        h.update(table.encode())
        if f.exists():
            h.update(f.read_bytes())
    return h.hexdigest()[:12]


def save_grid(net: Network, path: str | pathlib.Path) -> None:
    root = pathlib.Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_table(
        root / "bus.csv",
        _BUS_COLS,
        [(b.id, b.vn_kv, b.vmin_pu, b.vmax_pu, b.kind) for b in net.buses],
    )
    _write_table(
        root / "line.csv",
        _LINE_COLS,
        [
            (l.id, l.from_bus, l.to_bus, l.r_ohm, l.x_ohm, l.b_total_us, l.i_max_ka, l.in_service)
            for l in net.lines
        ],
    )
    _write_table(
        root / "trafo.csv",
        _TRAFO_COLS,
        [
            (
                t.id,
                t.hv_bus,
                t.lv_bus,
                t.sn_mva,
                t.vk_percent,
                t.vkr_percent,
                t.tap_pos,
                t.tap_step,
                t.is_interface,
                t.in_service,
            )
            for t in net.trafos
        ],
    )
    _write_table(root / "load.csv", _LOAD_COLS, [(l.id, l.bus, l.p_mw, l.q_mvar) for l in net.loads])
    _write_table(
        root / "der.csv",
        _DER_COLS,
        [
            (d.id, d.bus, d.p_inst_mw, d.p_avail_mw, d.p_set_mw, d.q_set_mvar, d.controllable, d.q_frac)
            for d in net.ders
        ],
    )
    _write_table(root / "extgrid.csv", _EXT_COLS, [(net.ext.bus, net.ext.v_pu)])
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": net.name or root.name,
        "base_mva": net.base_mva,
        "sha": grid_sha(root),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_grid(path: str | pathlib.Path, validate: bool = True) -> Network:
    """Read a grid bundle directory back into a ``Network``.

    The manifest hash, when present, must match the tables on disk so a
    half-edited bundle fails loudly instead of silently shifting results.
    """
    root = pathlib.Path(path)
    if not (root / "bus.csv").exists():
        raise FileNotFoundError(f"{root}: no bus.csv, not a grid bundle")

    name = root.name
    base_mva = 100.0
    mf = root / "manifest.json"
    if mf.exists():
        manifest = json.loads(mf.read_text())
        if manifest.get("format_version", 1) > FORMAT_VERSION:
            raise ValueError(f"{root}: bundle format {manifest['format_version']} is newer than this reader")
        want = manifest.get("sha")
        if want is not None and want != grid_sha(root):
            raise ValueError(f"{root}: table contents do not match the manifest hash")
        name = manifest.get("name", name)
        base_mva = float(manifest.get("base_mva", base_mva))

    buses = _build(
        root / "bus.csv",
        _BUS_COLS,
        lambda r: Bus(
            id=int(r["id"]),
            vn_kv=float(r["vn_kv"]),
            vmin_pu=float(r["vmin_pu"]),
            vmax_pu=float(r["vmax_pu"]),
            kind=r["kind"].strip(),
        ),
    )
    lines = _build(
        root / "line.csv",
        _LINE_COLS,
        lambda r: Line(
            id=int(r["id"]),
            from_bus=int(r["from_bus"]),
            to_bus=int(r["to_bus"]),
            r_ohm=float(r["r_ohm"]),
            x_ohm=float(r["x_ohm"]),
            b_total_us=float(r["b_total_us"]),
            i_max_ka=float(r["i_max_ka"]),
            in_service=_parse_bool(r["in_service"]),
        ),
    )
    trafos = _build(
        root / "trafo.csv",
        _TRAFO_COLS,
        lambda r: Transformer(
            id=int(r["id"]),
            hv_bus=int(r["hv_bus"]),
            lv_bus=int(r["lv_bus"]),
            sn_mva=float(r["sn_mva"]),
            vk_percent=float(r["vk_percent"]),
            vkr_percent=float(r["vkr_percent"]),
            tap_pos=int(r["tap_pos"]),
            tap_step=float(r["tap_step"]),
            is_interface=_parse_bool(r["is_interface"]),
            in_service=_parse_bool(r["in_service"]),
        ),
    )
    loads = _build(
        root / "load.csv",
        _LOAD_COLS,
        lambda r: Load(
            id=int(r["id"]), bus=int(r["bus"]),
            p_mw=float(r["p_mw"]), q_mvar=float(r["q_mvar"]),
        ),
    )
    ders = _build(
        root / "der.csv",
        _DER_COLS,
        lambda r: Der(
            id=int(r["id"]),
            bus=int(r["bus"]),
            p_inst_mw=float(r["p_inst_mw"]),
            p_avail_mw=float(r["p_avail_mw"]),
            p_set_mw=float(r["p_set_mw"]),
            q_set_mvar=float(r["q_set_mvar"]),
            controllable=_parse_bool(r["controllable"]),
            q_frac=float(r["q_frac"]),
        ),
    )
    ext_rows = _build(
        root / "extgrid.csv",
        _EXT_COLS,
        lambda r: ExtGrid(bus=int(r["bus"]), v_pu=float(r["v_pu"])),
    )
    if len(ext_rows) != 1:
        raise ValueError(f"{root}: extgrid.csv must hold exactly one row")
    ext = ext_rows[0]

    net = Network(
        buses=buses,
        lines=lines,
        trafos=trafos,
        loads=loads,
        ders=ders,
        ext=ext,
        base_mva=base_mva,
        name=name,
    )
    if validate:
        net.validate()
    return net


# -- profiles -----------------------------------------------------------

_PROFILE_COLS = ("step", "load_p", "load_q", "der_avail")


def save_profiles(path: str | pathlib.Path, profiles: np.ndarray) -> None:
    """Write per-step scaling factors, one row per study step.

    ``profiles`` has shape (n_steps, 3): columns scale active load,
    reactive load and DER availability relative to the bundle's nominal
    values.
    """
    profiles = np.asarray(profiles, dtype=float)
    if profiles.ndim != 2 or profiles.shape[1] != 3:
        raise ValueError("profiles must have shape (n_steps, 3)")
    rows = [(k, *profiles[k]) for k in range(profiles.shape[0])]
    _write_table(pathlib.Path(path), _PROFILE_COLS, rows)


def load_profiles(path: str | pathlib.Path) -> np.ndarray:
    p = pathlib.Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{path}: no such profile table")
    rows = _read_table(p, _PROFILE_COLS)
    if not rows:
        raise ValueError(f"{path}: empty profile table")
    out = np.empty((len(rows), 3))
    for k, (lineno, r) in enumerate(rows):
        try:
            step = int(r["step"])
            out[k] = (float(r["load_p"]), float(r["load_q"]), float(r["der_avail"]))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{p.name} line {lineno}: {exc}") from None
        if step != k:
            raise ValueError(f"{path}: step column must run 0..n-1 in order")
    return out


# -- sample sets --------------------------------------------------------


def save_samples(path: str | pathlib.Path, samples) -> None:
    np.savez(
        path,
        load_p=samples.load_p,
        load_q=samples.load_q,
        der_avail=samples.der_avail,
        ext_v=samples.ext_v,
        r_p=samples.r_p,
        r_q=samples.r_q,
        bounds=samples.bounds,
    )


def load_samples(path: str | pathlib.Path):
    from .agent import SampleSet

    with np.load(path) as data:
        return SampleSet(
            load_p=data["load_p"],
            load_q=data["load_q"],
            der_avail=data["der_avail"],
            ext_v=data["ext_v"],
            r_p=data["r_p"],
            r_q=data["r_q"],
            bounds=data["bounds"],
        )
