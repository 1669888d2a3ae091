"""Writers and readers for run artefacts.

* VTK legacy ASCII (2.0) unstructured grids with point data ``u``, ``z``, ``theta``
* ``ledger.csv`` with a fixed column order and 17 significant digits
* ``run.json`` summary
* ``trajectory.npz`` with every step at full precision (input to ``verify``)
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import InputError
from .mesh import Mesh2D
from .timeloop import FLAG_COLUMNS, LEDGER_COLUMNS, EnergyLedger, RunResult, Trajectory

_FMT = "%.17g"
_INT_COLUMNS = {"k", "newton", "heat_iters"}


def _f(x) -> str:
    return _FMT % x


# ---------------------------------------------------------------------------
# VTK
# ---------------------------------------------------------------------------
def write_vtk(path, mesh: Mesh2D, u, z, theta, title: str = "thermodamage") -> None:
    N, M = mesh.n_nodes, mesh.n_triangles
    u = np.asarray(u, dtype=float).reshape(N, 2)
    lines = ["# vtk DataFile Version 2.0", title.replace("\n", " ")[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {N} double"]
    lines += [f"{_f(x)} {_f(y)} 0" for x, y in mesh.nodes]
    lines.append(f"CELLS {M} {4 * M}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {M}")
    lines += ["5"] * M
    lines.append(f"POINT_DATA {N}")
    lines.append("VECTORS u double")
    lines += [f"{_f(a)} {_f(b)} 0" for a, b in u]
    for name, arr in (("z", z), ("theta", theta)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [_f(v) for v in np.asarray(arr, dtype=float)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path) -> dict:
    """Read a file written by :func:`write_vtk` into arrays."""
    tok = Path(path).read_text().split("\n")
    out, i = {}, 0
    while i < len(tok):
        line = tok[i].split()
        if not line:
            i += 1
            continue
        if line[0] == "POINTS":
            n = int(line[1])
            out["points"] = np.array([[float(v) for v in tok[i + 1 + j].split()[:2]] for j in range(n)])
            i += n + 1
        elif line[0] == "CELLS":
            m = int(line[1])
            out["cells"] = np.array([[int(v) for v in tok[i + 1 + j].split()[1:]] for j in range(m)])
            i += m + 1
        elif line[0] == "VECTORS":
            n = len(out["points"])
            out[line[1]] = np.array([[float(v) for v in tok[i + 1 + j].split()[:2]] for j in range(n)]).ravel()
            i += n + 1
        elif line[0] == "SCALARS":
            n = len(out["points"])
            out[line[1]] = np.array([float(tok[i + 2 + j]) for j in range(n)])
            i += n + 2
        else:
            i += 1
    return out


# ---------------------------------------------------------------------------
# Ledger CSV
# ---------------------------------------------------------------------------
def _flag(v) -> str:
    return "NA" if v is None else ("PASS" if v else "FAIL")


def write_ledger_csv(path, ledger: EnergyLedger) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS + FLAG_COLUMNS)
        for r in ledger.rows:
            vals = [str(int(r[c])) if c in _INT_COLUMNS else _f(r[c]) for c in LEDGER_COLUMNS]
            w.writerow(vals + [_flag(r.get(c)) for c in FLAG_COLUMNS])


def read_ledger_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for c in LEDGER_COLUMNS:
            r[c] = float(r[c])
    return rows


# ---------------------------------------------------------------------------
# Trajectory
# ---------------------------------------------------------------------------
def save_trajectory(path, result: RunResult, scaling=None) -> None:
    mesh, tr = result.mesh, result.trajectory
    sc = scaling or result.config.scaling
    np.savez_compressed(
        path,
        t=tr.t, u=tr.u, z=tr.z, theta=tr.theta, u_init_prev=tr.u_init_prev, forces=tr.forces, heat=tr.heat,
        nodes=mesh.nodes, triangles=mesh.triangles, boundary_edges=mesh.boundary_edges,
        labels=np.array(mesh.labels), edge_sides=np.array(mesh.edge_sides if mesh.edge_sides else []),
        config=np.array(json.dumps(result.config.to_dict(), sort_keys=True)),
        scaling=np.array([sc.eps, sc.beta]),
    )


def load_trajectory(path):
    """Return ``(config dict, mesh, trajectory, (eps, beta))``."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no trajectory at {path}")
    with np.load(path, allow_pickle=False) as d:
        sides = tuple(str(s) for s in d["edge_sides"]) or None
        mesh = Mesh2D(d["nodes"], d["triangles"], d["boundary_edges"], tuple(str(s) for s in d["labels"]), sides)
        traj = Trajectory(d["t"], d["u"], d["z"], d["theta"], d["u_init_prev"], d["forces"], d["heat"])
        cfg = json.loads(str(d["config"]))
        eps, beta = (float(x) for x in d["scaling"])
    return cfg, mesh, traj, (eps, beta)


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------
def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _finite(x):
    return x if isinstance(x, float) and math.isfinite(x) else (None if isinstance(x, float) else x)


def write_run_json(path, result: RunResult, extra: Optional[dict] = None) -> None:
    led = result.ledger
    worst = {k: _finite(v) for k, v in led.worst().items()}
    summary = {
        "config": result.config.to_dict(),
        "seed": result.config.seed,
        "wall_time_s": result.wall_time,
        "steps": len(led) - 1,
        "passed": led.all_pass(),
        "failures": [{"step": k, "check": c} for k, c in led.failures()],
        "worst": worst,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, default=_json_default, sort_keys=True) + "\n")


def write_run_directory(out: Path, result: RunResult, scaling=None, extra: Optional[dict] = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, tr = result.config, result.trajectory
    if cfg.output.vtk:
        n = len(tr.t) - 1
        for k in range(n + 1):
            if k % cfg.output.every == 0 or k == n:
                write_vtk(out / f"step_{k:05d}.vtk", result.mesh, tr.u[k], tr.z[k], tr.theta[k], f"step {k} t={tr.t[k]!r}")
    write_ledger_csv(out / "ledger.csv", result.ledger)
    save_trajectory(out / "trajectory.npz", result, scaling)
    write_run_json(out / "run.json", result, extra)


def write_failure_dump(out: Path, mesh: Mesh2D, exc, fallback: Optional[dict] = None) -> Path:
    """VTK snapshot of the failing state plus a text report; returns the report path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    step = getattr(exc, "step", None)
    state = getattr(exc, "state", None) or fallback or {}
    N = mesh.n_nodes
    u = state.get("u", np.zeros(2 * N))
    theta = state.get("theta", np.zeros(N))
    z = state.get("z", np.full(N, np.nan))
    write_vtk(out / f"failure_step_{step}.vtk", mesh, u, z, theta, f"failure at step {step}")
    report = out / "failure_report.txt"
    report.write_text(
        f"step: {step}\nerror: {type(exc).__name__}\nmessage: {exc}\n"
        f"theta_min: {float(np.min(theta)) if len(theta) else float('nan')!r}\n"
    )
    return report


def write_sweep_report(path, rows: Iterable[dict], columns: Iterable[str]) -> None:
    columns = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_f(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns])
