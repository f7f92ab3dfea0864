"""File formats: CSV tables with a JSON sidecar, written atomically.

Floats are written with 17 significant digits so every file reads back to the
exact same arrays.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import LLJumpError
from .solver.report import SolveReport
from .transcription import Trajectory

FLOAT_FMT = "%.17g"
FORMAT_VERSION = 1


class FileFormatError(LLJumpError, ValueError):
    pass


def sidecar_path(path):
    path = Path(path)
    return path.with_suffix(path.suffix + ".json") if path.suffix != ".json" else path


def atomic_write_text(path, text):
    """Write to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def table_to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([FLOAT_FMT % v if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FileFormatError(f"{path}: empty file")
    return rows[0], rows[1:]


def read_sidecar(path):
    p = sidecar_path(path)
    try:
        with open(p) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{p}: {exc}") from exc


def digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------ trajectories


def trajectory_columns(n_legs, n_contacts):
    cols = ["k", "t", "dt", "phase", "rx", "ry", "rz", "qx", "qy", "qz", "qw", "Hx", "Hy", "Hz", "Lx", "Ly", "Lz"]
    cols += [f"p{i}{a}" for i in range(n_legs) for a in "xyz"]
    cols += [f"f{j}{a}" for j in range(n_contacts) for a in "xyz"]
    cols += [f"c{i}" for i in range(n_legs)]
    return cols


def save_trajectory(traj: Trajectory, path, report: SolveReport = None, extra=None):
    """Knot table as CSV (one row per knot) plus ``<path>.json`` with metadata."""
    K, nl, nc = traj.n_knots, traj.feet.shape[1], traj.forces.shape[1]
    t = traj.t
    dts = np.append(traj.dt, 0.0)
    rows = []
    for k in range(K):
        rows.append([k, float(t[k]), float(dts[k]), int(traj.knot_phase[k]), *map(float, traj.X[k]),
                     *map(float, traj.feet[k].ravel()), *map(float, traj.forces[k].ravel()), *map(int, traj.contact[k])])
    side = {
        "format_version": FORMAT_VERSION,
        "kind": "trajectory",
        "phase_names": list(traj.phase_names),
        "n_legs": nl,
        "n_contacts": nc,
        "dt": [float(v) for v in traj.dt],
        "hash": trajectory_hash(traj),
        "solve_report": report.to_dict() if report is not None else None,
    }
    side.update(extra or {})
    # sidecar first: a CSV without its sidecar is unreadable, never the other way round
    atomic_write_text(sidecar_path(path), json.dumps(side, indent=2, sort_keys=True))
    atomic_write_text(path, table_to_csv(trajectory_columns(nl, nc), rows))


def load_trajectory(path):
    """Returns ``(Trajectory, sidecar dict)``."""
    side = read_sidecar(path)
    if side.get("kind") != "trajectory":
        raise FileFormatError(f"{path}: not a trajectory file")
    nl, nc = int(side["n_legs"]), int(side["n_contacts"])
    header, rows = read_csv(path)
    if header != trajectory_columns(nl, nc):
        raise FileFormatError(f"{path}: unexpected columns")
    try:
        A = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    if A.ndim != 2 or len(A) < 2:
        raise FileFormatError(f"{path}: need at least two knots")
    X = A[:, 4:17]
    o = 17
    feet = A[:, o:o + 3 * nl].reshape(-1, nl, 3)
    o += 3 * nl
    forces = A[:, o:o + 3 * nc].reshape(-1, nc, 3)
    o += 3 * nc
    contact = A[:, o:o + nl].astype(bool)
    traj = Trajectory(X, forces, feet, np.array(side["dt"], dtype=float), A[:, 3].astype(int), contact,
                      list(side["phase_names"]))
    if trajectory_hash(traj) != side.get("hash"):
        raise FileFormatError(f"{path}: content hash does not match its sidecar")
    if side.get("solve_report"):
        traj.meta["solve_report"] = SolveReport.from_dict(side["solve_report"])
    return traj, side


def trajectory_hash(traj: Trajectory):
    return digest(traj.X, traj.forces, traj.feet, traj.dt, traj.knot_phase, traj.contact)
