import json

import numpy as np
import pytest

from conftest import make_quad
from lljump import io as lio
from lljump.sim import drop_plan
from lljump.solver.report import SolveReport, Status


def test_trajectory_round_trip_is_bitwise(tmp_path):
    plan = drop_plan(make_quad())
    plan.X[:, 0] += np.random.default_rng(0).normal(size=plan.n_knots) * 1e-3
    rep = SolveReport(Status.CONVERGED, 12, 1e-6, 1e-9, 0.5, objective=3.25)
    path = tmp_path / "plan.csv"
    lio.save_trajectory(plan, path, rep, extra={"scenario": "demo"})
    back, side = lio.load_trajectory(path)
    assert back.equals(plan)
    assert side["scenario"] == "demo"
    assert back.meta["solve_report"].status == Status.CONVERGED
    assert back.meta["solve_report"].objective == 3.25


def test_tampered_table_is_rejected(tmp_path):
    plan = drop_plan(make_quad())
    path = tmp_path / "plan.csv"
    lio.save_trajectory(plan, path)
    lines = path.read_text().splitlines()
    cells = lines[3].split(",")
    cells[6] = "0.123"
    lines[3] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(lio.FileFormatError, match="hash"):
        lio.load_trajectory(path)


def test_missing_or_wrong_sidecar(tmp_path):
    plan = drop_plan(make_quad())
    path = tmp_path / "plan.csv"
    lio.save_trajectory(plan, path)
    side = json.loads(lio.sidecar_path(path).read_text())
    side["kind"] = "runlog"
    lio.sidecar_path(path).write_text(json.dumps(side))
    with pytest.raises(lio.FileFormatError):
        lio.load_trajectory(path)
    lio.sidecar_path(path).unlink()
    with pytest.raises(lio.FileFormatError):
        lio.load_trajectory(path)


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    lio.atomic_write_text(target, "old")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(lio.os, "replace", boom)
    with pytest.raises(OSError):
        lio.atomic_write_text(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_floats_survive_text():
    vals = [0.1, 1 / 3, np.pi * 1e-300, -2.5e17]
    text = lio.table_to_csv(["a"], [[v] for v in vals])
    back = [float(r) for r in text.splitlines()[1:]]
    assert back == vals
