"""Solver status and report shared by the QP and NLP backends."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"

    def __str__(self):
        return self.value


@dataclass
class SolveReport:
    status: Status
    iterations: int
    kkt_residual: float
    constraint_violation: float
    wall_time: float
    inner_iterations: int = 0
    objective: float = float("nan")
    # multipliers: QP -> stacked constraint duals, NLP -> (eq, ineq)
    multipliers: Optional[object] = None
    history: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self):
        return self.status == Status.CONVERGED

    def to_dict(self):
        return {
            "status": str(self.status),
            "iterations": int(self.iterations),
            "inner_iterations": int(self.inner_iterations),
            "kkt_residual": float(self.kkt_residual),
            "constraint_violation": float(self.constraint_violation),
            "objective": float(self.objective),
            "wall_time": float(self.wall_time),
            "message": self.message,
            "history": self.history,
        }

    def to_json_line(self, **extra):
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, default=_json_default)

    @classmethod
    def from_dict(cls, d):
        return cls(
            status=Status(d["status"]),
            iterations=d["iterations"],
            kkt_residual=d["kkt_residual"],
            constraint_violation=d["constraint_violation"],
            wall_time=d["wall_time"],
            inner_iterations=d.get("inner_iterations", 0),
            objective=d.get("objective", float("nan")),
            history=d.get("history", []),
            message=d.get("message", ""),
        )


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
