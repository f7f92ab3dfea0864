"""Scenario files: one YAML document describing robot, task, solver, controller and sim.

All quantities are SI (m, kg, s, N, rad). Unknown keys are rejected so typos
fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .controller import ControllerWeights, TaskGains
from .detection import DetectorConfig
from .errors import ScenarioError
from .model import LegLump, RobotModel, State, quat_from_yaw, quat_to_rot
from .sim import GroundModel, SimConfig
from .solver.nlp import NlpSolverConfig
from .transcription import CostWeights, JumpTask, PhaseSchedule

SCHEMA_VERSION = 1
BUNDLED_DIR = Path(__file__).parent / "scenarios"

Vec3 = Tuple[float, float, float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LegSpec(_Strict):
    mass: float = Field(ge=0, description="kg")
    attach_offset: Vec3 = Field(description="hip position relative to the CoM, body frame (m)")
    mass_fraction: float = Field(0.5, ge=0, le=1, description="lump position on the foot-to-CoM segment")


class RobotSpec(_Strict):
    name: str = "robot"
    body_mass: float = Field(gt=0, description="kg")
    body_inertia: Union[Vec3, Tuple[Vec3, Vec3, Vec3]] = Field(description="kg m^2, diagonal or full 3x3")
    legs: List[LegSpec]
    foot_type: Literal["point", "planar"] = "point"
    corner_offsets: Optional[List[Vec3]] = Field(None, description="planar foot corners relative to the foot (m)")
    l_min: float = Field(gt=0, description="m")
    l_max: float = Field(gt=0, description="m")
    mu: float = Field(0.7, gt=0)
    f_max_z: float = Field(1000.0, gt=0, description="N per contact")
    stance_height: float = Field(gt=0, description="nominal CoM height above the feet (m)")

    def build(self) -> RobotModel:
        I = np.asarray(self.body_inertia, dtype=float)
        return RobotModel(
            body_mass=self.body_mass,
            body_inertia=np.diag(I) if I.ndim == 1 else I,
            legs=[LegLump(lg.mass, lg.attach_offset, lg.mass_fraction) for lg in self.legs],
            foot_type=self.foot_type,
            corner_offsets=None if self.corner_offsets is None else np.asarray(self.corner_offsets),
            l_min=self.l_min, l_max=self.l_max, mu=self.mu, f_max_z=self.f_max_z, name=self.name,
        )

    def feet_body(self):
        """Foot positions relative to the CoM in the body frame at the nominal stance."""
        return np.array([lg.attach_offset for lg in self.legs], dtype=float) + [0.0, 0.0, -self.stance_height]


class PoseSpec(_Strict):
    position: Vec3 = Field(description="CoM position (m)")
    yaw: float = Field(0.0, description="heading (rad)")
    ground_height: float = Field(0.0, description="height of the surface under the feet (m)")
    feet: Optional[List[Vec3]] = Field(None, description="explicit foot positions (m); default: nominal stance")


class TaskSpec(_Strict):
    start: PoseSpec
    goal: PoseSpec
    t_min: float = Field(0.02, gt=0, description="s per segment")
    t_max: float = Field(0.1, gt=0, description="s per segment")
    N: int = Field(48, ge=3)
    final_orientation_in_cost: Optional[bool] = None


class PlanSpec(_Strict):
    kind: Literal["optimize", "drop"] = "optimize"
    drop_height: float = Field(0.3, gt=0, description="m, drop plans only")
    hold_time: float = Field(0.3, gt=0, description="s, drop plans only")


class ControllerSpec(_Strict):
    K_P_pos: Union[float, Vec3] = 100.0
    K_D_pos: Union[float, Vec3] = 20.0
    K_P_ang: Union[float, Vec3] = 100.0
    K_D_ang: Union[float, Vec3] = 20.0
    W_lin: Union[float, Vec3] = 1.0
    W_ang: Union[float, Vec3] = 1.0
    w_reg: float = Field(1e-8, gt=0)
    landing_force_weight: float = Field(1.0, ge=0)
    force_phase_duration: float = Field(0.2, ge=0, description="s")
    force_ramp: float = Field(0.05, ge=0, description="s")

    def kwargs(self):
        return {
            "gains": TaskGains(self.K_P_pos, self.K_D_pos, self.K_P_ang, self.K_D_ang),
            "weights": ControllerWeights(np.diag(np.broadcast_to(self.W_lin, 3)), np.diag(np.broadcast_to(self.W_ang, 3)), 0.0, self.w_reg),
            "landing_force_weight": self.landing_force_weight,
            "force_phase_duration": self.force_phase_duration,
            "force_ramp": self.force_ramp,
        }


class GroundSpec(_Strict):
    height: float = 0.0
    k_n: float = Field(5e4, gt=0, description="N/m per contact")
    d_n: float = Field(5e2, gt=0, description="N s/m per contact")
    mu: float = Field(0.8, ge=0)
    regions: List[Tuple[float, float, float, float, float]] = Field(default_factory=list, description="x0, x1, y0, y1, offset")


def _field_names(cls):
    return {f.name for f in fields(cls)}


class Scenario(_Strict):
    schema_version: int
    name: str
    description: str = ""
    robot: RobotSpec
    model: Literal["llsrbm", "srbm"] = "llsrbm"
    task: Optional[TaskSpec] = None
    plan: PlanSpec = Field(default_factory=PlanSpec)
    weights: dict = Field(default_factory=dict)
    solver: dict = Field(default_factory=dict)
    controller: ControllerSpec = Field(default_factory=ControllerSpec)
    sim: dict = Field(default_factory=dict)
    ground: GroundSpec = Field(default_factory=GroundSpec)
    detector: dict = Field(default_factory=dict)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _blocks(self):
        for block, cls in (("weights", CostWeights), ("solver", NlpSolverConfig), ("sim", SimConfig), ("detector", DetectorConfig)):
            unknown = set(getattr(self, block)) - _field_names(cls)
            if unknown:
                raise ValueError(f"{block}: unknown keys {sorted(unknown)}")
        if self.plan.kind == "optimize" and self.task is None:
            raise ValueError("optimize plans need a task block")
        return self

    # -- builders -------------------------------------------------------------

    def robot_model(self, which=None) -> RobotModel:
        model = self.robot.build()
        if (which or self.model) == "srbm":
            return model.to_srbm(self.robot.feet_body())
        return model

    def twin_models(self):
        return self.robot_model("llsrbm"), self.robot_model("srbm")

    def _pose(self, pose: PoseSpec, model):
        q = quat_from_yaw(pose.yaw)
        r = np.asarray(pose.position, dtype=float)
        if pose.feet is not None:
            feet = np.asarray(pose.feet, dtype=float)
        else:
            feet = r + self.robot.feet_body() @ quat_to_rot(q).T
            feet[:, 2] = pose.ground_height
        return State(r, q, np.zeros(3), np.zeros(3)), feet

    def jump_task(self, model=None) -> JumpTask:
        model = model or self.robot_model()
        x0, p0 = self._pose(self.task.start, model)
        x1, p1 = self._pose(self.task.goal, model)
        return JumpTask(x0, x1, p0, p1, self.task.t_min, self.task.t_max, self.task.N)

    def schedule(self, task, model) -> PhaseSchedule:
        return PhaseSchedule.standard(task, model.n_legs)

    def cost_weights(self):
        return CostWeights(**self.weights)

    def solver_config(self):
        return NlpSolverConfig(**self.solver)

    def sim_config(self, **override):
        return SimConfig(**{**self.sim, **override})

    def detector_config(self, **override):
        return DetectorConfig(**{**self.detector, **override})

    def ground_model(self, platform=None):
        g = GroundModel(**self.ground.model_dump())
        if platform:
            g.regions = list(g.regions) + [(-5.0, 5.0, -5.0, 5.0, float(platform))]
        return g

    def controller_kwargs(self):
        return self.controller.kwargs()


def load_scenario(path) -> Scenario:
    """Read and validate a scenario; bundled names (without ``.yaml``) are accepted."""
    p = Path(path)
    if not p.exists() and not p.suffix and (BUNDLED_DIR / f"{p.name}.yaml").exists():
        p = BUNDLED_DIR / f"{p.name}.yaml"
    try:
        data = yaml.safe_load(p.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{p}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError(f"{p}: expected a mapping at the top level")
    try:
        scn = Scenario.model_validate(data)
        scn.robot_model()
    except (ValidationError, ValueError) as exc:
        raise ScenarioError(f"{p}: {exc}") from exc
    return scn


def bundled_scenarios():
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.yaml"))
