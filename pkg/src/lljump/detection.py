"""Touchdown detection from the norm of the average spatial velocity.

In flight the CoM speed only grows under gravity and the average angular
velocity is (nearly) constant, so a run of strongly negative derivatives of
``|v_G|`` means the ground is pushing back.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .model import RobotModel, State, centroidal_inertia


@dataclass(frozen=True)
class SpatialVelocitySample:
    t: float
    v_com: np.ndarray
    w_G: np.ndarray

    @property
    def norm(self):
        return float(np.sqrt(self.v_com @ self.v_com + self.w_G @ self.w_G))


@dataclass(frozen=True)
class DetectorConfig:
    """``threshold`` is a rate (1/s); all ``window`` derivatives must fall below it."""

    window: int = 5
    threshold: float = -10.0
    arming_time: float = 0.05

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.arming_time < 0:
            raise ValueError("arming_time must be >= 0")


def average_spatial_velocity(x: State, foot_positions, model: RobotModel, t=0.0, v_noise=None):
    """``v_G = [H/m; I_W^-1 L]`` with the reduced-model centroidal inertia.

    ``v_noise`` is added to the CoM velocity only (observation noise).
    """
    v = x.H / model.total_mass
    if v_noise is not None:
        v = v + v_noise
    IW = centroidal_inertia(x.q, x.r, foot_positions, model)
    return SpatialVelocitySample(float(t), v, np.linalg.solve(IW, x.L))


class ContactDetector:
    """Streaming windowed-derivative rule; fires at most once per flight."""

    def __init__(self, cfg: Optional[DetectorConfig] = None):
        self.cfg = cfg or DetectorConfig()
        self.reset(None)

    def reset(self, t_takeoff):
        self.t_arm = None if t_takeoff is None else t_takeoff + self.cfg.arming_time
        self._prev = None
        self._rates = deque(maxlen=self.cfg.window)
        self.fired_at = None

    def update(self, t, norm):
        """Feed one sample; returns the detection time on the tick it fires."""
        if self.fired_at is not None:
            return None
        prev, self._prev = self._prev, (t, norm)
        if prev is None or self.t_arm is None or t < self.t_arm - 1e-12:
            return None
        if prev[0] < self.t_arm - 1e-12:
            # derivatives start once both samples are past arming
            return None
        self._rates.append((norm - prev[1]) / (t - prev[0]))
        if len(self._rates) == self.cfg.window and max(self._rates) < self.cfg.threshold:
            self.fired_at = t
            return t
        return None


def detect(samples: Iterable, cfg: Optional[DetectorConfig] = None, t_takeoff=None) -> Optional[float]:
    """First touchdown time in a stream of samples or ``(t, norm)`` pairs.

    The stream start is taken as takeoff when ``t_takeoff`` is not given.
    """
    det = ContactDetector(cfg)
    for s in samples:
        t, n = (s.t, s.norm) if isinstance(s, SpatialVelocitySample) else (float(s[0]), float(s[1]))
        if det.t_arm is None:
            det.reset(t if t_takeoff is None else t_takeoff)
        hit = det.update(t, n)
        if hit is not None:
            return hit
    return None


def norm_derivatives(t, norm):
    t = np.asarray(t, dtype=float)
    n = np.asarray(norm, dtype=float)
    return np.diff(n) / np.diff(t)
