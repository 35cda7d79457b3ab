"""System models: the 2-D constant-velocity target with a range/bearing sensor.

State layout is ``[pos_x, vel_x, pos_y, vel_y]``; the sensor sits at the
origin and reports ``[range (m), bearing (rad)]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .cubature import wrap_angle

__all__ = [
    "AtOriginError",
    "InflationSchedule",
    "NoiseCase",
    "P0",
    "Q0",
    "R0",
    "SystemModel",
    "TS",
    "X0_TRUE",
    "cv_matrix",
    "cv_transition",
    "linear_cv_model",
    "make_noise_case",
    "range_bearing",
    "tracking_model",
]

TS = 0.1
Q0 = np.diag([0.0, 2e-1, 0.0, 2e-1])
R0 = np.diag([100.0, 3e-4])
X0_TRUE = np.array([100.0, 10.0, 100.0, 5.0])
P0 = np.diag([100.0, 1.0, 100.0, 1.0])

RANGE_EPS = 1e-9


class AtOriginError(ValueError):
    """Range/bearing is undefined for a target sitting on the sensor."""


@dataclass(frozen=True)
class SystemModel:
    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    ts: float
    angle_indices: tuple[int, ...] = ()


def cv_matrix(ts: float) -> np.ndarray:
    block = np.array([[1.0, ts], [0.0, 1.0]])
    F = np.zeros((4, 4))
    F[:2, :2] = block
    F[2:, 2:] = block
    return F


def cv_transition(x: np.ndarray, ts: float = TS) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = x.copy()
    out[..., 0] += ts * x[..., 1]
    out[..., 2] += ts * x[..., 3]
    return out


def range_bearing(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    px, py = x[..., 0], x[..., 2]
    rng = np.hypot(px, py)
    if np.any(rng < RANGE_EPS):
        raise AtOriginError("target position coincides with the sensor")
    return np.stack([rng, wrap_angle(np.arctan2(py, px))], axis=-1)


def _positions(x: np.ndarray) -> np.ndarray:
    return x[..., [0, 2]]


def tracking_model(ts: float = TS) -> SystemModel:
    return SystemModel(n=4, m=2, f=partial(cv_transition, ts=ts), h=range_bearing,
                       ts=ts, angle_indices=(1,))


def linear_cv_model(ts: float = TS) -> SystemModel:
    """Constant-velocity dynamics with direct position measurements (linear-Gaussian)."""
    return SystemModel(n=4, m=2, f=partial(cv_transition, ts=ts), h=_positions, ts=ts)


@dataclass(frozen=True)
class InflationSchedule:
    """Multiply the base R by ``gamma`` on epochs ``first..last`` (inclusive, 1-based)."""

    gamma: float = 5.0
    first: int = 0
    last: int = -1

    @classmethod
    def middle_third(cls, steps: int, gamma: float = 5.0) -> "InflationSchedule":
        return cls(gamma=gamma, first=steps // 3 + 1, last=(2 * steps) // 3)

    def active(self, epoch) -> np.ndarray:
        epoch = np.asarray(epoch)
        return (epoch >= self.first) & (epoch <= self.last)


@dataclass(frozen=True)
class NoiseCase:
    case_id: str
    base_r: np.ndarray
    q_true: np.ndarray
    schedule: InflationSchedule | None = field(default=None)

    def r_profile(self, epoch: int) -> np.ndarray:
        """True measurement-noise covariance at ``epoch``."""
        if self.schedule is not None and self.schedule.active(epoch):
            return self.schedule.gamma * self.base_r
        return self.base_r

    def r_sequence(self, steps: int) -> np.ndarray:
        """Stacked profile for epochs ``1..steps``, shape ``(steps, m, m)``."""
        scale = np.ones(steps)
        if self.schedule is not None:
            scale[self.schedule.active(np.arange(1, steps + 1))] = self.schedule.gamma
        return scale[:, None, None] * self.base_r


def make_noise_case(case_id: str, base_r=R0, q_true=Q0,
                    schedule: InflationSchedule | None = None, steps: int = 500) -> NoiseCase:
    case_id = str(case_id).upper()
    if case_id not in ("A", "B"):
        raise ValueError(f"unknown noise case {case_id!r}; expected 'A' or 'B'")
    base_r = np.asarray(base_r, dtype=float)
    q_true = np.asarray(q_true, dtype=float)
    if not np.allclose(base_r, base_r.T) or np.linalg.eigvalsh(base_r)[0] <= 0.0:
        raise ValueError("base_r must be symmetric positive definite")
    if not np.allclose(q_true, q_true.T) or np.linalg.eigvalsh(q_true)[0] < -1e-12:
        raise ValueError("q_true must be symmetric positive semi-definite")
    if case_id == "A":
        return NoiseCase("A", base_r, q_true, None)
    if schedule is None:
        schedule = InflationSchedule.middle_third(steps)
    if schedule.gamma <= 0:
        raise ValueError("inflation factor must be positive")
    return NoiseCase("B", base_r, q_true, schedule)
