"""Prismatic and revolute articulation models."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyStates, FrameOutOfRange, NonUnitAxis, PivotOffAxisNormal
from .geometry import Pose, rotation_about_axis

PRISMATIC = "prismatic"
REVOLUTE = "revolute"
JOINT_KINDS = (PRISMATIC, REVOLUTE)

_PIVOT_TOL = 1e-6


def _check_unit(a) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(3)
    if abs(np.linalg.norm(a) - 1.0) > 1e-6:
        raise NonUnitAxis(f"|a| = {np.linalg.norm(a):.9f}")
    return a


def prismatic_transform(a, lam: float) -> Pose:
    a = _check_unit(a)
    return Pose(np.eye(3), lam * a)


def _revolute(a, p, theta) -> Pose:
    R = rotation_about_axis(a, theta)
    return Pose(R, (np.eye(3) - R) @ p)


def revolute_transform(a, p, theta: float) -> Pose:
    """Rotation by ``theta`` about the line through pivot ``p`` along ``a``."""
    a = _check_unit(a)
    p = np.asarray(p, dtype=float).reshape(3)
    if abs(a @ p) > _PIVOT_TOL:
        raise PivotOffAxisNormal(f"a.p = {a @ p:.3e}; pivot must be the axis point closest to the origin")
    return _revolute(a, p, theta)


@dataclass(frozen=True, eq=False)
class JointModel:
    kind: str
    axis: np.ndarray
    states: np.ndarray
    pivot: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise ValueError(f"unknown joint kind {self.kind!r}")
        a = _check_unit(self.axis)
        object.__setattr__(self, "axis", a / np.linalg.norm(a))
        object.__setattr__(self, "states", np.asarray(self.states, dtype=float).reshape(-1))
        if self.kind == PRISMATIC:
            if self.pivot is not None:
                raise ValueError("prismatic joints carry no pivot")
        else:
            if self.pivot is None:
                raise ValueError("revolute joints need a pivot")
            object.__setattr__(self, "pivot", np.asarray(self.pivot, dtype=float).reshape(3))

    @property
    def num_frames(self) -> int:
        return len(self.states)

    def transform(self, state: float) -> Pose:
        if self.kind == PRISMATIC:
            return Pose(np.eye(3), state * self.axis)
        return _revolute(self.axis, self.pivot, state)

    def with_states(self, states) -> "JointModel":
        return replace(self, states=np.asarray(states, dtype=float))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "axis": self.axis.tolist(), "states": self.states.tolist()}
        if self.pivot is not None:
            d["pivot"] = self.pivot.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JointModel":
        return cls(d["kind"], d["axis"], d["states"], d.get("pivot"))


def joint_pose(model: JointModel, frame: int) -> Pose:
    if not 0 <= frame < model.num_frames:
        raise FrameOutOfRange(f"frame {frame} outside [0, {model.num_frames})")
    return model.transform(model.states[frame])


def _first_significant_negative(a) -> bool:
    for v in a:
        if abs(v) > 1e-6:
            return v < 0
    return False


def canonicalize(model: JointModel) -> JointModel:
    """Fix the axis sign gauge and move the pivot to the closest-to-origin axis point."""
    flip = _first_significant_negative(model.axis)
    a = -model.axis if flip else model.axis
    states = -model.states if flip else model.states
    pivot = model.pivot
    if pivot is not None:
        off = a @ pivot
        if not flip and abs(off) < 1e-12:
            return model
        pivot = pivot - off * a
    elif not flip:
        return model
    return JointModel(model.kind, a, states, pivot)


@dataclass(frozen=True)
class MotionRange:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower must not exceed upper")


def motion_range(model: JointModel) -> MotionRange:
    if model.num_frames == 0:
        raise EmptyStates("joint has no states")
    return MotionRange(float(np.min(model.states)), float(np.max(model.states)))


def transport(model: JointModel, world: Pose) -> JointModel:
    """Express ``model`` in another frame: new poses are ``W T W^-1``."""
    a = world.rotation @ model.axis
    a = a / np.linalg.norm(a)
    pivot = None
    if model.pivot is not None:
        p = world.apply(model.pivot)
        pivot = p - (a @ p) * a
    return JointModel(model.kind, a, model.states.copy(), pivot)
