"""Bronchoscope tip kinematics and environment stepping.

The continuum catheter is reduced to a rigid camera frame moved and bent in
its own axes: translations ride the current forward vector, bends rotate the
frame about its up (horizontal) or right (vertical) axis in fixed 9-degree
increments, clamped at the articulation range. Wall contact is resolved by
sliding: positions are projected back along the distance gradient to the
wall margin, never rejected.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .airway import AirwayTree, RespirationConfig, deform, lumen_signed_distance
from .errors import PlacementError
from .geometry import Pose, rotate_pose
from .render import Frame, PerturbationConfig, Renderer, Style, apply_perturbation


class Action(enum.Enum):
    """The seven discrete commands, in canonical (logit-index) order."""

    FORWARD = 0
    BACKWARD = 1
    BEND_LEFT = 2
    BEND_RIGHT = 3
    BEND_UP = 4
    BEND_DOWN = 5
    SWITCH_TARGET = 6

    @property
    def is_motion(self) -> bool:
        return self is not Action.SWITCH_TARGET

    @property
    def is_bend(self) -> bool:
        return self in (Action.BEND_LEFT, Action.BEND_RIGHT,
                        Action.BEND_UP, Action.BEND_DOWN)

    @property
    def wire_name(self) -> str:
        return _WIRE_NAMES[self]


_WIRE_NAMES = {
    Action.FORWARD: "forward",
    Action.BACKWARD: "backward",
    Action.BEND_LEFT: "bend_left",
    Action.BEND_RIGHT: "bend_right",
    Action.BEND_UP: "bend_up",
    Action.BEND_DOWN: "bend_down",
    Action.SWITCH_TARGET: "switch",
}
ACTIONS = tuple(Action)
MOTION_ACTIONS = tuple(a for a in Action if a.is_motion)


def action_from_name(name: str) -> Action:
    low = name.strip().lower()
    for a, n in _WIRE_NAMES.items():
        if low == n:
            return a
    raise KeyError(f"unknown action name: {name!r}")


BEND_RANGE_DEG = (-210.0, 130.0)


@dataclass(frozen=True)
class KinematicsConfig:
    translation_step_mm: float = 2.0
    bend_step_deg: float = 9.0
    rotation_step_deg: float = 5.0  # housed per the actuator sheet; no roll command exists
    dwell_s: float = 3.0
    inference_latency_s: float = 0.0065
    wall_margin_mm: float = 0.3

    def validate(self) -> None:
        for name in ("translation_step_mm", "bend_step_deg", "rotation_step_deg",
                     "dwell_s", "inference_latency_s", "wall_margin_mm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def clock_charge(self, action: Action) -> float:
        """Simulated seconds one executed action costs."""
        if action.is_motion:
            return self.inference_latency_s + self.dwell_s
        return self.inference_latency_s


@dataclass(frozen=True)
class ScopeState:
    pose: Pose
    bend_h_deg: float = 0.0
    bend_v_deg: float = 0.0
    sim_clock_s: float = 0.0
    resp_time_s: float = 0.0
    steps_executed: int = 0


def reset(tree: AirwayTree, start: Pose, cfg: KinematicsConfig) -> ScopeState:
    """Fresh session state at a start pose; the pose must be inside the lumen."""
    cfg.validate()
    if lumen_signed_distance(tree, start.position) >= 0.0:
        raise PlacementError("start pose lies outside the lumen")
    return ScopeState(pose=start.orthonormalized())


def _slide_to_margin(tree: AirwayTree, position: np.ndarray, margin: float) -> np.ndarray:
    """Project a position along the SDF gradient until it sits margin-deep."""
    p = np.array(position, dtype=float)
    h = 1e-4
    for _ in range(24):
        d = lumen_signed_distance(tree, p)
        if d <= -margin + 1e-9:
            break
        grad = np.array([
            lumen_signed_distance(tree, p + [h, 0, 0]) - lumen_signed_distance(tree, p - [h, 0, 0]),
            lumen_signed_distance(tree, p + [0, h, 0]) - lumen_signed_distance(tree, p - [0, h, 0]),
            lumen_signed_distance(tree, p + [0, 0, h]) - lumen_signed_distance(tree, p - [0, 0, h]),
        ]) / (2.0 * h)
        norm = float(np.linalg.norm(grad))
        if norm < 1e-9:
            break
        p -= grad / norm * (d + margin)
    return p


def _clamped_bend(current: float, delta: float) -> tuple[float, float]:
    """(new bend, applied delta) with excess past the range discarded."""
    target = min(max(current + delta, BEND_RANGE_DEG[0]), BEND_RANGE_DEG[1])
    return target, target - current


def step(state: ScopeState, action: Action, tree: AirwayTree,
         resp: RespirationConfig = RespirationConfig(),
         cfg: KinematicsConfig = KinematicsConfig()) -> ScopeState:
    """Execute one discrete command; pure (state, action) -> state transition.

    Collision is checked against the respiration-deformed tree at the new
    resp_time. SwitchTarget costs inference latency only and leaves the pose
    bitwise unchanged.
    """
    charge = cfg.clock_charge(action)
    new_clock = state.sim_clock_s + charge
    new_resp = state.resp_time_s + charge
    if action is Action.SWITCH_TARGET:
        return replace(state, sim_clock_s=new_clock, resp_time_s=new_resp,
                       steps_executed=state.steps_executed + 1)
    pose = state.pose
    bend_h, bend_v = state.bend_h_deg, state.bend_v_deg
    if action is Action.FORWARD:
        pose = Pose(pose.position + cfg.translation_step_mm * pose.forward,
                    pose.forward, pose.up)
    elif action is Action.BACKWARD:
        pose = Pose(pose.position - cfg.translation_step_mm * pose.forward,
                    pose.forward, pose.up)
    elif action is Action.BEND_LEFT:
        bend_h, applied = _clamped_bend(bend_h, -cfg.bend_step_deg)
        if applied != 0.0:
            pose = rotate_pose(pose, pose.up, math.radians(applied))
    elif action is Action.BEND_RIGHT:
        bend_h, applied = _clamped_bend(bend_h, +cfg.bend_step_deg)
        if applied != 0.0:
            pose = rotate_pose(pose, pose.up, math.radians(applied))
    elif action is Action.BEND_UP:
        bend_v, applied = _clamped_bend(bend_v, +cfg.bend_step_deg)
        if applied != 0.0:
            pose = rotate_pose(pose, pose.right, math.radians(applied))
    elif action is Action.BEND_DOWN:
        bend_v, applied = _clamped_bend(bend_v, -cfg.bend_step_deg)
        if applied != 0.0:
            pose = rotate_pose(pose, pose.right, math.radians(applied))
    env = deform(tree, new_resp, resp)
    if lumen_signed_distance(env, pose.position) > -cfg.wall_margin_mm:
        pose = Pose(_slide_to_margin(env, pose.position, cfg.wall_margin_mm),
                    pose.forward, pose.up)
    return ScopeState(pose=pose.orthonormalized(), bend_h_deg=bend_h, bend_v_deg=bend_v,
                      sim_clock_s=new_clock, resp_time_s=new_resp,
                      steps_executed=state.steps_executed + 1)


def advance_clock(state: ScopeState, seconds: float) -> ScopeState:
    """Charge guidance latency: the scope holds position while time passes."""
    return replace(state, sim_clock_s=state.sim_clock_s + seconds,
                   resp_time_s=state.resp_time_s + seconds)


def observe(state: ScopeState, tree: AirwayTree, renderer: Renderer,
            perturb: PerturbationConfig = PerturbationConfig(),
            resp: RespirationConfig = RespirationConfig()) -> Frame:
    """Real-style frame at the current pose with perturbations applied."""
    env = deform(tree, state.resp_time_s, resp)
    frame = renderer.render(env, state.pose, Style.REAL)
    return apply_perturbation(frame, perturb, noise_key=state.steps_executed)
