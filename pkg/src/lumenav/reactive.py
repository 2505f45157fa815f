"""Short-term reactive policies: goal-conditioned logits over the 7 actions.

Any implementation maps (observation, goal) to finite per-action scores and
must be deterministic for fixed input. Two implementations ship: a
lumen-centered visual-servo baseline (the reference controller) and a
privileged oracle that scores actions by true one-step pose-error reduction
(the expert stand-in for evaluation). Consensus logic consumes only the
rank order of the scores, so logit scale carries no meaning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .airway import AirwayTree, RespirationConfig
from .geometry import Pose, angle_between_deg
from .metrics import ssim
from .render import Frame
from .sim import Action, ACTIONS, MOTION_ACTIONS, KinematicsConfig, ScopeState, step

LUMEN_QUANTILE = 0.15
LUMEN_MIN_AREA_PX = 20
LUMEN_MAX_COMPONENTS = 4

POSITION_WEIGHT = 1.0   # error units per mm
ANGLE_WEIGHT = 0.5      # error units per degree
ARRIVAL_GAIN = 0.5      # below this best one-step gain, switching is allowed


@dataclass(frozen=True)
class Logits:
    """Seven finite scores in canonical action order."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float).reshape(7)
        if not np.all(np.isfinite(s)):
            raise ValueError("logits must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    def score(self, action: Action) -> float:
        return float(self.scores[action.value])

    @property
    def argmax(self) -> Action:
        # np.argmax returns the first maximum: canonical-order tie-break.
        return Action(int(np.argmax(self.scores)))

    def top_k(self, k: int) -> tuple[Action, ...]:
        """k highest-scoring actions, ties resolved by canonical order."""
        order = sorted(range(7), key=lambda i: (-self.scores[i], i))
        return tuple(Action(i) for i in order[:k])

    def rank_of(self, action: Action) -> int:
        """1-based rank under the same ordering as top_k."""
        order = sorted(range(7), key=lambda i: (-self.scores[i], i))
        return order.index(action.value) + 1


@dataclass(frozen=True)
class PolicyInput:
    """One observation frame and the active virtual goal, both policy-sized."""

    observation: Frame
    goal: Frame
    history_len: int = 1
    prediction_len: int = 1

    def __post_init__(self):
        if (self.observation.width != self.goal.width
                or self.observation.height != self.goal.height):
            raise ValueError("observation and goal dimensions must match")
        if self.history_len != 1 or self.prediction_len != 1:
            raise ValueError("history and prediction lengths are fixed to 1")


class Policy:
    """Interface: decide(input) -> Logits, pure and deterministic."""

    name = "abstract"

    def decide(self, policy_input: PolicyInput) -> Logits:
        raise NotImplementedError


def detect_lumens(frame: Frame) -> list[tuple[tuple[float, float], float]]:
    """Dark-region detection: ((x, y) centroid px, darkness score), darkest first.

    The frame is lightly smoothed so wall texture cannot fragment the deep
    lumen blob, then thresholded at the 0.15 intensity quantile; connected
    components of at least 20 px, at most four returned. Darkness is
    1 - mean intensity.
    """
    raw = frame.pixels
    if float(raw.max() - raw.min()) < 1e-9:
        return []
    px = ndimage.gaussian_filter(raw, sigma=frame.width / 34.0, mode="nearest")
    thresh = float(np.quantile(px, LUMEN_QUANTILE))
    mask = px <= thresh
    labels, n = ndimage.label(mask)
    found = []
    for lab in range(1, n + 1):
        comp = labels == lab
        area = int(comp.sum())
        if area < LUMEN_MIN_AREA_PX:
            continue
        cy, cx = ndimage.center_of_mass(comp)
        darkness = 1.0 - float(px[comp].mean())
        found.append(((float(cx), float(cy)), darkness))
    found.sort(key=lambda item: -item[1])
    return found[:LUMEN_MAX_COMPONENTS]


@dataclass(frozen=True)
class ServoParams:
    """Frozen calibration constants for the servo baseline (not paper values)."""

    tau_switch: float = 0.80
    sigma_px: float = 8.0
    beta: float = 1.5
    gamma: float = 15.0
    backward_floor: float = -2.0


class ServoPolicy(Policy):
    """Lumen-centering visual servo with a similarity-gated switch logit.

    The goal's darkest lumen defines where the airway should sit in the
    image; the nearest observed lumen supplies the pixel error that drives
    the bend scores. Forward earns an alignment bonus, Backward keeps a
    constant floor, and SwitchTarget scales with obs-goal SSIM above the
    switch threshold.
    """

    name = "servo"

    def __init__(self, params: ServoParams = ServoParams()):
        self.params = params

    def decide(self, policy_input: PolicyInput) -> Logits:
        obs, goal = policy_input.observation, policy_input.goal
        center = (goal.width / 2.0, goal.height / 2.0)
        goal_lumens = detect_lumens(goal)
        g = np.asarray(goal_lumens[0][0] if goal_lumens else center)
        obs_lumens = detect_lumens(obs)
        if obs_lumens:
            cents = np.asarray([c for c, _ in obs_lumens])
            matched = cents[int(np.argmin(np.linalg.norm(cents - g, axis=1)))]
        else:
            matched = np.asarray(center)
        e = matched - g
        p = self.params
        similarity = ssim(obs, goal)
        scores = np.empty(7)
        scores[Action.FORWARD.value] = p.beta * max(0.0, 1.0 - float(np.linalg.norm(e)) / p.sigma_px)
        scores[Action.BACKWARD.value] = p.backward_floor
        scores[Action.BEND_LEFT.value] = -e[0] / p.sigma_px
        scores[Action.BEND_RIGHT.value] = +e[0] / p.sigma_px
        scores[Action.BEND_UP.value] = -e[1] / p.sigma_px   # screen-down positive
        scores[Action.BEND_DOWN.value] = +e[1] / p.sigma_px
        scores[Action.SWITCH_TARGET.value] = p.gamma * (similarity - p.tau_switch)
        return Logits(scores)


def pose_error(pose: Pose, target: Pose) -> float:
    """Weighted position + heading error against a waypoint pose."""
    dp = float(np.linalg.norm(pose.position - target.position))
    da = angle_between_deg(pose.forward, target.forward)
    return POSITION_WEIGHT * dp + ANGLE_WEIGHT * da


def motion_gains(state: ScopeState, waypoint_pose: Pose, tree: AirwayTree,
                 kin: KinematicsConfig = KinematicsConfig(),
                 resp: RespirationConfig = RespirationConfig()) -> dict[Action, float]:
    """True one-step error reduction per motion action (privileged)."""
    base = pose_error(state.pose, waypoint_pose)
    gains = {}
    for action in MOTION_ACTIONS:
        nxt = step(state, action, tree, resp, kin)
        gains[action] = base - pose_error(nxt.pose, waypoint_pose)
    return gains


@dataclass
class OracleContext:
    """Privileged simulator access injected by the navigation loop."""

    tree: AirwayTree
    kin: KinematicsConfig = field(default_factory=KinematicsConfig)
    resp: RespirationConfig = field(default_factory=RespirationConfig)
    state: ScopeState | None = None
    waypoint_pose: Pose | None = None


class OraclePolicy(Policy):
    """Best-action oracle: scores motions by true one-step error reduction.

    Switching dominates only when the obs-goal SSIM clears the servo switch
    threshold and no motion can still improve the pose error meaningfully,
    which keeps the oracle's choices inside the constructed validity sets of
    the offline benchmark.
    """

    name = "oracle"

    def __init__(self, context: OracleContext, tau_switch: float = ServoParams().tau_switch):
        self.context = context
        self.tau_switch = tau_switch

    def decide(self, policy_input: PolicyInput) -> Logits:
        ctx = self.context
        if ctx.state is None or ctx.waypoint_pose is None:
            raise RuntimeError("oracle context not bound to a live session state")
        gains = motion_gains(ctx.state, ctx.waypoint_pose, ctx.tree, ctx.kin, ctx.resp)
        best_gain = max(gains.values())
        similarity = ssim(policy_input.observation, policy_input.goal)
        scores = np.empty(7)
        for action in MOTION_ACTIONS:
            scores[action.value] = gains[action]
        arrived = similarity >= self.tau_switch and best_gain < ARRIVAL_GAIN
        scores[Action.SWITCH_TARGET.value] = 10.0 if arrived else -10.0
        return Logits(scores)


def make_policy(name: str, oracle_context: OracleContext | None = None,
                servo_params: ServoParams = ServoParams()) -> Policy:
    if name == "servo":
        return ServoPolicy(servo_params)
    if name == "oracle":
        if oracle_context is None:
            raise ValueError("oracle policy needs a privileged context")
        return OraclePolicy(oracle_context, servo_params.tau_switch)
    raise KeyError(f"unknown policy name: {name!r}")
