"""World-model-as-critic arbitration over candidate actions.

A surrogate forward model predicts short visual rollouts per candidate and
the critic selects the action whose predicted view lies perceptually closest
to the active virtual target. The surrogate steps the true kinematics and
renders clean frames, optionally corrupted by seeded pose/bend jitter and a
degradation filter so an imperfect learned predictor can be emulated; at
zero noise it reproduces the simulator exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .airway import AirwayTree, RespirationConfig
from .errors import ContractError
from .geometry import Pose, rotate_pose
from .metrics import perceptual_distance
from .render import Frame, PerturbationConfig, Renderer, Style, apply_perturbation
from .sim import Action, KinematicsConfig, ScopeState, step


@dataclass
class SurrogateModel:
    """Forward visual model honoring the rollout-and-rank critic contract."""

    tree: AirwayTree
    renderer: Renderer
    kin: KinematicsConfig = field(default_factory=KinematicsConfig)
    pose_jitter_sd_mm: float = 0.0
    bend_jitter_sd_deg: float = 0.0
    degrade: PerturbationConfig = field(default_factory=PerturbationConfig)
    horizon: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.pose_jitter_sd_mm < 0 or self.bend_jitter_sd_deg < 0:
            raise ValueError("jitter standard deviations must be >= 0")


@dataclass(frozen=True)
class CandidateScore:
    action: Action
    predicted_frames: tuple[Frame, ...]
    distance: float


def _rollout_rng(model: SurrogateModel, state: ScopeState, action: Action) -> np.random.Generator:
    """Deterministic stream per (model seed, state content, action)."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(state.pose.position).tobytes())
    h.update(np.ascontiguousarray(state.pose.forward).tobytes())
    h.update(np.ascontiguousarray(state.pose.up).tobytes())
    h.update(np.float64(state.bend_h_deg).tobytes())
    h.update(np.float64(state.bend_v_deg).tobytes())
    digest = int.from_bytes(h.digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([model.seed, action.value, digest]))


def predict_rollout(model: SurrogateModel, state: ScopeState, action: Action) -> list[Frame]:
    """Predicted views after applying the candidate action `horizon` times.

    Each step optionally perturbs the predicted pose with seeded jitter and
    each rendered frame passes through the model's degradation filter;
    deterministic per (state, action, seed).
    """
    if not action.is_motion:
        raise ContractError("rollouts are defined for motion candidates only")
    rng = _rollout_rng(model, state, action)
    current = state
    frames: list[Frame] = []
    for k in range(model.horizon):
        current = step(current, action, model.tree, RespirationConfig(), model.kin)
        if model.pose_jitter_sd_mm > 0.0 or model.bend_jitter_sd_deg > 0.0:
            pose = current.pose
            if model.pose_jitter_sd_mm > 0.0:
                pose = Pose(pose.position + rng.normal(0.0, model.pose_jitter_sd_mm, 3),
                            pose.forward, pose.up)
            if model.bend_jitter_sd_deg > 0.0:
                pose = rotate_pose(pose, pose.up,
                                   np.radians(rng.normal(0.0, model.bend_jitter_sd_deg)))
                pose = rotate_pose(pose, pose.right,
                                   np.radians(rng.normal(0.0, model.bend_jitter_sd_deg)))
            current = replace(current, pose=pose)
        try:
            frame = model.renderer.render(model.tree, current.pose, Style.VIRTUAL)
        except Exception:
            # jitter can push the predicted pose through the wall; predict
            # a saturated near-field view rather than failing the rollout
            k_int = model.renderer.intrinsics
            frame = Frame(np.full((k_int.height, k_int.width),
                                  model.renderer.params.shade_cap), Style.VIRTUAL)
        frames.append(apply_perturbation(frame, model.degrade, noise_key=k))
    return frames


def arbitrate(model: SurrogateModel, state: ScopeState, candidates: list[Action],
              target: Frame) -> tuple[Action, list[CandidateScore]]:
    """Choose the candidate minimizing perceptual distance to the target.

    The per-candidate distance is the minimum over its rollout frames (the
    best-reachable similarity). Ties break by canonical action order; the
    full score table is returned for audit logging.
    """
    if not candidates:
        raise ContractError("candidate set must be non-empty")
    if any(not a.is_motion for a in candidates):
        raise ContractError("candidates must be motion actions")
    scores: list[CandidateScore] = []
    for action in sorted(set(candidates), key=lambda a: a.value):
        frames = predict_rollout(model, state, action)
        dist = min(perceptual_distance(f, target) for f in frames)
        scores.append(CandidateScore(action, tuple(frames), dist))
    best = min(scores, key=lambda cs: (cs.distance, cs.action.value))
    return best.action, scores
