"""Preoperative planning: route, waypoints, virtual targets, action priors.

The navigation bundle is everything the intraoperative loop consumes:
ordered waypoint poses along the planned centerline, a clean virtual render
per waypoint, an arrow-annotated prompt render for the advisor, one discrete
prior action per transition, and bifurcation flags (including the single
penultimate-bifurcation marker that gates advisor consultation).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .airway import AirwayTree
from .errors import ContractError
from .geometry import Pose, initial_up, transport_up
from .render import Frame, Renderer, overlay_arrow, read_pgm, write_pgm, Style
from .sim import Action

THETA_PRIOR_DEG = 4.5   # half a bend step: nearest-action quantization
DELTA_PRIOR_MM = 1.0    # half a translation step
ARROW_LOOKAHEAD_MM = 10.0
DEFAULT_SPACING_MM = 4.0
BUNDLE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Waypoint:
    index: int
    arc_mm: float
    pose: Pose
    prior_action: Action | None = None
    is_bifurcation: bool = False
    is_penultimate_bifurcation: bool = False
    virtual_frame: Frame | None = None
    prompt_frame: Frame | None = None


@dataclass(frozen=True)
class PlannedPath:
    branch_chain: tuple[int, ...]
    target_branch: int
    target_arc_mm: float
    target_point: np.ndarray
    points: np.ndarray        # (n, 3) concatenated centerline, truncated
    arcs: np.ndarray          # (n,) cumulative arc length
    bifurcation_arcs: tuple[tuple[float, int], ...]  # (arc, branch entered)
    spacing_mm: float = 0.0
    waypoints: tuple[Waypoint, ...] = ()

    @property
    def length_mm(self) -> float:
        return float(self.arcs[-1])

    def point_at(self, arc_mm: float) -> np.ndarray:
        a = float(np.clip(arc_mm, 0.0, self.length_mm))
        i = int(np.searchsorted(self.arcs, a, side="right")) - 1
        i = min(max(i, 0), len(self.arcs) - 2)
        seg = self.arcs[i + 1] - self.arcs[i]
        w = 0.0 if seg == 0 else (a - self.arcs[i]) / seg
        return (1 - w) * self.points[i] + w * self.points[i + 1]

    def tangent_at(self, arc_mm: float) -> np.ndarray:
        a = float(np.clip(arc_mm, 0.0, self.length_mm))
        i = int(np.searchsorted(self.arcs, a, side="right")) - 1
        i = min(max(i, 0), len(self.arcs) - 2)
        d = self.points[i + 1] - self.points[i]
        return d / np.linalg.norm(d)


def plan_path(tree: AirwayTree, target_branch: int, target_arc_mm: float) -> PlannedPath:
    """Root-to-target route with bifurcation crossings marked.

    The chain is the unique parent-pointer walk reversed; the concatenated
    centerline is truncated at the target arc. A crossing is flagged wherever
    the route passes from a branch with two or more children into the next
    chain member; the second-to-last crossing is the penultimate bifurcation.
    """
    target = tree.branch(target_branch)  # raises KeyError for unknown ids
    if not (0.0 <= target_arc_mm <= target.length + 1e-9):
        raise ContractError(f"target_arc {target_arc_mm} outside branch length {target.length}")
    chain = [target.id]
    node = target
    while node.parent_id is not None:
        node = tree.branch(node.parent_id)
        chain.append(node.id)
    chain.reverse()

    pts: list[np.ndarray] = []
    bif_events: list[tuple[float, int]] = []
    arc_offset = 0.0
    for ci, bid in enumerate(chain):
        b = tree.branch(bid)
        cl = b.centerline
        if ci > 0 and len(pts) > 0:
            cl = cl[1:]  # junction point already present from the parent
        if ci == len(chain) - 1:
            # truncate within the target branch
            arcs = b.arc_lengths
            keep = arcs[: int(np.searchsorted(arcs, target_arc_mm, side="right"))]
            cl_keep = b.centerline[: len(keep)]
            endpoint = b.point_at(target_arc_mm)
            if len(cl_keep) == 0 or np.linalg.norm(cl_keep[-1] - endpoint) > 1e-9:
                cl_full = np.vstack([cl_keep, endpoint]) if len(cl_keep) else endpoint[None, :]
            else:
                cl_full = cl_keep
            cl = cl_full[1:] if (ci > 0 and len(pts) > 0) else cl_full
        pts.extend(np.asarray(cl))
        if ci < len(chain) - 1:
            arc_offset += b.length
            if len(tree.children(bid)) >= 2:
                bif_events.append((arc_offset, chain[ci + 1]))

    points = np.asarray(pts, dtype=float)
    if len(points) < 2:
        # degenerate zero-length route (target at the very root origin)
        points = np.vstack([points, points[-1] + tree.branch(chain[-1]).tangent_at(0.0) * 1e-6])
    arcs = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    return PlannedPath(
        branch_chain=tuple(chain),
        target_branch=target_branch,
        target_arc_mm=float(target_arc_mm),
        target_point=tree.branch(target_branch).point_at(target_arc_mm),
        points=points,
        arcs=arcs,
        bifurcation_arcs=tuple(bif_events),
    )


def sample_waypoints(path: PlannedPath, spacing_mm: float = DEFAULT_SPACING_MM) -> PlannedPath:
    """Pose a waypoint every spacing_mm of arc, ending exactly at the target.

    Forward is the local path tangent; up is parallel-transported from a
    deterministic initial up by composing minimal rotations between
    consecutive tangents.
    """
    if spacing_mm <= 0:
        raise ContractError("spacing must be positive")
    total = path.length_mm
    arcs = list(np.arange(0.0, total, spacing_mm))
    if not arcs or total - arcs[-1] > 1e-9:
        arcs.append(total)
    else:
        arcs[-1] = total

    tangents = [path.tangent_at(a) for a in arcs]
    up = initial_up(tangents[0])
    poses = [Pose(path.point_at(arcs[0]), tangents[0], up)]
    for i in range(1, len(arcs)):
        up = transport_up(up, tangents[i - 1], tangents[i])
        poses.append(Pose(path.point_at(arcs[i]), tangents[i], up))

    flags = {i: [False, False] for i in range(len(arcs))}
    arc_arr = np.asarray(arcs)
    n_events = len(path.bifurcation_arcs)
    for ei, (event_arc, _into) in enumerate(path.bifurcation_arcs):
        k = int(np.searchsorted(arc_arr, event_arc + 1e-9) - 1)
        k = min(max(k, 0), len(arcs) - 1)
        flags[k][0] = True
        if n_events >= 2 and ei == n_events - 2:
            flags[k][1] = True

    wps = tuple(
        Waypoint(index=i, arc_mm=float(arcs[i]), pose=poses[i],
                 is_bifurcation=flags[i][0], is_penultimate_bifurcation=flags[i][1])
        for i in range(len(arcs))
    )
    return replace(path, spacing_mm=float(spacing_mm), waypoints=wps)


def _classify_transition(a: Pose, b: Pose,
                         theta_deg: float = THETA_PRIOR_DEG,
                         delta_mm: float = DELTA_PRIOR_MM) -> Action:
    """Quantize the relative pose between adjacent waypoints to one action."""
    f_cam = a.to_camera(a.position + b.forward)  # direction of b.forward in a's frame
    yaw = math.degrees(math.atan2(f_cam[0], f_cam[2]))
    pitch = math.degrees(math.atan2(f_cam[1], f_cam[2]))
    if max(abs(yaw), abs(pitch)) >= theta_deg:
        if abs(yaw) >= abs(pitch):  # tie goes to yaw
            return Action.BEND_RIGHT if yaw > 0 else Action.BEND_LEFT
        return Action.BEND_UP if pitch > 0 else Action.BEND_DOWN
    disp = float(np.dot(b.position - a.position, a.forward))
    if disp >= delta_mm:
        return Action.FORWARD
    if disp <= -delta_mm:
        return Action.BACKWARD
    return Action.FORWARD


def derive_action_priors(path: PlannedPath) -> PlannedPath:
    """Assign one prior action per transition; the terminal prior is Switch."""
    if len(path.waypoints) < 2:
        raise ContractError("need at least two waypoints to derive priors")
    wps = list(path.waypoints)
    out = []
    for i, wp in enumerate(wps):
        if i == len(wps) - 1:
            prior = Action.SWITCH_TARGET
        else:
            prior = _classify_transition(wp.pose, wps[i + 1].pose)
        out.append(replace(wp, prior_action=prior))
    return replace(path, waypoints=tuple(out))


def render_virtual_targets(path: PlannedPath, renderer: Renderer,
                           tree: AirwayTree) -> PlannedPath:
    """Render the clean virtual target and the arrow prompt per waypoint.

    The arrow starts at the principal point and points toward the projection
    of the on-path centerline point 10 mm ahead of the waypoint; a waypoint
    staring straight down its tube gets a centered dot.
    """
    k = renderer.intrinsics
    out = []
    for wp in path.waypoints:
        virtual = renderer.render(tree, wp.pose, Style.VIRTUAL)
        ahead = path.point_at(min(wp.arc_mm + ARROW_LOOKAHEAD_MM, path.length_mm))
        cam = wp.pose.to_camera(ahead)
        origin = (k.cx, k.cy)
        if cam[2] <= 1e-6:
            direction, magnitude = np.array([1.0, 0.0]), 0.0
        else:
            u, v = k.project(cam)
            delta = np.array([u - k.cx, v - k.cy])
            dist = float(np.linalg.norm(delta))
            cap = 0.45 * min(k.width, k.height)
            if dist < 1e-9:
                direction, magnitude = np.array([1.0, 0.0]), 0.0
            else:
                direction, magnitude = delta / dist, min(dist, cap)
        prompt = overlay_arrow(virtual, direction, magnitude, origin_px=origin)
        out.append(replace(wp, virtual_frame=virtual, prompt_frame=prompt))
    return replace(path, waypoints=tuple(out))


def build_bundle(tree: AirwayTree, target_branch: int, target_arc_mm: float,
                 renderer: Renderer, spacing_mm: float = DEFAULT_SPACING_MM) -> PlannedPath:
    """Full preoperative pipeline: plan, sample, priors, rendered targets."""
    path = plan_path(tree, target_branch, target_arc_mm)
    path = sample_waypoints(path, spacing_mm)
    path = derive_action_priors(path)
    return render_virtual_targets(path, renderer, tree)


def save_bundle(path: PlannedPath, out_dir: str) -> None:
    """Write plan.json plus targets/NNN.pgm and prompts/NNN.pgm."""
    os.makedirs(os.path.join(out_dir, "targets"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "prompts"), exist_ok=True)
    doc = {
        "version": BUNDLE_SCHEMA_VERSION,
        "spacing_mm": path.spacing_mm,
        "branch_chain": list(path.branch_chain),
        "target_branch": path.target_branch,
        "target_arc_mm": path.target_arc_mm,
        "target_point": [float(x) for x in path.target_point],
        "bifurcation_arcs": [[a, b] for a, b in path.bifurcation_arcs],
        "waypoints": [
            {
                "index": wp.index,
                "arc_mm": wp.arc_mm,
                "position": [float(x) for x in wp.pose.position],
                "forward": [float(x) for x in wp.pose.forward],
                "up": [float(x) for x in wp.pose.up],
                "prior_action": wp.prior_action.wire_name if wp.prior_action else None,
                "is_bifurcation": wp.is_bifurcation,
                "is_penultimate_bifurcation": wp.is_penultimate_bifurcation,
            }
            for wp in path.waypoints
        ],
    }
    with open(os.path.join(out_dir, "plan.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    for wp in path.waypoints:
        if wp.virtual_frame is not None:
            write_pgm(wp.virtual_frame, os.path.join(out_dir, "targets", f"{wp.index:03d}.pgm"))
        if wp.prompt_frame is not None:
            write_pgm(wp.prompt_frame, os.path.join(out_dir, "prompts", f"{wp.index:03d}.pgm"))
