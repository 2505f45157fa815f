"""Procedural bronchial-tree geometry and geometric queries.

The anatomy is a connected, acyclic set of branches. Each branch carries a
centerline polyline (millimeters) with a per-point lumen radius; the lumen
volume is the union of sphere-swept segments between consecutive points.
Trees are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _raycast
from .errors import ConfigError

TREE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TreeConfig:
    """Generator knobs. Ranges are chosen for navigability, not anatomy.

    depth is the maximum bronchial generation (trachea = 0); depth 0 yields
    the trachea alone. Angles are the polar angle of a child off its parent
    direction; lengths are generation-0 branch lengths, decayed per level.
    """

    depth: int = 5
    branching: tuple[int, int] = (2, 2)
    radius_decay: float = 0.78
    branch_angle_deg: tuple[float, float] = (24.0, 38.0)
    branch_length_mm: tuple[float, float] = (30.0, 42.0)
    length_decay: float = 0.85
    root_radius_mm: float = 9.0
    root_length_mm: float = 50.0
    points_per_branch: int = 9
    radius_taper: float = 0.10
    curvature: float = 0.06

    def validate(self) -> None:
        if self.depth < 0:
            raise ConfigError("depth", "must be >= 0")
        if not (0.0 < self.radius_decay <= 1.0):
            raise ConfigError("radius_decay", "must be in (0, 1]")
        lo, hi = self.branch_angle_deg
        if not (0.0 < lo <= hi < 90.0):
            raise ConfigError("branch_angle_deg", "must satisfy 0 < lo <= hi < 90")
        if self.branching[0] < 1 or self.branching[1] < self.branching[0]:
            raise ConfigError("branching", "must be an increasing range with min >= 1")
        llo, lhi = self.branch_length_mm
        if not (0.0 < llo <= lhi):
            raise ConfigError("branch_length_mm", "must be a positive range")
        if not (0.0 < self.length_decay <= 1.0):
            raise ConfigError("length_decay", "must be in (0, 1]")
        if self.root_radius_mm <= 0:
            raise ConfigError("root_radius_mm", "must be positive")
        if self.root_length_mm <= 0:
            raise ConfigError("root_length_mm", "must be positive")
        if self.points_per_branch < 2:
            raise ConfigError("points_per_branch", "must be >= 2")
        if not (0.0 <= self.radius_taper < 0.5):
            raise ConfigError("radius_taper", "must be in [0, 0.5)")


@dataclass(frozen=True)
class RespirationConfig:
    """Periodic deformation: radial dilation plus a rigid axial shift."""

    radial_amplitude: float = 0.05
    axial_amplitude_mm: float = 1.5
    frequency_hz: float = 0.25
    enabled: bool = False

    def validate(self) -> None:
        if self.radial_amplitude < 0:
            raise ConfigError("radial_amplitude", "must be >= 0")
        if self.axial_amplitude_mm < 0:
            raise ConfigError("axial_amplitude_mm", "must be >= 0")
        if self.enabled and self.frequency_hz <= 0:
            raise ConfigError("frequency_hz", "must be > 0 when enabled")


@dataclass(frozen=True)
class Branch:
    id: int
    parent_id: int | None
    generation: int
    centerline: np.ndarray  # (n, 3) mm
    radii: np.ndarray       # (n,) mm
    label: str

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        rad = np.asarray(self.radii, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ValueError("centerline must be (n>=2, 3)")
        if rad.shape != (pts.shape[0],):
            raise ValueError("radii must match centerline length")
        if np.any(rad <= 0):
            raise ValueError("radii must be strictly positive")
        seg = np.diff(pts, axis=0)
        if np.any(np.linalg.norm(seg, axis=1) < 1e-12):
            raise ValueError("consecutive centerline points must be distinct")
        pts.setflags(write=False)
        rad.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "radii", rad)

    @property
    def mean_radius(self) -> float:
        return float(np.mean(self.radii))

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)))

    @property
    def arc_lengths(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def point_at(self, arc_mm: float) -> np.ndarray:
        """Centerline point at an arc position, clamped to the branch extent."""
        arcs = self.arc_lengths
        a = float(np.clip(arc_mm, 0.0, arcs[-1]))
        i = int(np.searchsorted(arcs, a, side="right")) - 1
        i = min(max(i, 0), len(arcs) - 2)
        seg_len = arcs[i + 1] - arcs[i]
        w = 0.0 if seg_len == 0 else (a - arcs[i]) / seg_len
        return (1 - w) * self.centerline[i] + w * self.centerline[i + 1]

    def tangent_at(self, arc_mm: float) -> np.ndarray:
        arcs = self.arc_lengths
        a = float(np.clip(arc_mm, 0.0, arcs[-1]))
        i = int(np.searchsorted(arcs, a, side="right")) - 1
        i = min(max(i, 0), len(arcs) - 2)
        d = self.centerline[i + 1] - self.centerline[i]
        return d / np.linalg.norm(d)

    def radius_at(self, arc_mm: float) -> float:
        arcs = self.arc_lengths
        a = float(np.clip(arc_mm, 0.0, arcs[-1]))
        i = int(np.searchsorted(arcs, a, side="right")) - 1
        i = min(max(i, 0), len(arcs) - 2)
        seg_len = arcs[i + 1] - arcs[i]
        w = 0.0 if seg_len == 0 else (a - arcs[i]) / seg_len
        return float((1 - w) * self.radii[i] + w * self.radii[i + 1])


class PackedTree:
    """Flat segment arrays for the numba kernels, built once per tree."""

    def __init__(self, branches: list[Branch]):
        p0, p1, r0, r1 = [], [], [], []
        seg_start = np.zeros(len(branches), dtype=np.int64)
        seg_end = np.zeros(len(branches), dtype=np.int64)
        for k, b in enumerate(branches):
            seg_start[k] = len(p0)
            pts, rad = b.centerline, b.radii
            for i in range(len(pts) - 1):
                p0.append(pts[i])
                p1.append(pts[i + 1])
                r0.append(rad[i])
                r1.append(rad[i + 1])
            seg_end[k] = len(p0)
        self.p0 = np.asarray(p0, dtype=float)
        self.p1 = np.asarray(p1, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self.r1 = np.asarray(r1, dtype=float)
        self.seg_start = seg_start
        self.seg_end = seg_end
        # Bounding sphere per branch: centroid of points, radius covering
        # every point plus its local lumen radius.
        nb = len(branches)
        self.bc = np.zeros((nb, 3))
        self.br = np.zeros(nb)
        for k, b in enumerate(branches):
            c = b.centerline.mean(axis=0)
            self.bc[k] = c
            self.br[k] = float(np.max(np.linalg.norm(b.centerline - c, axis=1) + b.radii))
        self.branch_index = {b.id: k for k, b in enumerate(branches)}

    def sdf(self, points: np.ndarray) -> np.ndarray:
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        return _raycast.sdf_points(pts, self.p0, self.p1, self.r0, self.r1,
                                   self.bc, self.br, self.seg_start, self.seg_end)

    def branch_sdf(self, points: np.ndarray, branch_id: int) -> np.ndarray:
        k = self.branch_index[branch_id]
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        return _raycast.branch_sdf_points(pts, self.p0, self.p1, self.r0, self.r1,
                                          int(self.seg_start[k]), int(self.seg_end[k]))


@dataclass(frozen=True)
class AirwayTree:
    branches: tuple[Branch, ...]
    root_id: int
    seed: int
    config: TreeConfig
    _packed_cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))

    def branch(self, branch_id: int) -> Branch:
        for b in self.branches:
            if b.id == branch_id:
                return b
        raise KeyError(f"unknown branch id {branch_id}")

    def children(self, branch_id: int) -> list[Branch]:
        return [b for b in self.branches if b.parent_id == branch_id]

    @property
    def packed(self) -> PackedTree:
        if not self._packed_cache:
            self._packed_cache.append(PackedTree(list(self.branches)))
        return self._packed_cache[0]

    @property
    def max_generation(self) -> int:
        return max(b.generation for b in self.branches)

    def axial_direction(self) -> np.ndarray:
        """Mean tangent of the trachea; the respiration displacement axis."""
        root = self.branch(self.root_id)
        d = root.centerline[-1] - root.centerline[0]
        return d / np.linalg.norm(d)


def _frame_perpendicular(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = int(np.argmin(np.abs(d)))
    axis = np.zeros(3)
    axis[k] = 1.0
    e1 = np.cross(d, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2


def _make_centerline(base: np.ndarray, direction: np.ndarray, length: float,
                     n_points: int, curvature: float, rng: np.random.Generator) -> np.ndarray:
    ts = np.linspace(0.0, 1.0, n_points)
    pts = base[None, :] + np.outer(ts * length, direction)
    if curvature > 0:
        e1, e2 = _frame_perpendicular(direction)
        phase = rng.uniform(0, 2 * np.pi)
        lateral = e1 * np.cos(phase) + e2 * np.sin(phase)
        # half-sine bow, zero at both ends so junctions stay on-axis
        pts = pts + np.outer(np.sin(np.pi * ts) * curvature * length, lateral)
    return pts


def generate_tree(seed: int, config: TreeConfig = TreeConfig()) -> AirwayTree:
    """Grow a deterministic branching lumen from (seed, config).

    Recursive bifurcation: each branch at generation < depth spawns children
    with polar angles drawn from the configured range; child azimuths rotate
    with generation so the tree leaves any single plane. Radii decay
    multiplicatively per generation and taper linearly along each branch.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    branches: list[Branch] = []
    counter = {"next_id": 0, "per_gen": {}}

    def new_label(gen: int) -> str:
        idx = counter["per_gen"].get(gen, 0)
        counter["per_gen"][gen] = idx + 1
        return f"G{gen}-B{idx}"

    def grow(base: np.ndarray, direction: np.ndarray, radius: float, length: float,
             gen: int, parent_id: int | None) -> None:
        bid = counter["next_id"]
        counter["next_id"] += 1
        pts = _make_centerline(base, direction, length, config.points_per_branch,
                               config.curvature if gen > 0 else 0.0, rng)
        radii = np.linspace(radius, radius * (1.0 - config.radius_taper),
                            config.points_per_branch)
        branches.append(Branch(bid, parent_id, gen, pts, radii, new_label(gen)))
        if gen >= config.depth:
            return
        n_children = int(rng.integers(config.branching[0], config.branching[1] + 1))
        tip = pts[-1]
        end_radius = float(radii[-1])
        e1, e2 = _frame_perpendicular(direction)
        azimuth0 = math.radians(gen * 90.0) + rng.uniform(-0.35, 0.35)
        for c in range(n_children):
            polar = math.radians(rng.uniform(*config.branch_angle_deg))
            az = azimuth0 + c * (2 * np.pi / n_children)
            lateral = e1 * np.cos(az) + e2 * np.sin(az)
            child_dir = direction * np.cos(polar) + lateral * np.sin(polar)
            child_dir /= np.linalg.norm(child_dir)
            child_radius = end_radius * config.radius_decay * rng.uniform(0.94, 1.0)
            child_len = rng.uniform(*config.branch_length_mm) * (config.length_decay ** (gen + 1))
            grow(tip, child_dir, child_radius, child_len, gen + 1, bid)

    grow(np.zeros(3), np.array([0.0, 0.0, 1.0]), config.root_radius_mm,
         config.root_length_mm, 0, None)
    return AirwayTree(tuple(branches), root_id=0, seed=seed, config=config)


def lumen_signed_distance(tree: AirwayTree, point) -> float:
    """Signed distance to the lumen wall: negative inside, 1-Lipschitz."""
    p = np.asarray(point, dtype=float).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    return float(tree.packed.sdf(p)[0])


def lumen_signed_distance_many(tree: AirwayTree, points: np.ndarray) -> np.ndarray:
    return tree.packed.sdf(np.asarray(points, dtype=float))


def locate(tree: AirwayTree, point) -> tuple[int | None, float, float]:
    """(branch id, arc position, penetration) of the deepest containing branch.

    Returns (None, 0, 0) when the point lies outside every lumen. Penetration
    is depth inside the branch capsule; ties go to the lowest branch id.
    """
    p = np.asarray(point, dtype=float).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    best_id, best_pen = None, 0.0
    for b in tree.branches:
        d = float(tree.packed.branch_sdf(p, b.id)[0])
        if d < 0 and -d > best_pen:
            best_id, best_pen = b.id, -d
    if best_id is None:
        return None, 0.0, 0.0
    b = tree.branch(best_id)
    arcs = b.arc_lengths
    q = p[0]
    best_arc, best_d2 = 0.0, np.inf
    for i in range(len(b.centerline) - 1):
        a, c = b.centerline[i], b.centerline[i + 1]
        ac = c - a
        t = float(np.clip(np.dot(q - a, ac) / np.dot(ac, ac), 0.0, 1.0))
        proj = a + t * ac
        d2 = float(np.sum((q - proj) ** 2))
        if d2 < best_d2:
            best_d2 = d2
            best_arc = float(arcs[i] + t * (arcs[i + 1] - arcs[i]))
    return best_id, best_arc, best_pen


def respiration_phase(time_s: float, frequency_hz: float) -> float:
    """sin(2*pi*f*t) computed on the wrapped turn count so whole periods
    reproduce bitwise."""
    turns = math.fmod(frequency_hz * time_s, 1.0)
    return math.sin(2.0 * math.pi * turns)


def deform(tree: AirwayTree, time_s: float, resp: RespirationConfig) -> AirwayTree:
    """Respiration-deformed copy: radii scaled, centerlines shifted axially."""
    resp.validate()
    if not resp.enabled or (resp.radial_amplitude == 0.0 and resp.axial_amplitude_mm == 0.0):
        return tree
    s = respiration_phase(time_s, resp.frequency_hz)
    if s == 0.0:
        return tree
    axis = tree.axial_direction()
    shift = axis * (resp.axial_amplitude_mm * s)
    scale = 1.0 + resp.radial_amplitude * s
    out = []
    for b in tree.branches:
        out.append(Branch(b.id, b.parent_id, b.generation,
                          b.centerline + shift, b.radii * scale, b.label))
    return AirwayTree(tuple(out), tree.root_id, tree.seed, tree.config)


def tree_to_json(tree: AirwayTree) -> str:
    doc = {
        "version": TREE_SCHEMA_VERSION,
        "seed": tree.seed,
        "config": asdict(tree.config),
        "root_id": tree.root_id,
        "branches": [
            {
                "id": b.id,
                "parent": b.parent_id,
                "generation": b.generation,
                "label": b.label,
                "points": [[float(x) for x in p] for p in b.centerline],
                "radii": [float(r) for r in b.radii],
            }
            for b in tree.branches
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def tree_from_json(text: str) -> AirwayTree:
    doc = json.loads(text)
    if doc.get("version") != TREE_SCHEMA_VERSION:
        raise ValueError(f"unsupported tree schema version {doc.get('version')}")
    cfg_doc = dict(doc["config"])
    for key in ("branching", "branch_angle_deg", "branch_length_mm"):
        cfg_doc[key] = tuple(cfg_doc[key])
    cfg = TreeConfig(**cfg_doc)
    branches = [
        Branch(b["id"], b["parent"], b["generation"],
               np.asarray(b["points"], dtype=float),
               np.asarray(b["radii"], dtype=float), b["label"])
        for b in doc["branches"]
    ]
    return AirwayTree(tuple(branches), doc["root_id"], doc["seed"], cfg)
