"""Poses and small rotation helpers used by the planner and the simulator.

A pose is a camera frame: position in millimeters plus an orthonormal
(forward, up) pair. The derived right vector completes a right-handed basis
(right, up, forward), i.e. right = up x forward and right x up = forward.
Image coordinates grow rightward along `right` and downward along `-up`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


def _as_unit(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    n = float(np.linalg.norm(a))
    if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
        raise ValueError(f"{name} must be unit-norm, got |v| = {n}")
    return a / n


@dataclass(frozen=True)
class Pose:
    """Camera frame: position (mm), unit forward and unit up, forward ⊥ up."""

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "forward", _as_unit(self.forward, "forward"))
        object.__setattr__(self, "up", _as_unit(self.up, "up"))
        if abs(float(np.dot(self.forward, self.up))) > 1e-6:
            raise ValueError("forward and up must be orthogonal")

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.up, self.forward)

    def orthonormalized(self) -> "Pose":
        """Re-project up off forward; keeps numerical drift below 1e-9."""
        f = self.forward / np.linalg.norm(self.forward)
        u = self.up - np.dot(self.up, f) * f
        u = u / np.linalg.norm(u)
        return Pose(self.position.copy(), f, u)

    def to_camera(self, point) -> np.ndarray:
        """World point -> (right, down-negated, forward) camera coordinates.

        Returns (x, y, z) with x along `right`, y along `up` (so image-down is
        negative y), z along `forward`.
        """
        d = np.asarray(point, dtype=float) - self.position
        return np.array([np.dot(d, self.right), np.dot(d, self.up), np.dot(d, self.forward)])


def rotate_about(v: np.ndarray, axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation of v about a unit axis."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1.0 - c)


def rotate_pose(pose: Pose, axis: np.ndarray, angle_rad: float) -> Pose:
    """Rigidly rotate the orientation of a pose about a unit axis."""
    f = rotate_about(pose.forward, axis, angle_rad)
    u = rotate_about(pose.up, axis, angle_rad)
    return Pose(pose.position.copy(), f / np.linalg.norm(f), u / np.linalg.norm(u)).orthonormalized()


def minimal_rotation(a: np.ndarray, b: np.ndarray):
    """Return (axis, angle) of the smallest rotation taking unit a to unit b."""
    c = float(np.clip(np.dot(a, b), -1.0, 1.0))
    axis = np.cross(a, b)
    n = float(np.linalg.norm(axis))
    if n < 1e-15:
        return np.array([1.0, 0.0, 0.0]), 0.0 if c > 0 else np.pi
    return axis / n, float(np.arctan2(n, c))


def transport_up(up: np.ndarray, t_from: np.ndarray, t_to: np.ndarray) -> np.ndarray:
    """Parallel-transport an up vector across a tangent change (minimal rotation)."""
    axis, ang = minimal_rotation(t_from, t_to)
    u = rotate_about(up, axis, ang)
    u = u - np.dot(u, t_to) * t_to
    return u / np.linalg.norm(u)


def initial_up(tangent: np.ndarray) -> np.ndarray:
    """Deterministic up seed: world axis least aligned with the tangent."""
    k = int(np.argmin(np.abs(tangent)))
    axis = np.zeros(3)
    axis[k] = 1.0
    u = axis - np.dot(axis, tangent) * tangent
    return u / np.linalg.norm(u)


def angle_between_deg(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.degrees(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0))))
