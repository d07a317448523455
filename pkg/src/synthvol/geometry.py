"""Homogeneous 3D transforms for augmentation, inter-scan motion and realignment.

Matrices are 4x4 float64 arrays acting on homogeneous column vectors, with
translations in millimetres.  Conventions fixed here (they are constants of
this package, documented so tests are deterministic):

- Affine product order: ``Sx @ Sy @ Sz @ Hx @ Hy @ Hz @ Rx @ Ry @ Rz``
  (scalings, shearings, rotations; the rightmost factor acts first).
- Shear matrices couple one off-diagonal entry each:
  ``Hx`` puts its coefficient at (y, z), ``Hy`` at (x, z), ``Hz`` at (x, y).
- Angles are carried in degrees and converted to radians at evaluation.
- Rotation / scaling / shearing act about an explicit ``center`` point
  (world mm), so anatomy does not drift out of the field of view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AffineParams",
    "RigidParams",
    "build_affine",
    "build_rigid",
    "sample_affine_params",
    "sample_rigid_params",
    "compose",
    "invert",
    "check_affine",
]

_MIN_DET = 1e-12


@dataclass(frozen=True)
class AffineParams:
    """Rotation (deg), scaling (unitless, > 0) and shearing (unitless) triplets."""

    rot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shear: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(s <= 0 for s in self.scale):
            raise ValueError(f"scalings must be strictly positive, got {self.scale}")


@dataclass(frozen=True)
class RigidParams:
    """Rotation (deg) and translation (mm) triplets."""

    rot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    trans: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.rot) and all(v == 0.0 for v in self.trans)


def _rot_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    m = np.eye(4)
    m[1, 1], m[1, 2] = c, -s
    m[2, 1], m[2, 2] = s, c
    return m


def _rot_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    m = np.eye(4)
    m[0, 0], m[0, 2] = c, s
    m[2, 0], m[2, 2] = -s, c
    return m


def _rot_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    m = np.eye(4)
    m[0, 0], m[0, 1] = c, -s
    m[1, 0], m[1, 1] = s, c
    return m


def _scale(axis: int, s: float) -> np.ndarray:
    m = np.eye(4)
    m[axis, axis] = s
    return m


def _shear(row: int, col: int, phi: float) -> np.ndarray:
    m = np.eye(4)
    m[row, col] = phi
    return m


def _translation(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


def _about_center(m: np.ndarray, center) -> np.ndarray:
    c = np.asarray(center, dtype=float)
    if np.all(c == 0):
        return m
    return _translation(c) @ m @ _translation(-c)


def check_affine(m: np.ndarray) -> np.ndarray:
    """Validate the homogeneous-matrix invariants and return the array."""
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
    if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
        raise ValueError("last row of a homogeneous matrix must be (0,0,0,1)")
    if abs(np.linalg.det(m[:3, :3])) <= _MIN_DET:
        raise ValueError("linear block is singular")
    return m


def build_affine(p: AffineParams, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Compose scalings, shearings and rotations into one 4x4 matrix.

    The linear action is applied about ``center`` (world mm).
    """
    sx, sy, sz = p.scale
    hx, hy, hz = p.shear
    rx, ry, rz = p.rot
    m = (
        _scale(0, sx)
        @ _scale(1, sy)
        @ _scale(2, sz)
        @ _shear(1, 2, hx)
        @ _shear(0, 2, hy)
        @ _shear(0, 1, hz)
        @ _rot_x(rx)
        @ _rot_y(ry)
        @ _rot_z(rz)
    )
    return _about_center(m, center)


def build_rigid(p: RigidParams, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Rotation about ``center`` followed by translation; linear block orthogonal."""
    r = _rot_x(p.rot[0]) @ _rot_y(p.rot[1]) @ _rot_z(p.rot[2])
    return _translation(p.trans) @ _about_center(r, center)


def sample_affine_params(cfg, rng: np.random.Generator) -> AffineParams:
    """Draw augmentation parameters; scalings are drawn in the log domain.

    ``cfg`` provides ``rot_range``, ``scale_range`` and ``shear_range`` pairs.
    Draw order is fixed: three rotations, three log-scalings, three shearings.
    """
    a_rot, b_rot = cfg.rot_range
    a_sc, b_sc = cfg.scale_range
    a_sh, b_sh = cfg.shear_range
    rot = tuple(rng.uniform(a_rot, b_rot) for _ in range(3))
    scale = tuple(math.exp(rng.uniform(math.log(a_sc), math.log(b_sc))) for _ in range(3))
    shear = tuple(rng.uniform(a_sh, b_sh) for _ in range(3))
    return AffineParams(rot=rot, scale=scale, shear=shear)


def sample_rigid_params(cfg, channel_index: int, rng: np.random.Generator) -> RigidParams:
    """Draw inter-scan motion; the reference channel (index 0) never moves.

    Draw order is fixed: three rotations, then three translations.
    """
    if channel_index < 0:
        raise ValueError(f"channel_index must be >= 0, got {channel_index}")
    if channel_index == 0:
        return RigidParams()
    a_rot, b_rot = cfg.rot_range
    a_t, b_t = cfg.trans_range
    rot = tuple(rng.uniform(a_rot, b_rot) for _ in range(3))
    trans = tuple(rng.uniform(a_t, b_t) for _ in range(3))
    return RigidParams(rot=rot, trans=trans)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b (b acts first)."""
    return np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)


def invert(a: np.ndarray) -> np.ndarray:
    """Inverse of a homogeneous matrix; raises on a singular linear block."""
    a = np.asarray(a, dtype=float)
    if abs(np.linalg.det(a[:3, :3])) <= _MIN_DET:
        raise ValueError("cannot invert: linear block is singular")
    return np.linalg.inv(a)


def conjugate_to_voxel(m_world: np.ndarray, grid_affine: np.ndarray) -> np.ndarray:
    """Re-express a world-space transform in a grid's voxel coordinates."""
    w = np.asarray(grid_affine, dtype=float)
    return invert(w) @ np.asarray(m_world, dtype=float) @ w
