"""Diffeomorphic nonlinear augmentation from stationary velocity fields.

A velocity field is drawn i.i.d. Gaussian on a coarse control grid (default
10x10x10x3), trilinearly upsampled to the full grid, and integrated to a
deformation by scaling and squaring: halve the field ``num_steps`` times,
then self-compose ``num_steps`` times.  Displacements are in voxel units of
the grid they deform; reads outside the grid contribute zero displacement.

The coarse grid is upsampled *before* exponentiation, so the integration runs
at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, grid_coords, sample_vector_field

__all__ = [
    "VelocityField",
    "DenseDeformation",
    "sample_svf",
    "upsample_svf",
    "exponentiate",
    "compose_affine_nonlinear",
    "jacobian_determinant",
    "DEFAULT_NUM_STEPS",
]

DEFAULT_NUM_STEPS = 8


@dataclass(frozen=True)
class VelocityField:
    """Coarse (gx, gy, gz, 3) velocity control grid, voxel units."""

    control: np.ndarray
    sigma: float

    def __post_init__(self):
        c = np.asarray(self.control, dtype=np.float32)
        if c.ndim != 4 or c.shape[3] != 3:
            raise ValueError(f"control grid must be (gx,gy,gz,3), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("velocity field contains non-finite values")
        object.__setattr__(self, "control", c)


@dataclass(frozen=True)
class DenseDeformation:
    """Per-voxel displacement field (nx, ny, nz, 3) in voxel units."""

    disp: np.ndarray
    diffeomorphic: bool = False

    def __post_init__(self):
        d = np.asarray(self.disp, dtype=np.float32)
        if d.ndim != 4 or d.shape[3] != 3:
            raise ValueError(f"displacement field must be (nx,ny,nz,3), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "disp", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.disp.shape[:3]


def sample_svf(dims_target, sigma: float, control_dims=(10, 10, 10),
               rng: np.random.Generator | None = None) -> VelocityField:
    """Draw an i.i.d. zero-mean Gaussian velocity field on the control grid."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if rng is None:
        rng = np.random.default_rng()
    shape = tuple(int(g) for g in control_dims) + (3,)
    control = sigma * rng.standard_normal(shape)
    return VelocityField(control.astype(np.float32), float(sigma))


def upsample_svf(f: VelocityField, dims) -> np.ndarray:
    """Trilinearly upsample the control grid so it spans the full volume.

    Control node ``i`` maps to voxel ``i * (n-1) / (g-1)``; a location aligned
    with a control node reproduces that node's value.
    """
    dims = tuple(int(n) for n in dims)
    g = f.control.shape[:3]
    pts = grid_coords(dims)
    scale = np.array([
        (g[i] - 1) / (dims[i] - 1) if dims[i] > 1 else 0.0 for i in range(3)
    ])
    return sample_vector_field(f.control, pts * scale)


def _compose_disp(outer: np.ndarray, inner: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Displacement of x -> x + inner(x) + outer(x + inner(x))."""
    return inner + sample_vector_field(outer, pts + inner)


def exponentiate(svf_dense: np.ndarray, num_steps: int = DEFAULT_NUM_STEPS) -> DenseDeformation:
    """Integrate a dense velocity field by scaling and squaring."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    field = np.asarray(svf_dense, dtype=np.float32)
    if field.ndim != 4 or field.shape[3] != 3:
        raise ValueError(f"expected a dense (nx,ny,nz,3) field, got {field.shape}")
    disp = field / np.float32(2 ** num_steps)
    pts = grid_coords(field.shape[:3])
    for _ in range(num_steps):
        disp = _compose_disp(disp, disp, pts)
    return DenseDeformation(disp, diffeomorphic=True)


def compose_affine_nonlinear(t_lin: np.ndarray, t_nonlin: DenseDeformation) -> DenseDeformation:
    """Dense backward map for affine-after-nonlinear composition.

    ``t_lin`` is a 4x4 voxel-to-voxel matrix.  Each output voxel x maps to
    ``A @ (x + u(x))``, returned as a displacement field.
    """
    m = np.asarray(t_lin, dtype=float)
    if m.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {m.shape}")
    pts = grid_coords(t_nonlin.dims)
    warped = pts + t_nonlin.disp
    flat = warped.reshape(-1, 3) @ m[:3, :3].T + m[:3, 3]
    disp = flat.reshape(warped.shape) - pts
    return DenseDeformation(disp.astype(np.float32), diffeomorphic=t_nonlin.diffeomorphic)


def jacobian_determinant(d: DenseDeformation) -> Volume:
    """Central-difference Jacobian determinant of x -> x + u(x).

    Interior voxels carry the determinant; the one-voxel boundary is set to 1.
    """
    u = d.disp.astype(np.float64)
    dims = d.dims
    jac = np.zeros(dims + (3, 3))
    for axis in range(3):
        grad = np.gradient(u[..., axis], axis=(0, 1, 2))
        for wrt in range(3):
            jac[..., axis, wrt] = grad[wrt]
    jac += np.eye(3)
    det = np.linalg.det(jac)
    out = np.ones(dims)
    interior = (slice(1, -1), slice(1, -1), slice(1, -1))
    out[interior] = det[interior]
    return Volume(out.astype(np.float32), (1.0, 1.0, 1.0))
