"""The core 3D grid types and their resampling machinery.

A :class:`Volume` is an ``(nx, ny, nz)`` float32 array with a physical voxel
size (mm) and a voxel-to-world homogeneous affine.  Arrays are indexed
``[x, y, z]``; on disk the payload is stored x-fastest (see ``nifti_io``).

Grid conventions used throughout the package:

- Transforms passed to :func:`warp` are *backward* maps in voxel coordinates:
  each output voxel location is mapped to the source location to read from.
- Warping reads zero (intensities) or label 0 (labels) outside the source.
- Resampling to a new spacing keeps the first-voxel center fixed in world
  space and clamps sample coordinates to the source extent, so a constant
  volume stays constant at any spacing.
- Interior accumulation for statistics is done in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Volume",
    "LabelMap",
    "default_affine",
    "trilinear_sample",
    "nearest_sample",
    "sample_points",
    "sample_vector_field",
    "warp",
    "resample",
    "minmax_normalize",
    "wm_median_normalize",
    "crop_random",
    "grid_coords",
]


def default_affine(voxel_size) -> np.ndarray:
    """Diagonal voxel-to-world affine for an axis-aligned grid at the origin."""
    m = np.eye(4)
    m[0, 0], m[1, 1], m[2, 2] = voxel_size
    return m


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid: float32 data, voxel size in mm, voxel-to-world affine."""

    data: np.ndarray
    voxel_size: tuple[float, float, float]
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or any(v <= 0 for v in vs):
            raise ValueError(f"voxel size components must be positive, got {vs}")
        affine = self.affine
        if affine is None:
            affine = default_affine(vs)
        affine = np.asarray(affine, dtype=float)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same grid, new values."""
        return Volume(data, self.voxel_size, self.affine)

    def world_center(self) -> np.ndarray:
        """World coordinates of the geometric center of the grid."""
        c = (np.asarray(self.dims, dtype=float) - 1.0) / 2.0
        return (self.affine @ np.append(c, 1.0))[:3]


@dataclass(frozen=True)
class LabelMap:
    """Integer-valued grid over a fixed set of labels."""

    data: np.ndarray
    voxel_size: tuple[float, float, float]
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]
    label_set: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError("label data must be integer-valued")
        data = data.astype(np.int32, copy=False)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if data.min() < 0:
            raise ValueError("labels must be non-negative")
        vs = tuple(float(v) for v in self.voxel_size)
        if any(v <= 0 for v in vs):
            raise ValueError(f"voxel size components must be positive, got {vs}")
        affine = self.affine
        if affine is None:
            affine = default_affine(vs)
        affine = np.asarray(affine, dtype=float)
        labels = self.label_set
        if labels is None:
            labels = tuple(int(v) for v in np.unique(data))
        else:
            labels = tuple(int(v) for v in labels)
            present = np.unique(data)
            missing = set(present.tolist()) - set(labels)
            if missing:
                raise ValueError(f"voxel values {sorted(missing)} not in label set")
        if len(labels) < 1:
            raise ValueError("label set must contain at least one label")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "label_set", labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "LabelMap":
        return LabelMap(data, self.voxel_size, self.affine, self.label_set)

    def world_center(self) -> np.ndarray:
        c = (np.asarray(self.dims, dtype=float) - 1.0) / 2.0
        return (self.affine @ np.append(c, 1.0))[:3]


def grid_coords(dims) -> np.ndarray:
    """Voxel-coordinate grid of shape ``dims + (3,)``, float64."""
    nx, ny, nz = dims
    g = np.empty((nx, ny, nz, 3), dtype=float)
    g[..., 0] = np.arange(nx, dtype=float)[:, None, None]
    g[..., 1] = np.arange(ny, dtype=float)[None, :, None]
    g[..., 2] = np.arange(nz, dtype=float)[None, None, :]
    return g


def _gather_weights(dims, pts, oob: str):
    """Corner flat indices and weights for trilinear reads.

    ``oob='zero'`` assumes the caller gathers from an array padded with one
    zero voxel on every side; returned indices address that padded array.
    ``oob='clamp'`` addresses the unpadded array with edge-replication.
    """
    nx, ny, nz = dims
    p = pts.reshape(-1, 3)
    if oob == "zero":
        shape = (nx + 2, ny + 2, nz + 2)
        bounds = np.array([nx, ny, nz], dtype=float)
        p = np.clip(p, -1.0, bounds)
        lo = np.floor(p)
        frac = p - lo
        i0 = lo.astype(np.intp) + 1  # shift into padded frame
        i1 = i0 + 1
    elif oob == "clamp":
        shape = (nx, ny, nz)
        bounds = np.array([nx - 1, ny - 1, nz - 1], dtype=float)
        p = np.clip(p, 0.0, bounds)
        lo = np.floor(p)
        frac = p - lo
        i0 = lo.astype(np.intp)
        i1 = np.minimum(i0 + 1, np.array([nx - 1, ny - 1, nz - 1], dtype=np.intp))
    else:
        raise ValueError(f"unknown out-of-bounds mode {oob!r}")
    sy = shape[2]
    sx = shape[1] * shape[2]
    fx0 = i0[:, 0] * sx
    fx1 = i1[:, 0] * sx
    fy0 = i0[:, 1] * sy
    fy1 = i1[:, 1] * sy
    fz0 = i0[:, 2]
    fz1 = i1[:, 2]
    corners = (
        fx0 + fy0 + fz0,
        fx0 + fy0 + fz1,
        fx0 + fy1 + fz0,
        fx0 + fy1 + fz1,
        fx1 + fy0 + fz0,
        fx1 + fy0 + fz1,
        fx1 + fy1 + fz0,
        fx1 + fy1 + fz1,
    )
    wx1 = frac[:, 0]
    wy1 = frac[:, 1]
    wz1 = frac[:, 2]
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    wz0 = 1.0 - wz1
    weights = (
        wx0 * wy0 * wz0,
        wx0 * wy0 * wz1,
        wx0 * wy1 * wz0,
        wx0 * wy1 * wz1,
        wx1 * wy0 * wz0,
        wx1 * wy0 * wz1,
        wx1 * wy1 * wz0,
        wx1 * wy1 * wz1,
    )
    return corners, weights


def _pad_zero(data: np.ndarray) -> np.ndarray:
    padded = np.zeros(tuple(n + 2 for n in data.shape), dtype=data.dtype)
    padded[1:-1, 1:-1, 1:-1] = data
    return padded


def sample_points(data: np.ndarray, pts: np.ndarray, oob: str = "zero") -> np.ndarray:
    """Trilinear reads of ``data`` at continuous voxel coordinates ``pts``.

    ``pts`` has shape ``(..., 3)``; the result has shape ``pts.shape[:-1]``
    and the dtype of ``data``.
    """
    dims = data.shape
    corners, weights = _gather_weights(dims, np.asarray(pts, dtype=float), oob)
    src = _pad_zero(data) if oob == "zero" else data
    flat = src.reshape(-1)
    acc = weights[0] * flat[corners[0]]
    for c, w in zip(corners[1:], weights[1:]):
        acc += w * flat[c]
    return acc.reshape(np.asarray(pts).shape[:-1]).astype(data.dtype, copy=False)


def sample_vector_field(field_data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear reads of an ``(nx,ny,nz,3)`` field, zero outside the grid.

    Corner indices and weights are computed once and shared across the three
    components, which matters in the scaling-and-squaring loop.
    """
    dims = field_data.shape[:3]
    corners, weights = _gather_weights(dims, np.asarray(pts, dtype=float), "zero")
    padded = np.zeros(tuple(n + 2 for n in dims) + (3,), dtype=field_data.dtype)
    padded[1:-1, 1:-1, 1:-1, :] = field_data
    flat = padded.reshape(-1, 3)
    acc = weights[0][:, None] * flat[corners[0]]
    for c, w in zip(corners[1:], weights[1:]):
        acc += w[:, None] * flat[c]
    return acc.reshape(np.asarray(pts).shape[:-1] + (3,)).astype(field_data.dtype, copy=False)


def trilinear_sample(v: Volume, p) -> float:
    """Standard 8-neighbor blend at one continuous voxel coordinate; 0 outside."""
    return float(sample_points(v.data, np.asarray(p, dtype=float).reshape(1, 3))[0])


def nearest_sample(l: LabelMap, p) -> int:
    """Nearest-node label, ties toward the lower index; 0 outside the grid."""
    p = np.asarray(p, dtype=float)
    idx = np.ceil(p - 0.5).astype(int)
    dims = l.dims
    if np.any(idx < 0) or np.any(idx >= np.asarray(dims)):
        return 0
    return int(l.data[tuple(idx)])


def _source_coords(dims, transform) -> np.ndarray:
    """Backward-mapped source coordinates for each output voxel."""
    pts = grid_coords(dims)
    if isinstance(transform, np.ndarray):
        m = np.asarray(transform, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"affine transform must be 4x4, got {m.shape}")
        flat = pts.reshape(-1, 3)
        out = flat @ m[:3, :3].T + m[:3, 3]
        return out.reshape(pts.shape)
    disp = getattr(transform, "disp", None)
    if disp is None:
        raise TypeError("transform must be a 4x4 array or a dense deformation")
    if disp.shape[:3] != tuple(dims):
        raise ValueError(f"deformation grid {disp.shape[:3]} does not match output {tuple(dims)}")
    return pts + disp


def warp(v, transform, mode: str):
    """Pull-back warp on the input grid: output(x) = source(T(x)).

    ``transform`` is a 4x4 voxel-to-voxel matrix or a dense deformation whose
    ``disp`` field holds per-voxel displacements in voxel units.
    """
    if mode == "trilinear":
        if isinstance(v, LabelMap):
            raise ValueError("trilinear interpolation is not defined for label maps")
        pts = _source_coords(v.dims, transform)
        return v.with_data(sample_points(v.data, pts, oob="zero"))
    if mode == "nearest":
        pts = _source_coords(v.dims, transform)
        idx = np.ceil(pts - 0.5).astype(np.intp)
        dims = np.asarray(v.dims, dtype=np.intp)
        inside = np.all((idx >= 0) & (idx < dims), axis=-1)
        idx = np.clip(idx, 0, dims - 1)
        out = v.data[idx[..., 0], idx[..., 1], idx[..., 2]]
        out = np.where(inside, out, 0)
        if isinstance(v, LabelMap):
            return LabelMap(out.astype(np.int32), v.voxel_size, v.affine,
                            tuple(sorted(set(v.label_set) | {0})))
        return v.with_data(out.astype(np.float32))
    raise ValueError(f"unknown interpolation mode {mode!r}")


def resample(v: Volume, new_spacing, out_dims=None, origin_vox=(0.0, 0.0, 0.0)) -> Volume:
    """Regrid to ``new_spacing`` (mm) over the same world extent.

    The first-voxel center is kept fixed (plus an optional sub-voxel
    ``origin_vox`` shift in source-voxel units); sample coordinates are
    clamped to the source extent.  ``out_dims`` overrides the derived grid
    size when the caller needs an exact target grid.
    """
    new_spacing = tuple(float(s) for s in new_spacing)
    if any(s <= 0 for s in new_spacing):
        raise ValueError(f"new spacing must be positive, got {new_spacing}")
    step = np.array([new_spacing[i] / v.voxel_size[i] for i in range(3)])
    origin = np.asarray(origin_vox, dtype=float)
    if out_dims is None:
        out_dims = tuple(
            max(1, int(round(v.dims[i] * v.voxel_size[i] / new_spacing[i]))) for i in range(3)
        )
    else:
        out_dims = tuple(int(n) for n in out_dims)
    pts = grid_coords(out_dims) * step + origin
    data = sample_points(v.data, pts, oob="clamp")
    scale = np.eye(4)
    scale[0, 0], scale[1, 1], scale[2, 2] = step
    scale[:3, 3] = origin
    return Volume(data, new_spacing, v.affine @ scale)


def resample_to_grid(v: Volume, affine: np.ndarray, dims, spacing) -> Volume:
    """Regrid onto an explicit target grid (affine, dims, spacing in mm).

    Sample coordinates are clamped to the source extent, matching
    :func:`resample`.
    """
    dims = tuple(int(n) for n in dims)
    m = np.linalg.inv(np.asarray(v.affine, dtype=float)) @ np.asarray(affine, dtype=float)
    pts = grid_coords(dims).reshape(-1, 3) @ m[:3, :3].T + m[:3, 3]
    data = sample_points(v.data, pts.reshape(dims + (3,)), oob="clamp")
    return Volume(data, tuple(float(s) for s in spacing), np.asarray(affine, dtype=float))


def minmax_normalize(v: Volume) -> Volume:
    """Affine intensity map onto [0, 1]; rejects constant volumes."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi <= lo:
        raise ValueError("cannot min-max normalize a constant volume")
    return v.with_data((v.data.astype(np.float64) - lo) / (hi - lo))


def wm_median_normalize(v: Volume, l: LabelMap, wm_labels) -> Volume:
    """Divide intensities by the median over white-matter-labelled voxels."""
    if v.dims != l.dims:
        raise ValueError(f"grids differ: {v.dims} vs {l.dims}")
    mask = np.isin(l.data, np.asarray(list(wm_labels), dtype=l.data.dtype))
    if not mask.any():
        raise ValueError("no voxels carry a white-matter label")
    med = float(np.median(v.data[mask].astype(np.float64)))
    if med == 0.0:
        raise ValueError("white-matter median intensity is zero")
    return v.with_data(v.data.astype(np.float64) / med)


def crop_random(vols, size, rng: np.random.Generator):
    """One shared random window applied to every aligned volume.

    Crop size clamps to the grid where a dimension is smaller.  Offsets are
    drawn x, y, z in that order.
    """
    vols = list(vols)
    if not vols:
        raise ValueError("no volumes to crop")
    dims = vols[0].dims
    for v in vols[1:]:
        if v.dims != dims:
            raise ValueError(f"volumes are not aligned: {v.dims} vs {dims}")
    size = tuple(min(int(size[i]), dims[i]) for i in range(3))
    offsets = tuple(int(rng.integers(0, dims[i] - size[i] + 1)) for i in range(3))
    shift = np.eye(4)
    shift[:3, 3] = offsets
    out = []
    for v in vols:
        window = v.data[
            offsets[0]:offsets[0] + size[0],
            offsets[1]:offsets[1] + size[1],
            offsets[2]:offsets[2] + size[2],
        ]
        if isinstance(v, LabelMap):
            out.append(LabelMap(window.copy(), v.voxel_size, v.affine @ shift, v.label_set))
        else:
            out.append(Volume(window.copy(), v.voxel_size, v.affine @ shift))
    return out
