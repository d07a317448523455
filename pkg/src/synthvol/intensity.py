"""Label-conditioned intensity synthesis and appearance augmentation.

Per class k and channel c the mixture carries a Gaussian prior over the mean
(``m_mu``, ``a_mu``) and a zero-truncated Gaussian prior over the standard
deviation (``m_sigma``, ``a_sigma``).  Channels are synthesized from
independent random substreams, so cross-channel covariance is zero by
construction.

Gaussian blurs are separable with kernels truncated at +/- 4 sigma and
normalized to unit sum.  The kernel's *discrete* second moment is matched to
sigma^2 (the sampling width is solved numerically), so impulse-response
moment checks hold even for sub-voxel sigmas where a plainly sampled Gaussian
is noticeably too narrow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .volume import Volume, LabelMap, grid_coords, sample_points

__all__ = [
    "GmmHyper",
    "GmmDraw",
    "BiasField",
    "sample_gmm_params",
    "synthesize_intensities",
    "gamma_augment",
    "sample_bias",
    "apply_bias",
    "blur_hr",
    "gaussian_kernel1d",
    "blur_separable",
    "upsample_control_grid",
]


@dataclass(frozen=True)
class GmmHyper:
    """Per-class, per-channel intensity hyperparameters, arrays of shape (K, C)."""

    labels: tuple[int, ...]
    m_mu: np.ndarray
    a_mu: np.ndarray
    m_sigma: np.ndarray
    a_sigma: np.ndarray

    def __post_init__(self):
        labels = tuple(int(v) for v in self.labels)
        arrays = {}
        shape = None
        for name in ("m_mu", "a_mu", "m_sigma", "a_sigma"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != {shape}")
            arrays[name] = arr
        if shape[0] != len(labels):
            raise ValueError(f"{shape[0]} hyperparameter rows for {len(labels)} labels")
        if np.any(arrays["a_mu"] < 0) or np.any(arrays["a_sigma"] < 0):
            raise ValueError("prior spreads a_mu, a_sigma must be >= 0")
        if np.any(arrays["m_sigma"] < 0):
            raise ValueError("prior std means m_sigma must be >= 0")
        object.__setattr__(self, "labels", labels)
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def num_classes(self) -> int:
        return self.m_mu.shape[0]

    @property
    def num_channels(self) -> int:
        return self.m_mu.shape[1]

    def to_json(self) -> str:
        doc = {
            "labels": list(self.labels),
            "channels": self.num_channels,
            "m_mu": self.m_mu.tolist(),
            "a_mu": self.a_mu.tolist(),
            "m_sigma": self.m_sigma.tolist(),
            "a_sigma": self.a_sigma.tolist(),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GmmHyper":
        doc = json.loads(text)
        h = cls(
            labels=tuple(doc["labels"]),
            m_mu=np.asarray(doc["m_mu"], dtype=float),
            a_mu=np.asarray(doc["a_mu"], dtype=float),
            m_sigma=np.asarray(doc["m_sigma"], dtype=float),
            a_sigma=np.asarray(doc["a_sigma"], dtype=float),
        )
        if h.num_channels != int(doc["channels"]):
            raise ValueError("channel count field disagrees with array shapes")
        return h

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GmmHyper":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class GmmDraw:
    """One realized (mu, sigma) table, shape (K, C)."""

    labels: tuple[int, ...]
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(self.sigma < 0):
            raise ValueError("drawn sigmas must be >= 0")
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        object.__setattr__(self, "mu", np.atleast_2d(np.asarray(self.mu, dtype=float)))
        object.__setattr__(self, "sigma", np.atleast_2d(np.asarray(self.sigma, dtype=float)))


@dataclass(frozen=True)
class BiasField:
    """Strictly positive multiplicative field with its generation settings."""

    field: np.ndarray
    control_dims: tuple[int, int, int]
    sigma: float

    def __post_init__(self):
        f = np.asarray(self.field, dtype=np.float32)
        if np.any(f <= 0):
            raise ValueError("bias field must be strictly positive")
        object.__setattr__(self, "field", f)


def _truncated_normal(m: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """N(m, a^2) resampled until every entry is >= 0."""
    out = rng.normal(m, a)
    bad = out < 0
    while bad.any():
        out[bad] = rng.normal(m[bad], a[bad])
        bad = out < 0
    return out


def sample_gmm_params(h: GmmHyper, rng: np.random.Generator) -> GmmDraw:
    """Realize (mu, sigma) per class and channel.

    Each channel consumes its own child stream (means first, then the
    truncated sigmas), so channels stay statistically independent.
    """
    streams = rng.spawn(h.num_channels)
    mu = np.empty_like(h.m_mu)
    sigma = np.empty_like(h.m_sigma)
    for c, sub in enumerate(streams):
        mu[:, c] = sub.normal(h.m_mu[:, c], h.a_mu[:, c])
        sigma[:, c] = _truncated_normal(h.m_sigma[:, c], h.a_sigma[:, c], sub)
    return GmmDraw(h.labels, mu, sigma)


def _label_rows(labels, data: np.ndarray) -> np.ndarray:
    lut = np.full(int(max(labels)) + 1, -1, dtype=np.int64)
    lut[np.asarray(labels)] = np.arange(len(labels))
    vals = data
    if vals.max() >= lut.size or (lut[vals] < 0).any():
        present = set(np.unique(vals).tolist())
        missing = sorted(present - set(int(v) for v in labels))
        raise ValueError(f"labels {missing} have no mixture parameters")
    return lut[vals]


def synthesize_intensities(l: LabelMap, d: GmmDraw, channel: int,
                           rng: np.random.Generator) -> Volume:
    """Per-voxel independent Gaussian intensities conditioned on the labels."""
    rows = _label_rows(d.labels, l.data)
    mu = d.mu[rows, channel]
    sigma = d.sigma[rows, channel]
    values = mu + sigma * rng.standard_normal(l.dims)
    return Volume(values.astype(np.float32), l.voxel_size, l.affine)


def gamma_augment(g: Volume, gamma: float) -> Volume:
    """Range-preserving power-law contrast change; endpoints are fixed points.

    A constant volume passes through unchanged (the mapping is degenerate).
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    data = g.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return g
    out = lo + (hi - lo) * ((data - lo) / (hi - lo)) ** gamma
    return g.with_data(out)


def upsample_control_grid(control: np.ndarray, dims) -> np.ndarray:
    """Trilinear upsampling of a scalar control grid spanning the full extent."""
    dims = tuple(int(n) for n in dims)
    g = control.shape
    pts = grid_coords(dims)
    scale = np.array([
        (g[i] - 1) / (dims[i] - 1) if dims[i] > 1 else 0.0 for i in range(3)
    ])
    return sample_points(control.astype(np.float64), pts * scale, oob="clamp")


def sample_bias(dims, sigma_b: float, control_dims=(4, 4, 4),
                rng: np.random.Generator | None = None) -> BiasField:
    """Smooth positive field: coarse Gaussian log-field, upsampled, exponentiated."""
    if sigma_b < 0:
        raise ValueError(f"sigma_b must be >= 0, got {sigma_b}")
    if rng is None:
        rng = np.random.default_rng()
    control_dims = tuple(int(g) for g in control_dims)
    log_control = sigma_b * rng.standard_normal(control_dims)
    log_field = upsample_control_grid(log_control, dims)
    return BiasField(np.exp(log_field).astype(np.float32), control_dims, float(sigma_b))


def apply_bias(g: Volume, b: BiasField) -> Volume:
    """Voxelwise multiplication by the bias field."""
    if b.field.shape != g.dims:
        raise ValueError(f"bias grid {b.field.shape} does not match volume {g.dims}")
    return g.with_data(g.data.astype(np.float64) * b.field)


def _kernel_variance(s: float, radius: int) -> float:
    k = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (k / s) ** 2)
    return float(np.sum(w * k * k) / np.sum(w))


@lru_cache(maxsize=128)
def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Unit-sum kernel on +/- ceil(4 sigma) taps whose variance equals sigma^2."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma < 1e-6:
        return np.ones(1)
    radius = max(1, math.ceil(4.0 * sigma))
    target = sigma * sigma
    lo, hi = 1e-8, float(sigma)
    while _kernel_variance(hi, radius) < target:
        hi *= 2.0
        if hi > 1e6:
            break
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _kernel_variance(mid, radius) < target:
            lo = mid
        else:
            hi = mid
    k = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (k / (0.5 * (lo + hi))) ** 2)
    return w / w.sum()


def blur_separable(data: np.ndarray, sigma_vox) -> np.ndarray:
    """Separable Gaussian blur, per-axis sigmas in voxel units.

    Accumulates in float64 with edge replication, so constants are preserved
    exactly; returns the input dtype.
    """
    out = data.astype(np.float64)
    for axis in range(3):
        s = float(sigma_vox[axis])
        if s < 1e-6:
            continue
        out = correlate1d(out, gaussian_kernel1d(s), axis=axis, mode="nearest")
    return out.astype(data.dtype)


def blur_hr(g: Volume, sigma_mm: float = 0.5) -> Volume:
    """Mild isotropic smoothing in mm, converted to voxel units per axis."""
    if sigma_mm < 0:
        raise ValueError(f"sigma_mm must be >= 0, got {sigma_mm}")
    sigma_vox = [sigma_mm / r for r in g.voxel_size]
    return g.with_data(blur_separable(g.data, sigma_vox))
