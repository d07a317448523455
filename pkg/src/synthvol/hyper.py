"""Robust mixture-hyperparameter estimation from labelled example scans.

Per class and channel, each scan contributes a robust location/scale estimate
(median, 1.4826 * median absolute deviation).  Scale estimates are corrected
for the resolution gap between the acquired and target grids, the per-scan
populations are summarized by mean and spread, and the spreads are widened
(x5 by default) so the synthetic intensity distribution is deliberately
broader than the observations.

Intensities are min-max normalized to [0, 1] before estimation by default, so
the resulting hyperparameters are portable across scanners and scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .intensity import GmmHyper
from .volume import LabelMap, Volume, minmax_normalize

__all__ = [
    "MAD_SCALE",
    "ScanObservation",
    "robust_stats",
    "scale_variance",
    "fit_hyper",
    "estimate_hyper",
]

# Scales the median absolute deviation to a Gaussian standard deviation.
MAD_SCALE = 1.4826

DEFAULT_WIDEN = 5.0
# Spread floor, relative to the location estimate, used when the per-scan
# population is too small (or too concordant) to define a spread.
REL_SPREAD_FLOOR = 0.05
ABS_SPREAD_FLOOR = 1e-6


@dataclass(frozen=True)
class ScanObservation:
    """One intensity volume with a rough label map on the same grid."""

    image: Volume
    labels: LabelMap
    channel: int = 0

    def __post_init__(self):
        if self.image.dims != self.labels.dims:
            raise ValueError(
                f"image grid {self.image.dims} != label grid {self.labels.dims}"
            )
        if self.channel < 0:
            raise ValueError(f"channel must be >= 0, got {self.channel}")


def robust_stats(values) -> tuple[float, float]:
    """(median, 1.4826 * MAD) of a value list."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("robust_stats needs at least one value")
    med = float(np.median(arr))
    mad = float(np.median(np.abs(arr - med)))
    return med, MAD_SCALE * mad


def scale_variance(var: float, r_c, r_targ, mode: str = "sum") -> float:
    """Correct an LR-observed variance for the target grid.

    ``mode='sum'`` multiplies by sum(r_c)/sum(r_targ); ``mode='volume'`` uses
    the voxel-volume ratio prod(r_c)/prod(r_targ) instead.
    """
    r_c = np.asarray(r_c, dtype=float)
    r_targ = np.asarray(r_targ, dtype=float)
    if np.any(r_c <= 0) or np.any(r_targ <= 0):
        raise ValueError("voxel sizes must be positive")
    if mode == "sum":
        ratio = float(r_c.sum() / r_targ.sum())
    elif mode == "volume":
        ratio = float(r_c.prod() / r_targ.prod())
    else:
        raise ValueError(f"unknown variance scaling mode {mode!r}")
    return var * ratio


def _spread(values: np.ndarray, location: float) -> float:
    floor = REL_SPREAD_FLOOR * abs(location) + ABS_SPREAD_FLOOR
    if values.size < 2:
        return floor
    return max(float(values.std()), floor)


def fit_hyper(estimates: dict, labels, num_channels: int,
              widen_factor: float = DEFAULT_WIDEN) -> GmmHyper:
    """Summarize per-scan (mu, sigma) estimates into mixture hyperparameters.

    ``estimates`` maps ``(label, channel)`` to a list of per-scan
    ``(mu_hat, sigma_hat)`` pairs.  Every (label, channel) cell must be
    covered by at least one scan.
    """
    if widen_factor <= 0:
        raise ValueError(f"widen_factor must be > 0, got {widen_factor}")
    labels = tuple(int(k) for k in labels)
    k_n, c_n = len(labels), int(num_channels)
    m_mu = np.zeros((k_n, c_n))
    a_mu = np.zeros((k_n, c_n))
    m_sigma = np.zeros((k_n, c_n))
    a_sigma = np.zeros((k_n, c_n))
    for ki, k in enumerate(labels):
        for c in range(c_n):
            pairs = estimates.get((k, c), [])
            if not pairs:
                raise ValueError(f"class {k} has no estimate for channel {c}")
            mus = np.asarray([p[0] for p in pairs], dtype=float)
            sigmas = np.asarray([p[1] for p in pairs], dtype=float)
            m_mu[ki, c] = mus.mean()
            a_mu[ki, c] = widen_factor * _spread(mus, m_mu[ki, c])
            m_sigma[ki, c] = sigmas.mean()
            a_sigma[ki, c] = widen_factor * _spread(sigmas, m_sigma[ki, c])
    return GmmHyper(labels, m_mu, a_mu, m_sigma, a_sigma)


def estimate_hyper(observations, r_targ, widen_factor: float = DEFAULT_WIDEN,
                   variance_scaling: str = "sum", normalize: bool = True,
                   acquired_res=None) -> GmmHyper:
    """Full estimation pipeline over a set of labelled scans.

    Per scan and per present label: robust stats of the (optionally
    normalized) intensities, variance correction using the scan's voxel size
    (or ``acquired_res`` when the header spacing is not the acquired one),
    then the population fit of :func:`fit_hyper`.
    """
    observations = list(observations)
    if not observations:
        raise ValueError("no observations")
    num_channels = max(o.channel for o in observations) + 1
    labels = sorted({int(k) for o in observations for k in o.labels.label_set})
    estimates: dict = {}
    for obs in observations:
        img = minmax_normalize(obs.image) if normalize else obs.image
        r_c = acquired_res if acquired_res is not None else obs.image.voxel_size
        for k in obs.labels.label_set:
            mask = obs.labels.data == k
            if not mask.any():
                continue
            mu_hat, sigma_hat = robust_stats(img.data[mask])
            var = scale_variance(sigma_hat ** 2, r_c, r_targ, mode=variance_scaling)
            estimates.setdefault((int(k), obs.channel), []).append((mu_hat, float(np.sqrt(var))))
    return fit_hyper(estimates, labels, num_channels, widen_factor=widen_factor)
