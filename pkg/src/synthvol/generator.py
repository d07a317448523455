"""End-to-end reproducible training-sample generation.

One sample is a pure function of ``(config, pool, sample_index)``:

1. uniform pick of a (image, label) pair from the pool;
2. spatial augmentation: random affine composed with an exponentiated
   velocity field, applied as one backward map (trilinear for intensities,
   nearest for labels);
3. per channel: label-conditioned Gaussian intensities, gamma contrast
   change, mild high-resolution smoothing, inter-scan motion, multiplicative
   bias, slice-profile blur, subsampling to the slice spacing, noisy
   realignment back to the target grid, and the matching reliability map;
4. one shared random crop, min-max normalization of the intensity inputs,
   and the regression target.

Every random decision reads a dedicated substream keyed by
``(seed, sample_index, attempt, stage, channel)``, so multi-worker streaming
is bitwise identical to sequential generation.  If a crop is constant in some
input channel (normalization would be degenerate), the sample is regenerated
under the next attempt key.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acquire import (
    ChannelSpec,
    apply_interscan_motion,
    compute_reliability,
    realign_and_resample,
    sample_registration_error,
    slice_sigma,
    subsample_slices,
    gaussian_blur_aniso,
)
from .deform import exponentiate, sample_svf, upsample_svf, compose_affine_nonlinear
from .geometry import (
    build_affine,
    conjugate_to_voxel,
    sample_affine_params,
    sample_rigid_params,
)
from .intensity import (
    GmmHyper,
    apply_bias,
    blur_hr,
    gamma_augment,
    sample_bias,
    sample_gmm_params,
    synthesize_intensities,
)
from .rng import substream
from .volume import LabelMap, Volume, crop_random, warp, wm_median_normalize

__all__ = [
    "GeneratorConfig",
    "TrainingPool",
    "TrainingSample",
    "GenerationError",
    "select_pair",
    "generate_sample",
    "make_target",
    "stream",
]

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 16


class GenerationError(RuntimeError):
    """A pipeline stage produced invalid data; the message carries the stage tag."""


@dataclass(frozen=True)
class GeneratorConfig:
    """All knobs of the sample pipeline; defaults are the production values."""

    channels: tuple[ChannelSpec, ...]
    gmm: GmmHyper
    target_res: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mode: str = "sr"
    crop_size: tuple[int, int, int] = (192, 192, 192)
    rot_range: tuple[float, float] = (-10.0, 10.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear_range: tuple[float, float] = (-0.01, 0.01)
    svf_var: float = 9.0
    gamma_range: tuple[float, float] = (0.7, 1.3)
    bias_var: float = 0.25
    trans_range: tuple[float, float] = (-20.0, 20.0)
    alpha_range: tuple[float, float] = (0.8, 1.2)
    reg_rot_var: float = 0.09
    reg_trans_var: float = 0.09
    svf_control: tuple[int, int, int] = (10, 10, 10)
    bias_control: tuple[int, int, int] = (4, 4, 4)
    exp_steps: int = 8
    hr_blur_mm: float = 0.5
    random_slice_phase: bool = False
    wm_labels: tuple[int, ...] = ()
    similar_contrast_channel: int | None = None
    seed: int = 0

    def __post_init__(self):
        channels = tuple(self.channels)
        if not channels:
            raise ValueError("at least one channel is required")
        refs = [i for i, ch in enumerate(channels) if ch.is_reference]
        if refs != [0]:
            raise ValueError("exactly the first channel must be the reference")
        channels = tuple(replace(ch, index=i) for i, ch in enumerate(channels))
        for name in ("rot_range", "scale_range", "shear_range", "gamma_range",
                     "trans_range", "alpha_range"):
            a, b = getattr(self, name)
            if a > b:
                raise ValueError(f"{name} has a > b: ({a}, {b})")
        if self.scale_range[0] <= 0 or self.alpha_range[0] <= 0 or self.gamma_range[0] <= 0:
            raise ValueError("scale, alpha and gamma ranges must stay positive")
        for name in ("svf_var", "bias_var", "reg_rot_var", "reg_trans_var", "hr_blur_mm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if any(r <= 0 for r in self.target_res):
            raise ValueError("target_res must be positive")
        if self.mode not in ("sr", "sr_synth"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.gmm.num_channels != len(channels):
            raise ValueError(
                f"gmm has {self.gmm.num_channels} channels, config has {len(channels)}"
            )
        if self.similar_contrast_channel is not None and not (
            0 <= self.similar_contrast_channel < len(channels)
        ):
            raise ValueError("similar_contrast_channel out of range")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "target_res", tuple(float(r) for r in self.target_res))
        object.__setattr__(self, "crop_size", tuple(int(c) for c in self.crop_size))
        object.__setattr__(self, "wm_labels", tuple(int(k) for k in self.wm_labels))

    @property
    def num_channels(self) -> int:
        return len(self.channels)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "mode": self.mode,
            "target_res": list(self.target_res),
            "crop_size": list(self.crop_size),
            "rot_range": list(self.rot_range),
            "scale_range": list(self.scale_range),
            "shear_range": list(self.shear_range),
            "svf_var": self.svf_var,
            "gamma_range": list(self.gamma_range),
            "bias_var": self.bias_var,
            "trans_range": list(self.trans_range),
            "alpha_range": list(self.alpha_range),
            "reg_rot_var": self.reg_rot_var,
            "reg_trans_var": self.reg_trans_var,
            "svf_control": list(self.svf_control),
            "bias_control": list(self.bias_control),
            "exp_steps": self.exp_steps,
            "hr_blur_mm": self.hr_blur_mm,
            "random_slice_phase": self.random_slice_phase,
            "wm_labels": list(self.wm_labels),
            "similar_contrast_channel": self.similar_contrast_channel,
            "channels": [ch.to_dict() for ch in self.channels],
            "gmm": json.loads(self.gmm.to_json()),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str, gmm: GmmHyper | None = None) -> "GeneratorConfig":
        doc = json.loads(text)
        if gmm is None:
            gmm = GmmHyper.from_json(json.dumps(doc["gmm"]))
        pairs = {}
        for name in ("rot_range", "scale_range", "shear_range", "gamma_range",
                     "trans_range", "alpha_range"):
            if name in doc:
                pairs[name] = tuple(doc[name])
        triples = {}
        for name in ("target_res", "crop_size", "svf_control", "bias_control"):
            if name in doc:
                triples[name] = tuple(doc[name])
        scalars = {}
        for name in ("mode", "svf_var", "bias_var", "reg_rot_var", "reg_trans_var",
                     "exp_steps", "hr_blur_mm", "random_slice_phase", "seed",
                     "similar_contrast_channel"):
            if name in doc:
                scalars[name] = doc[name]
        if "wm_labels" in doc:
            scalars["wm_labels"] = tuple(doc["wm_labels"])
        channels = tuple(
            ChannelSpec.from_dict(d, i) for i, d in enumerate(doc["channels"])
        )
        return cls(channels=channels, gmm=gmm, **pairs, **triples, **scalars)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TrainingPool:
    """Image/label pairs that seed the generator; images only needed for synthesis."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("the training pool is empty")
        for img, lab in entries:
            if not isinstance(lab, LabelMap):
                raise ValueError("each pool entry needs a label map")
            if img is not None and img.dims != lab.dims:
                raise ValueError("pool image and label grids differ")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def require_images(self) -> None:
        if any(img is None for img, _ in self.entries):
            raise ValueError("joint SR/synthesis mode requires pool images")


@dataclass(frozen=True)
class TrainingSample:
    """Network inputs (per-channel intensity + reliability), target, metadata."""

    us: tuple[Volume, ...]
    vs: tuple[Volume, ...]
    target: Volume
    meta: dict = field(default_factory=dict)
    debug: dict | None = None

    def stacked_inputs(self) -> np.ndarray:
        """(2C, nx, ny, nz) float32 stack ordered U_0, V_0, U_1, V_1, ..."""
        layers = []
        for u, v in zip(self.us, self.vs):
            layers.append(u.data)
            layers.append(v.data)
        return np.stack(layers, axis=0)


def select_pair(pool: TrainingPool, rng: np.random.Generator):
    """Uniform pick of one (image, labels) pair."""
    n = int(rng.integers(0, len(pool)))
    return pool[n]


def _normalize_pair(data: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo = float(data.min())
    hi = float(data.max())
    if hi <= lo:
        raise ValueError("constant crop")
    return ((data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32), lo, hi


def make_target(mode: str, i_t: Volume | None, g1b: Volume | None,
                us: tuple[Volume, ...], c_star: int | None = None) -> Volume:
    """Regression target from normalized pieces.

    ``sr``: residual of the reference HR volume against the upsampled
    reference input.  ``sr_synth``: residual against a similar-contrast input
    channel if one is declared, else the HR volume directly.
    """
    if mode == "sr":
        if g1b is None:
            raise ValueError("sr mode needs the reference HR volume")
        return g1b.with_data(g1b.data - us[0].data)
    if mode == "sr_synth":
        if i_t is None:
            raise ValueError("sr_synth mode needs the deformed pool image")
        if c_star is not None:
            return i_t.with_data(i_t.data - us[c_star].data)
        return i_t
    raise ValueError(f"unknown mode {mode!r}")


def _stage(tag: str, fn):
    try:
        return fn()
    except GenerationError:
        raise
    except (ValueError, FloatingPointError) as exc:
        raise GenerationError(f"stage {tag}: {exc}") from exc


def _neutral_affine(p) -> bool:
    return (all(v == 0 for v in p.rot) and all(v == 1 for v in p.scale)
            and all(v == 0 for v in p.shear))


def _generate_attempt(cfg: GeneratorConfig, pool: TrainingPool,
                      sample_index: int, attempt: int,
                      keep_debug: bool) -> TrainingSample:
    def stream_for(*path):
        return substream(cfg.seed, sample_index, attempt, *path)

    n = int(stream_for("select").integers(0, len(pool)))
    image, labels = pool[n]
    dims = labels.dims
    hr_center = labels.world_center()
    meta: dict = {"index": sample_index, "source": n, "attempt": attempt,
                  "seed": cfg.seed, "mode": cfg.mode, "channels": []}

    # Spatial augmentation: one backward map for intensities and labels.
    aff_params = sample_affine_params(cfg, stream_for("affine"))
    meta["affine"] = {"rot": aff_params.rot, "scale": aff_params.scale,
                      "shear": aff_params.shear}
    svf_std = math.sqrt(cfg.svf_var)
    a_vox = conjugate_to_voxel(build_affine(aff_params, center=hr_center), labels.affine)
    if svf_std > 0:
        svf = sample_svf(dims, svf_std, cfg.svf_control, stream_for("svf"))
        t_nonlin = _stage("exponentiate", lambda: exponentiate(
            upsample_svf(svf, dims), cfg.exp_steps))
        transform = compose_affine_nonlinear(a_vox, t_nonlin)
    else:
        transform = a_vox
    if svf_std == 0 and _neutral_affine(aff_params):
        labels_t, image_t = labels, image
    else:
        labels_t = _stage("warp_labels", lambda: warp(labels, transform, mode="nearest"))
        image_t = None
        if image is not None:
            image_t = _stage("warp_image", lambda: warp(image, transform, mode="trilinear"))

    draw = sample_gmm_params(cfg.gmm, stream_for("gmm_params"))
    meta["gmm_mu"] = draw.mu.tolist()
    meta["gmm_sigma"] = draw.sigma.tolist()

    us, vs, hr_biased = [], [], []
    for c, ch in enumerate(cfg.channels):
        g = _stage(f"synthesize[{c}]", lambda: synthesize_intensities(
            labels_t, draw, c, stream_for("gmm_field", c)))
        gamma = float(stream_for("gamma", c).uniform(*cfg.gamma_range))
        g = _stage(f"gamma[{c}]", lambda: gamma_augment(g, gamma))
        if cfg.hr_blur_mm > 0:
            g = _stage(f"hr_blur[{c}]", lambda: blur_hr(g, cfg.hr_blur_mm))
        motion = sample_rigid_params(cfg, c, stream_for("motion", c))
        g_r = _stage(f"motion[{c}]", lambda: apply_interscan_motion(
            g, motion, c, center=hr_center))
        if cfg.bias_var > 0:
            bias = sample_bias(dims, math.sqrt(cfg.bias_var), cfg.bias_control,
                               stream_for("bias", c))
            g_b = _stage(f"bias[{c}]", lambda: apply_bias(g_r, bias))
        else:
            g_b = g_r
        alpha = float(stream_for("alpha", c).uniform(*cfg.alpha_range))
        sigma_s = slice_sigma(alpha, ch.r_mm, cfg.target_res)
        i_sigma = _stage(f"slice_blur[{c}]", lambda: gaussian_blur_aniso(g_b, sigma_s))
        if cfg.random_slice_phase:
            phase = tuple(
                float(stream_for("phase", c).uniform(0.0, d)) if d > r + 1e-9 else 0.0
                for d, r in zip(ch.d_mm, cfg.target_res)
            )
        else:
            phase = (0.0, 0.0, 0.0)
        i_lr = _stage(f"subsample[{c}]", lambda: subsample_slices(
            i_sigma, ch.d_mm, cfg.target_res, phase=phase))
        err = sample_registration_error(
            math.sqrt(cfg.reg_rot_var), math.sqrt(cfg.reg_trans_var), c,
            stream_for("regerr", c))
        u = _stage(f"realign[{c}]", lambda: realign_and_resample(
            i_lr, motion, err, cfg.target_res, center=hr_center,
            out_dims=dims, out_affine=labels.affine))
        v = _stage(f"reliability[{c}]", lambda: compute_reliability(
            ch, motion, err, cfg.target_res, dims, center=hr_center,
            phase=phase, affine=labels.affine))
        us.append(u)
        vs.append(v)
        hr_biased.append(g_b)
        meta["channels"].append({
            "gamma": gamma, "alpha": alpha, "phase": list(phase),
            "motion_rot": motion.rot, "motion_trans": motion.trans,
            "err_rot": err.rot, "err_trans": err.trans,
        })

    # Shared crop across every aligned volume, then normalization.
    to_crop = list(us) + list(vs) + [hr_biased[0]] + ([labels_t] if cfg.mode == "sr_synth" else [])
    if cfg.mode == "sr_synth":
        to_crop.append(image_t)
    cropped = crop_random(to_crop, cfg.crop_size, stream_for("crop"))
    c_n = cfg.num_channels
    us_c = cropped[:c_n]
    vs_c = cropped[c_n:2 * c_n]
    g1b_c = cropped[2 * c_n]
    labels_c = cropped[2 * c_n + 1] if cfg.mode == "sr_synth" else None
    image_c = cropped[2 * c_n + 2] if cfg.mode == "sr_synth" else None

    us_norm = []
    ref_bounds = None
    for c, u in enumerate(us_c):
        lo = float(u.data.min())
        hi = float(u.data.max())
        if hi <= lo:
            raise _ConstantCrop(c)
        us_norm.append(u.with_data(
            ((u.data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)))
        if c == 0:
            ref_bounds = (lo, hi)

    debug: dict | None = None
    if cfg.mode == "sr":
        lo, hi = ref_bounds
        g1b_norm = g1b_c.with_data(
            ((g1b_c.data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32))
        target = make_target("sr", None, g1b_norm, tuple(us_norm))
        if keep_debug:
            debug = {"hr_reference_norm": g1b_norm, "ref_bounds": ref_bounds}
    else:
        i_t_norm = _stage("wm_normalize", lambda: wm_median_normalize(
            image_c, labels_c, cfg.wm_labels))
        target = make_target("sr_synth", i_t_norm, None, tuple(us_norm),
                             cfg.similar_contrast_channel)
        if keep_debug:
            debug = {"hr_reference_norm": i_t_norm}

    return TrainingSample(tuple(us_norm), tuple(vs_c), target, meta, debug)


class _ConstantCrop(Exception):
    def __init__(self, channel: int):
        super().__init__(f"channel {channel} crop is constant")
        self.channel = channel


def generate_sample(cfg: GeneratorConfig, pool: TrainingPool, sample_index: int,
                    keep_debug: bool = False) -> TrainingSample:
    """Deterministic sample for (config, pool, sample_index); retries constant crops."""
    if cfg.mode == "sr_synth":
        pool.require_images()
    for attempt in range(MAX_ATTEMPTS):
        try:
            return _generate_attempt(cfg, pool, sample_index, attempt, keep_debug)
        except _ConstantCrop as cc:
            log.info("sample %d attempt %d: %s; regenerating", sample_index, attempt, cc)
    raise GenerationError(
        f"sample {sample_index}: {MAX_ATTEMPTS} consecutive constant crops"
    )


_WORKER_CFG: GeneratorConfig | None = None
_WORKER_POOL: TrainingPool | None = None


def _worker_init(cfg, pool):
    global _WORKER_CFG, _WORKER_POOL
    _WORKER_CFG = cfg
    _WORKER_POOL = pool


def _worker_generate(index: int) -> TrainingSample:
    return generate_sample(_WORKER_CFG, _WORKER_POOL, index)


def stream(cfg: GeneratorConfig, pool: TrainingPool, start: int, count: int,
           workers: int = 1):
    """Yield samples for indices [start, start+count) in index order.

    With ``workers > 1`` the samples are produced by a process pool; content
    is identical to the sequential path because each sample only depends on
    its index.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    indices = range(start, start + count)
    if workers <= 1:
        for i in indices:
            yield generate_sample(cfg, pool, i)
        return
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                             initargs=(cfg, pool)) as ex:
        yield from ex.map(_worker_generate, indices)
