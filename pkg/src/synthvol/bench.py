"""Timing harness for the hot paths of the sample pipeline.

Per-minibatch generation speed is the practical constraint on training
throughput, so the harness times the separable blur, trilinear warping,
velocity-field integration, convolution forward/backward and whole-sample
generation (single- and multi-worker).  Timings are medians over the
requested repetitions with one untimed warm-up call; the timed calls are the
plain library functions, so benchmarking cannot perturb numerical results.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import net
from .acquire import ChannelSpec
from .deform import exponentiate, sample_svf, upsample_svf
from .generator import GeneratorConfig, TrainingPool, generate_sample, stream
from .intensity import GmmHyper, blur_separable
from .volume import LabelMap, Volume, grid_coords, sample_points

__all__ = ["BenchReport", "bench_all", "bench_checksums", "write_csv"]


@dataclass(frozen=True)
class BenchReport:
    op: str
    dims: tuple[int, int, int]
    ms_per_call: float
    voxels_per_second: float
    workers: int = 1

    def row(self) -> dict:
        return {
            "op": self.op,
            "dims": "x".join(str(d) for d in self.dims),
            "ms_per_call": f"{self.ms_per_call:.3f}",
            "voxels_per_second": f"{self.voxels_per_second:.0f}",
            "workers": self.workers,
        }


def _toy_config(dims) -> tuple[GeneratorConfig, TrainingPool]:
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 4, size=dims).astype(np.int32)
    pool = TrainingPool(((None, LabelMap(labels, (1.0, 1.0, 1.0))),))
    gmm = GmmHyper(
        labels=(0, 1, 2, 3),
        m_mu=[[0.0], [0.3], [0.6], [0.9]],
        a_mu=[[0.0]] * 4,
        m_sigma=[[0.02]] * 4,
        a_sigma=[[0.0]] * 4,
    )
    cfg = GeneratorConfig(
        channels=(ChannelSpec((1.0, 1.0, 4.0), (1.0, 1.0, 4.0), True, 0),),
        gmm=gmm,
        crop_size=dims,
        seed=11,
    )
    return cfg, pool


def _median_time(fn, repetitions: int) -> float:
    fn()  # warm-up, excluded
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _op_suite(dims):
    """(name, callable, result-extractor) for every timed op."""
    nvox = int(np.prod(dims))
    rng = np.random.default_rng(3)
    data = rng.standard_normal(dims).astype(np.float32)
    vol = Volume(data, (1.0, 1.0, 1.0))
    pts = grid_coords(dims) + rng.uniform(-0.4, 0.4, size=dims + (3,))
    svf = upsample_svf(sample_svf(dims, 3.0, rng=np.random.default_rng(4)), dims)
    ncfg = net.UNetConfig(levels=2, base_features=8, in_channels=2)
    nd = tuple(min(32, d) for d in dims)
    params = net.init_unet(ncfg, np.random.default_rng(5), final_zero=False)
    x = rng.standard_normal((1, 2) + nd).astype(np.float32)
    tgt = rng.standard_normal((1, 1) + nd).astype(np.float32)
    cfg, pool = _toy_config(tuple(min(32, d) for d in dims))

    return [
        ("blur_separable", lambda: blur_separable(vol.data, (1.0, 1.0, 3.0)), nvox),
        ("trilinear_warp", lambda: sample_points(vol.data, pts), nvox),
        ("svf_exponentiate", lambda: exponentiate(svf, 8), nvox),
        ("conv_forward", lambda: net.unet_forward(params, x), int(np.prod(nd))),
        ("conv_backward", lambda: net.backward(params, x, tgt), int(np.prod(nd))),
        ("generate_sample", lambda: generate_sample(cfg, pool, 0),
         int(np.prod(tuple(min(32, d) for d in dims)))),
    ]


def bench_checksums(dims=(64, 64, 64)) -> dict[str, float]:
    """Float64 sums of each op's output, for the no-perturbation check."""
    sums = {}
    for name, fn, _ in _op_suite(tuple(dims)):
        out = fn()
        if name == "svf_exponentiate":
            sums[name] = float(np.sum(out.disp, dtype=np.float64))
        elif name == "conv_backward":
            sums[name] = float(out[0])
        elif name == "generate_sample":
            sums[name] = float(np.sum(out.target.data, dtype=np.float64))
        else:
            sums[name] = float(np.sum(np.asarray(out), dtype=np.float64))
    return sums


def bench_all(dims=(64, 64, 64), repetitions: int = 5,
              worker_counts=(1, 4)) -> list[BenchReport]:
    """Median timings for every hot op, plus multi-worker sample streaming."""
    dims = tuple(int(d) for d in dims)
    reports = []
    for name, fn, nvox in _op_suite(dims):
        sec = _median_time(fn, repetitions)
        reports.append(BenchReport(name, dims, sec * 1e3, nvox / max(sec, 1e-12)))

    cfg, pool = _toy_config(tuple(min(32, d) for d in dims))
    nvox = int(np.prod(tuple(min(32, d) for d in dims)))
    batch = 8
    for w in worker_counts:
        if w <= 1:
            continue

        def run_stream(w=w):
            for _ in stream(cfg, pool, 0, batch, workers=w):
                pass

        sec = _median_time(run_stream, max(1, repetitions // 2)) / batch
        reports.append(BenchReport("generate_sample", dims, sec * 1e3,
                                   nvox / max(sec, 1e-12), workers=w))
    return reports


def write_csv(reports, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["op", "dims", "ms_per_call", "voxels_per_second", "workers"])
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
