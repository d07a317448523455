"""From-scratch 3D U-net regressor: forward, reverse-mode gradients, Adam.

Activations are 5D arrays ``(batch, channels, x, y, z)``.  The network is an
encoder/decoder with max-pooling, nearest-neighbor upsampling and skip
concatenation; every level runs two 3x3x3 same-padded convolutions with ELU,
the final convolution is linear.  Feature width at level ``l`` is
``base_features * 2**l``.

Convolutions are evaluated as one matrix product per layer (patch matrix
times reshaped kernels); gradients re-use the same machinery: the input
gradient is a convolution with channel-transposed, spatially flipped kernels,
and the kernel gradient is the patch matrix of the input against the output
gradient.  Everything runs in float32 by default and in float64 when the
parameters are built that way (used by the finite-difference checks).

Checkpoint container (little-endian):

    bytes 0..3    magic ``SVCK``
    bytes 4..7    format version (uint32) = 1
    bytes 8..15   header length H (uint64)
    bytes 16..    H bytes of UTF-8 JSON: network/config fields, iteration,
                  optimizer scalars, and an ordered parameter manifest
                  (name, shape, dtype)
    then          raw parameter blobs in manifest order, followed by the two
                  Adam moment blobs per parameter in the same order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "UNetConfig",
    "UNetParams",
    "AdamState",
    "init_unet",
    "unet_forward",
    "l1_loss",
    "backward",
    "adam_step",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"SVCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 5
    base_features: int = 24
    in_channels: int = 2
    out_channels: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_features < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("feature and channel counts must be >= 1")
        if self.kernel != 3:
            raise ValueError("only 3x3x3 kernels are supported")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def feature_widths(self) -> list[int]:
        return [self.base_features * 2 ** l for l in range(self.levels)]

    def to_dict(self) -> dict:
        return {"levels": self.levels, "base_features": self.base_features,
                "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel}

    @classmethod
    def from_dict(cls, doc: dict) -> "UNetConfig":
        return cls(**doc)


@dataclass
class UNetParams:
    """Named kernel/bias arrays in a fixed order defined by the architecture."""

    config: UNetConfig
    arrays: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.arrays.keys())

    def copy(self) -> "UNetParams":
        return UNetParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "UNetParams":
        return UNetParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})


def _conv_names(cfg: UNetConfig):
    """(name, in_ch, out_ch) for every convolution, in forward order."""
    widths = cfg.feature_widths()
    specs = []
    ch = cfg.in_channels
    for l in range(cfg.levels):
        f = widths[l]
        specs.append((f"enc{l}.conv0", ch, f))
        specs.append((f"enc{l}.conv1", f, f))
        ch = f
    for l in range(cfg.levels - 2, -1, -1):
        f = widths[l]
        specs.append((f"dec{l}.conv0", ch + f, f))
        specs.append((f"dec{l}.conv1", f, f))
        ch = f
    specs.append(("out.conv", ch, cfg.out_channels))
    return specs


def init_unet(cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32,
              final_zero: bool = True) -> UNetParams:
    """Uniform fan-in kernel init, zero biases.

    With ``final_zero`` the last layer starts at zero so the initial
    prediction is exactly the identity baseline in residual mode.
    """
    arrays: dict[str, np.ndarray] = {}
    k = cfg.kernel
    for name, cin, cout in _conv_names(cfg):
        fan_in = cin * k ** 3
        bound = float(np.sqrt(1.0 / fan_in))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k, k))
        if final_zero and name == "out.conv":
            w = np.zeros_like(w)
        arrays[name + ".w"] = w.astype(dtype)
        arrays[name + ".b"] = np.zeros(cout, dtype=dtype)
    return UNetParams(cfg, arrays)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, Cin, X, Y, Z) -> patch matrix (B*X*Y*Z, Cin*27), zero same-padding."""
    b, cin, nx, ny, nz = x.shape
    xp = np.zeros((b, cin, nx + 2, ny + 2, nz + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    # (B, Cin, X, Y, Z, 3, 3, 3) -> (B, X, Y, Z, Cin, 3, 3, 3)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return cols.reshape(b * nx * ny * nz, cin * 27)


def _conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    bt, cin, nx, ny, nz = x.shape
    cout = w.shape[0]
    cols = _im2col(x)
    y = cols @ w.reshape(cout, -1).T
    y += b
    return y.reshape(bt, nx, ny, nz, cout).transpose(0, 4, 1, 2, 3)


def _conv3d_grads(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """dx, dw, db for the same-padded stride-1 convolution."""
    bt, cin, nx, ny, nz = x.shape
    cout = w.shape[0]
    dym = dy.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
    dw = (dym.T @ _im2col(x)).reshape(w.shape)
    db = dym.sum(axis=0)
    w_flip = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    dx = _conv3d(dy, np.ascontiguousarray(w_flip), np.zeros(cin, dtype=w.dtype))
    return dx, dw, db


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(x))


def _elu_grad(x: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * np.where(x > 0, np.ones((), dtype=y.dtype), y + 1)


def _maxpool2(x: np.ndarray):
    b, c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ValueError(f"spatial dims {x.shape[2:]} not divisible by 2")
    blocks = x.reshape(b, c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        b, c, nx // 2, ny // 2, nz // 2, 8)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool2_grad(dy: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    b, c, nx, ny, nz = in_shape
    blocks = np.zeros((b, c, nx // 2, ny // 2, nz // 2, 8), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(b, c, nx // 2, ny // 2, nz // 2, 2, 2, 2)
    return blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(in_shape)


def _upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def _upsample2_grad(dy: np.ndarray) -> np.ndarray:
    b, c, nx, ny, nz = dy.shape
    return dy.reshape(b, c, nx // 2, 2, ny // 2, 2, nz // 2, 2).sum(axis=(3, 5, 7))


def _check_input(cfg: UNetConfig, x: np.ndarray) -> None:
    if x.ndim != 5:
        raise ValueError(f"input must be (batch, channels, x, y, z), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    d = cfg.divisor
    if any(s % d for s in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {d}")


def _forward_graph(params: UNetParams, x: np.ndarray, keep: bool):
    """Run the network; with ``keep`` return the per-op tape for the backward pass."""
    cfg = params.config
    _check_input(cfg, x)
    a = params.arrays
    tape = [] if keep else None

    def conv_elu(name, h):
        pre = _conv3d(h, a[name + ".w"], a[name + ".b"])
        act = _elu(pre)
        if keep:
            tape.append(("conv_elu", name, h, pre, act))
        return act

    skips = []
    h = x
    for l in range(cfg.levels):
        h = conv_elu(f"enc{l}.conv0", h)
        h = conv_elu(f"enc{l}.conv1", h)
        if l < cfg.levels - 1:
            skips.append(h)
            h, idx = _maxpool2(h)
            if keep:
                tape.append(("pool", idx, (h.shape, skips[-1].shape)))
    for l in range(cfg.levels - 2, -1, -1):
        h = _upsample2(h)
        skip = skips.pop()
        if keep:
            tape.append(("up_concat", skip.shape[1]))
        h = np.concatenate([skip, h], axis=1)
        h = conv_elu(f"dec{l}.conv0", h)
        h = conv_elu(f"dec{l}.conv1", h)
    pre = _conv3d(h, a["out.conv.w"], a["out.conv.b"])
    if keep:
        tape.append(("conv_linear", "out.conv", h, pre))
    return pre, tape


def unet_forward(params: UNetParams, x: np.ndarray) -> np.ndarray:
    """Network output with the same spatial dims as the input."""
    y, _ = _forward_graph(params, x, keep=False)
    return y


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred.astype(np.float64) - target.astype(np.float64))))


def backward(params: UNetParams, x: np.ndarray, target: np.ndarray):
    """(loss, gradients) of mean-|error| through the network.

    The subgradient of |r| at r = 0 is taken as 0.
    """
    pred, tape = _forward_graph(params, x, keep=True)
    if pred.shape != target.shape:
        raise ValueError(f"target shape {target.shape} != prediction {pred.shape}")
    resid = pred - target
    loss = float(np.mean(np.abs(resid.astype(np.float64))))
    grads = {k: None for k in params.arrays}
    dy = (np.sign(resid) / resid.size).astype(pred.dtype)
    skip_grads: list[np.ndarray] = []

    entry = tape.pop()
    kind, name, h_in, _ = entry
    dx, dw, db = _conv3d_grads(h_in, params.arrays[name + ".w"], dy)
    grads[name + ".w"] = dw
    grads[name + ".b"] = db
    dy = dx

    while tape:
        entry = tape.pop()
        kind = entry[0]
        if kind == "conv_elu":
            _, name, h_in, pre, act = entry
            dpre = _elu_grad(pre, act, dy)
            dx, dw, db = _conv3d_grads(h_in, params.arrays[name + ".w"], dpre)
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
            dy = dx
        elif kind == "up_concat":
            _, skip_ch = entry
            # gradient splits between the stored skip and the upsampled path;
            # reverse traversal pairs each split with its pool LIFO-style
            skip_grads.append(dy[:, :skip_ch])
            dy = _upsample2_grad(dy[:, skip_ch:])
        elif kind == "pool":
            _, idx, (_out_shape, in_shape) = entry
            dy = _maxpool2_grad(dy, idx, in_shape)
            dy = dy + skip_grads.pop()
        else:  # pragma: no cover - guarded by construction
            raise RuntimeError(f"unknown tape entry {kind}")
    return loss, grads


@dataclass
class AdamState:
    """First/second moment accumulators and the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: UNetParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
            t=0,
        )


def adam_step(params: UNetParams, grads: dict, state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> UNetParams:
    """Standard bias-corrected Adam update; returns updated parameters."""
    state.t += 1
    t = state.t
    out = {}
    for k, p in params.arrays.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        m_hat = state.m[k] / (1.0 - beta1 ** t)
        v_hat = state.v[k] / (1.0 - beta2 ** t)
        out[k] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return UNetParams(params.config, out)


def _sample_to_batch(sample):
    x = sample.stacked_inputs()[None].astype(np.float32)
    y = sample.target.data[None, None].astype(np.float32)
    return x, y


def train(params: UNetParams, samples, iterations: int, lr: float = 1e-4,
          state: AdamState | None = None, start_iteration: int = 0,
          checkpoint_dir=None, checkpoint_every: int = 0,
          on_iteration=None):
    """Single-optimizer training loop over a sample stream.

    Returns ``(params, losses, state)`` with one loss entry per iteration.
    Writes ``checkpoint_<iter>.svck`` at the configured cadence when
    ``checkpoint_dir`` is given.  Aborts on a non-finite loss.
    """
    if state is None:
        state = AdamState.for_params(params)
    losses: list[float] = []
    it = start_iteration
    sample_iter = iter(samples)
    for _ in range(iterations):
        sample = next(sample_iter)
        x, y = _sample_to_batch(sample)
        loss, grads = backward(params, x, y)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss {loss} at iteration {it} (sample {sample.meta.get('index')})"
            )
        params = adam_step(params, grads, state, lr=lr)
        losses.append(loss)
        it += 1
        if on_iteration is not None:
            on_iteration(it, loss)
        if checkpoint_dir is not None and checkpoint_every > 0 and it % checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{it:06d}.svck",
                            params, state, it)
    return params, losses, state


def predict(params: UNetParams, us, vs, mode: str = "sr",
            c_star: int | None = None):
    """Network inference on normalized inputs; returns the output volume.

    In residual modes the predicted residual is added back onto the relevant
    input channel.  Spatial dims are zero-padded up to the divisibility
    requirement and cropped back afterwards.
    """
    us = list(us)
    vs = list(vs)
    if 2 * len(us) != params.config.in_channels or len(us) != len(vs):
        raise ValueError(
            f"checkpoint expects {params.config.in_channels // 2} channels, got {len(us)}"
        )
    layers = []
    for u, v in zip(us, vs):
        layers.append(u.data)
        layers.append(v.data)
    x = np.stack(layers, axis=0)[None].astype(np.float32)
    dims = x.shape[2:]
    d = params.config.divisor
    padded = tuple(int(np.ceil(s / d) * d) for s in dims)
    if padded != dims:
        xp = np.zeros(x.shape[:2] + padded, dtype=x.dtype)
        xp[:, :, :dims[0], :dims[1], :dims[2]] = x
        x = xp
    y = unet_forward(params, x)[0, 0, :dims[0], :dims[1], :dims[2]]
    ref = us[0]
    if mode == "sr":
        out = ref.data + y
    elif mode == "sr_synth" and c_star is not None:
        out = us[c_star].data + y
    else:
        out = y
    return ref.with_data(out.astype(np.float32))


def save_checkpoint(path, params: UNetParams, state: AdamState, iteration: int,
                    extra: dict | None = None) -> None:
    """Write the documented binary container (config JSON + raw LE blobs)."""
    manifest = [
        {"name": k, "shape": list(v.shape), "dtype": "float32"}
        for k, v in params.arrays.items()
    ]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "unet": params.config.to_dict(),
        "iteration": iteration,
        "adam_t": state.t,
        "params": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for k in params.arrays:
            f.write(np.ascontiguousarray(params.arrays[k], dtype="<f4").tobytes())
        for k in params.arrays:
            f.write(np.ascontiguousarray(state.m[k], dtype="<f4").tobytes())
        for k in params.arrays:
            f.write(np.ascontiguousarray(state.v[k], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, state, iteration, extra)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    cfg = UNetConfig.from_dict(header["unet"])
    offset = 16 + hlen
    arrays = {}

    def read_block(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        return arr.astype(np.float32).reshape(shape)

    for entry in header["params"]:
        arrays[entry["name"]] = read_block(entry["shape"])
    params = UNetParams(cfg, arrays)
    state = AdamState.for_params(params)
    for entry in header["params"]:
        state.m[entry["name"]] = read_block(entry["shape"])
    for entry in header["params"]:
        state.v[entry["name"]] = read_block(entry["shape"])
    state.t = int(header["adam_t"])
    return params, state, int(header["iteration"]), header.get("extra", {})
