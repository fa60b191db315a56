"""Neural layers and the two temporal-convolution branches.

All layer inputs are batched feature sequences shaped (batch, time, features).
Branches follow the fixed two-stage, two-blocks-per-stage layout: the vision
branch keeps its temporal length (convs use "same" padding) with channels
64-64-128-128; the audio branch appends a k=2 max-pool to every block, so a
64-step input shrinks to 16 steps after stage 1 and 4 after stage 2, with
channels 64-128-256-128.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    _record,
    _accumulate,
    _wrap,
    add,
    mean,
    mul,
    relu,
    standardize_op,
)

VISION_CHANNELS = [[64, 64], [128, 128]]
AUDIO_CHANNELS = [[64, 128], [256, 128]]


def he_init(shape, fan_in: int, seed_or_rng) -> Tensor:
    """Gaussian init with std sqrt(2/fan_in); deterministic under the seed."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(seed_or_rng)
    data = rng.gaussian(tuple(shape)) * np.sqrt(2.0 / fan_in)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# functional ops


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 1) -> Tensor:
    """Temporal convolution of (B, N, C_in) with kernels (C_out, C_in, k).

    Output length is floor((N + 2p - k)/s) + 1. The backward pass scatters
    window gradients back per kernel offset, which keeps the routing exact
    for any stride.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be (batch, time, features), got {x.shape}")
    c_out, c_in, k = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d input has {x.shape[-1]} features, kernel expects {c_in}")
    n = x.shape[1]
    length = (n + 2 * padding - k) // stride + 1
    if length < 1:
        raise ShapeError(f"conv1d output would be empty for input length {n}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]
    # windows: (B, L, C_in, k); flatten to one matmul against (C_out, C_in*k)
    bsz = x.shape[0]
    wmat = w.data.reshape(c_out, c_in * k)
    flat = windows.reshape(bsz * length, c_in * k)
    out_data = (flat @ wmat.T).reshape(bsz, length, c_out)
    if b is not None:
        out_data = out_data + b.data
    out = _wrap(out_data)

    inputs = (x, w) if b is None else (x, w, b)

    def backward_fn(g):
        g2 = g.reshape(bsz * length, c_out)
        _accumulate(w, (g2.T @ flat).reshape(c_out, c_in, k))
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gwin = (g2 @ wmat).reshape(bsz, length, c_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + stride * length:stride] += gwin[:, :, :, j]
            gx = gxp[:, padding:padding + n] if padding else gxp
            _accumulate(x, gx)

    return _record(out, inputs, backward_fn)


def max_pool1d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping temporal max-pool; a trailing partial window is dropped.

    Backward routes the gradient to the argmax of each window (first index
    on ties), so the routed gradient per window sums to the incoming one.
    """
    if x.ndim != 3:
        raise ShapeError(f"max_pool1d input must be (batch, time, features), got {x.shape}")
    n = x.shape[1]
    if n < k:
        raise ShapeError(f"max_pool1d needs at least {k} timesteps, got {n}")
    length = n // k
    windows = x.data[:, :length * k].reshape(x.shape[0], length, k, x.shape[2])
    idx = windows.argmax(axis=2)
    out = _wrap(windows.max(axis=2))

    def backward_fn(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, :length * k] = gw.reshape(x.shape[0], length * k, x.shape[2])
        _accumulate(x, gx)

    return _record(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the temporal axis: (B, N, d) -> (B, d)."""
    return mean(x, axes=(1,))


# ---------------------------------------------------------------------------
# parameterized layers


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = True):
        self.w = he_init((in_dim, out_dim), fan_in=in_dim, seed_or_rng=rng)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return add(out, self.b) if self.b is not None else out

    def params(self, prefix: str) -> dict[str, Tensor]:
        named = {f"{prefix}.w": self.w}
        if self.b is not None:
            named[f"{prefix}.b"] = self.b
        return named


class Conv1d:
    def __init__(self, in_ch: int, out_ch: int, rng: Rng, kernel: int = 3,
                 stride: int = 1, padding: int = 1, bias: bool = False):
        if kernel < 1 or stride < 1 or padding < 0:
            raise ValueError(f"bad conv spec k={kernel} s={stride} p={padding}")
        self.stride = stride
        self.padding = padding
        self.w = he_init((out_ch, in_ch, kernel), fan_in=in_ch * kernel, seed_or_rng=rng)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b, self.stride, self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        named = {f"{prefix}.w": self.w}
        if self.b is not None:
            named[f"{prefix}.b"] = self.b
        return named


class BatchNorm1d:
    """Per-channel batch normalization over (batch, time).

    Train mode normalizes with batch statistics (gradient flows through
    them) and updates running statistics; eval mode is a fixed affine map
    from the running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            xhat = standardize_op(x, axes=(0, 1), eps=self.eps)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * x.data.mean(axis=(0, 1))
            self.running_var = (1 - m) * self.running_var + m * x.data.var(axis=(0, 1))
        else:
            istd = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = mul(add(x, Tensor(-self.running_mean)), Tensor(istd))
        return add(mul(xhat, self.gamma), self.beta)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}

    def load_buffers(self, prefix: str, arrays: dict[str, np.ndarray]):
        self.running_mean = arrays[f"{prefix}.running_mean"].copy()
        self.running_var = arrays[f"{prefix}.running_var"].copy()


class LayerNorm:
    """Per-timestep normalization over the feature axis, then affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        xhat = standardize_op(x, axes=(-1,), eps=self.eps)
        return add(mul(xhat, self.gamma), self.beta)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


# ---------------------------------------------------------------------------
# branches


@dataclass
class BranchConfig:
    """Channel plan for one modality branch: two stages, two conv blocks each."""

    in_dim: int
    stage_channels: list = field(default_factory=lambda: [list(s) for s in VISION_CHANNELS])
    pool_after_block: bool = False
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    use_bn: bool = True
    conv_bias: bool = False

    def __post_init__(self):
        if len(self.stage_channels) != 2 or any(len(s) != 2 for s in self.stage_channels):
            raise ValueError(f"branch needs 2 stages of 2 blocks, got {self.stage_channels}")


def vision_branch_config(in_dim: int = 35, widths: list | None = None) -> BranchConfig:
    return BranchConfig(in_dim, [list(s) for s in (widths or VISION_CHANNELS)],
                        pool_after_block=False)


def audio_branch_config(in_dim: int = 74, widths: list | None = None) -> BranchConfig:
    return BranchConfig(in_dim, [list(s) for s in (widths or AUDIO_CHANNELS)],
                        pool_after_block=True)


class ConvBlock:
    """Conv1D + BN1D + ReLU, optionally followed by a k=2 max-pool."""

    def __init__(self, in_ch: int, out_ch: int, cfg: BranchConfig, rng: Rng, pooled: bool):
        self.conv = Conv1d(in_ch, out_ch, rng.split("conv"), cfg.kernel, cfg.stride,
                           cfg.padding, bias=cfg.conv_bias)
        self.bn = BatchNorm1d(out_ch) if cfg.use_bn else None
        self.pooled = pooled

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h, training)
        h = relu(h)
        if self.pooled:
            h = max_pool1d(h, 2)
        return h

    def params(self, prefix: str) -> dict[str, Tensor]:
        named = self.conv.params(f"{prefix}.conv")
        if self.bn is not None:
            named.update(self.bn.params(f"{prefix}.bn"))
        return named

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return self.bn.buffers(f"{prefix}.bn") if self.bn is not None else {}

    def load_buffers(self, prefix: str, arrays: dict[str, np.ndarray]):
        if self.bn is not None:
            self.bn.load_buffers(f"{prefix}.bn", arrays)


class Branch:
    """One modality branch: stage 1 feeds intermediate fusion, stage 2 the head."""

    def __init__(self, cfg: BranchConfig, rng: Rng):
        self.cfg = cfg
        self.blocks: list[list[ConvBlock]] = []
        in_ch = cfg.in_dim
        for si, stage in enumerate(cfg.stage_channels):
            row = []
            for bi, out_ch in enumerate(stage):
                row.append(ConvBlock(in_ch, out_ch, cfg, rng.split(f"s{si}b{bi}"),
                                     pooled=cfg.pool_after_block))
                in_ch = out_ch
            self.blocks.append(row)
        self.out_channels = [stage[-1] for stage in cfg.stage_channels]

    def stage1(self, x: Tensor, training: bool = False) -> Tensor:
        for block in self.blocks[0]:
            x = block(x, training)
        return x

    def stage2(self, h: Tensor, training: bool = False) -> Tensor:
        for block in self.blocks[1]:
            h = block(h, training)
        return h

    def __call__(self, x: Tensor, training: bool = False, stage: str = "both") -> Tensor:
        if stage not in ("1", "2", "both"):
            raise ValueError(f"stage must be '1', '2' or 'both', got {stage!r}")
        if stage == "2":
            return self.stage2(x, training)
        h = self.stage1(x, training)
        return h if stage == "1" else self.stage2(h, training)

    def params(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for si, row in enumerate(self.blocks):
            for bi, block in enumerate(row):
                named.update(block.params(f"{prefix}.s{si}b{bi}"))
        return named

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        named = {}
        for si, row in enumerate(self.blocks):
            for bi, block in enumerate(row):
                named.update(block.buffers(f"{prefix}.s{si}b{bi}"))
        return named

    def load_buffers(self, prefix: str, arrays: dict[str, np.ndarray]):
        for si, row in enumerate(self.blocks):
            for bi, block in enumerate(row):
                block.load_buffers(f"{prefix}.s{si}b{bi}", arrays)
