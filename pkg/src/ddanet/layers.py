"""Neural building blocks: conv, transpose conv, batch norm, pooling,
residual blocks, and squeeze-and-excitation channel attention.

All layers are pure functions of (input, parameters) except batch norm in
train mode, which updates the running statistics stored on its state object.
Convolution is cross-correlation (no kernel flip). Internals accumulate in
NHWC so the inner loops hit BLAS matmuls, with a single layout conversion at
each edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, linear, record_op, reduce_mean, relu, reshape, sigmoid


@dataclass
class ConvSpec:
    """Convolution hyperparameters plus weight (out, in, kh, kw) and bias (out,)."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        expected_w = (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        if self.weight.shape != expected_w:
            raise ValueError(f"weight shape {self.weight.shape} != {expected_w}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.out_channels},)")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class SEParams:
    """Two-layer squeeze-and-excitation bottleneck: C -> C/r -> C."""

    channels: int
    ratio: int
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def __post_init__(self):
        if self.channels % self.ratio != 0:
            raise ValueError(f"ratio {self.ratio} must divide channels {self.channels}")
        squeezed = self.channels // self.ratio
        if self.fc1_w.shape != (squeezed, self.channels) or self.fc2_w.shape != (self.channels, squeezed):
            raise ValueError("SE weight shapes inconsistent with channels/ratio")


@dataclass
class ResidualBlockParams:
    """Two 3x3 conv+BN stages with an identity or projected shortcut.

    The 1x1 projection is present exactly when in/out channel counts differ.
    """

    conv1: ConvSpec
    conv2: ConvSpec
    bn1: BatchNormState
    bn2: BatchNormState
    shortcut_conv: ConvSpec | None = None
    shortcut_bn: BatchNormState | None = None

    def __post_init__(self):
        if not (self.conv1.out_channels == self.conv2.in_channels == self.conv2.out_channels):
            raise ValueError("conv1/conv2 channel counts inconsistent")
        needs_projection = self.conv1.in_channels != self.conv2.out_channels
        if needs_projection != (self.shortcut_conv is not None):
            raise ValueError("shortcut projection must be present exactly when channel counts differ")


# ---------------------------------------------------------------------------
# convolution core (NHWC accumulation, one matmul per kernel position)
# ---------------------------------------------------------------------------


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"kernel {kernel}/stride {stride}/padding {padding} does not tile input size {size}"
        )
    return span // stride + 1


def _pad_nhwc(x: np.ndarray, padding: int) -> np.ndarray:
    xt = x.transpose(0, 2, 3, 1)
    if padding == 0:
        return np.ascontiguousarray(xt)
    return np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _conv2d_data(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Plain cross-correlation, x (N,I,H,W) with w (O,I,kh,kw) -> (N,O,H',W')."""
    n, _, h, wi = x.shape
    o, _, kh, kw = w.shape
    h_out = _conv_out_size(h, kh, stride, padding)
    w_out = _conv_out_size(wi, kw, stride, padding)
    xt = _pad_nhwc(x, padding)
    acc = np.zeros((n, h_out, w_out, o), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = xt[:, ki : ki + stride * (h_out - 1) + 1 : stride,
                    kj : kj + stride * (w_out - 1) + 1 : stride, :]
            acc += xs @ w[:, :, ki, kj].T
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _conv2d_grad_input(gy: np.ndarray, w: np.ndarray, stride: int, padding: int,
                       in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_conv2d_data` in its input argument."""
    n = gy.shape[0]
    _, i, kh, kw = w.shape
    h_in, w_in = in_hw
    h_out, w_out = gy.shape[2], gy.shape[3]
    gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))
    acc = np.zeros((n, h_in + 2 * padding, w_in + 2 * padding, i), dtype=gy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            acc[:, ki : ki + stride * (h_out - 1) + 1 : stride,
                kj : kj + stride * (w_out - 1) + 1 : stride, :] += gyt @ w[:, :, ki, kj]
    if padding:
        acc = acc[:, padding:-padding, padding:-padding, :]
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _conv2d_grad_weight(x: np.ndarray, gy: np.ndarray, stride: int, padding: int,
                        kernel_hw: tuple[int, int]) -> np.ndarray:
    kh, kw = kernel_hw
    h_out, w_out = gy.shape[2], gy.shape[3]
    xt = _pad_nhwc(x, padding)
    gw = np.empty((gy.shape[1], x.shape[1], kh, kw), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = xt[:, ki : ki + stride * (h_out - 1) + 1 : stride,
                    kj : kj + stride * (w_out - 1) + 1 : stride, :]
            gw[:, :, ki, kj] = np.tensordot(gy, xs, axes=((0, 2, 3), (0, 1, 2)))
    return gw


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded cross-correlation, differentiable in input, weight, and bias."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    y = _conv2d_data(x.data, spec.weight.data, spec.stride, spec.padding)
    y += spec.bias.data[None, :, None, None]
    x_data, w_data = x.data, spec.weight.data
    stride, padding = spec.stride, spec.padding
    in_hw = x.shape[2:]
    kernel_hw = (spec.kernel_h, spec.kernel_w)

    def backward(gy):
        gx = _conv2d_grad_input(gy, w_data, stride, padding, in_hw)
        gw = _conv2d_grad_weight(x_data, gy, stride, padding, kernel_hw)
        return gx, gw, gy.sum(axis=(0, 2, 3))

    return record_op("conv2d", y, (x, spec.weight, spec.bias), backward)


def conv_transpose2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Transposed convolution: the adjoint of conv2d with shared coefficients.

    Output spatial size is (H-1)*stride - 2*padding + kernel; kernel 4 with
    stride 2 and padding 1 exactly doubles H and W.
    """
    if x.ndim != 4:
        raise ValueError(f"conv_transpose2d expects a rank-4 input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    h_out = (x.shape[2] - 1) * spec.stride - 2 * spec.padding + spec.kernel_h
    w_out = (x.shape[3] - 1) * spec.stride - 2 * spec.padding + spec.kernel_w
    if h_out < 1 or w_out < 1:
        raise ValueError(f"degenerate output size {h_out}x{w_out}")
    # The paired forward conv maps out_channels -> in_channels with the same
    # coefficients viewed as (in, out, kh, kw).
    w_conv = spec.weight.data.transpose(1, 0, 2, 3)
    y = _conv2d_grad_input(x.data, w_conv, spec.stride, spec.padding, (h_out, w_out))
    y += spec.bias.data[None, :, None, None]
    x_data = x.data
    stride, padding = spec.stride, spec.padding
    kernel_hw = (spec.kernel_h, spec.kernel_w)

    def backward(gy):
        gx = _conv2d_data(gy, w_conv, stride, padding)
        gw = _conv2d_grad_weight(gy, x_data, stride, padding, kernel_hw)
        return gx, gw.transpose(1, 0, 2, 3), gy.sum(axis=(0, 2, 3))

    return record_op("conv_transpose2d", y, (x, spec.weight, spec.bias), backward)


# ---------------------------------------------------------------------------
# normalization and pooling
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses biased batch statistics and updates the running stats with
    momentum; eval mode is a pure function of the running stats.
    """
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise ValueError(f"input shape {x.shape} incompatible with {state.gamma.shape[0]} channels")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    gamma, beta = state.gamma, state.beta
    eps = state.eps

    if mode == "train":
        n, _, h, w = x.shape
        m = n * h * w
        if m < 2:
            raise ValueError("batch norm needs at least 2 values per channel in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        mom = state.momentum
        state.running_mean[...] = (1.0 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1.0 - mom) * state.running_var + mom * var
        gamma_data = gamma.data

        def backward(gy):
            dbeta = gy.sum(axis=(0, 2, 3))
            dgamma = (gy * xhat).sum(axis=(0, 2, 3))
            gi = (gamma_data * inv / m)[None, :, None, None]
            dx = gi * (m * gy - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
            return dx, dgamma, dbeta

        return record_op("batchnorm_train", y, (x, gamma, beta), backward)

    rinv = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (x.data - state.running_mean[None, :, None, None]) * rinv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    gamma_data = gamma.data

    def backward(gy):
        dbeta = gy.sum(axis=(0, 2, 3))
        dgamma = (gy * xhat).sum(axis=(0, 2, 3))
        dx = gy * (gamma_data * rinv)[None, :, None, None]
        return dx, dgamma, dbeta

    return record_op("batchnorm_eval", y, (x, gamma, beta), backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first max per window."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects a rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial size {h}x{w} must be even")
    h2, w2 = h // 2, w // 2
    # windows flattened in row-major scan order: argmax picks the first tie
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(gy):
        g = np.zeros_like(win)
        np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
        gx = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record_op("maxpool2d", out, (x,), backward)


# ---------------------------------------------------------------------------
# composite blocks
# ---------------------------------------------------------------------------


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of x (N,C,H,W) by its scalar from s (N,C)."""
    if s.shape != x.shape[:2]:
        raise ValueError(f"scale shape {s.shape} incompatible with input {x.shape}")
    out = x.data * s.data[:, :, None, None]
    x_data, s_data = x.data, s.data

    def backward(gy):
        gx = gy * s_data[:, :, None, None]
        gs = (gy * x_data).sum(axis=(2, 3))
        return gx, gs

    return record_op("scale_channels", out, (x, s), backward)


def se_block(x: Tensor, p: SEParams) -> Tensor:
    """Channel attention: global average pool, bottleneck MLP, sigmoid scaling.

    Scale factors lie strictly in (0, 1), so no channel's magnitude grows.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ValueError(f"input shape {x.shape} incompatible with {p.channels} channels")
    pooled = reshape(reduce_mean(x, axes=(2, 3)), (x.shape[0], p.channels))
    hidden = relu(linear(pooled, p.fc1_w, p.fc1_b))
    scale = sigmoid(linear(hidden, p.fc2_w, p.fc2_b))
    return scale_channels(x, scale)


def residual_block(x: Tensor, p: ResidualBlockParams, mode: str) -> Tensor:
    """ReLU( BN2(Conv2(ReLU(BN1(Conv1(x))))) + shortcut(x) )."""
    y = relu(batchnorm2d(conv2d(x, p.conv1), p.bn1, mode))
    y = batchnorm2d(conv2d(y, p.conv2), p.bn2, mode)
    if p.shortcut_conv is not None:
        shortcut = batchnorm2d(conv2d(x, p.shortcut_conv), p.shortcut_bn, mode)
    else:
        shortcut = x
    return relu(y + shortcut)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    """Fan-in-scaled uniform init with ReLU gain: U(-sqrt(6/fan_in), +)."""
    bound = float(np.sqrt(6.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def make_conv(rng: np.random.Generator, in_channels: int, out_channels: int,
              kernel: int, stride: int, padding: int, dtype=np.float32) -> ConvSpec:
    weight = kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel),
                             in_channels * kernel * kernel, dtype)
    bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
    return ConvSpec(in_channels, out_channels, kernel, kernel, stride, padding, weight, bias)


def make_batchnorm(channels: int, dtype=np.float32) -> BatchNormState:
    return BatchNormState(
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def make_se(rng: np.random.Generator, channels: int, ratio: int, dtype=np.float32) -> SEParams:
    squeezed = channels // ratio
    if squeezed < 1 or channels % ratio != 0:
        raise ValueError(f"ratio {ratio} must divide channels {channels}")
    return SEParams(
        channels=channels,
        ratio=ratio,
        fc1_w=kaiming_uniform(rng, (squeezed, channels), channels, dtype),
        fc1_b=Tensor(np.zeros(squeezed, dtype=dtype), requires_grad=True),
        fc2_w=kaiming_uniform(rng, (channels, squeezed), squeezed, dtype),
        fc2_b=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
    )


def make_residual(rng: np.random.Generator, in_channels: int, out_channels: int,
                  dtype=np.float32) -> ResidualBlockParams:
    conv1 = make_conv(rng, in_channels, out_channels, 3, 1, 1, dtype)
    conv2 = make_conv(rng, out_channels, out_channels, 3, 1, 1, dtype)
    shortcut_conv = shortcut_bn = None
    if in_channels != out_channels:
        shortcut_conv = make_conv(rng, in_channels, out_channels, 1, 1, 0, dtype)
        shortcut_bn = make_batchnorm(out_channels, dtype)
    return ResidualBlockParams(
        conv1=conv1,
        conv2=conv2,
        bn1=make_batchnorm(out_channels, dtype),
        bn2=make_batchnorm(out_channels, dtype),
        shortcut_conv=shortcut_conv,
        shortcut_bn=shortcut_bn,
    )
