"""Spatial primitives and their adjoints.

All array arguments are ``(C, H, W)`` or batched ``(B, C, H, W)``; outputs
keep the caller's layout and dtype.  Products are accumulated in float64
regardless of the input dtype, then cast back.

"Convolution" here is cross-correlation (no kernel flip), as in every deep
learning framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch
from .tensor import PlanarImage


def output_extent(size: int, window: int, stride: int, padding: int) -> int:
    """``floor((size + 2*padding - window) / stride) + 1``; must be positive."""
    if stride < 1 or padding < 0 or window < 1:
        raise ShapeMismatch(f"invalid window={window} stride={stride} padding={padding}")
    span = size + 2 * padding - window
    if span < 0:
        raise ShapeMismatch(f"window {window} larger than padded extent {size + 2 * padding}")
    return span // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    in_channels: int | None = None
    out_channels: int | None = None

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (output_extent(h, self.kernel_h, self.stride, self.padding),
                output_extent(w, self.kernel_w, self.stride, self.padding))


@dataclass(frozen=True)
class PoolSpec:
    window: int
    stride: int
    padding: int = 0
    # rectangular windows are only needed for the global pool over a
    # band-concatenated (M x 3N) map
    window_w: int | None = None
    stride_w: int | None = None

    @property
    def wh(self) -> int:
        return self.window

    @property
    def ww(self) -> int:
        return self.window if self.window_w is None else self.window_w

    @property
    def sw(self) -> int:
        return self.stride if self.stride_w is None else self.stride_w

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (output_extent(h, self.wh, self.stride, self.padding),
                output_extent(w, self.ww, self.sw, self.padding))


@dataclass
class BnState:
    """Per-channel batch-norm parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, eps: float = 1e-5, momentum: float = 0.9) -> "BnState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), eps, momentum)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be nonnegative")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")


def _unbatch(y: np.ndarray, squeeze: bool) -> np.ndarray:
    return y[0] if squeeze else y


def _conv_params(spec, stride, padding):
    if spec is not None:
        return spec.stride, spec.padding
    return stride, padding


# ------------------------------------------------------------ convolution

_CHUNK = 4_000_000  # float64 elements per im2col block


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Channel-last padded copy of ``x`` and its strided window view ``(B,Ho,Wo,kh,kw,J)``."""
    b, j, h, wd = x.shape
    ho = output_extent(h, kh, stride, padding)
    wo = output_extent(wd, kw, stride, padding)
    xp = np.zeros((b, h + 2 * padding, wd + 2 * padding, j))
    xp[:, padding:padding + h, padding:padding + wd] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride].transpose(0, 1, 2, 4, 5, 3)
    return xp, win, ho, wo


def _step(b: int, per_sample: int) -> int:
    return max(1, min(b, _CHUNK // max(per_sample, 1)))


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Core multi-channel cross-correlation on float64 ``(B,J,H,W)``.

    im2col over blocks of the batch, one float64 GEMM per block.
    """
    b, j = x.shape[:2]
    k, _, kh, kw = w.shape
    _, win, ho, wo = _windows(x, kh, kw, stride, padding)
    wm = w.transpose(2, 3, 1, 0).reshape(kh * kw * j, k)
    out = np.empty((b, ho, wo, k))
    step = _step(b, ho * wo * kh * kw * j)
    for s in range(0, b, step):
        cols = win[s:s + step].reshape(-1, kh * kw * j)
        out[s:s + step] = (cols @ wm).reshape(-1, ho, wo, k)
    return out.transpose(0, 3, 1, 2)


def _correlate_adjoint(x: np.ndarray, w: np.ndarray, dout: np.ndarray, stride: int, padding: int,
                       need_dx: bool = True):
    b, j, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp, win, ho, wo = _windows(x, kh, kw, stride, padding)
    d = dout.transpose(0, 2, 3, 1)
    dwm = np.zeros((k, kh * kw * j))
    step = _step(b, ho * wo * kh * kw * j)
    for s in range(0, b, step):
        ds = d[s:s + step].reshape(-1, k)
        dwm += ds.T @ win[s:s + step].reshape(-1, kh * kw * j)
    dw = dwm.reshape(k, kh, kw, j).transpose(0, 3, 1, 2)
    if not need_dx:
        return None, dw
    # Input gradient: full correlation of the zero-dilated output gradient
    # with the flipped, channel-swapped kernels.
    dil = np.zeros((b, k, stride * (ho - 1) + 2 * kh - 1, stride * (wo - 1) + 2 * kw - 1))
    dil[:, :, kh - 1:kh - 1 + stride * (ho - 1) + 1:stride, kw - 1:kw - 1 + stride * (wo - 1) + 1:stride] = dout
    full = _correlate(dil, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), 1, 0)
    hp, wp = xp.shape[1:3]
    dxp = np.zeros((b, j, hp, wp))
    fh, fw = min(full.shape[2], hp), min(full.shape[3], wp)
    dxp[:, :, :fh, :fw] = full[:, :, :fh, :fw]
    return dxp[:, :, padding:padding + h, padding:padding + wd], dw


def conv2d_normal(x, weights, bias=None, spec: ConvSpec | None = None, *, stride: int = 1, padding: int = 0):
    """Normal convolution: output channel k sums input channel j correlated with ``weights[k, j]``."""
    xb, squeeze = _batched(x)
    weights = np.asarray(weights)
    stride, padding = _conv_params(spec, stride, padding)
    if weights.ndim != 4 or weights.shape[1] != xb.shape[1]:
        raise ShapeMismatch(f"weights {weights.shape} do not match {xb.shape[1]} input channels")
    if bias is not None and np.shape(bias) != (weights.shape[0],):
        raise ShapeMismatch(f"bias shape {np.shape(bias)} != ({weights.shape[0]},)")
    out = _correlate(xb.astype(np.float64), weights.astype(np.float64), stride, padding)
    if bias is not None:
        out += np.asarray(bias, np.float64)[None, :, None, None]
    return _unbatch(out.astype(np.result_type(xb.dtype, weights.dtype, np.float32)), squeeze)


def conv2d_normal_backward(x, weights, dout, spec: ConvSpec | None = None, *, stride: int = 1, padding: int = 0,
                           need_dx: bool = True):
    """Return ``(dx, dweights, dbias)`` for :func:`conv2d_normal`; ``dx`` is None when not needed."""
    xb, squeeze = _batched(x)
    db_, _ = _batched(dout)
    stride, padding = _conv_params(spec, stride, padding)
    dx, dw = _correlate_adjoint(xb.astype(np.float64), np.asarray(weights, np.float64),
                                db_.astype(np.float64), stride, padding, need_dx)
    dbias = db_.sum(axis=(0, 2, 3), dtype=np.float64)
    dt = np.result_type(xb.dtype, np.float32)
    dx = None if dx is None else _unbatch(dx.astype(dt), squeeze)
    return dx, dw.astype(np.asarray(weights).dtype), dbias.astype(dt)


def conv2d_channelwise(x, weights, spec: ConvSpec | None = None, *, stride: int = 1, padding: int = 0):
    """Channel-wise convolution.

    ``weights`` has shape ``(J, K, kh, kw)``.  Input channel j produces output
    channels ``j*K .. j*K+K-1`` (zero-based), with no summation across j.
    """
    xb, squeeze = _batched(x)
    weights = np.asarray(weights)
    stride, padding = _conv_params(spec, stride, padding)
    if weights.ndim != 4 or weights.shape[0] != xb.shape[1]:
        raise ShapeMismatch(f"weights {weights.shape} do not match {xb.shape[1]} input channels")
    x64 = xb.astype(np.float64)
    w64 = weights.astype(np.float64)
    # Each band goes through the same routine as a one-channel normal
    # convolution so the J=1 case is bit-identical to conv2d_normal.
    parts = [_correlate(x64[:, j:j + 1], w64[j][:, None], stride, padding) for j in range(xb.shape[1])]
    out = np.concatenate(parts, axis=1)
    return _unbatch(out.astype(np.result_type(xb.dtype, weights.dtype, np.float32)), squeeze)


def conv2d_channelwise_backward(x, weights, dout, spec: ConvSpec | None = None, *, stride: int = 1, padding: int = 0,
                                need_dx: bool = True):
    """Return ``(dx, dweights)`` for :func:`conv2d_channelwise`; ``dx`` is None when not needed."""
    xb, squeeze = _batched(x)
    db_, _ = _batched(dout)
    stride, padding = _conv_params(spec, stride, padding)
    jn, k = np.shape(weights)[:2]
    x64 = xb.astype(np.float64)
    w64 = np.asarray(weights, np.float64)
    d64 = db_.astype(np.float64)
    dx = np.empty_like(x64)
    dw = np.empty_like(w64)
    for j in range(jn):
        dxj, dwj = _correlate_adjoint(x64[:, j:j + 1], w64[j][:, None], d64[:, j * k:(j + 1) * k],
                                      stride, padding, need_dx)
        if need_dx:
            dx[:, j:j + 1] = dxj
        dw[j] = dwj[:, 0]
    dx = _unbatch(dx.astype(np.result_type(xb.dtype, np.float32)), squeeze) if need_dx else None
    return dx, dw.astype(np.asarray(weights).dtype)


# ------------------------------------------------------- band arrangement

def _band_array(img) -> np.ndarray:
    if isinstance(img, PlanarImage):
        return img.bands.astype(np.float64)
    return np.asarray(img)


def concat_bands(img) -> np.ndarray:
    """Place the three bands side by side: ``(3, M, N) -> (1, M, 3N)``.

    Accepts a :class:`PlanarImage`, a ``(3, M, N)`` array or a batch
    ``(B, 3, M, N)``.
    """
    a = _band_array(img)
    if a.ndim == 3:
        return np.concatenate(list(a), axis=-1)[None]
    return np.concatenate([a[:, i] for i in range(a.shape[1])], axis=-1)[:, None]


def split_bands(t: np.ndarray, bands: int = 3) -> np.ndarray:
    """Inverse (and adjoint) of :func:`concat_bands`."""
    t = np.asarray(t)
    if t.ndim == 3:
        return np.stack(np.split(t[0], bands, axis=-1))
    return np.stack(np.split(t[:, 0], bands, axis=-1), axis=1)


def interleave_bands(img) -> np.ndarray:
    """Interleave bands pixel by pixel along each row: r, g, b, r, g, b, ..."""
    a = _band_array(img)
    if a.ndim == 3:
        c, m, n = a.shape
        return a.transpose(1, 2, 0).reshape(1, m, n * c)
    b, c, m, n = a.shape
    return a.transpose(0, 2, 3, 1).reshape(b, 1, m, n * c)


def deinterleave_bands(t: np.ndarray, bands: int = 3) -> np.ndarray:
    """Inverse (and adjoint) of :func:`interleave_bands`."""
    t = np.asarray(t)
    if t.ndim == 3:
        _, m, w = t.shape
        return t[0].reshape(m, w // bands, bands).transpose(2, 0, 1)
    b, _, m, w = t.shape
    return t[:, 0].reshape(b, m, w // bands, bands).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------- pooling

def avg_pool(x, spec: PoolSpec):
    """Average pooling; zero padding counts toward the divisor (window area)."""
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    ho, wo = spec.out_hw(h, w)
    p = spec.padding
    xp = np.pad(xb.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p))) if p else xb.astype(np.float64)
    acc = np.zeros((b, c, ho, wo))
    for u in range(spec.wh):
        for v in range(spec.ww):
            acc += xp[:, :, u:u + spec.stride * (ho - 1) + 1:spec.stride, v:v + spec.sw * (wo - 1) + 1:spec.sw]
    acc /= spec.wh * spec.ww
    return _unbatch(acc.astype(np.result_type(xb.dtype, np.float32)), squeeze)


def avg_pool_backward(dout, input_hw: tuple[int, int], spec: PoolSpec):
    db_, squeeze = _batched(dout)
    b, c, ho, wo = db_.shape
    h, w = input_hw
    p = spec.padding
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    g = db_.astype(np.float64) / (spec.wh * spec.ww)
    for u in range(spec.wh):
        for v in range(spec.ww):
            dxp[:, :, u:u + spec.stride * (ho - 1) + 1:spec.stride, v:v + spec.sw * (wo - 1) + 1:spec.sw] += g
    dx = dxp[:, :, p:p + h, p:p + w]
    return _unbatch(dx.astype(np.result_type(db_.dtype, np.float32)), squeeze)


# ------------------------------------------------------------ batch norm

@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str
    squeeze: bool = field(default=False)


def batch_norm_fwd(x, state: BnState, mode: str = "train"):
    """Batch normalization over (batch, height, width) per channel.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into the running estimates
    (``running = momentum*running + (1-momentum)*batch``).  Infer mode uses
    the running estimates.  Returns ``(y, cache)``.
    """
    xb, squeeze = _batched(x)
    if xb.shape[1] != state.channels:
        raise ShapeMismatch(f"{xb.shape[1]} channels vs BN state of {state.channels}")
    x64 = xb.astype(np.float64)
    if mode == "train":
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
    elif mode == "infer":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gamma = state.gamma.astype(np.float64)
    y = gamma[None, :, None, None] * xhat + state.beta.astype(np.float64)[None, :, None, None]
    y = y.astype(np.result_type(xb.dtype, np.float32))
    return _unbatch(y, squeeze), BnCache(xhat, inv_std, gamma, mode, squeeze)


def batch_norm(x, state: BnState, mode: str = "train"):
    return batch_norm_fwd(x, state, mode)[0]


def batch_norm_backward(dout, cache: BnCache):
    """Return ``(dx, dgamma, dbeta)``."""
    db_, _ = _batched(dout)
    g = db_.astype(np.float64)
    dbeta = g.sum(axis=(0, 2, 3))
    dgamma = (g * cache.xhat).sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.inv_std)[None, :, None, None]
    if cache.mode == "train":
        m = g.shape[0] * g.shape[2] * g.shape[3]
        dx = scale / m * (m * g - dbeta[None, :, None, None]
                          - cache.xhat * dgamma[None, :, None, None])
    else:
        dx = scale * g
    dx = dx.astype(np.result_type(db_.dtype, np.float32))
    return _unbatch(dx, cache.squeeze), dgamma, dbeta


# ------------------------------------------------------------ elementwise

def elementwise(x, f: str):
    if f == "relu":
        return np.maximum(x, 0)
    if f == "abs":
        return np.abs(x)
    raise ValueError(f"unknown elementwise function {f!r}")


def elementwise_backward(x, dout, f: str):
    if f == "relu":
        return dout * (x > 0)
    if f == "abs":
        return dout * np.sign(x)
    raise ValueError(f"unknown elementwise function {f!r}")
