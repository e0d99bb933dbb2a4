"""The separate-then-reunion network: layer graph, training passes, audit, diagnostics.

Layout (``n`` = magnification factor, sizes for a 512x512 input)::

    bottom   channel-wise 5x5/1, 3 bands x 30 SRM kernels      512x512x90
    conv1    5x5/2, 8n          -> ABS -> BN -> ReLU          256x256x8n
    pool1    avg 5x5/2                                         128x128x8n
    conv2    3x3/1, 32n         -> BN -> ReLU                  128x128x32n
    pool2    avg 5x5/4                                         32x32x32n
    conv3    3x3/1, 128n        -> BN -> ReLU                  32x32x128n
    pool3    global average                                    1x1x128n
    fc1..4   800 -> 400 -> 200 -> 2 (ReLU between), softmax

Class 0 is "cover", class 1 "stego".  Convolutions carry no bias; dense
layers do.  Alternative bottoms (``normal``, ``concat``, ``interleave``)
replace only the first row.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import conv as C
from .errors import (
    BadMagic,
    DegenerateKernel,
    IncompatibleShape,
    IoFailure,
    ShapeMismatch,
    TruncatedPayload,
    WrongBottomMode,
)
from .srm import KernelBank, load_bank
from .tensor import PlanarImage, decode_tensor, encode_tensor

BOTTOM_MODES = ("channelwise", "normal", "concat", "interleave")
DTYPES = {"real32": np.float32, "real64": np.float64}
DENSE_WIDTHS = (800, 400, 200, 2)
CLASSES = ("cover", "stego")


@dataclass(frozen=True)
class NetConfig:
    n: int = 9
    input_h: int = 512
    input_w: int = 512
    bottom_mode: str = "channelwise"
    bottom_learnable: bool = True
    dtype: str = "real32"
    seed: int = 0
    bank_path: str | None = None

    def validate(self) -> "NetConfig":
        if self.n < 1:
            raise IncompatibleShape(f"magnification factor must be positive, got {self.n}")
        if self.bottom_mode not in BOTTOM_MODES:
            raise ValueError(f"bottom_mode must be one of {BOTTOM_MODES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")
        shape_table(self)
        return self


# ------------------------------------------------------------------ layers

class Layer:
    name: str = ""
    params: tuple[str, ...] = ()

    def out_shape(self, shape):
        return shape

    def forward(self, net, x, mode):
        raise NotImplementedError

    def backward(self, net, dout):
        raise NotImplementedError


class Bottom(Layer):
    """First layer: band separation (or not) followed by the SRM-seeded convolution."""

    name = "bottom"
    params = ("bottom.weight",)
    spec = C.ConvSpec(5, 5, stride=1, padding=2)

    def __init__(self, mode: str, learnable: bool):
        self.mode = mode
        self.learnable = learnable

    def out_shape(self, shape):
        c, h, w = shape
        if self.mode in ("concat", "interleave"):
            h, w = C.output_extent(h, 5, 1, 2), C.output_extent(3 * w, 5, 1, 2)
            return 30, h, w
        h, w = self.spec.out_hw(h, w)
        return (90 if self.mode == "channelwise" else 30), h, w

    def _prepare(self, x):
        if self.mode == "concat":
            return C.concat_bands(x)
        if self.mode == "interleave":
            return C.interleave_bands(x)
        return x

    def forward(self, net, x, mode):
        w = net.params["bottom.weight"]
        xin = self._prepare(x)
        self.cache = xin
        if self.mode == "channelwise":
            return C.conv2d_channelwise(xin, w, self.spec)
        return C.conv2d_normal(xin, w, None, self.spec)

    def backward(self, net, dout):
        if not self.learnable:
            return None
        w = net.params["bottom.weight"]
        if self.mode == "channelwise":
            _, dw = C.conv2d_channelwise_backward(self.cache, w, dout, self.spec, need_dx=False)
        else:
            _, dw, _ = C.conv2d_normal_backward(self.cache, w, dout, self.spec, need_dx=False)
        net.grads["bottom.weight"] = dw
        return None


class Conv(Layer):
    def __init__(self, name, cin, cout, k, stride, padding):
        self.name = name
        self.params = (f"{name}.weight",)
        self.cin, self.cout = cin, cout
        self.spec = C.ConvSpec(k, k, stride, padding, cin, cout)

    def out_shape(self, shape):
        _, h, w = shape
        return (self.cout,) + self.spec.out_hw(h, w)

    def forward(self, net, x, mode):
        self.cache = x
        return C.conv2d_normal(x, net.params[self.params[0]], None, self.spec)

    def backward(self, net, dout):
        dx, dw, _ = C.conv2d_normal_backward(self.cache, net.params[self.params[0]], dout, self.spec)
        net.grads[self.params[0]] = dw
        return dx


class Elementwise(Layer):
    def __init__(self, name, f):
        self.name, self.f = name, f

    def forward(self, net, x, mode):
        self.cache = x
        return C.elementwise(x, self.f)

    def backward(self, net, dout):
        return C.elementwise_backward(self.cache, dout, self.f)


class BatchNorm(Layer):
    def __init__(self, name, channels):
        self.name = name
        self.channels = channels
        self.params = (f"{name}.gamma", f"{name}.beta")

    def forward(self, net, x, mode):
        st = net.bn[self.name]
        st.gamma = net.params[self.params[0]]
        st.beta = net.params[self.params[1]]
        if mode == "train" and not net.update_bn_stats:
            saved = st.running_mean, st.running_var
            y, self.cache = C.batch_norm_fwd(x, st, mode)
            st.running_mean, st.running_var = saved
            return y
        y, self.cache = C.batch_norm_fwd(x, st, mode)
        return y

    def backward(self, net, dout):
        dx, dg, db = C.batch_norm_backward(dout, self.cache)
        dt = net.params[self.params[0]].dtype
        net.grads[self.params[0]] = dg.astype(dt)
        net.grads[self.params[1]] = db.astype(dt)
        return dx


class AvgPool(Layer):
    def __init__(self, name, window, stride, padding):
        self.name = name
        self.spec = C.PoolSpec(window, stride, padding)

    def out_shape(self, shape):
        c, h, w = shape
        return (c,) + self.spec.out_hw(h, w)

    def forward(self, net, x, mode):
        self.hw = x.shape[-2:]
        return C.avg_pool(x, self.spec)

    def backward(self, net, dout):
        return C.avg_pool_backward(dout, self.hw, self.spec)


class GlobalAvgPool(AvgPool):
    """Window equals the incoming map (32x32/32 for a 512x512 input)."""

    def __init__(self, name):
        self.name = name

    def _spec(self, h, w):
        return C.PoolSpec(h, h, 0, window_w=w, stride_w=w)

    def out_shape(self, shape):
        c, h, w = shape
        return (c,) + self._spec(h, w).out_hw(h, w)

    def forward(self, net, x, mode):
        self.spec = self._spec(*x.shape[-2:])
        return super().forward(net, x, mode)


class Flatten(Layer):
    name = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, net, x, mode):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, net, dout):
        return dout.reshape(self.shape)


class Dense(Layer):
    def __init__(self, name, fin, fout):
        self.name = name
        self.fin, self.fout = fin, fout
        self.params = (f"{name}.weight", f"{name}.bias")

    def out_shape(self, shape):
        return (self.fout,)

    def forward(self, net, x, mode):
        self.cache = x
        w, b = (net.params[p] for p in self.params)
        y = x.astype(np.float64) @ w.astype(np.float64).T + b
        return y.astype(np.result_type(x.dtype, w.dtype))

    def backward(self, net, dout):
        w = net.params[self.params[0]]
        g = dout.astype(np.float64)
        net.grads[self.params[0]] = (g.T @ self.cache.astype(np.float64)).astype(w.dtype)
        net.grads[self.params[1]] = g.sum(axis=0).astype(w.dtype)
        return (g @ w.astype(np.float64)).astype(dout.dtype)


def _layers(cfg: NetConfig) -> list[Layer]:
    n = cfg.n
    bottom_c = 90 if cfg.bottom_mode == "channelwise" else 30
    return [
        Bottom(cfg.bottom_mode, cfg.bottom_learnable),
        Conv("conv1", bottom_c, 8 * n, 5, 2, 2),
        Elementwise("abs1", "abs"),
        BatchNorm("bn1", 8 * n),
        Elementwise("relu1", "relu"),
        AvgPool("pool1", 5, 2, 2),
        Conv("conv2", 8 * n, 32 * n, 3, 1, 1),
        BatchNorm("bn2", 32 * n),
        Elementwise("relu2", "relu"),
        AvgPool("pool2", 5, 4, 2),
        Conv("conv3", 32 * n, 128 * n, 3, 1, 1),
        BatchNorm("bn3", 128 * n),
        Elementwise("relu3", "relu"),
        GlobalAvgPool("pool3"),
        Flatten(),
        Dense("fc1", 128 * n, 800),
        Elementwise("relu_fc1", "relu"),
        Dense("fc2", 800, 400),
        Elementwise("relu_fc2", "relu"),
        Dense("fc3", 400, 200),
        Elementwise("relu_fc3", "relu"),
        Dense("fc4", 200, 2),
    ]


def shape_table(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output shapes ``(C, H, W)`` or ``(F,)`` for one image; no data touched."""
    shape = (3, cfg.input_h, cfg.input_w)
    rows = []
    try:
        for layer in _layers(cfg):
            shape = layer.out_shape(shape)
            rows.append((layer.name, shape))
    except ShapeMismatch as exc:
        raise IncompatibleShape(f"input {cfg.input_h}x{cfg.input_w}: {exc}") from None
    return rows


# ----------------------------------------------------------------- network

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Network:
    cfg: NetConfig
    layers: list
    params: dict
    bn: dict
    bank: KernelBank | None = None
    grads: dict = field(default_factory=dict)
    update_bn_stats: bool = True

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    def learnable(self) -> list[str]:
        names = [p for layer in self.layers for p in layer.params]
        if not self.cfg.bottom_learnable:
            names.remove("bottom.weight")
        return names

    def logits(self, batch, mode: str = "infer") -> np.ndarray:
        x = np.asarray(batch)
        if x.ndim != 4 or x.shape[1:] != (3, self.cfg.input_h, self.cfg.input_w):
            raise ShapeMismatch(f"batch shape {x.shape} != (B, 3, {self.cfg.input_h}, {self.cfg.input_w})")
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = x.astype(self.dtype)
        for layer in self.layers:
            x = layer.forward(self, x, mode)
        return x

    def forward(self, batch, mode: str = "infer") -> np.ndarray:
        """Softmax probabilities ``(B, 2)`` in (cover, stego) order."""
        return _softmax(self.logits(batch, mode))

    def backward(self, batch, labels, mode: str = "train") -> tuple[float, dict]:
        """Mean cross-entropy and its gradient for every learnable tensor."""
        labels = np.asarray(labels, dtype=np.int64)
        x = np.asarray(batch)
        if labels.shape != (x.shape[0],):
            raise ShapeMismatch(f"labels shape {labels.shape} != ({x.shape[0]},)")
        if np.any((labels < 0) | (labels > 1)):
            raise ValueError("labels must be 0 (cover) or 1 (stego)")
        p = _softmax(self.logits(x, mode))
        b = len(labels)
        loss = float(-np.mean(np.log(np.maximum(p[np.arange(b), labels], 1e-300))))
        d = p.copy()
        d[np.arange(b), labels] -= 1.0
        d = (d / b).astype(self.dtype)
        self.grads = {}
        for layer in reversed(self.layers):
            d = layer.backward(self, d)
            if d is None:
                break
        return loss, {k: self.grads[k] for k in self.learnable()}

    def snapshot(self) -> dict:
        out = {k: v.copy() for k, v in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean.copy()
            out[f"{name}.running_var"] = st.running_var.copy()
        return out

    def restore(self, tensors: dict) -> None:
        for k in self.params:
            self.params[k] = np.array(tensors[k], dtype=self.dtype)
        for name, st in self.bn.items():
            st.running_mean = np.array(tensors[f"{name}.running_mean"], dtype=self.dtype)
            st.running_var = np.array(tensors[f"{name}.running_var"], dtype=self.dtype)
            st.gamma = self.params[f"{name}.gamma"]
            st.beta = self.params[f"{name}.beta"]


def bottom_weights(bank: KernelBank, mode: str) -> np.ndarray:
    k = bank.kernels
    if mode == "channelwise":
        return np.broadcast_to(k[None], (3,) + k.shape).copy()  # (3, 30, 5, 5)
    if mode == "normal":
        return np.broadcast_to(k[:, None], (30, 3, 5, 5)).copy()
    return k[:, None].copy()  # (30, 1, 5, 5)


def build(cfg: NetConfig = NetConfig()) -> Network:
    """Construct a freshly initialized network.

    The bottom kernels are copies of the SRM bank (identical across bands).
    Every other weight tensor is drawn from He-uniform
    ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` on its own stream of
    ``cfg.seed``; biases, BN shifts are 0 and BN scales 1.
    """
    cfg.validate()
    dt = DTYPES[cfg.dtype]
    bank = load_bank(cfg.bank_path)
    layers = _layers(cfg)
    params, bn = {}, {}
    params["bottom.weight"] = bottom_weights(bank, cfg.bottom_mode).astype(dt)
    for idx, layer in enumerate(layers):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(idx,))))
        if isinstance(layer, Conv):
            fan_in = layer.cin * layer.spec.kernel_h * layer.spec.kernel_w
            lim = math.sqrt(6.0 / fan_in)
            shape = (layer.cout, layer.cin, layer.spec.kernel_h, layer.spec.kernel_w)
            params[layer.params[0]] = rng.uniform(-lim, lim, shape).astype(dt)
        elif isinstance(layer, Dense):
            lim = math.sqrt(6.0 / layer.fin)
            params[layer.params[0]] = rng.uniform(-lim, lim, (layer.fout, layer.fin)).astype(dt)
            params[layer.params[1]] = np.zeros(layer.fout, dt)
        elif isinstance(layer, BatchNorm):
            st = C.BnState.fresh(layer.channels, dt)
            bn[layer.name] = st
            params[layer.params[0]] = st.gamma
            params[layer.params[1]] = st.beta
    return Network(cfg, layers, params, bn, bank)


# ------------------------------------------------------------------- audit

def count_params_flops(net_or_cfg) -> tuple[int, int]:
    """Learnable scalars and forward FLOPs per image.

    FLOP convention: one multiply-add is 2 FLOPs (convolutions and dense
    layers); a dense bias add is 1 per output; ABS and ReLU 1 per element;
    BN 2 per element (folded scale and shift); average pooling
    ``window_area`` adds plus 1 divide per output element; softmax is
    ignored.
    """
    cfg = net_or_cfg.cfg if isinstance(net_or_cfg, Network) else net_or_cfg
    layers = _layers(cfg)
    shape = (3, cfg.input_h, cfg.input_w)
    params = flops = 0
    for layer in layers:
        out = layer.out_shape(shape)
        size = int(np.prod(out))
        if isinstance(layer, Bottom):
            taps = 25 if cfg.bottom_mode != "normal" else 75
            flops += 2 * size * taps
            if cfg.bottom_learnable:
                params += 90 * 25 if cfg.bottom_mode == "channelwise" else (30 * 75 if cfg.bottom_mode == "normal" else 30 * 25)
        elif isinstance(layer, Conv):
            taps = layer.cin * layer.spec.kernel_h * layer.spec.kernel_w
            params += layer.cout * taps
            flops += 2 * size * taps
        elif isinstance(layer, Dense):
            params += layer.fout * layer.fin + layer.fout
            flops += 2 * layer.fin * layer.fout + layer.fout
        elif isinstance(layer, BatchNorm):
            params += 2 * layer.channels
            flops += 2 * size
        elif isinstance(layer, Elementwise):
            flops += size
        elif isinstance(layer, GlobalAvgPool):
            flops += int(np.prod(shape))  + size
        elif isinstance(layer, AvgPool):
            flops += size * (layer.spec.wh * layer.spec.ww + 1)
        shape = out
    return params, flops


REFERENCE_COUNTS = {"params": 2.12e6, "flops": 4.11e9}


def audit(cfg: NetConfig = NetConfig()) -> dict:
    """Closed-form counts next to the reference figures, with the discrepancy ratio."""
    params, flops = count_params_flops(cfg)
    return {
        "n": cfg.n,
        "input": f"{cfg.input_h}x{cfg.input_w}",
        "bottom_mode": cfg.bottom_mode,
        "params": params,
        "flops": flops,
        "reported_params": REFERENCE_COUNTS["params"],
        "reported_flops": REFERENCE_COUNTS["flops"],
        "params_ratio": params / REFERENCE_COUNTS["params"],
        "flops_ratio": flops / REFERENCE_COUNTS["flops"],
        "convention": "MAC=2 FLOPs; BN 2/elem; ABS,ReLU 1/elem; avgpool area+1 per output",
    }


# ------------------------------------------------------------- diagnostics

def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateKernel("zero-variance kernel")
    return float(da @ db) / (math.sqrt(saa) * math.sqrt(sbb))


def avg_kernel_correlation(net: Network) -> float:
    """Mean pairwise Pearson correlation inside each per-band kernel triple."""
    if net.cfg.bottom_mode != "channelwise":
        raise WrongBottomMode("kernel triples exist only for the channel-wise bottom")
    w = net.params["bottom.weight"]
    total = 0.0
    pairs = 0
    for k in range(w.shape[1]):
        for i, j in ((0, 1), (0, 2), (1, 2)):
            total += _pearson(w[i, k], w[j, k])
            pairs += 1
    return total / pairs


def cosine_to_ones(mu) -> float:
    """Cosine of the angle between ``mu`` and the all-ones vector.

    A zero vector has all components equal and is reported as 1.
    """
    mu = np.asarray(mu, np.float64)
    norm = float(np.sqrt(mu @ mu))
    if norm == 0.0:
        return 1.0
    return float(mu.sum() / (math.sqrt(len(mu)) * norm))


@dataclass(frozen=True)
class DiagnosticsReport:
    cw_bar: float
    s_cover: float | None
    s_stego: float | None
    per_image_cover: tuple[float, ...] = ()
    per_image_stego: tuple[float, ...] = ()


def band_means(net: Network, img: PlanarImage) -> np.ndarray:
    """``(3, 30)`` means of each band correlated with its own bottom kernels."""
    if net.cfg.bottom_mode != "channelwise":
        raise WrongBottomMode("band means need the channel-wise bottom")
    w = net.params["bottom.weight"].astype(np.float64)
    maps = C.conv2d_channelwise(img.bands.astype(np.float64), w, Bottom.spec)
    return maps.reshape(3, w.shape[1], -1).mean(axis=2)


def mean_abs_s(net: Network, img: PlanarImage) -> float:
    mu = band_means(net, img)
    return float(np.mean([abs(cosine_to_ones(mu[:, k])) for k in range(mu.shape[1])]))


def cosine_similarity_diag(net: Network, covers, stegos=()) -> DiagnosticsReport:
    """Kernel diversity plus the mean |S_k| averaged over cover and stego sets."""
    covers, stegos = list(covers), list(stegos)
    if not covers and not stegos:
        raise ValueError("need at least one image")
    cw = avg_kernel_correlation(net)
    pc = tuple(mean_abs_s(net, im) for im in covers)
    ps = tuple(mean_abs_s(net, im) for im in stegos)
    return DiagnosticsReport(cw, float(np.mean(pc)) if pc else None, float(np.mean(ps)) if ps else None, pc, ps)


# ------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"WLCKPT01"


def save_checkpoint(net: Network, path, iteration: int = 0, extra: dict | None = None) -> None:
    """Write parameters and BN statistics as concatenated WLTENSOR blobs.

    Layout: magic ``WLCKPT01``, u64 little-endian manifest length, UTF-8 JSON
    manifest (config, iteration, ``entries`` of name/shape/dtype/offset/length
    with offsets relative to the blob region), then the blobs.
    """
    blobs, entries, offset = [], [], 0
    for name, arr in net.snapshot().items():
        blob = encode_tensor(np.ascontiguousarray(arr))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"config": asdict(net.cfg), "iteration": int(iteration), "entries": entries}
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    try:
        Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path) -> tuple[Network, int, dict]:
    """Return ``(network, iteration, manifest)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if data[:8] != CKPT_MAGIC:
        raise BadMagic(f"not a checkpoint: {data[:8]!r}")
    if len(data) < 16:
        raise TruncatedPayload("checkpoint header truncated")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in manifest["entries"]:
        arr, end = decode_tensor(data, base + e["offset"])
        if end - (base + e["offset"]) != e["length"] or list(arr.shape) != e["shape"]:
            raise TruncatedPayload(f"entry {e['name']} does not match manifest")
        tensors[e["name"]] = arr
    net = build(NetConfig(**manifest["config"]))
    net.restore(tensors)
    return net, int(manifest["iteration"]), manifest
