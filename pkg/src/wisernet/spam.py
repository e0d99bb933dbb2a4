"""Second-order SPAM features (T=3) and the unbiased Gaussian-kernel MMD.

Also hosts the channel-wise versus normal convolution comparison: the same
high-pass kernel is applied per band or summed across bands, SPAM features
are extracted from the resulting maps, and the cover/stego MMD of the two
arms is compared.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .conv import conv2d_channelwise, conv2d_normal
from .errors import TooFewSamples, TooSmall
from .noise import NoiseConfig, derive_seed, gen_correlated_noise
from .tensor import apply_noise

T = 3
BINS = (2 * T + 1) ** 3
SPAM_DIM = 2 * BINS
STRAIGHT = ((0, 1), (0, -1), (1, 0), (-1, 0))
DIAGONAL = ((1, 1), (-1, -1), (1, -1), (-1, 1))


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _shifted(m: np.ndarray, dy: int, dx: int, k: int, span: int = 3) -> np.ndarray:
    """View of ``m`` at ``p + k*d`` for every p whose walk ``p .. p+span*d`` stays inside."""
    h, w = m.shape
    y0, y1 = (0, h - span * dy) if dy >= 0 else (-span * dy, h)
    x0, x1 = (0, w - span * dx) if dx >= 0 else (-span * dx, w)
    return m[y0 + k * dy:y1 + k * dy, x0 + k * dx:x1 + k * dx]


def cooccurrence(m: np.ndarray, direction: tuple[int, int]) -> np.ndarray:
    """Normalized 343-bin histogram of truncated difference triples along ``direction``.

    With ``D(p) = m[p] - m[p + d]`` the triple at p is
    ``(D(p), D(p+d), D(p+2d))`` and lands in bin
    ``(a+3)*49 + (b+3)*7 + (c+3)``.
    """
    dy, dx = direction
    views = [_shifted(m, dy, dx, k).astype(np.int64) for k in range(4)]
    d = [np.clip(views[k] - views[k + 1], -T, T) + T for k in range(3)]
    idx = (d[0] * (2 * T + 1) + d[1]) * (2 * T + 1) + d[2]
    hist = np.bincount(idx.ravel(), minlength=BINS).astype(np.float64)
    return hist / hist.sum()


def spam_features(feature_map) -> np.ndarray:
    """686-D SPAM vector of a real-valued 2-D map.

    The map is rounded to integers (ties away from zero).  The first 343
    entries average the four straight directions, the last 343 the four
    diagonal ones; each block sums to 1.
    """
    m = np.asarray(feature_map)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {m.shape}")
    if min(m.shape) < 4:
        raise TooSmall(f"map {m.shape} too small; second-order SPAM needs at least 4x4")
    m = round_half_away(m).astype(np.int64)
    straight = sum(cooccurrence(m, d) for d in STRAIGHT) / 4.0
    diagonal = sum(cooccurrence(m, d) for d in DIAGONAL) / 4.0
    return np.concatenate([straight, diagonal])


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: float | str = "median"
    standardize: bool = True

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError(f"bandwidth must be positive or 'median', got {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError("explicit bandwidth must be positive")


def mmd_squared(x, y, cfg: MmdConfig = MmdConfig()) -> float:
    """Unbiased U-statistic estimate of squared MMD with a Gaussian kernel.

    When ``cfg.standardize`` is set, both samples are standardized with the
    per-dimension mean and standard deviation of ``x`` (zero deviations
    become 1).  The median bandwidth is the median pairwise Euclidean
    distance over the pooled, standardized sample.
    """
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"incompatible samples {x.shape} and {y.shape}")
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise TooFewSamples(f"need at least 2 samples per set, got {m} and {n}")
    if cfg.standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        x = (x - mu) / sd
        y = (y - mu) / sd
    if cfg.bandwidth == "median":
        dists = pdist(np.vstack([x, y]))
        bw = float(np.median(dists))
        if bw <= 0:
            positive = dists[dists > 0]
            bw = float(np.median(positive)) if positive.size else 1.0
    else:
        bw = float(cfg.bandwidth)
    gamma = 0.5 / bw ** 2
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    c = kxy.sum() / (m * n)
    return float(a + b - 2.0 * c)


def mmd(x, y, cfg: MmdConfig = MmdConfig()) -> float:
    """``sqrt(max(0, unbiased MMD^2))``."""
    return float(np.sqrt(max(0.0, mmd_squared(x, y, cfg))))


# ------------------------------------------------ convolution comparison

@dataclass(frozen=True)
class MmdRatio:
    mmd_n: float
    mmd_c: float
    ratio: float
    n_covers: int


def image_features(img, kernel: np.ndarray, *, normal_scale: float = 1.0 / 3.0,
                   merge: str = "average", padding: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """SPAM features of one image under normal and channel-wise filtering.

    Normal mode sums the three bands, each correlated with
    ``normal_scale * kernel``.  Channel-wise mode filters every band with
    ``kernel`` alone and merges the three SPAM vectors by averaging (686-D)
    or concatenation (2058-D).
    """
    x = img.bands.astype(np.float64)
    k = np.asarray(kernel, np.float64)
    w_normal = np.broadcast_to(normal_scale * k, (1, 3) + k.shape)
    normal_map = conv2d_normal(x, w_normal, padding=padding)[0]
    band_maps = conv2d_channelwise(x, np.broadcast_to(k, (3, 1) + k.shape), padding=padding)
    feats = [spam_features(band_maps[j]) for j in range(3)]
    if merge == "average":
        channel = (feats[0] + feats[1] + feats[2]) / 3.0
    elif merge == "concat":
        channel = np.concatenate(feats)
    else:
        raise ValueError(f"merge must be 'average' or 'concat', got {merge!r}")
    return spam_features(normal_map), channel


def mmd_ratio_experiment(covers, rate: float, rho: float, kernel, cfg: MmdConfig = MmdConfig(), *,
                         seed: int = 0, coupling: str = "anchored", normal_scale: float = 1.0 / 3.0,
                         merge: str = "average") -> MmdRatio:
    """MMD between covers and pseudo-stego images, normal vs channel-wise.

    Each cover i is paired with a stego built from
    ``gen_correlated_noise`` seeded by ``derive_seed(seed, i)``.
    """
    covers = list(covers)
    if len(covers) < 10:
        raise TooFewSamples(f"need at least 10 covers, got {len(covers)}")
    base = NoiseConfig(rate=rate, rho=rho, seed=seed, coupling=coupling).validate()
    cn, cc, sn, sc = [], [], [], []
    for i, cover in enumerate(covers):
        field = gen_correlated_noise(*cover.shape, replace(base, seed=derive_seed(seed, i)))
        stego = apply_noise(cover, field)
        fn, fc = image_features(cover, kernel, normal_scale=normal_scale, merge=merge)
        cn.append(fn)
        cc.append(fc)
        fn, fc = image_features(stego, kernel, normal_scale=normal_scale, merge=merge)
        sn.append(fn)
        sc.append(fc)
    mmd_n = mmd(np.array(cn), np.array(sn), cfg)
    mmd_c = mmd(np.array(cc), np.array(sc), cfg)
    ratio = mmd_c / mmd_n if mmd_n > 0 else float("inf") if mmd_c > 0 else 1.0
    return MmdRatio(mmd_n, mmd_c, ratio, len(covers))
