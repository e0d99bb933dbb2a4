"""Stego-noise simulation, inter-band correlation, and SNR measurements.

Random streams
--------------
Every draw comes from ``numpy.random.PCG64`` seeded through
``SeedSequence(seed, spawn_key=(stream,))``.  Stream numbers:

* ``0, 1, 2``   independent +-1 draws for red, green, blue
* ``3``         shared latent field (``coupling="shared"`` only)
* ``101, 102``  copy masks for green, blue (``coupling="anchored"``)
* ``100, 101, 102``  copy masks for red, green, blue (``coupling="shared"``)

Within a stream the selection mask (``random() < rate``) is drawn first,
then the signs (``integers(0, 2) * 2 - 1``), both over the full M x N grid.
Per-replicate seeds are derived with :func:`derive_seed`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .conv import conv2d_normal
from .errors import BadConfig, DegenerateVariance, ZeroMeanDenominator
from .tensor import NoiseField, PlanarImage, apply_noise

COUPLINGS = ("anchored", "shared")


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit child seed, fixed by ``seed`` and the integer ``keys``."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class NoiseConfig:
    """``rate``: fraction of pixels changed per band.  ``rho``: target
    correlation of red with green and of red with blue (``anchored``), or
    of every band pair (``shared``)."""

    rate: float = 0.4
    rho: float = 0.0
    seed: int = 0
    coupling: str = "anchored"

    def validate(self) -> "NoiseConfig":
        if not (0.0 <= self.rate <= 1.0) or math.isnan(self.rate):
            raise BadConfig(f"rate must lie in [0, 1], got {self.rate}")
        if not (0.0 <= self.rho <= 1.0) or math.isnan(self.rho):
            raise BadConfig(f"rho must lie in [0, 1], got {self.rho}")
        if not 0 <= int(self.seed) < 2**64:
            raise BadConfig(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.coupling not in COUPLINGS:
            raise BadConfig(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")
        return self

    def expected_correlations(self) -> tuple[float, float, float]:
        """(r-g, r-b, g-b) correlations the sampler produces in expectation."""
        if self.coupling == "shared":
            return self.rho, self.rho, self.rho
        return self.rho, self.rho, self.rho ** 2


def _plane(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    hit = rng.random(shape) < rate
    sign = rng.integers(0, 2, size=shape, dtype=np.int8) * 2 - 1
    return np.where(hit, sign, 0).astype(np.int8)


def gen_noise(height: int, width: int, cfg: NoiseConfig) -> NoiseField:
    """Three independent bands of +-1 changes at the configured rate."""
    cfg.validate()
    if height < 1 or width < 1:
        raise BadConfig(f"bad field size {height}x{width}")
    shape = (height, width)
    return NoiseField(np.stack([_plane(rng_stream(cfg.seed, i), shape, cfg.rate) for i in range(3)]))


def gen_correlated_noise(height: int, width: int, cfg: NoiseConfig) -> NoiseField:
    """Bands with controlled inter-band correlation and unchanged marginals.

    ``anchored``: red is drawn as in :func:`gen_noise`; green and blue copy the
    red value at each pixel with probability ``rho`` and otherwise keep their
    own independent draw.  Corr(r,g) = Corr(r,b) = rho, Corr(g,b) = rho**2.

    ``shared``: every band copies a common latent field with probability
    ``sqrt(rho)``, so all three pairwise correlations equal rho.
    """
    cfg.validate()
    base = gen_noise(height, width, replace(cfg, rho=0.0)).planes.copy()
    shape = (height, width)
    if cfg.coupling == "anchored":
        for i in (1, 2):
            copy = rng_stream(cfg.seed, 100 + i).random(shape) < cfg.rho
            base[i][copy] = base[0][copy]
    else:
        latent = _plane(rng_stream(cfg.seed, 3), shape, cfg.rate)
        p = math.sqrt(cfg.rho)
        for i in range(3):
            copy = rng_stream(cfg.seed, 100 + i).random(shape) < p
            base[i][copy] = latent[copy]
    return NoiseField(base)


def interband_correlation(a, b) -> float:
    """Sample Pearson correlation of two equally sized planes."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"size mismatch {a.shape} vs {b.shape}")
    if a.size < 2:
        raise DegenerateVariance("need at least two elements")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateVariance("zero variance input")
    r = float(da @ db) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, r))


def mean_abs_correlations(images) -> dict[str, float]:
    """Per-image |Corr| between band pairs, averaged over the images.

    Pairs are reported as ``r-g``, ``r-b``, ``b-g``.  Works on PlanarImage or
    NoiseField objects (or raw ``(3, M, N)`` arrays).
    """
    sums = {"r-g": 0.0, "r-b": 0.0, "b-g": 0.0}
    pairs = {"r-g": (0, 1), "r-b": (0, 2), "b-g": (2, 1)}
    count = 0
    for img in images:
        planes = getattr(img, "bands", getattr(img, "planes", img))
        for key, (i, j) in pairs.items():
            sums[key] += abs(interband_correlation(planes[i], planes[j]))
        count += 1
    if count == 0:
        raise ValueError("no images")
    return {k: v / count for k, v in sums.items()}


def empirical_snr(cover_filtered, noise_filtered) -> float:
    """Var(filtered noise) / E^2(filtered cover)."""
    mu = float(np.mean(np.asarray(cover_filtered, np.float64)))
    if mu == 0.0:
        raise ZeroMeanDenominator("filtered cover has zero mean")
    return float(np.var(np.asarray(noise_filtered, np.float64))) / mu ** 2


def predicted_snr_ratio(rho_rg: float, rho_rb: float, rho_gb: float) -> float:
    """SNR after summing three equally weighted bands relative to one band.

    With equal per-band noise variance and equal filtered-content means the
    summed map has noise variance ``(3 + 2*sum(rho)) * sigma^2`` against a
    squared mean of ``9 * mu^2``.
    """
    for r in (rho_rg, rho_rb, rho_gb):
        if not -1.0 <= r <= 1.0:
            raise ValueError(f"correlation {r} outside [-1, 1]")
    return (3.0 + 2.0 * (rho_rg + rho_rb + rho_gb)) / 9.0


@dataclass(frozen=True)
class SnrReport:
    snr_separate: float
    snr_summed: float
    predicted_ratio: float
    measured_ratio: float
    n_covers: int
    snr_separate_bands: tuple[float, float, float] = (0.0, 0.0, 0.0)


def _filter_band(plane: np.ndarray, kernel: np.ndarray, padding: int) -> np.ndarray:
    return conv2d_normal(plane[None].astype(np.float64), kernel[None, None], padding=padding)[0]


def snr_experiment(covers, cfg: NoiseConfig, kernel, padding: int = 2) -> SnrReport:
    """Measure per-band and summed SNR over ``covers`` with simulated noise.

    Each cover gets its own noise field (seed derived from ``cfg.seed`` and
    the cover index).  The same-size zero-padded filtering of the network's
    bottom layer is used, so the filtered content mean comes from the image
    border and is nonzero for covers with a nonzero intensity level.
    ``measured_ratio`` is the mean over covers of
    ``snr_summed / mean_j snr_separate_j``.
    """
    covers = list(covers)
    if not covers:
        raise ValueError("need at least one cover")
    cfg.validate()
    kernel = np.asarray(kernel, np.float64)
    sep_bands = np.zeros(3)
    summed = 0.0
    ratios = []
    for idx, cover in enumerate(covers):
        m, n = cover.shape
        field = gen_correlated_noise(m, n, replace(cfg, seed=derive_seed(cfg.seed, idx)))
        stego = apply_noise(cover, field)
        delta = stego.bands.astype(np.int16) - cover.bands.astype(np.int16)
        cf = [_filter_band(cover.bands[j], kernel, padding) for j in range(3)]
        nf = [_filter_band(delta[j], kernel, padding) for j in range(3)]
        sep = np.array([empirical_snr(cf[j], nf[j]) for j in range(3)])
        tot = empirical_snr(cf[0] + cf[1] + cf[2], nf[0] + nf[1] + nf[2])
        sep_bands += sep
        summed += tot
        ratios.append(tot / sep.mean())
    k = len(covers)
    sep_bands /= k
    return SnrReport(
        snr_separate=float(sep_bands.mean()),
        snr_summed=summed / k,
        predicted_ratio=predicted_snr_ratio(*cfg.expected_correlations()),
        measured_ratio=float(np.mean(ratios)),
        n_covers=k,
        snr_separate_bands=tuple(float(v) for v in sep_bands),
    )


# ------------------------------------------------------- synthetic covers

def synthetic_cover(height: int, width: int, seed: int, *, texture: float = 1.0,
                    band_spread: float = 0.15, level: float = 128.0) -> PlanarImage:
    """A smooth, strongly band-correlated color image for desk experiments.

    A shared luminance field (coarse plus fine Gaussian-filtered white noise)
    is scaled per band by ``1 +- band_spread`` and each band receives a weak
    independent fine texture.  All bands share the same mean ``level``.
    """
    rng = rng_stream(seed, 7)
    coarse = ndimage.gaussian_filter(rng.standard_normal((height, width)), 6.0, mode="wrap")
    coarse *= 30.0 / max(coarse.std(), 1e-12)
    fine = ndimage.gaussian_filter(rng.standard_normal((height, width)), 1.0, mode="wrap")
    fine *= 6.0 * texture / max(fine.std(), 1e-12)
    shared = coarse + fine
    gains = 1.0 + band_spread * rng.uniform(-1.0, 1.0, size=3)
    bands = []
    for i in range(3):
        own = ndimage.gaussian_filter(rng.standard_normal((height, width)), 0.8, mode="wrap")
        own *= 1.5 * texture / max(own.std(), 1e-12)
        bands.append(level + gains[i] * shared + own)
    arr = np.clip(np.rint(np.stack(bands)), 2, 253)
    return PlanarImage(arr.astype(np.uint8))


def synthetic_covers(count: int, height: int, width: int, seed: int, **kw) -> list[PlanarImage]:
    return [synthetic_cover(height, width, derive_seed(seed, 1000 + i), **kw) for i in range(count)]
