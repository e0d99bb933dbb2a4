"""Separate-then-reunion color-image steganalysis toolkit in plain NumPy."""

__version__ = "0.1.0"

from .errors import WiserError
from .tensor import NoiseField, PlanarImage, apply_noise, load_ppm, load_tensor, save_ppm, save_tensor
from .conv import (
    BnState,
    ConvSpec,
    PoolSpec,
    avg_pool,
    batch_norm,
    concat_bands,
    conv2d_channelwise,
    conv2d_normal,
    elementwise,
    interleave_bands,
)
from .srm import KernelBank, kernel, load_bank
from .noise import (
    NoiseConfig,
    SnrReport,
    empirical_snr,
    gen_correlated_noise,
    gen_noise,
    interband_correlation,
    predicted_snr_ratio,
    snr_experiment,
)
from .spam import MmdConfig, mmd, mmd_ratio_experiment, spam_features
from .network import (
    DiagnosticsReport,
    NetConfig,
    Network,
    avg_kernel_correlation,
    build,
    cosine_similarity_diag,
    count_params_flops,
    load_checkpoint,
    save_checkpoint,
)
from .train import RunLog, TrainConfig, evaluate, lr_at, sgd_step, train

__all__ = [
    "WiserError", "NoiseField", "PlanarImage", "apply_noise", "load_ppm", "load_tensor", "save_ppm",
    "save_tensor", "BnState", "ConvSpec", "PoolSpec", "avg_pool", "batch_norm", "concat_bands",
    "conv2d_channelwise", "conv2d_normal", "elementwise", "interleave_bands", "KernelBank", "kernel",
    "load_bank", "NoiseConfig", "SnrReport", "empirical_snr", "gen_correlated_noise", "gen_noise",
    "interband_correlation", "predicted_snr_ratio", "snr_experiment", "MmdConfig", "mmd",
    "mmd_ratio_experiment", "spam_features", "DiagnosticsReport", "NetConfig", "Network",
    "avg_kernel_correlation", "build", "cosine_similarity_diag", "count_params_flops",
    "load_checkpoint", "save_checkpoint", "RunLog", "TrainConfig", "evaluate", "lr_at", "sgd_step",
    "train",
]
