"""Convolutional recurrent networks for bird audio detection."""

from ._core import (
    ModelConfig,
    Model,
    TrainConfig,
    __version__,
    auc,
    decode_wav,
    ensemble_average,
    enumerate_grid,
    extract_features,
    fit_norm_stats,
    gradient_check,
    load_features,
    normalize,
    save_features,
    synth_clip,
    train,
)

__all__ = [
    "Model",
    "ModelConfig",
    "TrainConfig",
    "auc",
    "decode_wav",
    "ensemble_average",
    "enumerate_grid",
    "extract_features",
    "fit_norm_stats",
    "gradient_check",
    "load_features",
    "normalize",
    "save_features",
    "synth_clip",
    "train",
]
