"""Invertible coupling-layer convolutional networks (i-RevNets) in numpy."""
from .errors import (CheckpointError, ConfigError, DTypeError, FormatError,
                     InsufficientStatisticsError, IRevNetError, ReplayError, ShapeError)
from .invertible import (SplitPair, channel_merge, channel_split, coupling_forward,
                         coupling_inverse, injective_pad, pad_pseudo_inverse, psi_downsample,
                         psi_inverse)
from .network import PRESETS, BlockSpec, IRevNet, NetConfig, build, make_config, preset
from .training import OptimState, TrainSettings, backward_o1, backward_stored, sgd_step, train_loop

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DTypeError", "FormatError", "InsufficientStatisticsError",
    "IRevNetError", "ReplayError", "ShapeError",
    "SplitPair", "channel_merge", "channel_split", "coupling_forward", "coupling_inverse",
    "injective_pad", "pad_pseudo_inverse", "psi_downsample", "psi_inverse",
    "PRESETS", "BlockSpec", "IRevNet", "NetConfig", "build", "make_config", "preset",
    "OptimState", "TrainSettings", "backward_o1", "backward_stored", "sgd_step", "train_loop",
]
