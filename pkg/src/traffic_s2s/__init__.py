"""Sequence-to-sequence ConvLSTM forecasting of per-service mobile traffic on an antenna grid."""
from .autodiff import Node, Tape, backward
from .baselines import MODEL_CLASSES, PRESETS, build_model, make_config
from .convlstm import ConvLSTMForecaster, S2SConfig
from .errors import (CheckpointError, ContractError, DimensionError, DivergenceError, GapError,
                     ParseError, TrafficS2SError)

__version__ = "0.1.0"
