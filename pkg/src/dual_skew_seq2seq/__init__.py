from .__about__ import __version__
from .controller import BetaController, ControllerConfig, simulate
from .decoding import DecodeConfig, beam_decode, greedy_decode
from .divergences import LossKind, cdsd_loss, dsd_loss, skew_divergence
from .errors import ConfigError, DataError, DimensionError, LabError, NumericError, ParseError, UsageError
from .seq2seq import Seq2SeqConfig, init_params
from .trainer import TrainSchedule, train

__all__ = [
    "__version__",
    "BetaController",
    "ControllerConfig",
    "simulate",
    "DecodeConfig",
    "beam_decode",
    "greedy_decode",
    "LossKind",
    "cdsd_loss",
    "dsd_loss",
    "skew_divergence",
    "ConfigError",
    "DataError",
    "DimensionError",
    "LabError",
    "NumericError",
    "ParseError",
    "UsageError",
    "Seq2SeqConfig",
    "init_params",
    "TrainSchedule",
    "train",
]
