"""Real-time any-order probabilistic engine for MIDI event streams."""

from .distributions import (CategoricalParams, DMoLParams, EmptySupportError,
                            SamplingControls)
from .engine import Engine, Prediction, QuerySpec, Snapshot
from .events import (Event, EventStream, InstrumentKind, instrument_kind,
                     N_INSTRUMENTS, N_PITCHES, MAX_TIME_DELTA)
from .model import ModelConfig, ModelParameters
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CategoricalParams", "DMoLParams", "EmptySupportError", "SamplingControls",
    "Engine", "Prediction", "QuerySpec", "Snapshot",
    "Event", "EventStream", "InstrumentKind", "instrument_kind",
    "N_INSTRUMENTS", "N_PITCHES", "MAX_TIME_DELTA",
    "ModelConfig", "ModelParameters", "load_checkpoint", "save_checkpoint",
    "__version__",
]
