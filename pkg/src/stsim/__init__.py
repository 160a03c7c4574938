"""Discrete-event simulator for stream-triggered one-sided MPI on GPU nodes."""

from .costs import CostModel
from .errors import (ConfigError, Deadlock, EpochAlreadyOpen, EpochClosed, GroupMismatch,
                     InvalidArgument, ParseError, ResourceExhausted, SimError,
                     SimulationError, SummaryError, TruncationError)
from .faces import (BenchmarkConfig, FacesRun, GridSpec, ResultRow, message_size, neighbors,
                    run_variant, verify_exchange)
from .simcore import SimReport, Simulator

__all__ = [
    "BenchmarkConfig", "ConfigError", "CostModel", "Deadlock", "EpochAlreadyOpen",
    "EpochClosed", "FacesRun", "GridSpec", "GroupMismatch", "InvalidArgument", "ParseError",
    "ResourceExhausted", "ResultRow", "SimError", "SimReport", "SimulationError", "Simulator",
    "SummaryError", "TruncationError", "message_size", "neighbors", "run_variant",
    "verify_exchange",
]
__version__ = "0.1.0"
