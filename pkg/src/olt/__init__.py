"""Longitudinal power-profile estimation for coherent optical links."""

from .linksim import (
    Amplifier,
    GroundTruthProfile,
    LinkSpec,
    LumpedLoss,
    PdlElement,
    SimulationError,
    Span,
    Voa,
    capture_series,
    propagate,
    uniform_link,
)
from .rxdsp import AlignedPair, AlignmentError, align, prepare_pair
from .tomography import ConditioningError, EstimatorConfig, ProfileEstimate, estimate, nli_kernel
from .txgen import ConstellationSpec, TxConfig, build_tx_waveform, generate_symbols
from .waveforms import FiberParams, InvalidInput, PositionGrid, Waveform

__all__ = [
    "AlignedPair",
    "AlignmentError",
    "Amplifier",
    "ConditioningError",
    "ConstellationSpec",
    "EstimatorConfig",
    "FiberParams",
    "GroundTruthProfile",
    "InvalidInput",
    "LinkSpec",
    "LumpedLoss",
    "PdlElement",
    "PositionGrid",
    "ProfileEstimate",
    "SimulationError",
    "Span",
    "TxConfig",
    "Voa",
    "Waveform",
    "align",
    "build_tx_waveform",
    "capture_series",
    "estimate",
    "generate_symbols",
    "nli_kernel",
    "prepare_pair",
    "propagate",
    "uniform_link",
]
