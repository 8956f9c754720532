"""Energy-guided layer selection for decoding, with an evaluation toolkit
for yes/no VQA metrics and caption hallucination scoring."""

from .decoding import (
    DecodeParams,
    FinalLayerBroadcastSource,
    GenerationRecord,
    StepRecord,
    ToyModelSource,
    TraceExhaustedError,
    TraceSource,
    decode,
    decode_energy,
    decode_greedy,
    decode_nucleus,
)
from .lens import LayerSelection, LayerStack, UnembeddingHead, select_layer
from .numerics import energy, logsumexp, softmax
from .toy_model import PromptTokens, ToyModel, ToyModelConfig, build_toy_model, forward_last
from .traceio import Trace, TraceFormatError, TraceHeader, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "DecodeParams",
    "FinalLayerBroadcastSource",
    "GenerationRecord",
    "LayerSelection",
    "LayerStack",
    "PromptTokens",
    "StepRecord",
    "ToyModel",
    "ToyModelConfig",
    "ToyModelSource",
    "Trace",
    "TraceExhaustedError",
    "TraceFormatError",
    "TraceHeader",
    "TraceSource",
    "UnembeddingHead",
    "build_toy_model",
    "decode",
    "decode_energy",
    "decode_greedy",
    "decode_nucleus",
    "energy",
    "forward_last",
    "logsumexp",
    "read_trace",
    "select_layer",
    "softmax",
    "write_trace",
]
