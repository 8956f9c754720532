"""Standalone writer for version-1 trace files.

Deliberately independent of the reading engine: the byte layout
(documented in the engine repo's docs/trace_format.md) is the only
contract between the two packages. Little-endian, float32 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"EGLTRACE"
FORMAT_VERSION = 1
KIND_HIDDEN_STATES = 0
ELEMENT_FLOAT32 = 0

NORM_UNRECORDED = 0
NORM_APPLIED = 1
NORM_NOT_APPLIED = 2


@dataclass
class TracePayload:
    model_label: str
    layer_offset: int
    norm_flag: int
    prompt_tokens: list[int]
    continuation_tokens: list[int]
    head: np.ndarray  # (vocab_size, hidden_dim) float32
    steps: np.ndarray  # (num_steps, num_layers, hidden_dim) float32


def encode_trace(t: TracePayload) -> bytes:
    head = np.ascontiguousarray(t.head, dtype="<f4")
    steps = np.ascontiguousarray(t.steps, dtype="<f4")
    if head.ndim != 2 or steps.ndim != 3 or steps.shape[2] != head.shape[1]:
        raise ValueError(f"inconsistent shapes: head {head.shape}, steps {steps.shape}")
    num_steps, num_layers, hidden_dim = steps.shape
    vocab_size = head.shape[0]
    if len(t.continuation_tokens) != num_steps:
        raise ValueError("continuation length must equal the number of steps")
    label = t.model_label.encode("utf-8")
    parts = [
        struct.pack(
            "<8sHBBBBHIIII",
            MAGIC,
            FORMAT_VERSION,
            KIND_HIDDEN_STATES,
            ELEMENT_FLOAT32,
            t.layer_offset,
            t.norm_flag,
            0,
            num_layers,
            hidden_dim,
            vocab_size,
            num_steps,
        ),
        struct.pack("<I", len(label)),
        label,
        struct.pack("<I", len(t.prompt_tokens)),
        np.asarray(t.prompt_tokens, dtype="<u4").tobytes(),
        struct.pack("<I", len(t.continuation_tokens)),
        np.asarray(t.continuation_tokens, dtype="<u4").tobytes(),
        head.tobytes(),
        steps.tobytes(),
    ]
    return b"".join(parts)


def write_trace_file(t: TracePayload, path) -> int:
    blob = encode_trace(t)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)
