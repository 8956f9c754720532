"""Binary trace format: per-step, per-layer last-token states plus the head.

Version 1, little-endian throughout, float32 payloads. Full layout in
docs/trace_format.md; summary:

    offset  size  field
    0       8     magic b"EGLTRACE"
    8       2     u16 format_version (= 1)
    10      1     u8  payload_kind (0 = hidden_states, 1 = logits)
    11      1     u8  element_type (0 = float32)
    12      1     u8  layer_offset (0 or 1)
    13      1     u8  norm_flag (0 unrecorded, 1 runtime applies final
                      layer-norm internally, 2 it does not)
    14      2     u16 reserved (= 0)
    16      4     u32 num_layers
    20      4     u32 hidden_dim
    24      4     u32 vocab_size
    28      4     u32 num_steps
    32      4     u32 label_len, then that many UTF-8 bytes
    ...           u32 prompt_len, then prompt token ids as u32
    ...           u32 continuation_len (must equal num_steps), then ids
    ...           payload (see below)

hidden_states payload: head matrix (vocab_size x hidden_dim, row-major)
followed by num_steps x num_layers x hidden_dim states. logits payload:
num_steps x num_layers x vocab_size, no head. Counts are validated
against the remaining stream length before anything is allocated.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lens import UnembeddingHead

MAGIC = b"EGLTRACE"
FORMAT_VERSION = 1
_FIXED_HEADER = struct.Struct("<8sHBBBBHIIII")

PAYLOAD_KINDS = {"hidden_states": 0, "logits": 1}
_KIND_NAMES = {v: k for k, v in PAYLOAD_KINDS.items()}
ELEMENT_TYPES = {"float32": 0}
_ELEMENT_NAMES = {v: k for k, v in ELEMENT_TYPES.items()}

NORM_UNRECORDED = 0
NORM_APPLIED = 1
NORM_NOT_APPLIED = 2


class TraceFormatError(ValueError):
    """Malformed trace stream; `offset` points at the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TraceHeader:
    num_layers: int
    hidden_dim: int
    vocab_size: int
    num_steps: int
    payload_kind: str = "hidden_states"
    element_type: str = "float32"
    layer_offset: int = 0
    norm_flag: int = NORM_UNRECORDED
    model_label: str = ""
    prompt_tokens: tuple[int, ...] = ()
    continuation_tokens: tuple[int, ...] = ()
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "prompt_tokens", tuple(int(t) for t in self.prompt_tokens))
        object.__setattr__(
            self, "continuation_tokens", tuple(int(t) for t in self.continuation_tokens)
        )
        if self.payload_kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload_kind {self.payload_kind!r}")
        if self.element_type not in ELEMENT_TYPES:
            raise ValueError(f"unknown element_type {self.element_type!r}")
        if self.layer_offset not in (0, 1):
            raise ValueError("layer_offset must be 0 or 1")
        if self.norm_flag not in (NORM_UNRECORDED, NORM_APPLIED, NORM_NOT_APPLIED):
            raise ValueError("norm_flag must be 0, 1 or 2")
        if self.num_layers < 1 or self.hidden_dim < 1 or self.vocab_size < 2:
            raise ValueError("need num_layers >= 1, hidden_dim >= 1, vocab_size >= 2")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if len(self.continuation_tokens) != self.num_steps:
            raise ValueError("continuation length must equal num_steps")
        for t in self.prompt_tokens + self.continuation_tokens:
            if not 0 <= t < 2**32:
                raise ValueError("token ids must fit in u32")


@dataclass(frozen=True)
class Trace:
    """A parsed trace: header, optional head, float32 payload array.

    hidden_states traces carry payload (num_steps, num_layers,
    hidden_dim) plus the head; logits traces carry (num_steps,
    num_layers, vocab_size) and no head.
    """

    header: TraceHeader
    payload: np.ndarray
    head: UnembeddingHead | None = None

    def __post_init__(self):
        h = self.header
        p = np.ascontiguousarray(self.payload, dtype=np.float32)
        if h.payload_kind == "hidden_states":
            want = (h.num_steps, h.num_layers, h.hidden_dim)
            if self.head is None:
                raise ValueError("hidden_states trace requires a head")
            if self.head.matrix.shape != (h.vocab_size, h.hidden_dim):
                raise ValueError("head shape inconsistent with header")
        else:
            want = (h.num_steps, h.num_layers, h.vocab_size)
            if self.head is not None:
                raise ValueError("logits trace must not carry a head")
        if p.shape != want:
            raise ValueError(f"payload shape {p.shape} != declared {want}")
        if not np.isfinite(p).all():
            raise ValueError("payload must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "payload", p)


def _encode_ids(ids) -> bytes:
    return struct.pack("<I", len(ids)) + np.asarray(ids, dtype="<u4").tobytes()


def write_trace(trace: Trace, sink) -> int:
    """Serialize a trace; identical traces yield identical byte streams."""
    h = trace.header
    label = h.model_label.encode("utf-8")
    out = io.BytesIO()
    out.write(
        _FIXED_HEADER.pack(
            MAGIC,
            h.format_version,
            PAYLOAD_KINDS[h.payload_kind],
            ELEMENT_TYPES[h.element_type],
            h.layer_offset,
            h.norm_flag,
            0,
            h.num_layers,
            h.hidden_dim,
            h.vocab_size,
            h.num_steps,
        )
    )
    out.write(struct.pack("<I", len(label)))
    out.write(label)
    out.write(_encode_ids(h.prompt_tokens))
    out.write(_encode_ids(h.continuation_tokens))
    if trace.head is not None:
        out.write(np.ascontiguousarray(trace.head.matrix, dtype="<f4").tobytes())
    out.write(trace.payload.astype("<f4", copy=False).tobytes())
    blob = out.getvalue()

    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as f:
            f.write(blob)
    else:
        sink.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n > len(self.buf) - self.pos:
            raise TraceFormatError(
                f"truncated stream while reading {what}: need {n} bytes, "
                f"have {len(self.buf) - self.pos}",
                self.pos,
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def ids(self, what: str) -> tuple[int, ...]:
        at = self.pos
        count = self.u32(f"{what} count")
        if count * 4 > len(self.buf) - self.pos:
            raise TraceFormatError(
                f"{what} count {count} exceeds remaining stream", at
            )
        raw = self.take(count * 4, what)
        return tuple(int(x) for x in np.frombuffer(raw, dtype="<u4"))


def read_trace(source) -> Trace:
    """Parse and fully validate a trace stream.

    Accepts a path, a binary file object, or bytes. Truncated or
    inconsistent streams raise TraceFormatError with the fault offset;
    nothing is allocated beyond what the validated counts permit.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as f:
            buf = f.read()
    elif isinstance(source, (bytes, bytearray, memoryview)):
        buf = bytes(source)
    else:
        buf = source.read()

    r = _Reader(buf)
    fixed = r.take(_FIXED_HEADER.size, "fixed header")
    (
        magic,
        version,
        kind_code,
        elem_code,
        layer_offset,
        norm_flag,
        reserved,
        num_layers,
        hidden_dim,
        vocab_size,
        num_steps,
    ) = _FIXED_HEADER.unpack(fixed)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"unsupported format version {version}", 8)
    if kind_code not in _KIND_NAMES:
        raise TraceFormatError(f"unknown payload_kind code {kind_code}", 10)
    if elem_code not in _ELEMENT_NAMES:
        raise TraceFormatError(f"unknown element_type code {elem_code}", 11)
    if layer_offset not in (0, 1):
        raise TraceFormatError(f"layer_offset must be 0 or 1, got {layer_offset}", 12)
    if norm_flag not in (NORM_UNRECORDED, NORM_APPLIED, NORM_NOT_APPLIED):
        raise TraceFormatError(f"norm_flag must be 0..2, got {norm_flag}", 13)
    if reserved != 0:
        raise TraceFormatError(f"reserved field must be 0, got {reserved}", 14)
    if num_layers < 1 or hidden_dim < 1 or vocab_size < 2 or num_steps < 1:
        raise TraceFormatError(
            f"invalid counts: layers={num_layers} dim={hidden_dim} "
            f"vocab={vocab_size} steps={num_steps}",
            16,
        )

    at = r.pos
    label_len = r.u32("label length")
    label = r.take(label_len, "model label")
    try:
        model_label = label.decode("utf-8")
    except UnicodeDecodeError as e:
        raise TraceFormatError(f"model label is not valid UTF-8: {e}", at + 4) from None
    prompt = r.ids("prompt tokens")
    at = r.pos
    continuation = r.ids("continuation tokens")
    if len(continuation) != num_steps:
        raise TraceFormatError(
            f"continuation length {len(continuation)} != num_steps {num_steps}", at
        )

    kind = _KIND_NAMES[kind_code]
    if kind == "hidden_states":
        head_n = vocab_size * hidden_dim
        payload_n = num_steps * num_layers * hidden_dim
    else:
        head_n = 0
        payload_n = num_steps * num_layers * vocab_size
    expected = (head_n + payload_n) * 4
    remaining = len(buf) - r.pos
    if remaining != expected:
        raise TraceFormatError(
            f"payload size mismatch: declared counts need {expected} bytes, "
            f"stream has {remaining}",
            r.pos,
        )

    head = None
    if head_n:
        head_arr = np.frombuffer(r.take(head_n * 4, "head matrix"), dtype="<f4")
        try:
            head = UnembeddingHead(head_arr.reshape(vocab_size, hidden_dim))
        except ValueError as e:
            raise TraceFormatError(f"invalid head matrix: {e}", r.pos - head_n * 4) from None
    pay_at = r.pos
    payload = np.frombuffer(r.take(payload_n * 4, "payload"), dtype="<f4")
    if kind == "hidden_states":
        payload = payload.reshape(num_steps, num_layers, hidden_dim)
    else:
        payload = payload.reshape(num_steps, num_layers, vocab_size)

    header = TraceHeader(
        num_layers=num_layers,
        hidden_dim=hidden_dim,
        vocab_size=vocab_size,
        num_steps=num_steps,
        payload_kind=kind,
        element_type=_ELEMENT_NAMES[elem_code],
        layer_offset=layer_offset,
        norm_flag=norm_flag,
        model_label=model_label,
        prompt_tokens=prompt,
        continuation_tokens=continuation,
    )
    try:
        return Trace(header=header, payload=payload, head=head)
    except ValueError as e:
        raise TraceFormatError(f"inconsistent trace: {e}", pay_at) from None
