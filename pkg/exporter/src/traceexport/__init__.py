from .export import ExportSpec, UnsupportedModelError, capture, export
from .writer import TracePayload, encode_trace, write_trace_file

__all__ = [
    "ExportSpec",
    "TracePayload",
    "UnsupportedModelError",
    "capture",
    "encode_trace",
    "export",
    "write_trace_file",
]
