"""Event file formats for time-tagged detections."""

from .base import (
    BaseEventFormat,
    EventFileError,
    EventStream,
    FormatChain,
    atomic_open,
    get_format_chain,
    read_stream,
    write_stream,
)
from .binary import BinaryEventFormat
from .csv import CsvEventFormat

__all__ = [
    "BaseEventFormat",
    "BinaryEventFormat",
    "CsvEventFormat",
    "EventFileError",
    "EventStream",
    "FormatChain",
    "atomic_open",
    "get_format_chain",
    "read_stream",
    "write_stream",
]
