"""Event stream container, format base class and format detection chain."""

import logging
import os
import tempfile
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

PathLike = Union[str, Path]
DEFAULT_CHUNK_RECORDS = 1_000_000


class EventFileError(Exception):
    """Event file is missing, corrupt or in an unknown format."""


@dataclass
class EventStream:
    """Time-tagged detections: channel (0/1) and timestamp in integer picoseconds."""

    channels: np.ndarray
    timestamps: np.ndarray
    header: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.channels.shape != self.timestamps.shape:
            raise ValueError(
                f"channels and timestamps differ in length: {self.channels.size} vs {self.timestamps.size}"
            )

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @classmethod
    def empty(cls, header: Optional[Dict[str, Any]] = None) -> "EventStream":
        return cls(np.empty(0, np.uint8), np.empty(0, np.int64), dict(header or {}))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) >= 0))

    def counts_per_channel(self) -> Dict[int, int]:
        counts = np.bincount(self.channels, minlength=2)
        return {0: int(counts[0]), 1: int(counts[1])}


@contextmanager
def atomic_open(path: PathLike, mode: str = "w", **kwargs):
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


class BaseEventFormat(ABC):
    """Abstract base class for event file formats."""

    name = "base"
    suffixes: Tuple[str, ...] = ()

    def __init__(self):
        self.logger = logging.getLogger(self.__class__.__name__)

    @abstractmethod
    def sniff(self, path: PathLike) -> bool:
        """Return True if ``path`` looks like this format."""

    @abstractmethod
    def read_header(self, path: PathLike) -> Dict[str, Any]:
        """Return the header dictionary stored in the file."""

    @abstractmethod
    def iter_chunks(self, path: PathLike, chunk_records: int = DEFAULT_CHUNK_RECORDS) -> Iterator[EventStream]:
        """Yield the records in file order, at most ``chunk_records`` at a time."""

    @abstractmethod
    def write(self, path: PathLike, stream: EventStream) -> None:
        """Write ``stream`` atomically."""

    def read(self, path: PathLike) -> EventStream:
        header = self.read_header(path)
        chunks = list(self.iter_chunks(path))
        if not chunks:
            return EventStream.empty(header)
        return EventStream(
            np.concatenate([c.channels for c in chunks]),
            np.concatenate([c.timestamps for c in chunks]),
            header,
        )


class FormatChain:
    """Picks the event format for a file, trying providers in priority order."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.formats: List[BaseEventFormat] = []
        self._setup_formats()

    def _setup_formats(self):
        from .binary import BinaryEventFormat
        from .csv import CsvEventFormat

        # binary has a magic string, so it is checked first
        self.formats.append(BinaryEventFormat())
        self.formats.append(CsvEventFormat())

    def by_name(self, name: str) -> BaseEventFormat:
        for fmt in self.formats:
            if fmt.name == name:
                return fmt
        raise ValueError(f"Unknown event format {name!r}; choose from {[f.name for f in self.formats]}")

    def for_path(self, path: PathLike) -> BaseEventFormat:
        """Format whose suffixes match the file name; binary otherwise."""
        suffix = Path(path).suffix.lower()
        for fmt in self.formats:
            if suffix in fmt.suffixes:
                return fmt
        return self.formats[0]

    def detect(self, path: PathLike) -> BaseEventFormat:
        path = Path(path)
        if not path.is_file():
            raise EventFileError(f"Event file not found: {path}")
        for fmt in self.formats:
            try:
                if fmt.sniff(path):
                    self.logger.debug(f"{path} detected as {fmt.name}")
                    return fmt
            except OSError as e:
                raise EventFileError(f"Cannot read {path}: {e}") from e
        raise EventFileError(f"Unrecognised event file format: {path}")


_chain: Optional[FormatChain] = None


def get_format_chain() -> FormatChain:
    global _chain
    if _chain is None:
        _chain = FormatChain()
    return _chain


def read_stream(path: PathLike) -> EventStream:
    return get_format_chain().detect(path).read(path)


def write_stream(path: PathLike, stream: EventStream, fmt: Optional[str] = None) -> None:
    chain = get_format_chain()
    writer = chain.by_name(fmt) if fmt else chain.for_path(path)
    writer.write(path, stream)
