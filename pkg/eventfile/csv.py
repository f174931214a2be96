"""Plain-text event file: '# key=json' header lines, then channel,timestamp_ps rows."""

import csv
import json
from typing import Any, Dict, Iterator, List

import numpy as np

from .base import DEFAULT_CHUNK_RECORDS, BaseEventFormat, EventFileError, EventStream, PathLike, atomic_open

COLUMNS = ["channel", "timestamp_ps"]


class CsvEventFormat(BaseEventFormat):
    """Interoperable text variant of the event file."""

    name = "csv"
    suffixes = (".csv", ".txt")

    def sniff(self, path: PathLike) -> bool:
        with open(path, "r", encoding="utf-8", errors="replace") as f:
            for line in f:
                if line.startswith("#"):
                    continue
                return line.strip().replace(" ", "") == ",".join(COLUMNS)
        return False

    def read_header(self, path: PathLike) -> Dict[str, Any]:
        header: Dict[str, Any] = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.startswith("#"):
                    break
                key, sep, value = line[1:].strip().partition("=")
                if not sep:
                    continue
                try:
                    header[key.strip()] = json.loads(value)
                except json.JSONDecodeError as e:
                    raise EventFileError(f"{path}: corrupt header line for {key.strip()!r}: {e}") from e
        return header

    def iter_chunks(self, path: PathLike, chunk_records: int = DEFAULT_CHUNK_RECORDS) -> Iterator[EventStream]:
        header = self.read_header(path)
        channels: List[int] = []
        stamps: List[int] = []
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = csv.reader(line for line in f if not line.startswith("#"))
            first = next(rows, None)
            if first is None or [c.strip() for c in first] != COLUMNS:
                raise EventFileError(f"{path}: missing '{','.join(COLUMNS)}' column row")
            for lineno, row in enumerate(rows, start=2):
                if not row:
                    continue
                try:
                    channel, stamp = int(row[0]), int(row[1])
                except (ValueError, IndexError) as e:
                    raise EventFileError(f"{path}: bad record {row!r} (row {lineno})") from e
                if channel not in (0, 1) or stamp < 0:
                    raise EventFileError(f"{path}: record out of range {row!r} (row {lineno})")
                channels.append(channel)
                stamps.append(stamp)
                if len(stamps) >= chunk_records:
                    yield EventStream(np.array(channels), np.array(stamps), header)
                    channels, stamps = [], []
        if stamps:
            yield EventStream(np.array(channels), np.array(stamps), header)

    def write(self, path: PathLike, stream: EventStream) -> None:
        with atomic_open(path, "w", encoding="utf-8", newline="") as f:
            for key in sorted(stream.header):
                f.write(f"# {key}={json.dumps(stream.header[key], sort_keys=True)}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(COLUMNS)
            writer.writerows(zip(stream.channels.tolist(), stream.timestamps.tolist()))
        self.logger.info(f"Wrote {len(stream)} events to {path}")
