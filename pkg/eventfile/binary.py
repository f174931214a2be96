"""Binary event file: magic, version, JSON header, packed little-endian records."""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterator, Tuple

import numpy as np

from .base import DEFAULT_CHUNK_RECORDS, BaseEventFormat, EventFileError, EventStream, PathLike, atomic_open

MAGIC = b"CBHOMEV1"
VERSION = 1
PREAMBLE = struct.Struct("<8sHI")  # magic, version, header length
RECORD_DTYPE = np.dtype([("channel", "u1"), ("timestamp", "<u8")])  # packed, 9 bytes
INT64_MAX = np.iinfo(np.int64).max


class BinaryEventFormat(BaseEventFormat):
    """Records are (channel: u8, timestamp: u64 ps), little-endian, no padding."""

    name = "binary"
    suffixes = (".bin", ".cbhom")

    def sniff(self, path: PathLike) -> bool:
        with open(path, "rb") as f:
            return f.read(len(MAGIC)) == MAGIC

    def _read_preamble(self, path: PathLike) -> Tuple[Dict[str, Any], int]:
        with open(path, "rb") as f:
            raw = f.read(PREAMBLE.size)
            if len(raw) < PREAMBLE.size:
                raise EventFileError(f"{path}: truncated preamble")
            magic, version, header_len = PREAMBLE.unpack(raw)
            if magic != MAGIC:
                raise EventFileError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise EventFileError(f"{path}: unsupported version {version}")
            blob = f.read(header_len)
        if len(blob) != header_len:
            raise EventFileError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise EventFileError(f"{path}: corrupt header: {e}") from e
        return header, PREAMBLE.size + header_len

    def read_header(self, path: PathLike) -> Dict[str, Any]:
        return self._read_preamble(path)[0]

    def iter_chunks(self, path: PathLike, chunk_records: int = DEFAULT_CHUNK_RECORDS) -> Iterator[EventStream]:
        header, offset = self._read_preamble(path)
        payload = Path(path).stat().st_size - offset
        if payload % RECORD_DTYPE.itemsize:
            raise EventFileError(
                f"{path}: payload of {payload} bytes is not a whole number of {RECORD_DTYPE.itemsize}-byte records"
            )
        with open(path, "rb") as f:
            f.seek(offset)
            while True:
                batch = np.fromfile(f, dtype=RECORD_DTYPE, count=chunk_records)
                if batch.size == 0:
                    break
                if np.any(batch["channel"] > 1):
                    raise EventFileError(f"{path}: channel outside {{0, 1}}")
                if np.any(batch["timestamp"] > INT64_MAX):
                    raise EventFileError(f"{path}: timestamp beyond the 63-bit picosecond range")
                yield EventStream(batch["channel"], batch["timestamp"].astype(np.int64), header)

    def write(self, path: PathLike, stream: EventStream) -> None:
        blob = json.dumps(stream.header, sort_keys=True).encode("utf-8")
        records = np.empty(len(stream), dtype=RECORD_DTYPE)
        records["channel"] = stream.channels
        records["timestamp"] = stream.timestamps.astype(np.uint64)
        with atomic_open(path, "wb") as f:
            f.write(PREAMBLE.pack(MAGIC, VERSION, len(blob)))
            f.write(blob)
            f.write(records.tobytes())
        self.logger.info(f"Wrote {len(stream)} events to {path}")
