"""Unit tests for event file formats."""

import os
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from eventfile import (
    BinaryEventFormat,
    CsvEventFormat,
    EventFileError,
    EventStream,
    atomic_open,
    get_format_chain,
    read_stream,
    write_stream,
)
from eventfile.binary import MAGIC, PREAMBLE


class TestEventFormats(unittest.TestCase):
    """Test cases for writing, detecting and reading event files."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.stream = EventStream(
            channels=np.array([0, 1, 1, 0, 1], dtype=np.uint8),
            timestamps=np.array([10, 8290, 8290, 2**40, 2**62], dtype=np.int64),
            header={"seed": 5, "delay": {"coarse_half_roundtrips": 2}},
        )

    def tearDown(self):
        self.tmp.cleanup()

    def test_binary_round_trip(self):
        """Test that binary files keep records and header exactly."""
        path = self.dir / "run.bin"
        write_stream(path, self.stream, fmt="binary")
        self.assertIsInstance(get_format_chain().detect(path), BinaryEventFormat)
        loaded = read_stream(path)
        np.testing.assert_array_equal(loaded.channels, self.stream.channels)
        np.testing.assert_array_equal(loaded.timestamps, self.stream.timestamps)
        self.assertEqual(loaded.header, self.stream.header)

    def test_binary_record_size(self):
        """Test that records are packed into 9 bytes."""
        path = self.dir / "run.bin"
        write_stream(path, self.stream)
        with open(path, "rb") as f:
            _, _, header_len = PREAMBLE.unpack(f.read(PREAMBLE.size))
        self.assertEqual(path.stat().st_size, PREAMBLE.size + header_len + 9 * len(self.stream))

    def test_csv_round_trip(self):
        """Test that CSV files are detected and read back in chunks."""
        path = self.dir / "run.csv"
        write_stream(path, self.stream, fmt="csv")
        fmt = get_format_chain().detect(path)
        self.assertIsInstance(fmt, CsvEventFormat)
        chunks = list(fmt.iter_chunks(path, chunk_records=2))
        self.assertEqual([len(c) for c in chunks], [2, 2, 1])
        loaded = read_stream(path)
        np.testing.assert_array_equal(loaded.timestamps, self.stream.timestamps)
        self.assertEqual(loaded.header["seed"], 5)

    def test_unknown_format(self):
        """Test that an unrecognised file raises EventFileError."""
        path = self.dir / "junk.dat"
        path.write_bytes(b"not an event file\n1,2,3\n")
        with self.assertRaises(EventFileError):
            read_stream(path)

    def test_missing_file(self):
        """Test that a missing file raises EventFileError."""
        with self.assertRaises(EventFileError):
            read_stream(self.dir / "absent.bin")

    def test_truncated_payload(self):
        """Test that a partial record is reported."""
        path = self.dir / "run.bin"
        write_stream(path, self.stream)
        with open(path, "ab") as f:
            f.write(b"\x00\x01")
        with self.assertRaises(EventFileError):
            read_stream(path)

    def test_unsupported_version(self):
        """Test that a newer version number is rejected."""
        path = self.dir / "future.bin"
        path.write_bytes(PREAMBLE.pack(MAGIC, 99, 2) + b"{}")
        with self.assertRaises(EventFileError):
            read_stream(path)

    def test_bad_channel_in_binary(self):
        """Test that a channel outside {0, 1} is rejected."""
        path = self.dir / "bad.bin"
        record = struct.pack("<BQ", 3, 100)
        path.write_bytes(PREAMBLE.pack(MAGIC, 1, 2) + b"{}" + record)
        with self.assertRaises(EventFileError):
            read_stream(path)

    def test_bad_row_in_csv(self):
        """Test that a malformed CSV record is rejected."""
        path = self.dir / "bad.csv"
        path.write_text("channel,timestamp_ps\n0,10\n2,20\n")
        with self.assertRaises(EventFileError):
            read_stream(path)

    def test_format_from_suffix(self):
        """Test that the file suffix picks the format when none is named."""
        chain = get_format_chain()
        self.assertIn(".csv", CsvEventFormat.suffixes)
        self.assertIsInstance(chain.for_path(self.dir / "run.CSV"), CsvEventFormat)
        self.assertIsInstance(chain.for_path(self.dir / "run.bin"), BinaryEventFormat)
        self.assertIsInstance(chain.for_path(self.dir / "run"), BinaryEventFormat)
        path = self.dir / "run.csv"
        write_stream(path, self.stream)
        self.assertIsInstance(chain.detect(path), CsvEventFormat)
        self.assertEqual(read_stream(path).header["seed"], 5)

    def test_unknown_format_name(self):
        """Test that writing with an unknown format name fails."""
        with self.assertRaises(ValueError):
            write_stream(self.dir / "x", self.stream, fmt="hdf5")


class TestAtomicOpen(unittest.TestCase):
    """Test cases for atomic writes."""

    def test_failed_write_leaves_no_file(self):
        """Test that an exception inside the block leaves neither target nor temporary file."""
        with tempfile.TemporaryDirectory() as tmp:
            target = Path(tmp) / "out.csv"
            with self.assertRaises(RuntimeError):
                with atomic_open(target, "w") as f:
                    f.write("partial")
                    raise RuntimeError("interrupted")
            self.assertFalse(target.exists())
            self.assertEqual(os.listdir(tmp), [])

    def test_existing_file_replaced(self):
        """Test that a successful write replaces the previous content."""
        with tempfile.TemporaryDirectory() as tmp:
            target = Path(tmp) / "out.csv"
            target.write_text("old")
            with atomic_open(target, "w") as f:
                f.write("new")
            self.assertEqual(target.read_text(), "new")


class TestEventStream(unittest.TestCase):
    """Test cases for the in-memory stream."""

    def test_length_mismatch(self):
        """Test that channels and timestamps must have the same length."""
        with self.assertRaises(ValueError):
            EventStream(np.zeros(2), np.zeros(3))

    def test_counts_and_order(self):
        """Test per-channel counts and the sortedness check."""
        stream = EventStream([0, 1, 1], [5, 3, 9])
        self.assertEqual(stream.counts_per_channel(), {0: 1, 1: 2})
        self.assertFalse(stream.is_sorted())


if __name__ == "__main__":
    unittest.main()
