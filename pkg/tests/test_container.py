import struct
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.container import decode_container, encode_container, read_container, write_container
from src.errors import FormatError
from src.utils import sha256_file


def _sample():
    meta = {"kind": "test", "b": [1, 2], "a": {"nested": True}}
    tensors = {
        "w": np.arange(6, dtype=np.float32).reshape(2, 3),
        "label": np.array([[0, 2, 1], [1, 1, 0]], dtype=np.uint16),
        "ids": np.array([10 ** 10, -1], dtype=np.int64),
    }
    return meta, tensors


class TestContainerLayout(unittest.TestCase):
    """Structure binaire MPNZ."""

    def test_header(self):
        blob = encode_container({"k": 1}, {})
        self.assertEqual(blob[:4], b"MPNZ")
        self.assertEqual(struct.unpack("<I", blob[4:8])[0], 1)
        (length,) = struct.unpack("<Q", blob[8:16])
        self.assertEqual(blob[16:16 + length], b'{"k":1}')
        self.assertEqual(len(blob), 16 + length)

    def test_dtypes_are_declared(self):
        meta, tensors = _sample()
        decoded_meta, decoded = decode_container(encode_container(meta, tensors))
        self.assertEqual(decoded_meta["dtypes"], {"label": "u16", "ids": "i64"})
        self.assertEqual(decoded["label"].dtype, np.uint16)
        self.assertEqual(decoded["ids"].dtype, np.int64)
        self.assertEqual(decoded["w"].dtype, np.float32)
        np.testing.assert_array_equal(decoded["ids"], tensors["ids"])
        self.assertEqual(decoded_meta["a"], {"nested": True})

    def test_key_order_does_not_change_bytes(self):
        _, tensors = _sample()
        first = encode_container({"b": 1, "a": 2}, tensors)
        second = encode_container({"a": 2, "b": 1}, tensors)
        self.assertEqual(first, second)

    def test_empty_and_scalar_tensors(self):
        tensors = {"empty": np.zeros((0, 3), np.float32), "scalar": np.array(2.5, dtype=np.float32)}
        _, decoded = decode_container(encode_container({}, tensors))
        self.assertEqual(decoded["empty"].shape, (0, 3))
        self.assertEqual(decoded["scalar"].shape, ())
        self.assertEqual(float(decoded["scalar"]), 2.5)


class TestContainerErrors(unittest.TestCase):
    def setUp(self):
        self.blob = encode_container(*_sample())

    def test_bad_magic(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(b"NOPE" + self.blob[4:])
        self.assertEqual(ctx.exception.offset, 0)

    def test_unknown_version(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(self.blob[:4] + struct.pack("<I", 2) + self.blob[8:])
        self.assertEqual(ctx.exception.offset, 4)

    def test_truncation_reports_offset(self):
        with self.assertRaises(FormatError) as ctx:
            decode_container(self.blob[:-3])
        self.assertIsNotNone(ctx.exception.offset)
        self.assertIn("byte offset", str(ctx.exception))

    def test_unsupported_dtype(self):
        with self.assertRaises(FormatError):
            encode_container({}, {"c": np.zeros(2, dtype=np.complex64)})

    def test_missing_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FormatError):
                read_container(Path(tmp) / "absent.mpnz")


class TestContainerFiles(unittest.TestCase):
    def test_write_returns_file_hash(self):
        meta, tensors = _sample()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "x.mpnz"
            digest = write_container(path, meta, tensors)
            self.assertEqual(digest, sha256_file(path))
            loaded_meta, loaded = read_container(path)
            self.assertEqual(loaded_meta["kind"], "test")
            np.testing.assert_array_equal(loaded["w"], tensors["w"])


if __name__ == "__main__":
    unittest.main()
