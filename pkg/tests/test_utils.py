import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.utils import (
    derive_seed,
    example_rng,
    fast_nondeterministic,
    get_log_level,
    get_threads,
    read_json,
    resolve_threads,
    sha256_file,
    sha256_json,
    write_json,
)


class TestThreads(unittest.TestCase):
    """Lecture de VMPARSE_THREADS."""

    def test_env_value_is_used(self):
        with patch.dict(os.environ, {"VMPARSE_THREADS": "4"}):
            self.assertEqual(get_threads(), 4)

    def test_malformed_value_falls_back(self):
        with patch.dict(os.environ, {"VMPARSE_THREADS": "many"}):
            self.assertEqual(get_threads(default=2), 2)
        with patch.dict(os.environ, {"VMPARSE_THREADS": "0"}):
            self.assertEqual(get_threads(default=3), 3)

    def test_flag_beats_environment(self):
        with patch.dict(os.environ, {"VMPARSE_THREADS": "4"}):
            self.assertEqual(resolve_threads(2, 8), 2)
            self.assertEqual(resolve_threads(None, 8), 4)

    def test_config_value_when_nothing_else(self):
        with patch.dict(os.environ):
            os.environ.pop("VMPARSE_THREADS", None)
            self.assertEqual(resolve_threads(None, 5), 5)
            self.assertEqual(resolve_threads(None), 1)


class TestEnvironmentFlags(unittest.TestCase):
    def test_fast_nondeterministic(self):
        with patch.dict(os.environ, {"VMPARSE_FAST_NONDETERMINISTIC": "1"}):
            self.assertTrue(fast_nondeterministic())
        with patch.dict(os.environ, {"VMPARSE_FAST_NONDETERMINISTIC": "no"}):
            self.assertFalse(fast_nondeterministic())

    def test_log_level_is_upper_case(self):
        with patch.dict(os.environ, {"VMPARSE_LOG_LEVEL": "debug"}):
            self.assertEqual(get_log_level(), "DEBUG")


class TestSeeds(unittest.TestCase):
    def test_derive_seed_is_stable_and_63_bit(self):
        a = derive_seed(0, "resnet9-k3-relu-ws0")
        self.assertEqual(a, derive_seed(0, "resnet9-k3-relu-ws0"))
        self.assertNotEqual(a, derive_seed(1, "resnet9-k3-relu-ws0"))
        self.assertGreaterEqual(a, 0)
        self.assertLess(a, 2 ** 63)

    def test_example_streams_are_keyed_by_index(self):
        a = example_rng(7, 3).standard_normal(5)
        b = example_rng(7, 3).standard_normal(5)
        c = example_rng(7, 4).standard_normal(5)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))


class TestJson(unittest.TestCase):
    def test_hash_ignores_key_order(self):
        self.assertEqual(sha256_json({"a": 1, "b": [1, 2]}), sha256_json({"b": [1, 2], "a": 1}))

    def test_write_is_byte_stable(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "sub" / "report.json"
            write_json(path, {"z": 1.5, "a": None})
            first = sha256_file(path)
            write_json(path, {"a": None, "z": 1.5})
            self.assertEqual(first, sha256_file(path))
            self.assertEqual(read_json(path), {"a": None, "z": 1.5})


if __name__ == "__main__":
    unittest.main()
