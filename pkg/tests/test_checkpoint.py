"""
Unit Tests for the FUPM Checkpoint Format

Tests encoding, shape re-derivation on load and rejection of malformed
payloads.
"""

import struct
import tempfile
import unittest
import sys
import os
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fedup.checkpoint import (
    MAGIC,
    checkpoint_size,
    decode_model,
    encode_model,
    read_checkpoint,
    write_checkpoint,
)
from fedup.errors import CheckpointFormatError, IntegrityError
from fedup.nn import ModelSpec, init_model


def _assert_same_model(test, a, b):
    test.assertEqual(a.structure(), b.structure())
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weights, lb.weights)
        np.testing.assert_array_equal(la.biases, lb.biases)


class TestCheckpointEncoding(unittest.TestCase):
    """Test FUPM encode/decode"""

    def test_mlp_model(self):
        """Test an mlp comes back bit-identical with the same structure"""
        model = init_model(ModelSpec("mlp", (16,), 10, hidden=32), 1)
        _assert_same_model(self, model, decode_model(encode_model(model)))

    def test_cnn_shapes_are_rederived(self):
        """Test conv input/output shapes are recovered from the dense head"""
        model = init_model(ModelSpec("cnn", (1, 8, 8), 10, conv_channels=4, kernel_size=3), 2)
        decoded = decode_model(encode_model(model))
        self.assertEqual(decoded.layers[0].input_shape, (1, 8, 8))
        self.assertEqual(decoded.layers[0].output_shape, (4, 6, 6))
        _assert_same_model(self, model, decoded)

    def test_affine_layer_survives(self):
        """Test the non-prunable affine layer keeps its kind and shape"""
        for spec in (ModelSpec("mlp", (6,), 3, hidden=4, input_affine=True),
                     ModelSpec("cnn", (2, 5, 5), 3, conv_channels=2, kernel_size=2, input_affine=True)):
            model = init_model(spec, 3)
            _assert_same_model(self, model, decode_model(encode_model(model)))

    def test_size_matches_encoding(self):
        """Test checkpoint_size predicts the encoded length"""
        for spec in (ModelSpec("mlp", (16,), 10, hidden=64), ModelSpec("cnn", (3, 6, 6), 4)):
            model = init_model(spec, 0)
            self.assertEqual(checkpoint_size(model), len(encode_model(model)))

    def test_header_layout(self):
        """Test magic, version and layer count lead the payload"""
        payload = encode_model(init_model(ModelSpec("mlp", (4,), 2, hidden=3), 0))
        self.assertEqual(payload[:4], MAGIC)
        self.assertEqual(struct.unpack("<HI", payload[4:10]), (1, 2))

    def test_file_round_trip(self):
        """Test write_checkpoint / read_checkpoint through a file"""
        model = init_model(ModelSpec("mlp", (5,), 3, hidden=7), 4)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.fupm"
            written = write_checkpoint(model, path)
            self.assertEqual(written, path.stat().st_size)
            _assert_same_model(self, model, read_checkpoint(path))


class TestCheckpointRejection(unittest.TestCase):
    """Test malformed payloads are rejected"""

    def setUp(self):
        self.payload = encode_model(init_model(ModelSpec("mlp", (4,), 3, hidden=5), 0))

    def test_bad_magic(self):
        """Test a foreign magic number"""
        with self.assertRaises(CheckpointFormatError):
            decode_model(b"XXXX" + self.payload[4:])

    def test_bad_version(self):
        """Test an unknown format version"""
        with self.assertRaises(CheckpointFormatError):
            decode_model(self.payload[:4] + struct.pack("<H", 9) + self.payload[6:])

    def test_truncated(self):
        """Test a payload cut short"""
        with self.assertRaises(CheckpointFormatError):
            decode_model(self.payload[:-3])

    def test_trailing_bytes(self):
        """Test extra bytes after the last layer"""
        with self.assertRaises(CheckpointFormatError):
            decode_model(self.payload + b"\x00")

    def test_format_error_is_integrity_error(self):
        """Test format errors share the integrity category"""
        self.assertTrue(issubclass(CheckpointFormatError, IntegrityError))


if __name__ == '__main__':
    unittest.main()
