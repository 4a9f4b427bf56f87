"""
FUPM model checkpoint format.

Layout (little-endian):
    magic "FUPM", version u16, layer count u32, then per layer:
    kind u8, shape rank u8, dims u32 x rank,
    weight count u64, weights f32 x count,
    bias count u64, biases f32 x count.

Only the weight shape is stored. Layer input/output shapes are re-derived
on load, working backwards from the final dense layer; conv feature maps
are assumed square.
"""

import math
import struct
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import CheckpointFormatError
from .nn import LayerKind, LayerParams, ModelParams

MAGIC = b"FUPM"
VERSION = 1

KIND_CODES = {
    LayerKind.DENSE: 0,
    LayerKind.CONV2D: 1,
    LayerKind.OTHER: 2,
}
CODE_KINDS = {code: kind for kind, code in KIND_CODES.items()}


def checkpoint_size(model: ModelParams) -> int:
    """Exact encoded size in bytes, without encoding."""
    # header, then kind, rank, shape and two array lengths per layer
    size = len(MAGIC) + 2 + 4
    size += sum(1 + 1 + 4 * len(layer.shape) + 8 + 8 for layer in model.layers)
    return size + 4 * model.parameter_count()


def encode_model(model: ModelParams) -> bytes:
    """FUPM bytes: header, then per layer kind, shape, weights and biases as little-endian float32."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<BB", KIND_CODES[layer.kind], len(layer.shape)))
        parts.append(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
        parts.append(struct.pack("<Q", layer.weights.size))
        parts.append(layer.weights.astype("<f4").tobytes())
        parts.append(struct.pack("<Q", layer.biases.size))
        parts.append(layer.biases.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.payload):
            raise CheckpointFormatError(
                f"truncated checkpoint: need {count} bytes at offset {self.offset}, "
                f"have {len(self.payload) - self.offset}"
            )
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def _derive_shapes(raw: List[Tuple[LayerKind, Tuple[int, ...]]]) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    shapes: List[Tuple[Tuple[int, ...], Tuple[int, ...]]] = [None] * len(raw)
    next_input: Optional[Tuple[int, ...]] = None
    for index in reversed(range(len(raw))):
        kind, shape = raw[index]
        if kind == LayerKind.DENSE:
            if len(shape) != 2:
                raise CheckpointFormatError(f"dense layer {index} has rank {len(shape)}")
            shapes[index] = ((shape[1],), (shape[0],))
        elif kind == LayerKind.OTHER:
            shapes[index] = (shape, shape)
        else:
            if len(shape) != 4 or shape[2] != shape[3]:
                raise CheckpointFormatError(f"conv2d layer {index} has shape {shape}")
            if next_input is None:
                raise CheckpointFormatError(f"conv2d layer {index} has no following layer")
            out_channels, in_channels, k, _ = shape
            if len(next_input) == 3:
                output_shape = next_input
            else:
                spatial, rem = divmod(int(np.prod(next_input)), out_channels)
                side = math.isqrt(spatial)
                if rem or side * side != spatial:
                    raise CheckpointFormatError(
                        f"cannot derive a square feature map for conv2d layer {index}"
                    )
                output_shape = (out_channels, side, side)
            if output_shape[0] != out_channels:
                raise CheckpointFormatError(f"conv2d layer {index} channel mismatch")
            input_shape = (in_channels, output_shape[1] + k - 1, output_shape[2] + k - 1)
            shapes[index] = (input_shape, output_shape)
        next_input = shapes[index][0]
    return shapes


def decode_model(payload: bytes) -> ModelParams:
    """Parse a FUPM payload; any deviation raises CheckpointFormatError."""
    reader = _Reader(payload)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic: not a FUPM checkpoint")
    version, layer_count = reader.unpack("<HI")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")

    raw = []
    for index in range(layer_count):
        code, rank = reader.unpack("<BB")
        if code not in CODE_KINDS:
            raise CheckpointFormatError(f"unknown layer kind code {code} at layer {index}")
        dims = reader.unpack(f"<{rank}I")
        (weight_count,) = reader.unpack("<Q")
        if weight_count != int(np.prod(dims)):
            raise CheckpointFormatError(
                f"layer {index} declares dims {dims} but {weight_count} weights"
            )
        weights = reader.floats(weight_count)
        (bias_count,) = reader.unpack("<Q")
        biases = reader.floats(bias_count)
        raw.append((CODE_KINDS[code], tuple(dims), weights, biases))

    if reader.offset != len(payload):
        raise CheckpointFormatError(f"{len(payload) - reader.offset} trailing bytes after checkpoint")

    shapes = _derive_shapes([(kind, dims) for kind, dims, _, _ in raw])
    layers = [
        LayerParams(kind, dims, input_shape, output_shape, weights, biases)
        for (kind, dims, weights, biases), (input_shape, output_shape) in zip(raw, shapes)
    ]
    return ModelParams(layers)


def write_checkpoint(model: ModelParams, path: Union[str, Path]) -> int:
    payload = encode_model(model)
    Path(path).write_bytes(payload)
    return len(payload)


def read_checkpoint(path: Union[str, Path]) -> ModelParams:
    return decode_model(Path(path).read_bytes())
