"""Versioned binary weight files.

Layout: 5-byte magic, ``uint32`` header field count, that many little-endian
``uint32`` config fields, then every parameter tensor as little-endian
float64 in declaration order. Shapes are implied by the config.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Network, build_network

CLASSIFIER_MAGIC = b"PSDW1"

_CONFIG_FIELDS = ("conv_layers", "filters", "fc_hidden", "num_classes", "input_side", "in_channels")


class WeightFileError(ValueError):
    pass


def pack(magic: bytes, header: list[int], params: list[np.ndarray]) -> bytes:
    parts = [magic, struct.pack("<I", len(header)), struct.pack(f"<{len(header)}I", *header)]
    parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params]
    return b"".join(parts)


def unpack_header(data: bytes, magic: bytes) -> tuple[list[int], int]:
    """Return ``(header, offset_of_first_tensor)``."""
    if data[:len(magic)] != magic:
        raise WeightFileError(f"bad magic {data[:len(magic)]!r}, expected {magic!r}")
    pos = len(magic)
    if len(data) < pos + 4:
        raise WeightFileError("truncated header")
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + 4 * n:
        raise WeightFileError("truncated header")
    header = list(struct.unpack_from(f"<{n}I", data, pos))
    return header, pos + 4 * n


def fill_params(data: bytes, offset: int, params: list[np.ndarray]) -> None:
    expected = offset + sum(p.size for p in params) * 8
    if len(data) != expected:
        raise WeightFileError(f"weight payload is {len(data)} bytes, expected {expected}")
    for p in params:
        n = p.size
        p[...] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(p.shape)
        offset += 8 * n


def dumps_classifier(net: Network) -> bytes:
    cfg = net.config
    return pack(CLASSIFIER_MAGIC, [getattr(cfg, f) for f in _CONFIG_FIELDS], net.parameters())


def loads_classifier(data: bytes) -> Network:
    header, offset = unpack_header(data, CLASSIFIER_MAGIC)
    if len(header) != len(_CONFIG_FIELDS):
        raise WeightFileError(f"expected {len(_CONFIG_FIELDS)} config fields, found {len(header)}")
    net = build_network(ModelConfig(**dict(zip(_CONFIG_FIELDS, header))))
    fill_params(data, offset, net.parameters())
    return net


def save_classifier(path: str | os.PathLike, net: Network) -> None:
    Path(path).write_bytes(dumps_classifier(net))


def load_classifier(path: str | os.PathLike) -> Network:
    return loads_classifier(Path(path).read_bytes())
