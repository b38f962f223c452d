"""
PDYC checkpoint container: named float64 parameter blocks.

Layout (little-endian):
    magic "PDYC", u32 version, u32 iteration, u32 block count
    per block: u16 name length, UTF-8 name, u8 ndim, u32 dims..., float64 data
    trailing u32 CRC32 of everything before it
"""

from __future__ import annotations

import logging
import struct
import zlib
from pathlib import Path

import numpy as np

from errors import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"PDYC"
VERSION = 1


def encode_blocks(blocks, iteration=0):
    """Serialize an ordered mapping of name -> array to bytes"""
    parts = [MAGIC, struct.pack("<III", VERSION, int(iteration), len(blocks))]
    for name, array in blocks.items():
        array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class ByteReader:
    """Sequential reader over a byte string raising FormatError on truncation"""

    def __init__(self, data, label="checkpoint"):
        self.data = data
        self.label = label
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.label} is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_blocks(data):
    """
    Parse bytes produced by encode_blocks.

    Returns:
        (dict name -> array in file order, iteration)
    """
    if len(data) < len(MAGIC) + 16:
        raise FormatError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    reader = ByteReader(body)
    reader.take(4)
    version, iteration, count = reader.unpack("<III")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != stored_crc:
        raise FormatError("checkpoint checksum mismatch")

    blocks = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=int))
        blocks[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if reader.offset != len(body):
        raise FormatError("trailing bytes after the last checkpoint block")
    return blocks, iteration


def write_blocks(path, blocks, iteration=0):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_blocks(blocks, iteration))
    logger.info("wrote checkpoint %s (%d blocks, iteration %d)", path, len(blocks), iteration)


def read_blocks(path):
    return decode_blocks(Path(path).read_bytes())
