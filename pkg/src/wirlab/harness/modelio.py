"""Binary model files.

Layout, all little-endian::

    b"WIRM"                      magic, 4 bytes
    u32  version                 currently 1
    i32  n_bits
    i32  channels
    i32  side
    i32  filters
    i32  message_channels
    u32  seed
    f32  strength
    f32[] weights                every tensor of PARAM_KEYS in order, C order
    u32  crc32                   zlib CRC-32 of every preceding byte
"""
import struct
import zlib
from pathlib import Path

import numpy as np

from ..codec import PARAM_KEYS, CodecConfig, CodecParams

MAGIC = b"WIRM"
VERSION = 1
_HEADER = struct.Struct("<4sI")
_CONFIG = struct.Struct("<iiiiiIf")


class CorruptModelError(ValueError):
    """The file is not a valid model: bad magic, bad checksum or truncated."""


class UnsupportedModelVersion(CorruptModelError):
    def __init__(self, version):
        super().__init__(f"unsupported model file version {version} (this build reads {VERSION})")
        self.version = version


def model_bytes(params):
    cfg = params.config
    body = [_HEADER.pack(MAGIC, VERSION),
            _CONFIG.pack(cfg.n_bits, cfg.channels, cfg.side, cfg.filters,
                         cfg.message_channels, cfg.seed, cfg.strength)]
    shapes = cfg.param_shapes()
    for key in PARAM_KEYS:
        arr = np.asarray(params[key])
        if arr.shape != shapes[key]:
            raise ValueError(f"{key} has shape {arr.shape}, expected {shapes[key]}")
        body.append(arr.astype("<f4").tobytes(order="C"))
    data = b"".join(body)
    return data + struct.pack("<I", zlib.crc32(data))


def params_from_bytes(data):
    if len(data) < _HEADER.size + _CONFIG.size + 4:
        raise CorruptModelError("model file is truncated")
    magic, version = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptModelError(f"bad magic {magic!r}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptModelError("checksum mismatch")
    if version != VERSION:
        raise UnsupportedModelVersion(version)
    n, c, side, f, m, seed, strength = _CONFIG.unpack_from(data, _HEADER.size)
    try:
        cfg = CodecConfig(n_bits=n, channels=c, side=side, filters=f, strength=float(strength),
                          message_channels=m, seed=seed)
    except ValueError as exc:
        raise CorruptModelError(f"invalid codec config: {exc}") from exc
    offset = _HEADER.size + _CONFIG.size
    weights = {}
    for key, shape in cfg.param_shapes().items():
        size = int(np.prod(shape))
        if offset + 4 * size > len(data) - 4:
            raise CorruptModelError("model file is truncated")
        weights[key] = np.frombuffer(data, dtype="<f4", count=size, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset += 4 * size
    if offset != len(data) - 4:
        raise CorruptModelError("trailing bytes after weights")
    return CodecParams(cfg, {k: weights[k] for k in PARAM_KEYS})


def save_model(params, path):
    Path(path).write_bytes(model_bytes(params))


def load_model(path):
    return params_from_bytes(Path(path).read_bytes())
