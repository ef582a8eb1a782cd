"""Versioned binary checkpoints.

Layout: 8-byte magic, u16 format version, then a length-prefixed payload
(one json metadata chunk followed by named arrays), closed by a CRC32
trailer over the payload. All fixed-size fields are little-endian.
Tensors are stored as little-endian float32; quantizer scalars keep
float64 so a save/load cycle is bit-identical. Readers refuse files
written by a newer format version.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig, config_from_dict, config_to_dict
from .errors import ContractError, FormatError
from .network import NetworkGraph

MAGIC = b"DJPQCKPT"
FORMAT_VERSION = 1

_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_OF = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Everything needed to rebuild a training run's network."""

    arch_text: str
    arrays: dict
    config: TrainConfig
    epoch: int
    manifest_id: str
    quantized: bool
    gated: bool


def checkpoint_from_graph(graph, config, epoch, manifest_id) -> Checkpoint:
    return Checkpoint(arch_text=graph.arch_text,
                      arrays=dict(graph.state_items()),
                      config=config,
                      epoch=epoch,
                      manifest_id=manifest_id,
                      quantized=graph.is_quantized,
                      gated=graph.is_gated)


def build_graph(ckpt) -> NetworkGraph:
    """Reconstruct the checkpointed network, bit-identical parameters."""
    cfg = ckpt.config
    graph = NetworkGraph(ckpt.arch_text,
                         rng=np.random.default_rng(0),
                         quantized=ckpt.quantized,
                         gated=ckpt.gated,
                         weight_bits=cfg.b_init_w,
                         act_bits=cfg.b_init_a,
                         alpha_th=cfg.alpha_th,
                         tau=cfg.tau)
    graph.load_state_items(ckpt.arrays)
    return graph


def save_checkpoint(ckpt, path):
    payload = bytearray()
    meta = json.dumps(
        {"arch": ckpt.arch_text,
         "config": config_to_dict(ckpt.config),
         "epoch": int(ckpt.epoch),
         "manifest": ckpt.manifest_id,
         "quantized": bool(ckpt.quantized),
         "gated": bool(ckpt.gated)},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload += struct.pack("<I", len(meta)) + meta
    payload += struct.pack("<I", len(ckpt.arrays))
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _TAG_OF:
            raise ContractError(
                f"checkpoint array {name!r} has unsupported dtype "
                f"{arr.dtype}; only float32/float64 are stored")
        tag = _TAG_OF[arr.dtype]
        name_b = name.encode("utf-8")
        payload += struct.pack("<H", len(name_b)) + name_b
        payload += struct.pack("<BB", tag, arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        data = arr.astype(_DTYPE_OF[tag], copy=False).tobytes()
        payload += struct.pack("<Q", len(data)) + data
    blob = MAGIC + struct.pack("<H", FORMAT_VERSION) + payload \
        + struct.pack("<I", zlib.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated at byte offset "
                              f"{len(self.buf)}, need {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<H")
    if version > FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} is newer than "
                          f"this build reads (up to {FORMAT_VERSION})")
    if len(buf) < r.pos + 4:
        raise FormatError(f"{path}: truncated at byte offset {len(buf)}, "
                          f"missing checksum trailer")
    payload = buf[r.pos:-4]
    (stored,) = struct.unpack("<I", buf[-4:])
    computed = zlib.crc32(payload)
    if stored != computed:
        raise FormatError(f"{path}: checksum mismatch, stored 0x{stored:08x} "
                          f"but payload hashes to 0x{computed:08x}")

    r = _Reader(payload, path)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPE_OF:
            raise FormatError(f"{path}: array {name!r} has unknown dtype "
                              f"tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        dtype = _DTYPE_OF[tag]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise FormatError(f"{path}: array {name!r} length {nbytes} does "
                              f"not match shape {tuple(shape)}")
        data = np.frombuffer(r.take(nbytes), dtype=dtype)
        arrays[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(payload):
        raise FormatError(f"{path}: {len(payload) - r.pos} trailing bytes "
                          f"after the last array")
    try:
        return Checkpoint(arch_text=meta["arch"],
                          arrays=arrays,
                          config=config_from_dict(meta["config"]),
                          epoch=meta["epoch"],
                          manifest_id=meta["manifest"],
                          quantized=meta["quantized"],
                          gated=meta["gated"])
    except KeyError as exc:
        raise FormatError(f"{path}: metadata is missing field {exc}") \
            from None
