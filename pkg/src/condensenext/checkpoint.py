"""Compact binary checkpoints.

Layout (all integers little-endian)::

    b"CNXK"  uint16 version
    uint32 n_pairs, then per pair: uint16 key length, key, uint32 value length, value
    uint64 n_bytes, float32 parameters in graph declaration order
    uint64 n_bytes, float32 batch-norm running statistics
    uint64 n_bytes, float32 optimizer velocity (may be empty)
    uint32 CRC-32 of every preceding byte

Learned group convolution weights store only the connections their mask
keeps, so the parameter block holds exactly ``4 * P`` bytes where ``P`` is
the live parameter count.  Masks travel in the header as packed bits.
"""

from __future__ import annotations

import base64
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import LayerGraph, ModelSpec, build
from .compression import expand_mask
from .data import CIFAR_MEAN, CIFAR_STD
from .errors import ChecksumError, FormatError, MagicError, VersionError

MAGIC = b"CNXK"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class CheckpointMeta:
    mean: tuple = CIFAR_MEAN
    std: tuple = CIFAR_STD
    class_counts: tuple = ()
    epoch: int = 0
    extra: dict = field(default_factory=dict)
    velocity: list | None = None  # one array per parameter, optional


def _stored_params(graph: LayerGraph):
    """(tensor, keep-mask or None) for every parameter in declaration order."""
    masks = {id(n.params["weight"]): expand_mask(n.lgc.mask, n.lgc.out_channels)
             for n in graph.lgc_nodes()}
    for _, t in graph.parameters():
        yield t, masks.get(id(t))


def _pack_floats(arrays) -> bytes:
    if not arrays:
        return b""
    return np.concatenate([np.asarray(a, dtype=_F32).reshape(-1) for a in arrays]).tobytes()


def _header(graph: LayerGraph, meta: CheckpointMeta) -> list:
    pairs = [
        ("spec", graph.spec.to_text()),
        ("mean", ",".join(repr(float(v)) for v in meta.mean)),
        ("std", ",".join(repr(float(v)) for v in meta.std)),
        ("class_counts", ",".join(str(int(c)) for c in meta.class_counts)),
        ("epoch", str(int(meta.epoch))),
        ("dropout_rate", repr(float(graph.dropout_rate))),
        ("optimizer", "nesterov" if meta.velocity is not None else "none"),
    ]
    for node in graph.lgc_nodes():
        st = node.lgc
        bits = base64.b64encode(np.packbits(st.mask.reshape(-1)).tobytes()).decode("ascii")
        pairs.append((f"mask.{node.name}", f"{st.groups}x{st.in_channels}:{st.stage_index}:{bits}"))
    for k, v in meta.extra.items():
        pairs.append((f"meta.{k}", str(v)))
    return pairs


def save_checkpoint(graph: LayerGraph, meta: CheckpointMeta | None = None) -> bytes:
    meta = meta or CheckpointMeta()
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    pairs = _header(graph, meta)
    out += struct.pack("<I", len(pairs))
    for k, v in pairs:
        kb, vb = k.encode("utf-8"), v.encode("utf-8")
        out += struct.pack("<H", len(kb)) + kb + struct.pack("<I", len(vb)) + vb

    stored = list(_stored_params(graph))
    params = [t.data if m is None else t.data[m] for t, m in stored]
    buffers = [a for _, a in graph.buffers()]
    if meta.velocity is not None:
        velocity = [np.asarray(v).reshape(t.shape) if m is None else np.asarray(v).reshape(t.shape)[m]
                    for (t, m), v in zip(stored, meta.velocity)]
    else:
        velocity = []
    for block in (params, buffers, velocity):
        raw = _pack_floats(block)
        out += struct.pack("<Q", len(raw)) + raw
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated {what}: expected {n} bytes, only {len(self.buf) - self.pos} remain", self.pos
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v)


def _restore_masks(graph: LayerGraph, header: dict):
    for node in graph.lgc_nodes():
        key = f"mask.{node.name}"
        if key not in header:
            raise FormatError(f"header lacks {key}")
        dims, stage, bits = header[key].split(":", 2)
        g, i = (int(v) for v in dims.split("x"))
        st = node.lgc
        if (g, i) != (st.groups, st.in_channels):
            raise FormatError(f"{key}: mask {g}x{i} does not fit layer {st.groups}x{st.in_channels}")
        flat = np.unpackbits(np.frombuffer(base64.b64decode(bits), dtype=np.uint8))[: g * i]
        st.mask = flat.reshape(g, i).astype(bool)
        st.stage_index = int(stage)


def _scan(blob: bytes) -> tuple:
    """Walk the length fields only; returns (header dict of raw bytes, block offsets)."""
    r = _Reader(blob)
    r.take(6, "preamble")
    (n_pairs,) = r.unpack("<I", "header count")
    header = {}
    for _ in range(n_pairs):
        (kl,) = r.unpack("<H", "header key length")
        key = r.take(kl, "header key")
        (vl,) = r.unpack("<I", "header value length")
        header[key] = r.take(vl, "header value")
    blocks = []
    for what in ("parameter payload", "statistics", "optimizer state"):
        (size,) = r.unpack("<Q", f"{what} length")
        if r.pos + size > len(blob):
            raise FormatError(
                f"truncated {what}: expected {size} bytes, found {len(blob) - r.pos}", r.pos
            )
        blocks.append((what, r.pos, size))
        r.pos += size
    r.take(4, "checksum")
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} unexpected trailing bytes", r.pos)
    return header, blocks


def load_checkpoint(blob: bytes):
    """Rebuild the graph stored in ``blob``; returns ``(graph, CheckpointMeta)``.

    Checks run in order: magic, version, declared lengths, checksum, then
    consistency of the payload with the architecture in the header.
    """
    blob = bytes(blob)
    if blob[:4] != MAGIC:
        raise MagicError(f"not a checkpoint: magic {blob[:4]!r}", 0)
    if len(blob) < 6:
        raise FormatError(f"truncated version: expected 6 bytes, found {len(blob)}", 4)
    (version,) = struct.unpack("<H", blob[4:6])
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    raw_header, layout = _scan(blob)
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch: checkpoint is corrupted", len(blob) - 4)
    try:
        header = {k.decode("utf-8"): v.decode("utf-8") for k, v in raw_header.items()}
    except UnicodeDecodeError as exc:
        raise FormatError("header is not valid UTF-8") from exc
    if "spec" not in header or "mean" not in header or "std" not in header:
        raise FormatError("header lacks spec, mean or std")

    spec = ModelSpec.from_text(header["spec"])
    graph = build(spec, seed=0)
    graph.dropout_rate = float(header.get("dropout_rate", graph.dropout_rate))
    _restore_masks(graph, header)
    stored = list(_stored_params(graph))
    n_params = sum(t.size if m is None else int(m.sum()) for t, m in stored)
    n_buffers = sum(a.size for _, a in graph.buffers())

    blocks = []
    for (what, pos, size), expect in zip(layout, (4 * n_params, 4 * n_buffers, None)):
        if expect is not None and size != expect:
            raise FormatError(f"{what}: file holds {size} bytes, architecture needs {expect}", pos)
        blocks.append(np.frombuffer(blob, dtype=_F32, count=size // 4, offset=pos))

    payload, stats, vel = blocks
    off = 0
    for t, m in stored:
        if m is None:
            t.data = payload[off:off + t.size].reshape(t.shape).copy()
            off += t.size
        else:
            k = int(m.sum())
            w = np.zeros(t.shape, dtype=np.float32)
            w[m] = payload[off:off + k]
            t.data = w
            off += k
    off = 0
    for _, a in graph.buffers():
        a[...] = stats[off:off + a.size].reshape(a.shape)
        off += a.size

    velocity = None
    if vel.size:
        if vel.size != n_params:
            raise FormatError(f"optimizer state holds {vel.size} values, expected {n_params}")
        velocity, off = [], 0
        for t, m in stored:
            v = np.zeros(t.shape, dtype=np.float32)
            k = t.size if m is None else int(m.sum())
            if m is None:
                v[...] = vel[off:off + k].reshape(t.shape)
            else:
                v[m] = vel[off:off + k]
            velocity.append(v)
            off += k

    counts = tuple(int(c) for c in header.get("class_counts", "").split(",") if c)
    extra = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    meta = CheckpointMeta(_floats(header["mean"]), _floats(header["std"]), counts,
                          int(header.get("epoch", 0)), extra, velocity)
    return graph, meta


def write_checkpoint(path, graph: LayerGraph, meta: CheckpointMeta | None = None) -> int:
    blob = save_checkpoint(graph, meta)
    Path(path).write_bytes(blob)
    return len(blob)


def read_checkpoint(path):
    return load_checkpoint(Path(path).read_bytes())
