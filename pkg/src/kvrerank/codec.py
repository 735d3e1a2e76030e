"""Binary serialization of document KV caches, with optional quantization.

Entry format (all integers little-endian):

    magic "HRKV" | version u16 | scheme u8 | layers u16 | kv_heads u16 |
    document_len u16 | head_dim u16 | valid_len u16 | chunk_id_len u16 |
    chunk_id bytes
    [quantized only] per layer, K then V: float32 scales [kv_heads*head_dim]
    payload, per layer, K then V, in [kv_head][token][channel] order

Scheme codes: 0 = F32 (raw float32, decode is byte-exact), 2 = INT8,
3 = INT4 (two codes per byte, low nibble first). Quantization is symmetric
per (kv_head, channel) with the scale shared across tokens; codes are
round-half-away-from-zero and the payload is dequantized back to float32 on
load, so decoded entries drop straight into the scoring path.
"""

from __future__ import annotations

import enum
import struct

import numpy as np

from .errors import CodecError, FormatError
from .model import KVTensorSet
from .reranker import DocKV

MAGIC = b"HRKV"
VERSION = 1
_HEADER = struct.Struct("<4sHB6H")


class QuantScheme(enum.Enum):
    F32 = 0
    INT8_PER_CHANNEL = 2
    INT4_PER_CHANNEL = 3

    @classmethod
    def from_name(cls, name: str) -> "QuantScheme":
        key = name.strip().upper()
        aliases = {"F32": cls.F32, "FLOAT32": cls.F32,
                   "INT8": cls.INT8_PER_CHANNEL, "KV8": cls.INT8_PER_CHANNEL,
                   "INT4": cls.INT4_PER_CHANNEL, "KV4": cls.INT4_PER_CHANNEL}
        if key not in aliases:
            raise CodecError(f"unknown quantization scheme {name!r}")
        return aliases[key]

    @property
    def short_name(self) -> str:
        return {QuantScheme.F32: "f32", QuantScheme.INT8_PER_CHANNEL: "int8",
                QuantScheme.INT4_PER_CHANNEL: "int4"}[self]


_LEVELS = {QuantScheme.INT8_PER_CHANNEL: 127, QuantScheme.INT4_PER_CHANNEL: 7}


def quantize_tensor(t: np.ndarray, scheme: QuantScheme) -> tuple[bytes, np.ndarray]:
    """Quantize a [heads, tokens, channels] float32 tensor.

    Returns the packed code bytes and a float32 scale per (head, channel).
    A channel whose max magnitude is zero gets scale 1.0 and all-zero codes.
    """
    if scheme is QuantScheme.F32:
        raise CodecError("F32 stores raw floats; nothing to quantize")
    if t.ndim != 3:
        raise CodecError("expected a [heads, tokens, channels] tensor")
    if not np.isfinite(t).all():
        raise CodecError("non-finite element in tensor")
    level = _LEVELS[scheme]
    amax = np.abs(t).max(axis=1)
    scales = np.where(amax == 0.0, np.float32(1.0),
                      amax / np.float32(level)).astype(np.float32)
    y = t / scales[:, None, :]
    codes = np.clip(np.sign(y) * np.floor(np.abs(y) + np.float32(0.5)),
                    -level, level).astype(np.int8)
    if scheme is QuantScheme.INT4_PER_CHANNEL:
        return _pack_int4(codes.reshape(-1)), scales
    return codes.tobytes(), scales


def dequantize_tensor(qdata: bytes, scales: np.ndarray, scheme: QuantScheme,
                      shape: tuple[int, int, int]) -> np.ndarray:
    """Reconstruct float32 values as code * scale."""
    count = int(np.prod(shape))
    if scheme is QuantScheme.INT4_PER_CHANNEL:
        codes = _unpack_int4(qdata, count)
    elif scheme is QuantScheme.INT8_PER_CHANNEL:
        if len(qdata) != count:
            raise CodecError(f"int8 payload has {len(qdata)} bytes, expected {count}")
        codes = np.frombuffer(qdata, dtype=np.int8)
    else:
        raise CodecError("F32 stores raw floats; nothing to dequantize")
    codes = codes.reshape(shape).astype(np.float32)
    return codes * scales.astype(np.float32)[:, None, :]


def _pack_int4(codes: np.ndarray) -> bytes:
    nibbles = (codes.astype(np.int16) & 0xF).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.concatenate([nibbles, np.zeros(1, dtype=np.uint8)])
    pairs = nibbles.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()


def _unpack_int4(data: bytes, count: int) -> np.ndarray:
    expected = (count + 1) // 2
    if len(data) != expected:
        raise CodecError(f"int4 payload has {len(data)} bytes, expected {expected}")
    raw = np.frombuffer(data, dtype=np.uint8)
    nibbles = np.empty(raw.size * 2, dtype=np.uint8)
    nibbles[0::2] = raw & 0xF
    nibbles[1::2] = raw >> 4
    signed = ((nibbles.astype(np.int16) ^ 8) - 8).astype(np.int8)
    return signed[:count]


def payload_nbytes(layers: int, kv_heads: int, document_len: int, head_dim: int,
                   scheme: QuantScheme) -> int:
    """Exact payload size in bytes for one entry (scales and header excluded)."""
    elems = kv_heads * document_len * head_dim
    per_tensor = {QuantScheme.F32: elems * 4,
                  QuantScheme.INT8_PER_CHANNEL: elems,
                  QuantScheme.INT4_PER_CHANNEL: (elems + 1) // 2}[scheme]
    return layers * 2 * per_tensor


def encode_entry(doc_kv: DocKV, scheme: QuantScheme = QuantScheme.F32) -> bytes:
    """Serialize a DocKV; identical inputs always give identical bytes."""
    kv = doc_kv.kv
    layers, kv_heads, document_len, head_dim = kv.keys.shape
    for name, value in (("layers", layers), ("kv_heads", kv_heads),
                        ("document_len", document_len), ("head_dim", head_dim),
                        ("valid_len", doc_kv.valid_len)):
        if not 0 <= value <= 0xFFFF:
            raise CodecError(f"{name}={value} does not fit in u16")
    chunk_id = doc_kv.chunk_id.encode("utf-8")
    if len(chunk_id) > 0xFFFF:
        raise CodecError("chunk id longer than u16")
    if not (np.isfinite(kv.keys).all() and np.isfinite(kv.values).all()):
        raise CodecError("non-finite element in KV tensors")

    parts = [_HEADER.pack(MAGIC, VERSION, scheme.value, layers, kv_heads,
                          document_len, head_dim, doc_kv.valid_len, len(chunk_id)),
             chunk_id]
    payloads = []
    for li in range(layers):
        for tensor in (kv.keys[li], kv.values[li]):
            t = np.ascontiguousarray(tensor, dtype="<f4")
            if scheme is QuantScheme.F32:
                payloads.append(t.tobytes())
            else:
                qdata, scales = quantize_tensor(t, scheme)
                parts.append(scales.astype("<f4").tobytes())
                payloads.append(qdata)
    parts.extend(payloads)
    return b"".join(parts)


def decode_entry(data: bytes) -> DocKV:
    """Parse an entry back into a float32 DocKV ready for scoring."""
    if len(data) < _HEADER.size:
        raise FormatError("entry shorter than header")
    magic, version, scheme_code, layers, kv_heads, document_len, head_dim, \
        valid_len, id_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (this build reads {VERSION})")
    try:
        scheme = QuantScheme(scheme_code)
    except ValueError:
        raise FormatError(f"unknown scheme code {scheme_code}") from None

    off = _HEADER.size
    if len(data) < off + id_len:
        raise CodecError("truncated chunk id")
    chunk_id = data[off:off + id_len].decode("utf-8")
    off += id_len

    shape = (kv_heads, document_len, head_dim)
    elems = kv_heads * document_len * head_dim
    n_tensors = layers * 2
    scale_bytes = 0 if scheme is QuantScheme.F32 else kv_heads * head_dim * 4
    tensor_bytes = payload_nbytes(1, kv_heads, document_len, head_dim, scheme) // 2
    expected = off + n_tensors * scale_bytes + n_tensors * tensor_bytes
    if len(data) != expected:
        raise CodecError(f"entry is {len(data)} bytes, expected {expected}")

    if scheme is QuantScheme.F32:
        # the payload is already [layer][K|V][kv_head][token][channel] float32;
        # expose keys/values as views over the entry bytes, no copy
        arr = np.frombuffer(data, dtype="<f4", count=n_tensors * elems, offset=off)
        arr = arr.reshape(layers, 2, kv_heads, document_len, head_dim)
        keys, values = arr[:, 0], arr[:, 1]
    else:
        scales = []
        for _ in range(n_tensors):
            s = np.frombuffer(data, dtype="<f4", count=kv_heads * head_dim, offset=off)
            scales.append(s.reshape(kv_heads, head_dim))
            off += scale_bytes
        keys = np.empty((layers, kv_heads, document_len, head_dim), dtype=np.float32)
        values = np.empty_like(keys)
        for ti in range(n_tensors):
            t = dequantize_tensor(data[off:off + tensor_bytes], scales[ti],
                                  scheme, shape)
            off += tensor_bytes
            (keys if ti % 2 == 0 else values)[ti // 2] = t

    kv = KVTensorSet(keys=keys, values=values, position_offset=0)
    return DocKV(chunk_id=chunk_id, kv=kv, valid_len=valid_len)
