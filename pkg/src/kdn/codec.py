"""KV-cache compression pipeline.

Three stages: per-group affine quantization, anchor/delta integer coding,
and a lossless container (raw bytes, zigzag varints, or varints + DEFLATE).
Everything above the quantizer is bit-exact invertible, so decompression
reproduces the dequantized values exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .model import KvCache

CHUNK_MAGIC = b"KDNC"
CHUNK_VERSION = 1

LOSSLESS_RAW = 0
LOSSLESS_VARINT = 1
LOSSLESS_VARINT_DEFLATE = 2

# magic | version | quant_bits | group_size | anchor_stride | lossless_id
# | n_layers | n_heads | d_head | n_tokens | start_pos | uncompressed_len | payload_len
_HEADER = struct.Struct("<4s BB HH B HHH I q QQ")


class CodecError(ValueError):
    """Base class for codec failures."""


class DecodeError(CodecError):
    """Malformed stream; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CrcMismatch(CodecError):
    pass


# CRC-32C (Castagnoli), reflected polynomial 0x82F63B78.
def _make_crc32c_table() -> list[int]:
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ 0x82F63B78 if c & 1 else c >> 1
        table.append(c)
    return table


_CRC32C_TABLE = _make_crc32c_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    for b in data:
        crc = _CRC32C_TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


@dataclass(frozen=True)
class CodecProfile:
    quant_bits: int = 8
    group_size: int = 16
    anchor_stride: int = 16
    lossless_id: int = LOSSLESS_VARINT_DEFLATE

    def __post_init__(self) -> None:
        if self.quant_bits not in (4, 8):
            raise CodecError("quant_bits must be 4 or 8")
        if self.group_size < 1:
            raise CodecError("group_size must be >= 1")
        if self.anchor_stride < 1:
            raise CodecError("anchor_stride must be >= 1")
        if self.lossless_id not in (LOSSLESS_RAW, LOSSLESS_VARINT, LOSSLESS_VARINT_DEFLATE):
            raise CodecError(f"unknown lossless_id {self.lossless_id}")

    def to_dict(self) -> dict:
        return {
            "quant_bits": self.quant_bits,
            "group_size": self.group_size,
            "anchor_stride": self.anchor_stride,
            "lossless_id": self.lossless_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodecProfile":
        return cls(**{k: int(v) for k, v in d.items()})


# Named profiles used by the bench subcommand and tests.
PROFILES = {
    "8bit-raw": CodecProfile(quant_bits=8, anchor_stride=1, lossless_id=LOSSLESS_RAW),
    "8bit-varint": CodecProfile(quant_bits=8, lossless_id=LOSSLESS_VARINT),
    "8bit-deflate": CodecProfile(quant_bits=8, lossless_id=LOSSLESS_VARINT_DEFLATE),
    "4bit-deflate": CodecProfile(quant_bits=4, lossless_id=LOSSLESS_VARINT_DEFLATE),
}


@dataclass
class QuantizedCache:
    """Integer codes plus per-(layer, head, group, channel) affine grids."""

    k_codes: np.ndarray  # (L, H, T, D) uint8
    v_codes: np.ndarray
    k_scale: np.ndarray  # (L, H, G, D) f32
    k_zero: np.ndarray
    v_scale: np.ndarray
    v_zero: np.ndarray
    start_pos: int
    profile: CodecProfile


def _quantize_tensor(x: np.ndarray, bits: int, group_size: int):
    """Affine per-token-group quantization along the token axis."""
    L, H, T, D = x.shape
    n_groups = (T + group_size - 1) // group_size if T else 0
    levels = (1 << bits) - 1
    codes = np.zeros((L, H, T, D), dtype=np.uint8)
    scale = np.ones((L, H, n_groups, D), dtype=np.float32)
    zero = np.zeros((L, H, n_groups, D), dtype=np.float32)
    for g in range(n_groups):
        lo, hi = g * group_size, min((g + 1) * group_size, T)
        block = x[:, :, lo:hi].astype(np.float64)
        gmin = block.min(axis=2)
        gmax = block.max(axis=2)
        s = (gmax - gmin) / levels
        s[s == 0.0] = 1.0  # constant group: every code is 0, zero-point carries the value
        s32 = s.astype(np.float32)
        z32 = gmin.astype(np.float32)
        scale[:, :, g] = s32
        zero[:, :, g] = z32
        # round-half-to-even for cross-platform bit-exact codes
        q = np.rint((block - z32[:, :, None].astype(np.float64)) / s32[:, :, None].astype(np.float64))
        codes[:, :, lo:hi] = np.clip(q, 0, levels).astype(np.uint8)
    return codes, scale, zero


def quantize(cache: KvCache, profile: CodecProfile) -> QuantizedCache:
    if not (np.isfinite(cache.k_pre).all() and np.isfinite(cache.v).all()):
        raise CodecError("cache contains non-finite values")
    k_codes, k_scale, k_zero = _quantize_tensor(cache.k_pre, profile.quant_bits, profile.group_size)
    v_codes, v_scale, v_zero = _quantize_tensor(cache.v, profile.quant_bits, profile.group_size)
    return QuantizedCache(k_codes, v_codes, k_scale, k_zero, v_scale, v_zero, cache.start_pos, profile)


def _dequantize_tensor(codes, scale, zero, group_size) -> np.ndarray:
    L, H, T, D = codes.shape
    out = np.empty((L, H, T, D), dtype=np.float32)
    n_groups = scale.shape[2]
    for g in range(n_groups):
        lo, hi = g * group_size, min((g + 1) * group_size, T)
        out[:, :, lo:hi] = (
            codes[:, :, lo:hi].astype(np.float32) * scale[:, :, g][:, :, None] + zero[:, :, g][:, :, None]
        )
    return out


def dequantize(q: QuantizedCache) -> KvCache:
    gs = q.profile.group_size
    return KvCache(
        _dequantize_tensor(q.k_codes, q.k_scale, q.k_zero, gs),
        _dequantize_tensor(q.v_codes, q.v_scale, q.v_zero, gs),
        start_pos=q.start_pos,
    )


def delta_encode(codes: np.ndarray, anchor_stride: int) -> np.ndarray:
    """Anchor/delta coding along tokens, stream order (layer, head, channel, token).

    Token 0 of each anchor window is stored raw; later tokens store the
    signed difference from the previous token in the same channel.
    """
    ch_major = codes.transpose(0, 1, 3, 2).astype(np.int64)  # (L, H, D, T)
    T = ch_major.shape[-1]
    out = ch_major.copy()
    if T > 1:
        diffs = ch_major[..., 1:] - ch_major[..., :-1]
        t = np.arange(1, T)
        non_anchor = (t % anchor_stride) != 0
        out[..., 1:][..., non_anchor] = diffs[..., non_anchor]
    return out.reshape(-1)


def delta_decode(stream: np.ndarray, shape: tuple[int, int, int, int], anchor_stride: int) -> np.ndarray:
    L, H, T, D = shape
    if stream.size != L * H * T * D:
        raise DecodeError(f"delta stream has {stream.size} values, expected {L * H * T * D}")
    vals = stream.reshape(L, H, D, T).astype(np.int64).copy()
    for t in range(1, T):
        if t % anchor_stride != 0:
            vals[..., t] += vals[..., t - 1]
    if vals.size and (vals.min() < 0 or vals.max() > 255):
        raise DecodeError("decoded codes out of byte range")
    return vals.transpose(0, 1, 3, 2).astype(np.uint8)


def zigzag(n: int) -> int:
    return (n << 1) ^ (n >> 63) if n < 0 else n << 1


def unzigzag(z: int) -> int:
    return (z >> 1) ^ -(z & 1)


def _varint_encode(values: np.ndarray) -> bytes:
    out = bytearray()
    for v in values.tolist():
        z = (v << 1) ^ (v >> 63) if v < 0 else v << 1
        while z >= 0x80:
            out.append((z & 0x7F) | 0x80)
            z >>= 7
        out.append(z)
    return bytes(out)


def _varint_decode(data: bytes) -> np.ndarray:
    vals = []
    i, n = 0, len(data)
    while i < n:
        shift = 0
        z = 0
        start = i
        while True:
            if i >= n:
                raise DecodeError("truncated varint", start)
            b = data[i]
            i += 1
            z |= (b & 0x7F) << shift
            if not b & 0x80:
                break
            shift += 7
            if shift > 70:
                raise DecodeError("varint too long", start)
        vals.append((z >> 1) ^ -(z & 1))
    return np.array(vals, dtype=np.int64)


def lossless_encode(ints: np.ndarray, lossless_id: int) -> bytes:
    ints = np.asarray(ints, dtype=np.int64)
    if lossless_id == LOSSLESS_RAW:
        if ints.size and (ints.min() < 0 or ints.max() > 255):
            raise CodecError("raw encoding requires values in [0, 255]")
        return ints.astype(np.uint8).tobytes()
    if lossless_id == LOSSLESS_VARINT:
        return _varint_encode(ints)
    if lossless_id == LOSSLESS_VARINT_DEFLATE:
        return zlib.compress(_varint_encode(ints), 9)
    raise CodecError(f"unknown lossless_id {lossless_id}")


def lossless_decode(data: bytes, lossless_id: int) -> np.ndarray:
    if lossless_id == LOSSLESS_RAW:
        return np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    if lossless_id == LOSSLESS_VARINT:
        return _varint_decode(data)
    if lossless_id == LOSSLESS_VARINT_DEFLATE:
        try:
            raw = zlib.decompress(data)
        except zlib.error as e:
            raise DecodeError(f"DEFLATE stream invalid: {e}") from e
        return _varint_decode(raw)
    raise DecodeError(f"unknown lossless_id {lossless_id}")


@dataclass
class CompressedChunk:
    """Codec-encoded KV payload for one token chunk."""

    profile: CodecProfile
    n_layers: int
    n_heads: int
    d_head: int
    n_tokens: int
    start_pos: int
    uncompressed_len: int
    payload: bytes
    crc: int
    key: bytes | None = None  # filled in by the store; not part of the wire layout

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            CHUNK_MAGIC,
            CHUNK_VERSION,
            self.profile.quant_bits,
            self.profile.group_size,
            self.profile.anchor_stride,
            self.profile.lossless_id,
            self.n_layers,
            self.n_heads,
            self.d_head,
            self.n_tokens,
            self.start_pos,
            self.uncompressed_len,
            len(self.payload),
        )
        return header + self.payload + struct.pack("<I", self.crc)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedChunk":
        if len(data) < _HEADER.size:
            raise DecodeError("chunk shorter than header", len(data))
        try:
            (magic, version, bits, gsize, stride, lid, L, H, D, T, start_pos, ulen, plen) = _HEADER.unpack_from(data)
        except struct.error as e:
            raise DecodeError(f"bad chunk header: {e}") from e
        if magic != CHUNK_MAGIC:
            raise DecodeError("bad chunk magic", 0)
        if version != CHUNK_VERSION:
            raise DecodeError(f"unsupported chunk version {version}", 4)
        if plen > len(data) - _HEADER.size - 4:
            raise DecodeError("chunk payload truncated", _HEADER.size)
        try:
            profile = CodecProfile(bits, gsize, stride, lid)
        except CodecError as e:
            raise DecodeError(str(e), 5) from e
        payload = data[_HEADER.size : _HEADER.size + plen]
        (crc,) = struct.unpack_from("<I", data, _HEADER.size + plen)
        if crc32c(payload) != crc:
            raise CrcMismatch("chunk crc32c mismatch")
        expected = 2 * 4 * L * H * T * D
        if ulen != expected:
            raise DecodeError(f"uncompressed_len {ulen} != geometry size {expected}")
        return cls(profile, L, H, D, T, start_pos, ulen, payload, crc)


def _pack_params(q: QuantizedCache) -> bytes:
    raw = b"".join(
        a.astype("<f4").tobytes() for a in (q.k_scale, q.k_zero, q.v_scale, q.v_zero)
    )
    # quantization grids repeat heavily on real caches; always DEFLATE them
    return zlib.compress(raw, 9)


def _unpack_params(blob: bytes, shape: tuple[int, int, int, int], group_size: int):
    L, H, T, D = shape
    n_groups = (T + group_size - 1) // group_size if T else 0
    count = L * H * n_groups * D
    try:
        raw = zlib.decompress(blob)
    except zlib.error as e:
        raise DecodeError(f"parameter section invalid: {e}") from e
    if len(raw) != 4 * 4 * count:
        raise DecodeError(f"parameter section has {len(raw)} bytes, expected {16 * count}")
    arrs = []
    for idx in range(4):
        a = np.frombuffer(raw, "<f4", count, idx * 4 * count)
        arrs.append(a.reshape(L, H, n_groups, D).copy())
    return arrs


def compress_cache(cache: KvCache, profile: CodecProfile) -> CompressedChunk:
    """quantize -> delta -> lossless, wrapped with header and crc32c."""
    q = quantize(cache, profile)
    if profile.lossless_id == LOSSLESS_RAW:
        # raw container stores the quantized codes directly, one byte each
        stream = np.concatenate([q.k_codes.reshape(-1), q.v_codes.reshape(-1)]).astype(np.int64)
    else:
        stream = np.concatenate(
            [
                delta_encode(q.k_codes, profile.anchor_stride),
                delta_encode(q.v_codes, profile.anchor_stride),
            ]
        )
    codes_blob = lossless_encode(stream, profile.lossless_id)
    params_blob = _pack_params(q)
    payload = struct.pack("<II", len(params_blob), len(codes_blob)) + params_blob + codes_blob
    L, H, T, D = cache.k_pre.shape
    return CompressedChunk(
        profile=profile,
        n_layers=L,
        n_heads=H,
        d_head=D,
        n_tokens=T,
        start_pos=cache.start_pos,
        uncompressed_len=2 * 4 * L * H * T * D,
        payload=payload,
        crc=crc32c(payload),
    )


def decompress_cache(chunk: CompressedChunk) -> KvCache:
    shape = (chunk.n_layers, chunk.n_heads, chunk.n_tokens, chunk.d_head)
    profile = chunk.profile
    if len(chunk.payload) < 8:
        raise DecodeError("payload shorter than section lengths", len(chunk.payload))
    params_len, codes_len = struct.unpack_from("<II", chunk.payload)
    if 8 + params_len + codes_len != len(chunk.payload):
        raise DecodeError("payload section lengths inconsistent", 0)
    params_blob = chunk.payload[8 : 8 + params_len]
    codes_blob = chunk.payload[8 + params_len :]
    k_scale, k_zero, v_scale, v_zero = _unpack_params(params_blob, shape, profile.group_size)
    stream = lossless_decode(codes_blob, profile.lossless_id)
    half = np.prod(shape, dtype=int)
    if stream.size != 2 * half:
        raise DecodeError(f"code stream has {stream.size} values, expected {2 * half}")
    if profile.lossless_id == LOSSLESS_RAW:
        if stream.size and (stream.min() < 0 or stream.max() > 255):
            raise DecodeError("raw codes out of byte range")
        k_codes = stream[:half].astype(np.uint8).reshape(shape)
        v_codes = stream[half:].astype(np.uint8).reshape(shape)
    else:
        k_codes = delta_decode(stream[:half], shape, profile.anchor_stride)
        v_codes = delta_decode(stream[half:], shape, profile.anchor_stride)
    q = QuantizedCache(k_codes, v_codes, k_scale, k_zero, v_scale, v_zero, chunk.start_pos, profile)
    return dequantize(q)


def compress_with_mask(cache: KvCache, profile: CodecProfile, keep_mask: np.ndarray | None) -> CompressedChunk:
    """Pre-compression filter hook: drop tokens where the keep mask is False.

    Token selection policies (which tokens to drop) are out of scope; callers
    supply the mask.
    """
    if keep_mask is None:
        return compress_cache(cache, profile)
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if keep_mask.shape != (cache.n_tokens,):
        raise CodecError("keep mask length must equal n_tokens")
    filtered = KvCache(cache.k_pre[:, :, keep_mask], cache.v[:, :, keep_mask], cache.start_pos)
    return compress_cache(filtered, profile)
