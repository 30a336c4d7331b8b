"""Framed binary delivery protocol plus a virtual-clock link simulator.

Wire layout per frame, little-endian:

    "KDN1" | type u8 | payload_len u32 | payload | crc32c u32

The crc covers type byte plus payload.  Requests by token text answer with
zero or more CHUNK frames (compressed-chunk bytes, in token order) followed
by END carrying the miss-suffix token list.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

from . import codec
from .model import KvCache, rebase
from .store import MODE_CHAIN, MODE_STANDALONE, ChunkKey, Store

log = logging.getLogger(__name__)

FRAME_MAGIC = b"KDN1"
MAX_PAYLOAD = 64 * 1024 * 1024
_FRAME_OVERHEAD = 13  # magic + type + len + crc

REQ_KEYS = 1
REQ_TOKENS = 2
CHUNK = 3
END = 4
ERR = 5
_FRAME_TYPES = {REQ_KEYS, REQ_TOKENS, CHUNK, END, ERR}

ERR_BAD_FRAME = 1
ERR_BAD_REQUEST = 2
ERR_INTERNAL = 3

_MODE_BYTE = {MODE_CHAIN: 0, MODE_STANDALONE: 1}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


class ProtocolError(Exception):
    pass


class FrameDecodeError(ProtocolError):
    pass


class FetchError(ProtocolError):
    pass


@dataclass(frozen=True)
class Frame:
    frame_type: int
    payload: bytes = b""


@dataclass(frozen=True)
class LinkModel:
    """Single-tier link: fixed bandwidth plus a per-frame latency."""

    bandwidth: float  # bytes/second
    latency: float = 0.0  # seconds per frame

    def __post_init__(self) -> None:
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


def encode_frame(frame: Frame) -> bytes:
    if frame.frame_type not in _FRAME_TYPES:
        raise ProtocolError(f"unknown frame type {frame.frame_type}")
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError("payload exceeds 64 MiB")
    body = bytes([frame.frame_type]) + frame.payload
    return (
        FRAME_MAGIC
        + bytes([frame.frame_type])
        + struct.pack("<I", len(frame.payload))
        + frame.payload
        + struct.pack("<I", codec.crc32c(body))
    )


def decode_frame(data: bytes) -> tuple[Frame | None, int]:
    """Streaming-safe decode: (None, 0) means more bytes are needed."""
    if len(data) < 9:
        return None, 0
    if data[:4] != FRAME_MAGIC:
        raise FrameDecodeError("bad frame magic")
    ftype = data[4]
    (plen,) = struct.unpack_from("<I", data, 5)
    if plen > MAX_PAYLOAD:
        raise FrameDecodeError(f"oversize payload ({plen} bytes)")
    total = 9 + plen + 4
    if len(data) < total:
        return None, 0
    payload = data[9 : 9 + plen]
    (crc,) = struct.unpack_from("<I", data, 9 + plen)
    if codec.crc32c(bytes([ftype]) + payload) != crc:
        raise FrameDecodeError("frame crc32c mismatch")
    if ftype not in _FRAME_TYPES:
        raise FrameDecodeError(f"unknown frame type {ftype}")
    return Frame(ftype, payload), total


def encode_token_request(model_id: int, mode: str, tokens: list[int]) -> Frame:
    payload = (
        struct.pack("<Q", model_id)
        + bytes([_MODE_BYTE[mode]])
        + struct.pack("<I", len(tokens))
        + b"".join(struct.pack("<I", t) for t in tokens)
    )
    return Frame(REQ_TOKENS, payload)


def encode_key_request(keys: list[ChunkKey]) -> Frame:
    payload = struct.pack("<I", len(keys))
    for k in keys:
        payload += bytes([_MODE_BYTE[k.mode]]) + k.digest
    return Frame(REQ_KEYS, payload)


def _decode_token_list(data: bytes, offset: int) -> list[int]:
    (n,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) - offset < 4 * n:
        raise ProtocolError("token list truncated")
    return list(struct.unpack_from(f"<{n}I", data, offset)) if n else []


def encode_end(miss_suffix: list[int]) -> Frame:
    return Frame(END, struct.pack("<I", len(miss_suffix)) + b"".join(struct.pack("<I", t) for t in miss_suffix))


def encode_err(code: int, message: str) -> Frame:
    return Frame(ERR, struct.pack("<H", code) + message.encode("utf-8"))


def decode_err(frame: Frame) -> tuple[int, str]:
    (code,) = struct.unpack_from("<H", frame.payload)
    return code, frame.payload[2:].decode("utf-8", errors="replace")


def handle_request(store: Store, frame: Frame) -> list[Frame]:
    """Answer one request frame with CHUNK* END, or a single ERR."""
    try:
        if frame.frame_type == REQ_TOKENS:
            payload = frame.payload
            if len(payload) < 13:
                return [encode_err(ERR_BAD_REQUEST, "request payload too short")]
            (model_id,) = struct.unpack_from("<Q", payload)
            mode_byte = payload[8]
            if mode_byte not in _BYTE_MODE:
                return [encode_err(ERR_BAD_REQUEST, f"unknown mode byte {mode_byte}")]
            tokens = _decode_token_list(payload, 9)
            hits, miss = store.retrieve_text(model_id, tokens, _BYTE_MODE[mode_byte])
            frames = [Frame(CHUNK, chunk.to_bytes()) for _, chunk in hits]
            frames.append(encode_end(miss))
            return frames
        if frame.frame_type == REQ_KEYS:
            payload = frame.payload
            if len(payload) < 4:
                return [encode_err(ERR_BAD_REQUEST, "request payload too short")]
            (n,) = struct.unpack_from("<I", payload)
            if len(payload) != 4 + 33 * n:
                return [encode_err(ERR_BAD_REQUEST, "key list length mismatch")]
            frames = []
            for i in range(n):
                off = 4 + 33 * i
                mode_byte = payload[off]
                if mode_byte not in _BYTE_MODE:
                    return [encode_err(ERR_BAD_REQUEST, f"unknown mode byte {mode_byte}")]
                key = ChunkKey(payload[off + 1 : off + 33], _BYTE_MODE[mode_byte])
                if key.digest in store.entries:
                    frames.append(Frame(CHUNK, store.get_chunk(key).to_bytes()))
            frames.append(encode_end([]))
            return frames
        return [encode_err(ERR_BAD_REQUEST, f"unexpected frame type {frame.frame_type}")]
    except ProtocolError as e:
        return [encode_err(ERR_BAD_REQUEST, str(e))]
    except Exception as e:  # the server must survive arbitrary input
        log.exception("request handling failed")
        return [encode_err(ERR_INTERNAL, f"{type(e).__name__}: {e}")]


def process_stream(store: Store, data: bytes) -> bytes:
    """Process a whole inbound byte buffer, resyncing on garbage.

    Used directly by fuzz tests; the socket server runs the same logic
    incrementally.
    """
    out = bytearray()
    buf = memoryview(bytes(data))
    pos = 0
    while pos < len(buf):
        try:
            frame, consumed = decode_frame(bytes(buf[pos:]))
        except FrameDecodeError as e:
            out += encode_frame(encode_err(ERR_BAD_FRAME, str(e)))
            nxt = bytes(buf[pos + 1 :]).find(FRAME_MAGIC)
            if nxt < 0:
                break
            pos += 1 + nxt
            continue
        if frame is None:
            break  # incomplete tail
        pos += consumed
        for reply in handle_request(store, frame):
            out += encode_frame(reply)
    return bytes(out)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        buf = b""
        while True:
            try:
                chunk = self.request.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while buf:
                try:
                    frame, consumed = decode_frame(buf)
                except FrameDecodeError as e:
                    self.request.sendall(encode_frame(encode_err(ERR_BAD_FRAME, str(e))))
                    nxt = buf[1:].find(FRAME_MAGIC)
                    buf = b"" if nxt < 0 else buf[1 + nxt :]
                    continue
                if frame is None:
                    break
                buf = buf[consumed:]
                for reply in handle_request(self.server.store, frame):
                    self.request.sendall(encode_frame(reply))


class KdnServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, store: Store, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.store = store

    def serve_in_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def serve(store: Store, host: str = "127.0.0.1", port: int = 7311) -> KdnServer:
    return KdnServer(store, host, port)


class Client:
    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def _roundtrip(self, request: Frame) -> list[Frame]:
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
            sock.sendall(encode_frame(request))
            buf = b""
            frames: list[Frame] = []
            while True:
                frame = None
                while buf:
                    frame, consumed = decode_frame(buf)
                    if frame is None:
                        break
                    buf = buf[consumed:]
                    frames.append(frame)
                    if frame.frame_type in (END, ERR):
                        return frames
                chunk = sock.recv(65536)
                if not chunk:
                    raise FetchError("connection closed before END")
                buf += chunk

    def fetch(self, model_id: int, mode: str, tokens: list[int]) -> tuple[list[KvCache], list[int]]:
        """Retrieve-by-text: decode, crc-check, decompress and re-base.

        Chain chunks are re-based to consecutive positions.  A crc failure
        is retried once before giving up.
        """
        request = encode_token_request(model_id, mode, tokens)
        last_err: Exception | None = None
        for _ in range(2):
            try:
                frames = self._roundtrip(request)
                return _assemble(frames, mode)
            except (codec.CrcMismatch, FrameDecodeError) as e:
                last_err = e
        raise FetchError(f"fetch failed after retry: {last_err}")

    def fetch_keys(self, keys: list[ChunkKey]) -> list[KvCache]:
        frames = self._roundtrip(encode_key_request(keys))
        caches, _ = _assemble(frames, MODE_STANDALONE)
        return caches


def _assemble(frames: list[Frame], mode: str) -> tuple[list[KvCache], list[int]]:
    caches: list[KvCache] = []
    miss: list[int] = []
    offset = 0
    for frame in frames:
        if frame.frame_type == CHUNK:
            chunk = codec.CompressedChunk.from_bytes(frame.payload)
            cache = codec.decompress_cache(chunk)
            if mode == MODE_CHAIN:
                cache = rebase(cache, offset)
                offset += cache.n_tokens
            caches.append(cache)
        elif frame.frame_type == END:
            miss = _decode_token_list(frame.payload, 0)
        elif frame.frame_type == ERR:
            code, message = decode_err(frame)
            raise FetchError(f"server error {code}: {message}")
    return caches, miss


def simulate_transfer(link: LinkModel, nbytes: int) -> float:
    """Seconds to move ``nbytes`` over the link: latency + bytes/bandwidth."""
    return link.latency + nbytes / link.bandwidth


def simulate_fetch(link: LinkModel, chunk_sizes: list[int]) -> float:
    """Virtual-clock completion time for a fetch of the given chunk frames.

    Deterministic accounting: each chunk frame pays one latency plus its
    framed bytes over the bandwidth.
    """
    clock = 0.0
    for size in chunk_sizes:
        clock += link.latency + (size + _FRAME_OVERHEAD) / link.bandwidth
    return clock
