"""Content-addressed, persisted, evictable storage of compressed KV chunks.

Layout on disk: ``root/manifest.jsonl`` plus ``root/blobs/<hex64>``.  The
manifest is append-only JSON Lines; blobs are written to a temp file and
renamed before the manifest line is appended, so a crash between the two
leaves only an orphan blob, which is garbage-collected on open.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .model import KvCache, Model, prefill

log = logging.getLogger(__name__)

KEY_MAGIC = b"KDNKEY1"

MODE_CHAIN = "chain"
MODE_STANDALONE = "standalone"
_MODE_CODE = {MODE_CHAIN: 0, MODE_STANDALONE: 1}


class StoreError(Exception):
    pass


class CapacityError(StoreError):
    """Capacity unreachable even after evicting every unpinned entry."""


@dataclass(frozen=True)
class ChunkKey:
    digest: bytes  # 32 bytes
    mode: str

    def __post_init__(self) -> None:
        if len(self.digest) != 32:
            raise StoreError("chunk key digest must be 32 bytes")
        if self.mode not in _MODE_CODE:
            raise StoreError(f"unknown key mode {self.mode!r}")

    @property
    def hex(self) -> str:
        return self.digest.hex()


def make_key(
    model_id: int,
    mode: str,
    parent: ChunkKey | None,
    chunk_tokens: list[int],
) -> ChunkKey:
    """SHA-256 over the canonical key bytes.

    Chain keys commit to the full prefix through the parent digest;
    standalone keys depend only on (model_id, chunk tokens).
    """
    if mode not in _MODE_CODE:
        raise StoreError(f"unknown key mode {mode!r}")
    parent_digest = b"\x00" * 32
    if mode == MODE_CHAIN and parent is not None:
        parent_digest = parent.digest
    canonical = (
        KEY_MAGIC
        + bytes([_MODE_CODE[mode]])
        + parent_digest
        + struct.pack("<Q", model_id)
        + struct.pack("<I", len(chunk_tokens))
        + b"".join(struct.pack("<I", t) for t in chunk_tokens)
    )
    return ChunkKey(hashlib.sha256(canonical).digest(), mode)


@dataclass
class StoreEntry:
    key: ChunkKey
    tokens: list[int]
    parent: ChunkKey | None
    file: str
    size: int
    codec_profile: codec.CodecProfile
    pinned: bool = False
    created: float = 0.0
    last_access: int = 0


@dataclass
class StoreConfig:
    root: str | Path
    capacity: int = 1 << 30
    chunk_size: int = 64

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise StoreError("capacity must be positive")
        if self.chunk_size < 1:
            raise StoreError("chunk_size must be >= 1")


# Built-in offline edit transforms.  The registry is open: callers may add
# ids mapping to fn(cache, params) -> cache.
def _scale_v_rows(cache: KvCache, params: dict) -> KvCache:
    factor = float(params["factor"])
    indices = params["tokens"]
    for i in indices:
        if not 0 <= int(i) < cache.n_tokens:
            raise StoreError(f"edit token index {i} out of range")
    out = cache.copy()
    out.v[:, :, list(map(int, indices))] *= np.float32(factor)
    return out


EDIT_TRANSFORMS = {1: _scale_v_rows}


class Store:
    def __init__(self, config: StoreConfig):
        self.config = config
        self.root = Path(config.root)
        self.blob_dir = self.root / "blobs"
        self.manifest_path = self.root / "manifest.jsonl"
        self.entries: dict[bytes, StoreEntry] = {}
        self._clock = 0
        self._crash_hook = None  # test hook, called between blob write and manifest append
        self._recover()

    # -- lifecycle ---------------------------------------------------------

    def _recover(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.blob_dir.mkdir(exist_ok=True)
        if self.manifest_path.exists():
            with open(self.manifest_path, "r", encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        self._replay(json.loads(line))
                    except (ValueError, KeyError, StoreError) as e:
                        log.warning("manifest line %d skipped: %s", lineno, e)
        # entries whose blob vanished are dropped; blobs without entries are orphans
        live_files = set()
        for digest in list(self.entries):
            entry = self.entries[digest]
            path = self.blob_dir / entry.file
            if not path.exists() or path.stat().st_size != entry.size:
                log.warning("dropping entry %s: blob missing or truncated", entry.key.hex[:12])
                del self.entries[digest]
            else:
                live_files.add(entry.file)
        for blob in self.blob_dir.iterdir():
            if blob.name not in live_files:
                log.warning("collecting orphan blob %s", blob.name)
                blob.unlink()

    def _replay(self, rec: dict) -> None:
        op = rec.get("op", "put")
        if op == "del":
            self.entries.pop(bytes.fromhex(rec["key"]), None)
            return
        if op == "pin":
            digest = bytes.fromhex(rec["key"])
            if digest in self.entries:
                self.entries[digest].pinned = bool(rec["pinned"])
            return
        key = ChunkKey(bytes.fromhex(rec["key"]), rec["mode"])
        parent = None
        if rec.get("parent"):
            parent = ChunkKey(bytes.fromhex(rec["parent"]), rec["mode"])
        self._clock += 1
        self.entries[key.digest] = StoreEntry(
            key=key,
            tokens=[int(t) for t in rec["tokens"]],
            parent=parent,
            file=rec["file"],
            size=int(rec["size"]),
            codec_profile=codec.CodecProfile.from_dict(rec["codec"]),
            pinned=bool(rec.get("pinned", False)),
            created=float(rec.get("created", 0.0)),
            last_access=self._clock,
        )

    def flush(self) -> None:
        """Manifest appends are already synchronous; nothing buffered."""

    def close(self) -> None:
        self.flush()

    # -- accounting --------------------------------------------------------

    @property
    def total_size(self) -> int:
        return sum(e.size for e in self.entries.values())

    def _touch(self, entry: StoreEntry) -> None:
        self._clock += 1
        entry.last_access = self._clock

    def _append_manifest(self, rec: dict) -> None:
        with open(self.manifest_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(rec) + "\n")
            f.flush()
            os.fsync(f.fileno())

    # -- blob IO -----------------------------------------------------------

    def _write_blob(self, data: bytes) -> str:
        # blobs are named by the hex digest of their content, so an edit
        # writes a fresh file and the manifest append flips the reference
        name = hashlib.sha256(data).hexdigest()
        tmp = self.blob_dir / (name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.blob_dir / name)
        return name

    def _maybe_delete_blob(self, fname: str) -> None:
        if not any(e.file == fname for e in self.entries.values()):
            (self.blob_dir / fname).unlink(missing_ok=True)

    def get_chunk(self, key: ChunkKey) -> codec.CompressedChunk:
        entry = self.entries.get(key.digest)
        if entry is None:
            raise StoreError(f"key {key.hex[:12]} not in store")
        self._touch(entry)
        data = (self.blob_dir / entry.file).read_bytes()
        chunk = codec.CompressedChunk.from_bytes(data)
        chunk.key = key.digest
        return chunk

    # -- store / retrieve ----------------------------------------------------

    def _split_chunks(self, tokens: list[int]) -> list[list[int]]:
        cs = self.config.chunk_size
        return [tokens[i : i + cs] for i in range(0, len(tokens), cs)]

    def _admit(self, key: ChunkKey, tokens: list[int], parent: ChunkKey | None,
               blob: bytes, profile: codec.CodecProfile) -> None:
        if self.total_size + len(blob) > self.config.capacity:
            self.evict_to(self.config.capacity - len(blob))
        fname = self._write_blob(blob)
        if self._crash_hook is not None:
            self._crash_hook()
        rec = {
            "key": key.hex,
            "mode": key.mode,
            "file": fname,
            "tokens": tokens,
            "parent": parent.hex if parent else None,
            "codec": profile.to_dict(),
            "size": len(blob),
            "pinned": False,
            "created": time.time(),
        }
        self._append_manifest(rec)
        self._replay(rec)

    def store_text(
        self,
        model: Model,
        tokens: list[int],
        mode: str = MODE_CHAIN,
        profile: codec.CodecProfile | None = None,
    ) -> list[ChunkKey]:
        """Prefill, chunk, compress and persist a token sequence.

        Chain mode prefills once and slices the cache per chunk; standalone
        mode prefills every chunk independently at position 0.  Re-storing
        existing keys is a no-op.
        """
        if not tokens:
            raise StoreError("store_text requires a nonempty token list")
        profile = profile or codec.CodecProfile()
        chunks = self._split_chunks(tokens)
        keys: list[ChunkKey] = []
        if mode == MODE_CHAIN:
            full_cache, _ = prefill(model, tokens)
            parent: ChunkKey | None = None
            offset = 0
            for chunk_tokens in chunks:
                key = make_key(model.model_id, MODE_CHAIN, parent, chunk_tokens)
                if key.digest not in self.entries:
                    sliced = full_cache.slice_tokens(offset, offset + len(chunk_tokens))
                    blob = codec.compress_cache(sliced, profile).to_bytes()
                    self._admit(key, chunk_tokens, parent, blob, profile)
                else:
                    self._touch(self.entries[key.digest])
                keys.append(key)
                parent = key
                offset += len(chunk_tokens)
        elif mode == MODE_STANDALONE:
            for chunk_tokens in chunks:
                key = make_key(model.model_id, MODE_STANDALONE, None, chunk_tokens)
                if key.digest not in self.entries:
                    cache, _ = prefill(model, chunk_tokens, start_pos=0)
                    blob = codec.compress_cache(cache, profile).to_bytes()
                    self._admit(key, chunk_tokens, None, blob, profile)
                else:
                    self._touch(self.entries[key.digest])
                keys.append(key)
        else:
            raise StoreError(f"unknown mode {mode!r}")
        return keys

    def retrieve_text(
        self, model_id: int, tokens: list[int], mode: str = MODE_CHAIN
    ) -> tuple[list[tuple[ChunkKey, codec.CompressedChunk]], list[int]]:
        """Look up the longest stored coverage of ``tokens``.

        Chain mode walks the key chain over the token prefix and returns the
        unmatched remainder as the miss suffix.  Standalone mode looks up
        each chunk independently; the miss suffix concatenates the tokens of
        the missed chunks.  Misses are data, not errors.
        """
        hits: list[tuple[ChunkKey, codec.CompressedChunk]] = []
        if mode == MODE_CHAIN:
            parent: ChunkKey | None = None
            pos = 0
            while pos < len(tokens):
                remaining = tokens[pos:]
                match = self._best_chain_child(model_id, parent, remaining)
                if match is None:
                    break
                key, n = match
                hits.append((key, self.get_chunk(key)))
                parent = key
                pos += n
            return hits, tokens[pos:]
        if mode == MODE_STANDALONE:
            miss: list[int] = []
            for chunk_tokens in self._split_chunks(tokens):
                key = make_key(model_id, MODE_STANDALONE, None, chunk_tokens)
                if key.digest in self.entries:
                    hits.append((key, self.get_chunk(key)))
                else:
                    miss.extend(chunk_tokens)
            return hits, miss
        raise StoreError(f"unknown mode {mode!r}")

    def _best_chain_child(
        self, model_id: int, parent: ChunkKey | None, remaining: list[int]
    ) -> tuple[ChunkKey, int] | None:
        """Longest stored chain chunk whose tokens prefix ``remaining``."""
        best: tuple[ChunkKey, int] | None = None
        # full chunk first: the common case needs one hash, not a scan
        cs = self.config.chunk_size
        for n in range(min(cs, len(remaining)), 0, -1):
            key = make_key(model_id, MODE_CHAIN, parent, remaining[:n])
            if key.digest in self.entries:
                best = (key, n)
                break
        return best

    # -- eviction ------------------------------------------------------------

    def evict_to(self, capacity: int) -> list[ChunkKey]:
        """Drop unpinned entries in LRU order until total size <= capacity."""
        evicted: list[ChunkKey] = []
        if self.total_size <= capacity:
            return evicted
        candidates = sorted(
            (e for e in self.entries.values() if not e.pinned),
            key=lambda e: e.last_access,
        )
        for entry in candidates:
            if self.total_size <= capacity:
                break
            self._append_manifest({"op": "del", "key": entry.key.hex})
            del self.entries[entry.key.digest]
            self._maybe_delete_blob(entry.file)
            evicted.append(entry.key)
        if self.total_size > capacity:
            pinned_bytes = sum(e.size for e in self.entries.values() if e.pinned)
            raise CapacityError(
                f"cannot reach {capacity} bytes: {pinned_bytes} bytes pinned"
            )
        return evicted

    def pin(self, key: ChunkKey, pinned: bool = True) -> None:
        entry = self.entries.get(key.digest)
        if entry is None:
            raise StoreError(f"key {key.hex[:12]} not in store")
        entry.pinned = pinned
        self._append_manifest({"op": "pin", "key": key.hex, "pinned": pinned})

    # -- offline editing -----------------------------------------------------

    def apply_edit(self, key: ChunkKey, transform_id: int, params: dict) -> None:
        """decompress -> transform -> recompress -> replace blob.

        The key keeps its token association; only the blob content changes.
        """
        transform = EDIT_TRANSFORMS.get(transform_id)
        if transform is None:
            raise StoreError(f"unknown transform id {transform_id}")
        entry = self.entries.get(key.digest)
        if entry is None:
            raise StoreError(f"key {key.hex[:12]} not in store")
        chunk = self.get_chunk(key)
        cache = codec.decompress_cache(chunk)
        edited = transform(cache, params)
        blob = codec.compress_cache(edited, entry.codec_profile).to_bytes()
        old_file = entry.file
        fname = self._write_blob(blob)
        if self._crash_hook is not None:
            self._crash_hook()
        rec = {
            "key": key.hex,
            "mode": key.mode,
            "file": fname,
            "tokens": entry.tokens,
            "parent": entry.parent.hex if entry.parent else None,
            "codec": entry.codec_profile.to_dict(),
            "size": len(blob),
            "pinned": entry.pinned,
            "created": entry.created,
        }
        self._append_manifest(rec)
        self._replay(rec)
        if fname != old_file:
            self._maybe_delete_blob(old_file)


def open_store(config: StoreConfig) -> Store:
    return Store(config)
