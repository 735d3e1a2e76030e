"""Sharded persistence of encoded cache entries, keyed by coarse centroid.

Placement is ``shard = centroid_id % num_shards``, so all entries of one
coarse cluster live on one backend and a search that probes p centroids
touches at most p shards. Three observationally equivalent backends exist:
in-memory dict, one-file-per-entry directory (atomic replace via temp file
plus rename), and a remote server speaking the wire protocol.
"""

from __future__ import annotations

import os
import re
import socket
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .errors import StoreError

_KEY_RE = re.compile(r"^[A-Za-z0-9._\-]+(/[A-Za-z0-9._\-]+)*$")
ENTRY_SUFFIX = ".hrkv"


def shard_of(centroid_id: int, num_shards: int) -> int:
    if num_shards < 1:
        raise StoreError("num_shards must be >= 1")
    if centroid_id < 0:
        raise StoreError("centroid_id must be nonnegative")
    return centroid_id % num_shards


@dataclass
class StoreStats:
    entries: int = 0
    bytes: int = 0
    gets: int = 0
    puts: int = 0
    bytes_served: int = 0

    def as_text(self) -> str:
        return (f"entries={self.entries}\nbytes={self.bytes}\ngets={self.gets}\n"
                f"puts={self.puts}\nbytes_served={self.bytes_served}\n")

    @classmethod
    def from_text(cls, text: str) -> "StoreStats":
        fields = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = int(value)
        return cls(**fields)


class MemoryBackend:
    """Process-local dict backend."""

    def __init__(self):
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self._gets = 0
        self._puts = 0
        self._bytes_served = 0

    def put(self, key: str, value: bytes) -> None:
        with self._lock:
            self._data[key] = bytes(value)
            self._puts += 1

    def get(self, key: str) -> bytes | None:
        with self._lock:
            self._gets += 1
            value = self._data.get(key)
            if value is not None:
                self._bytes_served += len(value)
            return value

    def exists(self, key: str) -> bool:
        with self._lock:
            return key in self._data

    def keys(self) -> list[str]:
        with self._lock:
            return sorted(self._data)

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(entries=len(self._data),
                              bytes=sum(len(v) for v in self._data.values()),
                              gets=self._gets, puts=self._puts,
                              bytes_served=self._bytes_served)

    def close(self) -> None:
        pass


class DirectoryBackend:
    """One file per entry under a root directory.

    Keys may contain '/' to namespace entries in subdirectories; each
    segment is restricted to a safe character set. Writes go to a temp file
    in the destination directory and are renamed into place, so a reader
    sees either the old or the new payload, never a mix.
    """

    def __init__(self, root: str | Path, create: bool = True):
        self.root = Path(root)
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise StoreError(f"store root {self.root} does not exist")
        self._lock = threading.Lock()
        self._gets = 0
        self._puts = 0
        self._bytes_served = 0

    def _path(self, key: str) -> Path:
        if not _KEY_RE.match(key) or ".." in key.split("/"):
            raise StoreError(f"unsafe key {key!r}")
        return self.root / (key + ENTRY_SUFFIX)

    def put(self, key: str, value: bytes) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(value)
            os.replace(tmp, path)
        except OSError as e:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise StoreError(f"write failed for {key!r}: {e}") from e
        with self._lock:
            self._puts += 1

    def get(self, key: str) -> bytes | None:
        path = self._path(key)
        try:
            value = path.read_bytes()
        except FileNotFoundError:
            value = None
        except OSError as e:
            raise StoreError(f"read failed for {key!r}: {e}") from e
        with self._lock:
            self._gets += 1
            if value is not None:
                self._bytes_served += len(value)
        return value

    def exists(self, key: str) -> bool:
        return self._path(key).exists()

    def keys(self) -> list[str]:
        found = []
        for path in self.root.rglob(f"*{ENTRY_SUFFIX}"):
            rel = path.relative_to(self.root).as_posix()
            found.append(rel[:-len(ENTRY_SUFFIX)])
        return sorted(found)

    def stats(self) -> StoreStats:
        entries = 0
        total = 0
        for path in self.root.rglob(f"*{ENTRY_SUFFIX}"):
            entries += 1
            total += path.stat().st_size
        with self._lock:
            return StoreStats(entries=entries, bytes=total, gets=self._gets,
                              puts=self._puts, bytes_served=self._bytes_served)

    def close(self) -> None:
        pass


class RemoteBackend:
    """Client for a served backend; one connection per calling thread."""

    def __init__(self, address: str | tuple[str, int], key_prefix: str = "",
                 timeout: float = 10.0):
        if isinstance(address, str):
            host, _, port = address.rpartition(":")
            if not host:
                raise StoreError(f"remote address {address!r} must be host:port")
            address = (host, int(port))
        self.address = address
        self.key_prefix = key_prefix
        self.timeout = timeout
        self._local = threading.local()
        self._conns: list[socket.socket] = []
        self._conns_lock = threading.Lock()

    def _conn(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            try:
                sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as e:
                raise StoreError(f"cannot reach {self.address}: {e}") from e
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = sock
            with self._conns_lock:
                self._conns.append(sock)
        return sock

    def _drop_conn(self) -> None:
        sock = getattr(self._local, "sock", None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
            self._local.sock = None

    def _request(self, opcode: int, key: str, value: bytes | None = None) -> tuple[int, bytes]:
        frame = wire.pack_request(opcode, (self.key_prefix + key).encode("utf-8"), value)
        sock = self._conn()
        try:
            sock.sendall(frame)
            reply = wire.read_frame(sock)
        except (OSError, StoreError) as e:
            self._drop_conn()
            raise StoreError(f"transport failure talking to {self.address}: {e}") from e
        if reply is None:
            self._drop_conn()
            raise StoreError(f"server {self.address} closed the connection")
        return wire.unpack_response(reply)

    def put(self, key: str, value: bytes) -> None:
        status, body = self._request(wire.OP_PUT, key, value)
        if status != wire.ST_OK:
            raise StoreError(f"remote put failed: {body.decode('utf-8', 'replace')}")

    def get(self, key: str) -> bytes | None:
        status, body = self._request(wire.OP_GET, key)
        if status == wire.ST_OK:
            return body
        if status == wire.ST_NOT_FOUND:
            return None
        raise StoreError(f"remote get failed: {body.decode('utf-8', 'replace')}")

    def exists(self, key: str) -> bool:
        status, body = self._request(wire.OP_EXISTS, key)
        if status == wire.ST_OK:
            return True
        if status == wire.ST_NOT_FOUND:
            return False
        raise StoreError(f"remote exists failed: {body.decode('utf-8', 'replace')}")

    def stats(self) -> StoreStats:
        status, body = self._request(wire.OP_STATS, "")
        if status != wire.ST_OK:
            raise StoreError(f"remote stats failed: {body.decode('utf-8', 'replace')}")
        return StoreStats.from_text(body.decode("utf-8"))

    def close(self) -> None:
        with self._conns_lock:
            for sock in self._conns:
                try:
                    sock.close()
                except OSError:
                    pass
            self._conns.clear()
        self._local = threading.local()


class ShardedStore:
    """Routes entries to one backend per shard by centroid id."""

    def __init__(self, backends: list):
        if not backends:
            raise StoreError("need at least one shard backend")
        self.backends = list(backends)
        self.num_shards = len(backends)

    @classmethod
    def in_memory(cls, num_shards: int) -> "ShardedStore":
        return cls([MemoryBackend() for _ in range(num_shards)])

    @classmethod
    def local(cls, root: str | Path, num_shards: int, create: bool = True) -> "ShardedStore":
        root = Path(root)
        return cls([DirectoryBackend(root / f"shard{k}", create=create)
                    for k in range(num_shards)])

    @classmethod
    def remote(cls, address: str | tuple[str, int], num_shards: int) -> "ShardedStore":
        return cls([RemoteBackend(address, key_prefix=f"shard{k}/")
                    for k in range(num_shards)])

    def shard_for(self, centroid_id: int) -> int:
        return shard_of(centroid_id, self.num_shards)

    def put_entry(self, chunk_id: str, centroid_id: int, data: bytes) -> None:
        shard = self.shard_for(centroid_id)
        try:
            self.backends[shard].put(chunk_id, data)
        except StoreError as e:
            raise StoreError(f"shard {shard}: {e}") from e

    def get_entry(self, chunk_id: str, centroid_id: int) -> bytes | None:
        shard = self.shard_for(centroid_id)
        try:
            return self.backends[shard].get(chunk_id)
        except StoreError as e:
            raise StoreError(f"shard {shard}: {e}") from e

    def exists_entry(self, chunk_id: str, centroid_id: int) -> bool:
        shard = self.shard_for(centroid_id)
        try:
            return self.backends[shard].exists(chunk_id)
        except StoreError as e:
            raise StoreError(f"shard {shard}: {e}") from e

    def stats(self) -> list[StoreStats]:
        return [b.stats() for b in self.backends]

    def close(self) -> None:
        for b in self.backends:
            b.close()
