"""TCP server exposing a single backend over the wire protocol.

One backend can serve any number of concurrent clients (requests on one
connection are handled in order), which lets several pipeline processes
share one populated cache. Malformed frames get an error response and the
connection stays usable; a frame over the size limit gets an error response
and the connection is closed, since the stream cannot be resynchronized.
"""

from __future__ import annotations

import socketserver
import threading

from . import wire


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        backend = self.server.backend
        sock = self.request
        while True:
            try:
                frame = wire.read_frame(sock)
            except wire.WireError as e:
                self._respond(wire.ST_ERROR, str(e).encode())
                return  # oversized declaration: cannot find the next frame boundary
            except Exception:
                return  # abrupt disconnect
            if frame is None:
                return
            try:
                opcode, key_bytes, value = wire.unpack_request(frame)
            except wire.WireError as e:
                if not self._respond(wire.ST_ERROR, str(e).encode()):
                    return
                continue
            if not self._respond(*self._dispatch(backend, opcode, key_bytes, value)):
                return

    def _dispatch(self, backend, opcode, key_bytes, value):
        try:
            key = key_bytes.decode("utf-8")
        except UnicodeDecodeError:
            return wire.ST_ERROR, b"key is not valid utf-8"
        try:
            if opcode == wire.OP_GET:
                data = backend.get(key)
                if data is None:
                    return wire.ST_NOT_FOUND, b""
                return wire.ST_OK, data
            if opcode == wire.OP_PUT:
                backend.put(key, value)
                return wire.ST_OK, b""
            if opcode == wire.OP_EXISTS:
                return (wire.ST_OK, b"") if backend.exists(key) else (wire.ST_NOT_FOUND, b"")
            if opcode == wire.OP_STATS:
                return wire.ST_OK, backend.stats().as_text().encode("utf-8")
        except Exception as e:  # backend failures must not kill the server
            return wire.ST_ERROR, f"backend error: {e}".encode()
        return wire.ST_ERROR, f"unknown opcode {opcode}".encode()

    def _respond(self, status, body) -> bool:
        try:
            self.request.sendall(wire.pack_response(status, body))
            return True
        except OSError:
            return False


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class KvServer:
    """Lifecycle wrapper: bind, serve (blocking or on a thread), shut down."""

    def __init__(self, bind_address: str | tuple[str, int], backend):
        if isinstance(bind_address, str):
            host, _, port = bind_address.rpartition(":")
            bind_address = (host or "127.0.0.1", int(port))
        self._server = _TCPServer(bind_address, _Handler)
        self._server.backend = backend
        self.backend = backend
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.1)

    def start(self) -> "KvServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


def serve_remote(bind_address, backend) -> KvServer:
    """Bind and serve `backend` until `shutdown()`; returns the running server."""
    return KvServer(bind_address, backend).start()
