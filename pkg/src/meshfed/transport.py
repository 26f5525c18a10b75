"""Stream-socket transport adapter.

One frame per connection: the sender writes a complete frame, half-closes,
and the receiver reads to EOF. Every participant runs a listener; replies
(e.g. to MODEL_REQUEST) arrive as fresh connections to the address the
peer advertised in its ANNOUNCE.
"""

from __future__ import annotations

import socket
import threading

MAX_FRAME_BYTES = 64 * 1024 * 1024
_READ_TIMEOUT = 5.0


class BindError(OSError):
    pass


def parse_address(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host, int(port)


class TcpListener:
    """Accepts connections and hands each received frame to a callback."""

    def __init__(self, bind_address: str, on_frame):
        self._on_frame = on_frame
        host, port = parse_address(bind_address)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as e:
            self._sock.close()
            raise BindError(f"cannot bind {bind_address}: {e}") from e
        self._sock.listen(32)
        self.address = "%s:%d" % (host, self._sock.getsockname()[1])
        self._closing = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._closing = True
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _addr = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._read_one, args=(conn,), daemon=True).start()

    def _read_one(self, conn: socket.socket):
        chunks = []
        total = 0
        try:
            conn.settimeout(_READ_TIMEOUT)
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                total += len(chunk)
                if total > MAX_FRAME_BYTES:
                    return
                chunks.append(chunk)
        except OSError:
            return
        finally:
            try:
                conn.close()
            except OSError:
                pass
        if chunks:
            self._on_frame(b"".join(chunks))


def tcp_send(address: str, frame: bytes, timeout: float = 2.0) -> bool:
    """Deliver one frame; returns False when the peer is unreachable."""
    try:
        host, port = parse_address(address)
    except ValueError:
        return False
    try:
        with socket.create_connection((host, port), timeout=timeout) as conn:
            conn.sendall(frame)
            conn.shutdown(socket.SHUT_WR)
            # wait for the peer to finish reading before tearing down
            conn.settimeout(timeout)
            try:
                while conn.recv(4096):
                    pass
            except OSError:
                pass
        return True
    except OSError:
        return False
