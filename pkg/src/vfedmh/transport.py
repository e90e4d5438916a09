"""Message delivery between parties: in-memory queues or framed TCP.

Both transports move the exact same frame bytes (see messages.py), in a star
topology: passive parties only ever talk to the active party, which relays
anything passive-to-passive (public keys during setup).  Per sender-receiver
pair delivery is FIFO and exactly-once; there is no loss, reconnection, or
dropout handling.
"""

from __future__ import annotations

import queue
import socket
import threading

from .messages import HEADER_SIZE, FrameError, Message, decode_payload, encode_frame, parse_header

ACTIVE_ID = 0
DEFAULT_TIMEOUT = 120.0


class TransportError(Exception):
    pass


class TransportTimeout(TransportError):
    pass


class _PeerClosed(Exception):
    """Clean shutdown: the peer closed its socket between frames."""


class Endpoint:
    """One party's handle on the network."""

    party_id: int

    def send(self, dest: int, msg: Message) -> int:
        raise NotImplementedError

    def recv_blocking(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        raise NotImplementedError

    def close(self):
        pass


# ---------------------------------------------------------------------------
# In-memory
# ---------------------------------------------------------------------------


class InMemoryNetwork:
    """Queues between one active party (id 0) and K passive parties (1..K).

    Frames are still encoded and decoded on every hop so byte-level behaviour
    matches the TCP transport exactly.
    """

    def __init__(self, n_passive: int):
        self._queues = {k: queue.Queue() for k in range(n_passive + 1)}
        self.n_passive = n_passive

    def endpoint(self, party_id: int) -> "InMemoryEndpoint":
        if party_id not in self._queues:
            raise TransportError(f"no endpoint for party {party_id}")
        return InMemoryEndpoint(self, party_id)

    def endpoints(self) -> dict[int, "InMemoryEndpoint"]:
        return {k: self.endpoint(k) for k in self._queues}

    def _deliver(self, dest: int, frame: bytes):
        if dest not in self._queues:
            raise TransportError(f"unknown destination party {dest}")
        self._queues[dest].put(frame)


class InMemoryEndpoint(Endpoint):
    def __init__(self, network: InMemoryNetwork, party_id: int):
        self._network = network
        self.party_id = party_id

    def send(self, dest: int, msg: Message) -> int:
        if self.party_id != ACTIVE_ID and dest != ACTIVE_ID:
            raise TransportError(
                f"passive party {self.party_id} may only send to the active party"
            )
        frame = encode_frame(msg)
        self._network._deliver(dest, frame)
        return len(frame)

    def recv_blocking(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        try:
            frame = self._network._queues[self.party_id].get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"party {self.party_id}: no message within {timeout}s")
        msg_type, sender, payload_len = parse_header(frame[:HEADER_SIZE])
        payload = frame[HEADER_SIZE:]
        if len(payload) != payload_len:
            raise FrameError(f"payload length {len(payload)} != header {payload_len}")
        return decode_payload(msg_type, sender, payload)


# ---------------------------------------------------------------------------
# TCP
# ---------------------------------------------------------------------------


def _read_exactly(sock: socket.socket, n: int, at_boundary: bool = False) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if at_boundary and not buf:
                raise _PeerClosed
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return buf


def _read_frame(sock: socket.socket) -> Message:
    header = _read_exactly(sock, HEADER_SIZE, at_boundary=True)
    msg_type, sender, payload_len = parse_header(header)
    payload = _read_exactly(sock, payload_len)
    return decode_payload(msg_type, sender, payload)


class TcpHub(Endpoint):
    """The active party's endpoint: listens, registers one socket per passive.

    Connections are identified by the sender field of their first frame; a
    second connection claiming an already-registered party id is an error.
    Reader threads funnel decoded messages into one queue, preserving each
    sender's order.  A malformed frame poisons the hub and closes the socket.
    """

    party_id = ACTIVE_ID

    def __init__(self, host: str, port: int, n_passive: int):
        self.n_passive = n_passive
        self._inbox: queue.Queue = queue.Queue()
        self._socks: dict[int, socket.socket] = {}
        self._socks_lock = threading.Lock()
        self._registered = threading.Condition(self._socks_lock)
        self._closing = False
        self._listener = socket.create_server((host, port))
        self.port = self._listener.getsockname()[1]
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        accepted = 0
        while accepted < self.n_passive:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            accepted += 1
            threading.Thread(target=self._reader_loop, args=(sock,), daemon=True).start()

    def _reader_loop(self, sock: socket.socket):
        registered_as = None
        try:
            while True:
                msg = _read_frame(sock)
                if registered_as is None:
                    with self._registered:
                        if msg.sender in self._socks:
                            raise TransportError(f"duplicate party id {msg.sender}")
                        self._socks[msg.sender] = sock
                        registered_as = msg.sender
                        self._registered.notify_all()
                self._inbox.put(msg)
        except _PeerClosed:
            sock.close()
        except Exception as exc:  # noqa: BLE001 - surfaced on next recv
            if not self._closing:
                self._inbox.put(exc)
            sock.close()

    def _wait_for(self, dest: int, timeout: float):
        with self._registered:
            if not self._registered.wait_for(lambda: dest in self._socks, timeout=timeout):
                raise TransportTimeout(f"party {dest} never connected")
            return self._socks[dest]

    def send(self, dest: int, msg: Message) -> int:
        sock = self._wait_for(dest, DEFAULT_TIMEOUT)
        frame = encode_frame(msg)
        sock.sendall(frame)
        return len(frame)

    def recv_blocking(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"active party: no message within {timeout}s")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._closing = True
        self._listener.close()
        with self._socks_lock:
            for sock in self._socks.values():
                sock.close()


class TcpClient(Endpoint):
    """A passive party's connection to the hub."""

    def __init__(self, host: str, port: int, party_id: int, connect_timeout: float = DEFAULT_TIMEOUT):
        self.party_id = party_id
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)

    def send(self, dest: int, msg: Message) -> int:
        if dest != ACTIVE_ID:
            raise TransportError(
                f"passive party {self.party_id} may only send to the active party"
            )
        frame = encode_frame(msg)
        self._sock.sendall(frame)
        return len(frame)

    def recv_blocking(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        self._sock.settimeout(timeout)
        try:
            return _read_frame(self._sock)
        except socket.timeout:
            raise TransportTimeout(f"party {self.party_id}: no message within {timeout}s")
        except _PeerClosed:
            raise TransportError(f"party {self.party_id}: the active party closed the connection")
        finally:
            self._sock.settimeout(None)

    def close(self):
        self._sock.close()
