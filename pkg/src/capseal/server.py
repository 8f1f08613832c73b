"""Socket server and RPC dispatch.

Each connection is one logical channel: sessions registered on it are bound to
it and implicitly closed when it closes.  Frames on a connection are processed
strictly in order; separate connections run concurrently.
"""

from __future__ import annotations

import json
import os
import socket
import threading
from dataclasses import dataclass, field

from capseal import transport
from capseal.broker import Broker, parse_invoke
from capseal.transport import (FrameError, PeerIdentity, RpcEnvelope,
                               error_frame, result_frame, INVALID_REQUEST)


@dataclass
class ConnectionState:
    peer: PeerIdentity
    sessions: set = field(default_factory=set)


class Dispatcher:
    """Maps accepted envelopes onto broker operations."""

    def __init__(self, broker: Broker, bind_sessions_to_connection: bool = True):
        self.broker = broker
        self.bind_sessions = bind_sessions_to_connection

    def dispatch(self, envelope: RpcEnvelope, state: ConnectionState) -> dict:
        method = envelope.method
        params = envelope.params
        if method == "capseal.register":
            response = self.broker.handle_register(state.peer)
            if response.result:
                state.sessions.add(response.result["session_id"])
            return response.to_dict()
        if method == "capseal.audit.prove":
            return self.broker.handle_audit_prove(
                params, session_id=params.get("session_id")).to_dict()

        session_id = params.get("session_id")
        if self.bind_sessions and session_id not in state.sessions:
            # The handle/session is useless outside the channel it was
            # registered on.
            return {"outcome": "denied", "stage": "session",
                    "reason": "SessionNotOnChannel", "audit_index": None}
        if method == "capseal.req_cap":
            return self.broker.handle_req_cap(params).to_dict()
        if method == "capseal.invoke":
            try:
                ctx = parse_invoke(params)
            except (KeyError, ValueError, TypeError) as exc:
                raise FrameError(INVALID_REQUEST, f"bad invoke params: {exc}",
                                 id=envelope.id)
            return self.broker.handle_invoke(ctx).to_dict()
        if method == "capseal.revoke":
            return self.broker.handle_revoke(params.get("handle_id", ""),
                                             session_id).to_dict()
        raise FrameError(transport.METHOD_NOT_FOUND, f"unknown method {method!r}",
                         id=envelope.id)

    def handle_line(self, line: bytes, state: ConnectionState) -> bytes | None:
        """One frame in, one frame out (None for skipped blank lines)."""
        try:
            envelope = transport.parse_frame(line)
        except FrameError as exc:
            return error_frame(exc.id, exc.code, exc.message)
        if envelope is None:
            return None
        try:
            result = self.dispatch(envelope, state)
        except FrameError as exc:
            return error_frame(exc.id, exc.code, exc.message)
        return result_frame(envelope.id, result)

    def end_connection(self, state: ConnectionState) -> None:
        for session_id in state.sessions:
            self.broker.sessions.close(session_id)
        state.sessions.clear()


class UdsServer:
    """Threaded Unix-domain-socket server, one thread per connection."""

    def __init__(self, path: str, dispatcher: Dispatcher):
        self.path = path
        self.dispatcher = dispatcher
        self._listener: socket.socket | None = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        if os.path.exists(self.path):
            os.unlink(self.path)
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        listener.bind(self.path)
        os.chmod(self.path, 0o600)
        listener.listen(16)
        listener.settimeout(0.2)
        self._listener = listener
        thread = threading.Thread(target=self._accept_loop, daemon=True)
        thread.start()
        self._threads.append(thread)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                peer = transport.get_peer_identity(conn)
            except transport.CredentialError:
                conn.close()  # fail closed: no credentials, no connection
                continue
            thread = threading.Thread(target=self._serve_connection,
                                      args=(conn, peer), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_connection(self, conn: socket.socket, peer: PeerIdentity) -> None:
        state = ConnectionState(peer=peer)
        try:
            with conn, conn.makefile("rb") as reader:
                for line in reader:
                    reply = self.dispatcher.handle_line(line, state)
                    if reply is not None:
                        conn.sendall(reply)
        except OSError:
            pass
        finally:
            self.dispatcher.end_connection(state)

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        if os.path.exists(self.path):
            os.unlink(self.path)


class LocalChannel:
    """In-memory transport implementing the same framed contract, so the
    harness and tests can run without filesystem sockets."""

    def __init__(self, dispatcher: Dispatcher, peer: PeerIdentity):
        self.dispatcher = dispatcher
        self.state = ConnectionState(peer=peer)
        self._next_id = 0

    def call(self, method: str, params: dict) -> dict:
        self._next_id += 1
        frame = json.dumps({"jsonrpc": "2.0", "id": self._next_id,
                            "method": method, "params": params}).encode()
        reply = self.dispatcher.handle_line(frame + b"\n", self.state)
        doc = json.loads(reply)
        if "error" in doc:
            raise FrameError(doc["error"]["code"], doc["error"]["message"])
        return doc["result"]

    def close(self) -> None:
        self.dispatcher.end_connection(self.state)


class UdsClient:
    """Thin blocking client for the CLI and tests."""

    def __init__(self, path: str):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.connect(path)
        self._reader = self.sock.makefile("rb")
        self._next_id = 0

    def call(self, method: str, params: dict) -> dict:
        self._next_id += 1
        frame = json.dumps({"jsonrpc": "2.0", "id": self._next_id,
                            "method": method, "params": params}).encode()
        self.sock.sendall(frame + b"\n")
        doc = json.loads(self._reader.readline())
        if "error" in doc:
            raise FrameError(doc["error"]["code"], doc["error"]["message"])
        return doc["result"]

    def close(self) -> None:
        self._reader.close()
        self.sock.close()
