"""Transport layer: Unix-domain-socket JSON-RPC framing, kernel peer credentials,
and the MCP tools/call adapter.

Peer identity always comes from the socket (SO_PEERCRED), never from message
payloads.  Frames are newline-delimited UTF-8 JSON-RPC 2.0 documents.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass
from typing import Any

MAX_FRAME_BYTES = 1024 * 1024

METHODS = frozenset({
    "capseal.register",
    "capseal.req_cap",
    "capseal.invoke",
    "capseal.revoke",
    "capseal.audit.prove",
})

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
FRAME_TOO_LARGE = -32000


@dataclass(frozen=True)
class PeerIdentity:
    uid: int
    gid: int
    pid: int


@dataclass
class RpcEnvelope:
    id: Any
    method: str
    params: dict


class FrameError(Exception):
    def __init__(self, code: int, message: str, id: Any = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.id = id


class CredentialError(Exception):
    """Peer credentials could not be extracted; the connection must be refused."""


def get_peer_identity(sock: socket.socket) -> PeerIdentity:
    """Reads SO_PEERCRED from an AF_UNIX socket.  Fails closed on anything else."""
    try:
        if sock.family != socket.AF_UNIX:
            raise CredentialError("transport does not carry peer credentials")
        raw = sock.getsockopt(socket.SOL_SOCKET, socket.SO_PEERCRED,
                              struct.calcsize("3i"))
        pid, uid, gid = struct.unpack("3i", raw)
    except CredentialError:
        raise
    except OSError as exc:
        raise CredentialError(f"peer credential extraction failed: {exc}") from exc
    return PeerIdentity(uid=uid, gid=gid, pid=pid)


def parse_frame(line: bytes, max_bytes: int = MAX_FRAME_BYTES) -> RpcEnvelope | None:
    """Parses one newline-delimited frame.  Returns None for blank lines.

    Raises FrameError with a JSON-RPC error code on malformed input.
    """
    if len(line) > max_bytes:
        raise FrameError(FRAME_TOO_LARGE, "frame too large")
    stripped = line.strip()
    if not stripped:
        return None
    try:
        doc = json.loads(stripped.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FrameError(PARSE_ERROR, f"parse error: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("method"), str):
        raise FrameError(INVALID_REQUEST, "invalid request", id=_safe_id(doc))
    method = doc["method"]
    params = doc.get("params")
    if params is None:
        params = {}
    if not isinstance(params, dict):
        raise FrameError(INVALID_REQUEST, "params must be an object", id=doc.get("id"))
    if method == "tools/call":
        return adapt_mcp_params(doc.get("id"), params)
    if method not in METHODS:
        raise FrameError(METHOD_NOT_FOUND, f"unknown method {method!r}",
                         id=doc.get("id"))
    return RpcEnvelope(id=doc.get("id"), method=method, params=params)


def _safe_id(doc: Any) -> Any:
    return doc.get("id") if isinstance(doc, dict) else None


def adapt_mcp(name: str, arguments: dict, id: Any = None) -> RpcEnvelope:
    """Maps an MCP tools/call onto a broker operation 1:1."""
    if name not in METHODS:
        raise FrameError(METHOD_NOT_FOUND, f"unknown tool {name!r}", id=id)
    if not isinstance(arguments, dict):
        raise FrameError(INVALID_REQUEST, "arguments must be an object", id=id)
    return RpcEnvelope(id=id, method=name, params=arguments)


def adapt_mcp_params(id: Any, params: dict) -> RpcEnvelope:
    name = params.get("name")
    if not isinstance(name, str):
        raise FrameError(INVALID_REQUEST, "tools/call requires a tool name", id=id)
    return adapt_mcp(name, params.get("arguments") or {}, id=id)


def serialize_frame(envelope: RpcEnvelope) -> bytes:
    doc = {"jsonrpc": "2.0", "id": envelope.id, "method": envelope.method,
           "params": envelope.params}
    return json.dumps(doc, separators=(",", ":")).encode("utf-8") + b"\n"


def result_frame(id: Any, result: Any) -> bytes:
    return json.dumps({"jsonrpc": "2.0", "id": id, "result": result},
                      separators=(",", ":")).encode("utf-8") + b"\n"


def error_frame(id: Any, code: int, message: str) -> bytes:
    return json.dumps({"jsonrpc": "2.0", "id": id,
                       "error": {"code": code, "message": message}},
                      separators=(",", ":")).encode("utf-8") + b"\n"
