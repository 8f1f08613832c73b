"""Session registry: transport-bound identities and per-invocation anti-replay checks.

Every invocation must carry a (sequence, nonce, timestamp) envelope.  A session
accepts it only if the sequence strictly increases, the nonce was never seen
before, and the timestamp is within the freshness window.  Rejections leave the
session state untouched.
"""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass, field

from capseal.transport import PeerIdentity

# Reject reasons
SEQ_NOT_INCREASING = "SeqNotIncreasing"
NONCE_REUSED = "NonceReused"
STALE_TIMESTAMP = "StaleTimestamp"
FUTURE_TIMESTAMP = "FutureTimestamp"
SESSION_MISSING = "SessionMissing"
SESSION_CLOSED = "SessionClosed"
REGISTRY_FULL = "RegistryFull"

DEFAULT_FRESHNESS_WINDOW_MS = 60_000
DEFAULT_CAPACITY = 1024

ACTIVE = "Active"
CLOSED = "Closed"


@dataclass
class AntiReplayEnvelope:
    seq: int
    nonce: str  # 128-bit value, hex-encoded
    timestamp_ms: int


@dataclass
class SessionRecord:
    session_id: str
    peer: PeerIdentity
    created_at_ms: int
    last_seq: int = 0
    nonce_window: dict = field(default_factory=dict)  # nonce -> timestamp_ms seen
    status: str = ACTIVE


class RegistryError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _new_session_id() -> str:
    return "sess_" + secrets.token_hex(16)


class SessionRegistry:
    """Shared session table.  check_and_accept is atomic per session."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY,
                 freshness_window_ms: int = DEFAULT_FRESHNESS_WINDOW_MS):
        self.capacity = capacity
        self.freshness_window_ms = freshness_window_ms
        self._sessions: dict[str, SessionRecord] = {}
        self._lock = threading.Lock()

    def register(self, peer: PeerIdentity, now_ms: int) -> SessionRecord:
        with self._lock:
            active = sum(1 for s in self._sessions.values() if s.status == ACTIVE)
            if active >= self.capacity:
                raise RegistryError(REGISTRY_FULL)
            record = SessionRecord(session_id=_new_session_id(), peer=peer,
                                   created_at_ms=now_ms)
            self._sessions[record.session_id] = record
            return record

    def get(self, session_id: str) -> SessionRecord | None:
        with self._lock:
            return self._sessions.get(session_id)

    def check_anti_replay(self, session_id: str, env: AntiReplayEnvelope,
                          now_ms: int) -> str | None:
        """Returns None on accept (state updated), or a reject reason (state unchanged)."""
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                return SESSION_MISSING
            if session.status != ACTIVE:
                return SESSION_CLOSED
            if env.seq <= session.last_seq:
                return SEQ_NOT_INCREASING
            if env.nonce in session.nonce_window:
                return NONCE_REUSED
            if env.timestamp_ms < now_ms - self.freshness_window_ms:
                return STALE_TIMESTAMP
            if env.timestamp_ms > now_ms + self.freshness_window_ms:
                return FUTURE_TIMESTAMP
            # All checks passed: update atomically under the lock.
            session.last_seq = env.seq
            session.nonce_window[env.nonce] = env.timestamp_ms
            self._evict_nonces(session, now_ms)
            return None

    def _evict_nonces(self, session: SessionRecord, now_ms: int) -> None:
        # Entries older than twice the freshness window can never be replayed:
        # their timestamps are independently rejected as stale.
        horizon = now_ms - 2 * self.freshness_window_ms
        stale = [n for n, ts in session.nonce_window.items() if ts < horizon]
        for nonce in stale:
            del session.nonce_window[nonce]

    def close(self, session_id: str) -> None:
        """Idempotent; unknown ids are a no-op."""
        with self._lock:
            session = self._sessions.get(session_id)
            if session is not None:
                session.status = CLOSED
