"""Capability store: issues, meters, expires, and revokes session-bound handles."""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass, field
from typing import Any

HTTP_PROXY = "HttpProxy"
SSH_EXEC = "SshExec"

_CAP_TYPE_ALIASES = {
    "HTTP_PROXY": HTTP_PROXY,
    "HttpProxy": HTTP_PROXY,
    "SshExec": SSH_EXEC,
    "SSH_EXEC": SSH_EXEC,
}

STEP_UP_NONE = "None"
STEP_UP_REQUIRED = "Required"

# Reject reasons
HANDLE_MISSING = "HandleMissing"
WRONG_SESSION = "WrongSession"
REVOKED = "Revoked"
EXPIRED = "Expired"
QUOTA_EXHAUSTED = "QuotaExhausted"
STEP_UP_PENDING = "StepUpPending"

DEFAULT_TTL_MS = 300_000
DEFAULT_QUOTA = 16


def normalize_cap_type(value: str) -> str:
    try:
        return _CAP_TYPE_ALIASES[value]
    except KeyError:
        raise ValueError(f"unknown cap_type {value!r}") from None


@dataclass
class CapRequest:
    session_id: str
    intent: str
    cap_type: str
    secret_id: str
    scope: Any  # HttpScope | SshScope
    step_up: str = STEP_UP_NONE
    ttl_ms: int = DEFAULT_TTL_MS
    quota: int = DEFAULT_QUOTA


@dataclass
class CapabilityHandle:
    handle_id: str
    session_id: str
    intent: str
    cap_type: str
    secret_id: str
    scope: Any
    issued_at_ms: int
    ttl_ms: int = DEFAULT_TTL_MS
    quota: int = DEFAULT_QUOTA
    quota_used: int = 0
    revoked: bool = False
    step_up: str = STEP_UP_NONE
    pending: bool = False  # True until a Required step-up is approved
    challenge_id: str | None = None

    def expired(self, now_ms: int) -> bool:
        return now_ms > self.issued_at_ms + self.ttl_ms


class CapabilityStore:
    """Handle table.  authorize_use's check-and-increment is atomic per handle."""

    def __init__(self):
        self._handles: dict[str, CapabilityHandle] = {}
        self._lock = threading.Lock()

    def issue(self, req: CapRequest, now_ms: int,
              challenge_id: str | None = None) -> CapabilityHandle:
        handle = CapabilityHandle(
            handle_id="cap_" + secrets.token_hex(16),
            session_id=req.session_id,
            intent=req.intent,
            cap_type=req.cap_type,
            secret_id=req.secret_id,
            scope=req.scope,
            issued_at_ms=now_ms,
            ttl_ms=req.ttl_ms,
            quota=req.quota,
            step_up=req.step_up,
            pending=req.step_up == STEP_UP_REQUIRED,
            challenge_id=challenge_id,
        )
        with self._lock:
            self._handles[handle.handle_id] = handle
        return handle

    def get(self, handle_id: str) -> CapabilityHandle | None:
        with self._lock:
            return self._handles.get(handle_id)

    def authorize_use(self, handle_id: str, session_id: str,
                      now_ms: int) -> tuple[CapabilityHandle | None, str | None]:
        """Returns (handle, None) on success with quota consumed, else (None, reason)."""
        with self._lock:
            handle = self._handles.get(handle_id)
            if handle is None:
                return None, HANDLE_MISSING
            if handle.session_id != session_id:
                return None, WRONG_SESSION
            if handle.revoked:
                return None, REVOKED
            if handle.expired(now_ms):
                return None, EXPIRED
            if handle.pending:
                return None, STEP_UP_PENDING
            if handle.quota_used >= handle.quota:
                return None, QUOTA_EXHAUSTED
            handle.quota_used += 1
            return handle, None

    def release_use(self, handle_id: str) -> None:
        """Refunds one quota unit when a later pipeline stage denies the invoke.

        Quota meters executed invocations only; a denial downstream of the
        lifecycle check must not consume authority.
        """
        with self._lock:
            handle = self._handles.get(handle_id)
            if handle is not None and handle.quota_used > 0:
                handle.quota_used -= 1

    def approve_step_up(self, handle_id: str) -> bool:
        with self._lock:
            handle = self._handles.get(handle_id)
            if handle is None:
                return False
            handle.pending = False
            return True

    def revoke(self, handle_id: str) -> None:
        """Idempotent; unknown handles are a no-op."""
        with self._lock:
            handle = self._handles.get(handle_id)
            if handle is not None:
                handle.revoked = True

    def sweep_expired(self, now_ms: int) -> int:
        with self._lock:
            dead = [h for h, rec in self._handles.items() if rec.expired(now_ms)]
            for handle_id in dead:
                del self._handles[handle_id]
            return len(dead)
