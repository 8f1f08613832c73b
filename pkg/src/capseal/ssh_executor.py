"""SSH executor: broker-exec of narrowly constrained remote commands.

The broker runs the remote action itself; the agent never holds key material
or a forwarding-capable channel.  Host authenticity is checked against the
capability's pinned host key before any command runs.

Two transports implement the same contract: a deterministic in-process
simulator (default, hermetic) and an OpenSSH subprocess mode (config-gated).
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from capseal.http_executor import redact

# Reject reasons
HOST_DENIED = "HostDenied"
USER_DENIED = "UserDenied"
TEMPLATE_MISMATCH = "TemplateMismatch"
TOO_MANY_ARGUMENTS = "TooManyArguments"
FORWARDING_FORBIDDEN = "ForwardingForbidden"
HOST_KEY_MISMATCH = "HostKeyMismatch"

_FORWARDING_FLAGS = {"-A", "-L", "-R", "-D", "-w"}
_FORWARDING_OPTIONS = ("forwardagent", "forwardx11", "localforward",
                       "remoteforward", "dynamicforward", "permitlocalcommand")


@dataclass
class SshScope:
    host: str
    user: str
    command_prefix: list[str]
    max_arguments: int = 3
    known_hosts_pin: str = "ssh-ed25519"
    max_output_bytes: int = 2048

    def __post_init__(self):
        if not self.command_prefix:
            raise ValueError("command_prefix must be non-empty")
        if self.max_arguments < 0:
            raise ValueError("max_arguments must be >= 0")
        if self.max_output_bytes <= 0:
            raise ValueError("max_output_bytes must be > 0")


@dataclass
class SshInvocation:
    args: list[str]
    host: str | None = None  # defaults to scope host
    user: str | None = None


@dataclass
class SshResult:
    exit_code: int
    stdout: bytes
    stderr: bytes
    truncated: bool
    host_key_verified: bool


class ExecutorError(Exception):
    """Transport-level failure; a denial-class outcome."""


def _is_forwarding_token(token: str) -> bool:
    if token in _FORWARDING_FLAGS:
        return True
    lower = token.lower()
    return any(opt in lower for opt in _FORWARDING_OPTIONS)


def validate_ssh(scope: SshScope, inv: SshInvocation) -> str | None:
    """Returns None on accept or the first failing check's reason."""
    if inv.host is not None and inv.host != scope.host:
        return HOST_DENIED
    if inv.user is not None and inv.user != scope.user:
        return USER_DENIED
    resolved = scope.command_prefix + list(inv.args)
    if resolved[:len(scope.command_prefix)] != scope.command_prefix:
        return TEMPLATE_MISMATCH
    if len(inv.args) > scope.max_arguments:
        return TOO_MANY_ARGUMENTS
    for token in inv.args:
        if _is_forwarding_token(token):
            return FORWARDING_FORBIDDEN
    return None


def verify_host_key(pin: str, presented: tuple[str, str] | None) -> bool:
    """Pin grammar: `<key-type>` or `<key-type> <base64>`.

    A type-only pin accepts any key of that type; a full pin requires an exact
    key match.  No presented key fails closed.
    """
    if presented is None:
        return False
    key_type, key_b64 = presented
    parts = pin.split(None, 1)
    if not parts:
        return False
    if parts[0] != key_type:
        return False
    if len(parts) == 2 and parts[1] != key_b64:
        return False
    return True


class SshSimulator:
    """Deterministic host keyring + command table, with execution counters the
    tests use to prove no command ran without pin verification.

    Fixture shape: {host: {"key_type": ..., "key_b64": ...,
                           "commands": {"argv string": {"stdout": ..., "exit_code": ...}}}}
    """

    def __init__(self, fixture: dict):
        self.hosts = fixture
        self.executions = 0
        self.executed_argv: list[list[str]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "SshSimulator":
        return cls(json.loads(Path(path).read_text("utf-8")))

    def host_key(self, host: str) -> tuple[str, str] | None:
        entry = self.hosts.get(host)
        if entry is None:
            return None
        return entry["key_type"], entry["key_b64"]

    def execute(self, host: str, user: str, full_argv: list[str],
                remote_args: list[str]) -> tuple[int, bytes, bytes]:
        entry = self.hosts.get(host)
        if entry is None:
            raise ExecutorError(f"unknown host {host!r}")
        with self._lock:
            self.executions += 1
            self.executed_argv.append(list(full_argv))
        command = " ".join(remote_args)
        table = entry.get("commands", {})
        if command not in table:
            return 127, b"", f"command not found: {command}".encode()
        spec = table[command]
        stdout = spec.get("stdout", "")
        stderr = spec.get("stderr", "")
        if isinstance(stdout, str):
            stdout = stdout.encode("utf-8")
        if isinstance(stderr, str):
            stderr = stderr.encode("utf-8")
        return int(spec.get("exit_code", 0)), stdout, stderr


class OpenSshTransport:
    """Runs the real OpenSSH client with forwarding disabled and an ephemeral
    0600 key file removed right after the call."""

    def __init__(self, binary_path: str = "ssh", timeout_s: float = 30.0):
        self.binary_path = binary_path
        self.timeout_s = timeout_s
        self._presented_keys: dict[str, tuple[str, str]] = {}

    def pin_host_key(self, host: str, key_type: str, key_b64: str) -> None:
        self._presented_keys[host] = (key_type, key_b64)

    def host_key(self, host: str) -> tuple[str, str] | None:
        return self._presented_keys.get(host)

    def execute(self, host: str, user: str, full_argv: list[str],
                remote_args: list[str], key_material: str = "") -> tuple[int, bytes, bytes]:
        fd, key_path = tempfile.mkstemp(prefix="capseal-key-")
        try:
            os.fchmod(fd, 0o600)
            with os.fdopen(fd, "w") as fh:
                fh.write(key_material)
            argv = [self.binary_path,
                    "-o", "ForwardAgent=no", "-o", "ForwardX11=no",
                    "-o", "ClearAllForwardings=yes",
                    "-o", "BatchMode=yes", "-o", "StrictHostKeyChecking=yes",
                    "-i", key_path, f"{user}@{host}", "--", *remote_args]
            try:
                proc = subprocess.run(argv, capture_output=True,
                                      timeout=self.timeout_s)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ExecutorError(f"openssh transport failure: {exc}") from exc
            return proc.returncode, proc.stdout, proc.stderr
        finally:
            os.unlink(key_path)


def execute_ssh(scope: SshScope, inv: SshInvocation, key_material: str,
                transport) -> SshResult:
    """Runs the command through the transport after the pin check.

    Callers must have run validate_ssh first; the pin check is unconditional
    here so no path can reach execution against an unverified host.
    """
    host = inv.host or scope.host
    user = inv.user or scope.user
    if not verify_host_key(scope.known_hosts_pin, transport.host_key(host)):
        raise ExecutorError(HOST_KEY_MISMATCH)
    full_argv = scope.command_prefix + list(inv.args)
    exit_code, stdout, stderr = transport.execute(host, user, full_argv, list(inv.args))
    cap = scope.max_output_bytes
    truncated = len(stdout) > cap or len(stderr) > cap
    stdout, _ = redact(stdout[:cap], [key_material])
    stderr, _ = redact(stderr[:cap], [key_material])
    return SshResult(exit_code=exit_code, stdout=stdout, stderr=stderr,
                     truncated=truncated, host_key_verified=True)
