"""HTTP executor: scope validation, broker-side credential injection, and
response redaction.

Validation order is fixed: method, host, path, body size, header allowlist,
caller-supplied auth headers, body schema.  The first failing check denies the
invocation before the credential is ever read.
"""

from __future__ import annotations

import base64
import http.client
from dataclasses import dataclass, field

from capseal.jtd import SchemaRegistry

# Reject reasons
METHOD_DENIED = "MethodDenied"
HOST_DENIED = "HostDenied"
PATH_DENIED = "PathDenied"
BODY_TOO_LARGE = "BodyTooLarge"
HEADER_DENIED = "HeaderDenied"
CALLER_AUTH_FORBIDDEN = "CallerAuthForbidden"
SCHEMA_VIOLATION = "SchemaViolation"

DEFAULT_MAX_BODY_BYTES = 65536

# Caller-supplied credential-bearing headers are always rejected, whatever the
# allowlist says; only the broker injects credentials.
FORBIDDEN_CALLER_HEADERS = frozenset({"authorization", "proxy-authorization", "cookie"})

# Response headers that may pass back to the agent.
RESPONSE_HEADER_ALLOWLIST = frozenset({"content-type", "content-length", "date"})

REDACTION_MARKER = "[REDACTED]"


@dataclass
class HttpScope:
    methods: list[str]
    host: str
    path_template: str
    body_schema_ref: str | None = None
    max_body_bytes: int = DEFAULT_MAX_BODY_BYTES
    header_allowlist: list[str] = field(default_factory=lambda: ["content-type", "accept"])

    def __post_init__(self):
        if not self.methods:
            raise ValueError("methods must be non-empty")
        if not self.host:
            raise ValueError("host must be non-empty")
        if not self.path_template.startswith("/"):
            raise ValueError("path_template must start with '/'")


@dataclass
class HttpInvocation:
    method: str
    host: str
    path: str
    headers: dict = field(default_factory=dict)
    body: bytes = b""


@dataclass
class RedactedHttpResult:
    status: int
    headers: dict
    body: bytes
    redactions: int
    truncated: bool = False


class ExecutorError(Exception):
    """Transport-level failure; counts as a denial outcome, never leakage."""


def match_path_template(template: str, path: str) -> bool:
    """Literal segments match exactly; `{param}` matches one non-empty segment."""
    t_parts = template.split("/")
    p_parts = path.split("/")
    if len(t_parts) != len(p_parts):
        return False
    for t, p in zip(t_parts, p_parts):
        if t.startswith("{") and t.endswith("}") and len(t) > 2:
            if not p:
                return False
        elif t != p:
            return False
    return True


def validate_http(scope: HttpScope, inv: HttpInvocation,
                  registry: SchemaRegistry, body_json=None) -> str | None:
    """Returns None on accept or the first failing check's reason."""
    if inv.method not in scope.methods:
        return METHOD_DENIED
    if inv.host != scope.host:
        return HOST_DENIED
    if not match_path_template(scope.path_template, inv.path):
        return PATH_DENIED
    if len(inv.body) > scope.max_body_bytes:
        return BODY_TOO_LARGE
    allow = {h.lower() for h in scope.header_allowlist}
    forbidden_seen = False
    for name in inv.headers:
        lower = name.lower()
        if lower in FORBIDDEN_CALLER_HEADERS:
            forbidden_seen = True
            continue  # has its own, more specific check below
        if lower not in allow:
            return HEADER_DENIED
    if forbidden_seen:
        return CALLER_AUTH_FORBIDDEN
    if scope.body_schema_ref:
        if body_json is None and inv.body:
            import json
            try:
                body_json = json.loads(inv.body.decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                return SCHEMA_VIOLATION
        errors = registry.validate_ref(scope.body_schema_ref, body_json)
        if errors:
            return SCHEMA_VIOLATION
    return None


def validate_body_schema(registry: SchemaRegistry, schema_ref: str, body) -> list[str]:
    """Thin wrapper kept separate so schema conformance is testable on its own."""
    return registry.validate_ref(schema_ref, body)


def redact(data: bytes, secrets: list[str]) -> tuple[bytes, int]:
    """Removes every plaintext and base64 occurrence of each secret."""
    count = 0
    for secret in secrets:
        if not secret:
            continue
        for needle in (secret.encode("utf-8"),
                       base64.b64encode(secret.encode("utf-8"))):
            occurrences = data.count(needle)
            if occurrences:
                data = data.replace(needle, REDACTION_MARKER.encode("ascii"))
                count += occurrences
    return data, count


def execute_http(scope: HttpScope, inv: HttpInvocation, secret_plaintext: str,
                 connect: tuple[str, int] | None = None,
                 inject_header: str = "Authorization",
                 inject_format: str = "Bearer {}",
                 timeout_s: float = 10.0) -> RedactedHttpResult:
    """Performs the validated request with the credential injected broker-side.

    `connect` overrides the (address, port) to dial, for loopback harness
    targets; the Host header always carries the scope host.  Redirects are not
    followed: a 3xx comes back as data, so the host scope cannot silently widen.
    """
    address, port = connect if connect else (scope.host, 80)
    conn = http.client.HTTPConnection(address, port, timeout=timeout_s)
    headers = dict(inv.headers)
    headers[inject_header] = inject_format.format(secret_plaintext)
    headers["Host"] = scope.host
    headers.setdefault("Content-Length", str(len(inv.body)))
    try:
        conn.request(inv.method, inv.path, body=inv.body, headers=headers)
        resp = conn.getresponse()
        raw_body = resp.read(scope.max_body_bytes + 1)
        status = resp.status
        raw_headers = {k.lower(): v for k, v in resp.getheaders()}
    except OSError as exc:
        raise ExecutorError(f"http transport failure: {exc}") from exc
    finally:
        conn.close()

    truncated = len(raw_body) > scope.max_body_bytes
    body = raw_body[:scope.max_body_bytes]
    body, redactions = redact(body, [secret_plaintext])
    safe_headers = {}
    for name, value in raw_headers.items():
        if name in RESPONSE_HEADER_ALLOWLIST:
            value, n = redact(value.encode("utf-8"), [secret_plaintext])
            redactions += n
            safe_headers[name] = value.decode("utf-8", "replace")
        else:
            redactions += 1
    return RedactedHttpResult(status=status, headers=safe_headers, body=body,
                              redactions=redactions, truncated=truncated)
