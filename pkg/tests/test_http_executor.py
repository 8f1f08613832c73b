import base64
import json

import pytest
from hypothesis import given, settings, strategies as st

from capseal import http_executor as hx
from capseal.harness.target import HttpTarget
from capseal.http_executor import (HttpInvocation, HttpScope, execute_http,
                                   match_path_template, redact, validate_http)
from capseal.jtd import SchemaRegistry

SECRET = "sk-test-deadbeef01"


@pytest.fixture
def registry():
    return SchemaRegistry()


@pytest.fixture
def scope():
    return HttpScope(methods=["POST"], host="api.example.com",
                     path_template="/v1/chat/completions",
                     body_schema_ref="jtd:ChatCompletionRequest.v1")


def chat_body():
    return json.dumps({"model": "m",
                       "messages": [{"role": "user", "content": "hi"}]}).encode()


def invocation(**kw):
    defaults = dict(method="POST", host="api.example.com",
                    path="/v1/chat/completions",
                    headers={"Content-Type": "application/json"},
                    body=chat_body())
    defaults.update(kw)
    return HttpInvocation(**defaults)


class TestScope:
    def test_rejects_empty_methods(self):
        with pytest.raises(ValueError):
            HttpScope(methods=[], host="h", path_template="/x")

    def test_rejects_relative_path(self):
        with pytest.raises(ValueError):
            HttpScope(methods=["GET"], host="h", path_template="x")


class TestPathTemplate:
    @pytest.mark.parametrize("template,path,ok", [
        ("/v1/chat/completions", "/v1/chat/completions", True),
        ("/v1/chat/completions", "/v1/chat", False),
        ("/v1/chat/completions", "/v1/chat/completions/extra", False),
        ("/v1/items/{id}", "/v1/items/42", True),
        ("/v1/items/{id}", "/v1/items/", False),
        ("/v1/items/{id}", "/v1/items/42/detail", False),
        ("/v1/items/{id}/x", "/v1/items/42/x", True),
        ("/", "/", True),
    ])
    def test_match(self, template, path, ok):
        assert match_path_template(template, path) is ok


class TestValidateOrder:
    def test_accepts_in_scope(self, scope, registry):
        assert validate_http(scope, invocation(), registry) is None

    def test_method_denied(self, scope, registry):
        assert validate_http(scope, invocation(method="GET"),
                             registry) == hx.METHOD_DENIED

    def test_host_denied(self, scope, registry):
        assert validate_http(scope, invocation(host="evil.example.com"),
                             registry) == hx.HOST_DENIED

    def test_path_denied(self, scope, registry):
        assert validate_http(scope, invocation(path="/admin/keys"),
                             registry) == hx.PATH_DENIED

    def test_body_too_large(self, registry):
        scope = HttpScope(methods=["POST"], host="api.example.com",
                          path_template="/v1/chat/completions",
                          max_body_bytes=10)
        assert validate_http(scope, invocation(body=b"x" * 11),
                             registry) == hx.BODY_TOO_LARGE

    def test_header_denied(self, scope, registry):
        inv = invocation(headers={"Content-Type": "application/json",
                                  "X-Custom": "1"})
        assert validate_http(scope, inv, registry) == hx.HEADER_DENIED

    def test_caller_auth_forbidden(self, scope, registry):
        inv = invocation(headers={"Authorization": "Bearer stolen"})
        assert validate_http(scope, inv, registry) == hx.CALLER_AUTH_FORBIDDEN

    def test_caller_auth_beats_allowlist_reason(self, scope, registry):
        # Cookie is not on the allowlist either, but the auth-specific reason
        # must be reported, not the generic HeaderDenied.
        inv = invocation(headers={"Cookie": "sid=1"})
        assert validate_http(scope, inv, registry) == hx.CALLER_AUTH_FORBIDDEN

    def test_schema_violation(self, scope, registry):
        assert validate_http(scope, invocation(body=b"{}"),
                             registry) == hx.SCHEMA_VIOLATION

    def test_non_json_body_is_schema_violation(self, scope, registry):
        assert validate_http(scope, invocation(body=b"\xff\x00 not json"),
                             registry) == hx.SCHEMA_VIOLATION

    def test_unknown_schema_fails_closed(self, registry):
        scope = HttpScope(methods=["POST"], host="api.example.com",
                          path_template="/v1/chat/completions",
                          body_schema_ref="jtd:Missing.v1")
        assert validate_http(scope, invocation(),
                             registry) == hx.SCHEMA_VIOLATION

    def test_order_method_before_host(self, scope, registry):
        # Both method and host are wrong: the method check fires first.
        inv = invocation(method="DELETE", host="evil.example.com")
        assert validate_http(scope, inv, registry) == hx.METHOD_DENIED


class TestRedact:
    def test_plaintext(self):
        data, n = redact(b"token=" + SECRET.encode() + b";", [SECRET])
        assert SECRET.encode() not in data
        assert b"[REDACTED]" in data
        assert n == 1

    def test_base64(self):
        encoded = base64.b64encode(SECRET.encode())
        data, n = redact(b"blob:" + encoded, [SECRET])
        assert encoded not in data
        assert n == 1

    def test_multiple_occurrences(self):
        data, n = redact((SECRET + "," + SECRET).encode(), [SECRET])
        assert n == 2

    def test_clean_data_untouched(self):
        data, n = redact(b"hello world", [SECRET])
        assert data == b"hello world" and n == 0


class TestExecute:
    @pytest.fixture
    def target(self):
        with HttpTarget(SECRET) as t:
            yield t

    def exec_scope(self):
        return HttpScope(methods=["POST"], host="api.example.com",
                         path_template="/v1/chat/completions")

    def test_injects_credential_and_redacts_reflection(self, target):
        result = execute_http(self.exec_scope(), invocation(), SECRET,
                              connect=("127.0.0.1", target.port))
        assert result.status == 200
        body = result.body.decode()
        assert SECRET not in body
        assert base64.b64encode(SECRET.encode()).decode() not in body
        assert "[REDACTED]" in body  # the echoed Authorization header
        assert result.redactions >= 1

    def test_response_headers_filtered(self, target):
        result = execute_http(self.exec_scope(), invocation(), SECRET,
                              connect=("127.0.0.1", target.port))
        assert set(result.headers) <= {"content-type", "content-length", "date"}
        assert not any(name.startswith("x-echo-") for name in result.headers)

    def test_truncation(self, target):
        scope = HttpScope(methods=["POST"], host="api.example.com",
                          path_template="/v1/chat/completions",
                          max_body_bytes=16)
        result = execute_http(scope, invocation(), SECRET,
                              connect=("127.0.0.1", target.port))
        assert result.truncated
        assert len(result.body) <= 16

    def test_unreachable_raises_executor_error(self):
        with pytest.raises(hx.ExecutorError):
            execute_http(self.exec_scope(), invocation(), SECRET,
                         connect=("127.0.0.1", 1), timeout_s=0.5)


def test_denial_reads_no_secret(vault, registry, scope):
    # Validation never touches the vault: the counter stays at zero for every
    # denied shape.
    for inv in (invocation(method="GET"), invocation(path="/etc"),
                invocation(headers={"Authorization": "x"}),
                invocation(body=b"{}")):
        assert validate_http(scope, inv, registry) is not None
    assert vault.access_count("OPENAI_API_KEY") == 0


# --- fuzz property ----------------------------------------------------------

_method = st.sampled_from(["GET", "POST", "PUT", "DELETE", "PATCH"])
_host = st.sampled_from(["api.example.com", "evil.example.com", "localhost"])
_path = st.sampled_from(["/v1/chat/completions", "/v1/chat", "/admin",
                         "/v1/chat/completions/.."])
_headers = st.dictionaries(
    st.sampled_from(["Content-Type", "Accept", "Authorization", "Cookie",
                     "X-Api-Key"]),
    st.text(max_size=10), max_size=3)


@settings(max_examples=200)
@given(_method, _host, _path, _headers, st.binary(max_size=64))
def test_accept_implies_fully_in_scope(method, host, path, headers, body):
    registry = SchemaRegistry()
    scope = HttpScope(methods=["POST"], host="api.example.com",
                      path_template="/v1/chat/completions",
                      body_schema_ref="jtd:ChatCompletionRequest.v1")
    inv = HttpInvocation(method=method, host=host, path=path,
                         headers=headers, body=body or chat_body())
    reason = validate_http(scope, inv, registry)
    if reason is None:
        assert method == "POST"
        assert host == "api.example.com"
        assert path == "/v1/chat/completions"
        assert all(h.lower() in ("content-type", "accept") for h in headers)
