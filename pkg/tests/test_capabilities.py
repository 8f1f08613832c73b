import threading

import pytest
from hypothesis import given, strategies as st

from capseal import capabilities as caps
from capseal.capabilities import CapabilityStore, CapRequest
from capseal.http_executor import HttpScope

NOW = 1_700_000_000_000


def http_request(session_id="sess_a", **kw):
    defaults = dict(session_id=session_id, intent="http_call_openai_like",
                    cap_type=caps.HTTP_PROXY, secret_id="OPENAI_API_KEY",
                    scope=HttpScope(methods=["POST"], host="api.example.com",
                                    path_template="/v1/chat/completions",
                                    body_schema_ref="jtd:ChatCompletionRequest.v1"))
    defaults.update(kw)
    return CapRequest(**defaults)


@pytest.fixture
def store():
    return CapabilityStore()


class TestIssue:
    def test_issue_http_handle(self, store):
        handle = store.issue(http_request(), NOW)
        assert handle.handle_id.startswith("cap_")
        assert handle.quota_used == 0
        assert not handle.revoked
        assert handle.cap_type == caps.HTTP_PROXY

    def test_cap_type_aliases(self):
        assert caps.normalize_cap_type("HTTP_PROXY") == caps.HTTP_PROXY
        assert caps.normalize_cap_type("SshExec") == caps.SSH_EXEC
        with pytest.raises(ValueError):
            caps.normalize_cap_type("FileRead")


class TestAuthorizeUse:
    def test_first_use(self, store):
        handle = store.issue(http_request(quota=5), NOW)
        got, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
        assert reason is None
        assert got.quota_used == 1

    def test_expired(self, store):
        handle = store.issue(http_request(ttl_ms=1000), NOW)
        _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW + 1001)
        assert reason == caps.EXPIRED

    def test_quota_exhausted_on_fourth(self, store):
        handle = store.issue(http_request(quota=3), NOW)
        for _ in range(3):
            _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
            assert reason is None
        _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
        assert reason == caps.QUOTA_EXHAUSTED

    def test_wrong_session(self, store):
        handle = store.issue(http_request(), NOW)
        _, reason = store.authorize_use(handle.handle_id, "sess_b", NOW)
        assert reason == caps.WRONG_SESSION

    def test_missing(self, store):
        _, reason = store.authorize_use("cap_missing", "sess_a", NOW)
        assert reason == caps.HANDLE_MISSING

    def test_step_up_pending_blocks_until_approved(self, store):
        handle = store.issue(http_request(step_up=caps.STEP_UP_REQUIRED), NOW)
        _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
        assert reason == caps.STEP_UP_PENDING
        store.approve_step_up(handle.handle_id)
        _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
        assert reason is None

    def test_release_refunds_quota(self, store):
        handle = store.issue(http_request(quota=1), NOW)
        store.authorize_use(handle.handle_id, "sess_a", NOW)
        store.release_use(handle.handle_id)
        _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
        assert reason is None


class TestRevoke:
    def test_revoke_then_use(self, store):
        handle = store.issue(http_request(), NOW)
        store.revoke(handle.handle_id)
        _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
        assert reason == caps.REVOKED

    def test_revoke_unknown_and_twice(self, store):
        store.revoke("cap_nope")
        handle = store.issue(http_request(), NOW)
        store.revoke(handle.handle_id)
        store.revoke(handle.handle_id)


class TestSweep:
    def test_sweep(self, store):
        assert store.sweep_expired(NOW) == 0
        handle = store.issue(http_request(ttl_ms=10), NOW)
        assert store.sweep_expired(NOW + 11) == 1
        assert store.sweep_expired(NOW + 11) == 0
        _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
        assert reason == caps.HANDLE_MISSING


@given(st.booleans(), st.booleans(), st.booleans(), st.booleans(),
       st.integers(min_value=0, max_value=3))
def test_deny_bias(revoked, expired, wrong_session, pending, used):
    # Acceptance is possible only when no reject reason applies at all.
    store = CapabilityStore()
    handle = store.issue(http_request(quota=2, ttl_ms=1000), NOW)
    handle.revoked = revoked
    handle.pending = pending
    handle.quota_used = used
    now = NOW + (2000 if expired else 0)
    session = "sess_b" if wrong_session else "sess_a"
    got, reason = store.authorize_use(handle.handle_id, session, now)
    any_fault = revoked or expired or wrong_session or pending or used >= 2
    assert (reason is None) == (not any_fault)


def test_quota_never_exceeded_under_concurrency():
    store = CapabilityStore()
    quota = 16
    handle = store.issue(http_request(quota=quota), NOW)
    accepted = []
    barrier = threading.Barrier(8)

    def worker():
        barrier.wait()
        for _ in range(10):
            _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
            if reason is None:
                accepted.append(1)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(accepted) == quota
    assert store.get(handle.handle_id).quota_used == quota


def test_revocation_linearizes_before_later_use():
    store = CapabilityStore()
    handle = store.issue(http_request(quota=1_000_000), NOW)
    store.revoke(handle.handle_id)
    results = []

    def worker():
        for _ in range(100):
            _, reason = store.authorize_use(handle.handle_id, "sess_a", NOW)
            results.append(reason)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == caps.REVOKED for r in results)
