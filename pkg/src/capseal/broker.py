"""Broker core: orchestrates the five protocol operations and runs the
defense-in-depth invoke pipeline.

Invoke stages, in fixed order:

    1 session    - session lookup
    2 handle     - handle lookup, session binding, payload/type match
    3 anti_replay- sequence, nonce, timestamp checks
    4 lifecycle  - revoked / expired / quota / pending step-up
    5 policy     - runtime policy re-evaluation
    6 executor   - type-specific scope validation (incl. SSH host-key pin)
    7 execute    - vault read + credential-bearing action
    8 audit      - durable audit append

A failure at any stage denies with that stage's name and no later stage runs;
in particular the vault is never read on a denial.  Every response maps to
exactly one audit event.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable

from capseal import audit as audit_mod
from capseal import capabilities as caps_mod
from capseal import http_executor, policy as policy_mod, ssh_executor
from capseal.audit import AuditLog, AuditWriteError
from capseal.capabilities import CapabilityStore, CapRequest
from capseal.http_executor import HttpInvocation, HttpScope
from capseal.jtd import SchemaRegistry
from capseal.policy import PolicyEngine
from capseal.sessions import AntiReplayEnvelope, SessionRegistry, ACTIVE
from capseal.ssh_executor import SshInvocation, SshScope
from capseal.transport import PeerIdentity
from capseal.vault import SecretVault, SealedError, VaultError

EXECUTED = "executed"
DENIED = "denied"
STEP_UP_REQUIRED = "step_up_required"

STAGES = ("session", "handle", "anti_replay", "lifecycle", "policy",
          "executor", "execute", "audit")


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass
class InvokeContext:
    session_id: str
    handle_id: str
    anti_replay: AntiReplayEnvelope
    payload: Any  # HttpInvocation | SshInvocation
    now_ms: int = 0


@dataclass
class BrokerResponse:
    outcome: str
    stage: str | None = None
    reason: str | None = None
    result: Any = None
    challenge_id: str | None = None
    audit_index: int | None = None
    stages: list = field(default_factory=list)  # pipeline stages entered

    def to_dict(self) -> dict:
        doc = {"outcome": self.outcome, "audit_index": self.audit_index}
        if self.outcome == DENIED:
            doc["stage"] = self.stage
            doc["reason"] = self.reason
        if self.challenge_id is not None:
            doc["challenge_id"] = self.challenge_id
        if self.result is not None:
            doc["result"] = self.result
        return doc


def parse_scope(cap_type: str, raw: dict):
    """Accepts both the flat scope form and the {"Http": ...}/{"Ssh": ...} tagged
    wire form seen on capability requests."""
    for tag in ("Http", "Ssh"):
        if set(raw) == {tag}:
            raw = raw[tag]
            break
    if cap_type == caps_mod.HTTP_PROXY:
        methods = raw.get("method") or raw.get("methods") or []
        if isinstance(methods, str):
            methods = [methods]
        kwargs = {}
        for key in ("body_schema_ref", "max_body_bytes", "header_allowlist"):
            if key in raw:
                kwargs[key] = raw[key]
        return HttpScope(methods=list(methods), host=raw["host"],
                         path_template=raw["path_template"], **kwargs)
    kwargs = {}
    for key in ("max_arguments", "known_hosts_pin", "max_output_bytes"):
        if key in raw:
            kwargs[key] = raw[key]
    return SshScope(host=raw["host"], user=raw["user"],
                    command_prefix=list(raw["command_prefix"]), **kwargs)


def parse_cap_request(params: dict) -> CapRequest:
    cap_type = caps_mod.normalize_cap_type(params["cap_type"])
    scope = parse_scope(cap_type, params["scope"])
    step_up = params.get("step_up", caps_mod.STEP_UP_NONE)
    kwargs = {}
    if "ttl_ms" in params:
        kwargs["ttl_ms"] = int(params["ttl_ms"])
    if "quota" in params:
        kwargs["quota"] = int(params["quota"])
    return CapRequest(session_id=params["session_id"], intent=params["intent"],
                      cap_type=cap_type, secret_id=params["resource"]["secret_id"],
                      scope=scope, step_up=step_up, **kwargs)


def parse_invoke(params: dict) -> InvokeContext:
    ar = params["anti_replay"]
    envelope = AntiReplayEnvelope(seq=int(ar["seq"]), nonce=str(ar["nonce"]),
                                  timestamp_ms=int(ar["timestamp_ms"]))
    payload = params["payload"]
    if "http" in payload:
        p = payload["http"]
        body = p.get("body", "")
        payload_obj = HttpInvocation(method=p["method"], host=p["host"],
                                     path=p["path"], headers=p.get("headers", {}),
                                     body=body.encode("utf-8") if isinstance(body, str) else body)
    elif "ssh" in payload:
        p = payload["ssh"]
        payload_obj = SshInvocation(args=list(p.get("args", [])),
                                    host=p.get("host"), user=p.get("user"))
    else:
        raise ValueError("payload must carry 'http' or 'ssh'")
    return InvokeContext(session_id=params["session_id"],
                         handle_id=params["handle_id"],
                         anti_replay=envelope, payload=payload_obj)


class Broker:
    def __init__(self, vault: SecretVault, audit_log: AuditLog,
                 policy: PolicyEngine | None = None,
                 sessions: SessionRegistry | None = None,
                 store: CapabilityStore | None = None,
                 schema_registry: SchemaRegistry | None = None,
                 ssh_transport=None,
                 http_connect: dict | None = None,
                 inject_headers: dict | None = None,
                 pdp_endpoint: str | None = None,
                 pdp_timeout_ms: int = policy_mod.DEFAULT_PDP_TIMEOUT_MS,
                 state_dir: str | None = None,
                 clock: Callable[[], int] = now_ms):
        self.vault = vault
        self.audit = audit_log
        self.policy = policy or PolicyEngine()
        self.sessions = sessions or SessionRegistry()
        self.store = store or CapabilityStore()
        self.schemas = schema_registry or SchemaRegistry()
        self.ssh_transport = ssh_transport
        self.http_connect = http_connect or {}
        self.inject_headers = inject_headers or {}
        self.pdp_endpoint = pdp_endpoint
        self.pdp_timeout_ms = pdp_timeout_ms
        self.state_dir = state_dir
        self.clock = clock
        self.stage_fault: Callable[[str], str | None] | None = None  # test hook

    # -- helpers -----------------------------------------------------------

    def _audit(self, kind: str, **kw) -> int | None:
        event = self.audit.append(kind, timestamp_ms=self.clock(), **kw)
        return event.index

    def _denied(self, stage: str, reason: str, kind: str, stages: list,
                session_id: str | None = None,
                handle_id: str | None = None) -> BrokerResponse:
        try:
            index = self._audit(kind, session_id=session_id, handle_id=handle_id,
                                reason=f"{stage}:{reason}")
        except AuditWriteError:
            return BrokerResponse(outcome=DENIED, stage="audit",
                                  reason="AuditWriteFailed", stages=stages)
        return BrokerResponse(outcome=DENIED, stage=stage, reason=reason,
                              audit_index=index, stages=stages)

    def _injected_fault(self, stage: str) -> str | None:
        if self.stage_fault is not None:
            return self.stage_fault(stage)
        return None

    def _persist_challenge(self, challenge_id: str) -> None:
        """Records a pending challenge where the operator CLI can see it."""
        if not self.state_dir:
            return
        import json
        from pathlib import Path
        directory = Path(self.state_dir)
        directory.mkdir(parents=True, exist_ok=True, mode=0o700)
        challenge = self.policy.challenges.get(challenge_id)
        path = directory / "challenges.json"
        doc = json.loads(path.read_text("utf-8")) if path.is_file() else {}
        doc[challenge_id] = {"token": challenge.token,
                             "expires_at_ms": challenge.expires_at_ms}
        path.write_text(json.dumps(doc, sort_keys=True))

    def _check_file_approval(self, handle) -> bool:
        """Applies any operator approval recorded via the CLI."""
        if not self.state_dir or not handle.challenge_id:
            return False
        import json
        from pathlib import Path
        path = Path(self.state_dir) / "approvals.json"
        if not path.is_file():
            return False
        token = json.loads(path.read_text("utf-8")).get(handle.challenge_id)
        if token is None:
            return False
        return self.approve_step_up(handle.challenge_id, token)

    # -- operations --------------------------------------------------------

    def handle_register(self, peer: PeerIdentity) -> BrokerResponse:
        try:
            record = self.sessions.register(peer, self.clock())
        except Exception as exc:
            reason = getattr(exc, "reason", str(exc))
            return self._denied("session", reason, audit_mod.CAP_DENIED, [])
        try:
            index = self._audit(audit_mod.REGISTER, session_id=record.session_id,
                                payload={"uid": peer.uid, "gid": peer.gid,
                                         "pid": peer.pid})
        except AuditWriteError:
            self.sessions.close(record.session_id)
            return BrokerResponse(outcome=DENIED, stage="audit",
                                  reason="AuditWriteFailed")
        return BrokerResponse(outcome=EXECUTED, audit_index=index,
                              result={"session_id": record.session_id})

    def handle_req_cap(self, params: dict) -> BrokerResponse:
        try:
            req = parse_cap_request(params)
        except (KeyError, ValueError, TypeError) as exc:
            return self._denied("request", f"MalformedRequest:{exc}",
                                audit_mod.CAP_DENIED, [])
        session = self.sessions.get(req.session_id)
        if session is None or session.status != ACTIVE:
            return self._denied("session", "SessionMissing", audit_mod.CAP_DENIED,
                                [], session_id=req.session_id)
        if self.vault.sealed:
            return self._denied("vault", "SealedVault", audit_mod.CAP_DENIED,
                                [], session_id=req.session_id)
        if not self.vault.has_secret(req.secret_id):
            return self._denied("vault", "UnknownSecret", audit_mod.CAP_DENIED,
                                [], session_id=req.session_id)
        ctx = self._policy_ctx("req_cap", req.intent, req.cap_type,
                               req.secret_id, req.scope)
        decision = self._evaluate(ctx)
        if decision.effect == policy_mod.DENY:
            return self._denied("policy", decision.reason or "deny",
                                audit_mod.CAP_DENIED, [],
                                session_id=req.session_id)
        needs_step_up = (decision.effect == policy_mod.STEP_UP
                         or req.step_up == caps_mod.STEP_UP_REQUIRED)
        challenge_id = decision.challenge_id
        if needs_step_up and challenge_id is None:
            challenge_id = self.policy.challenges.create(self.clock()).challenge_id
        if needs_step_up:
            req.step_up = caps_mod.STEP_UP_REQUIRED
            self._persist_challenge(challenge_id)
        handle = self.store.issue(req, self.clock(), challenge_id=challenge_id)
        try:
            index = self._audit(audit_mod.CAP_ISSUED, session_id=req.session_id,
                                handle_id=handle.handle_id,
                                payload={"intent": req.intent,
                                         "cap_type": req.cap_type,
                                         "secret_id": req.secret_id,
                                         "policy_rule": decision.rule_id,
                                         "policy_trace": decision.trace,
                                         "step_up": req.step_up})
        except AuditWriteError:
            self.store.revoke(handle.handle_id)
            return BrokerResponse(outcome=DENIED, stage="audit",
                                  reason="AuditWriteFailed")
        result = {"handle_id": handle.handle_id, "cap_type": handle.cap_type,
                  "ttl_ms": handle.ttl_ms, "quota": handle.quota}
        if needs_step_up:
            return BrokerResponse(outcome=STEP_UP_REQUIRED, result=result,
                                  challenge_id=challenge_id, audit_index=index)
        return BrokerResponse(outcome=EXECUTED, result=result, audit_index=index)

    def handle_invoke(self, ctx: InvokeContext) -> BrokerResponse:
        now = ctx.now_ms or self.clock()
        stages: list[str] = []
        session_id, handle_id = ctx.session_id, ctx.handle_id
        quota_held = False

        def deny(stage: str, reason: str) -> BrokerResponse:
            if quota_held:
                self.store.release_use(handle_id)
            return self._denied(stage, reason, audit_mod.INVOKE_DENIED, stages,
                                session_id=session_id, handle_id=handle_id)

        # 1 session
        stages.append("session")
        fault = self._injected_fault("session")
        if fault:
            return deny("session", fault)
        session = self.sessions.get(session_id)
        if session is None:
            return deny("session", "SessionMissing")
        if session.status != ACTIVE:
            return deny("session", "SessionClosed")

        # 2 handle
        stages.append("handle")
        fault = self._injected_fault("handle")
        if fault:
            return deny("handle", fault)
        handle = self.store.get(handle_id)
        if handle is None:
            return deny("handle", "HandleMissing")
        if handle.session_id != session_id:
            return deny("handle", "WrongSession")
        is_http = isinstance(ctx.payload, HttpInvocation)
        if is_http != (handle.cap_type == caps_mod.HTTP_PROXY):
            return deny("handle", "PayloadTypeMismatch")

        # 3 anti-replay
        stages.append("anti_replay")
        fault = self._injected_fault("anti_replay")
        if fault:
            return deny("anti_replay", fault)
        reason = self.sessions.check_anti_replay(session_id, ctx.anti_replay, now)
        if reason is not None:
            return deny("anti_replay", reason)

        # 4 lifecycle
        stages.append("lifecycle")
        fault = self._injected_fault("lifecycle")
        if fault:
            return deny("lifecycle", fault)
        handle, reason = self.store.authorize_use(handle_id, session_id, now)
        if reason == caps_mod.STEP_UP_PENDING:
            pending = self.store.get(handle_id)
            if pending is not None and self._check_file_approval(pending):
                handle, reason = self.store.authorize_use(handle_id, session_id, now)
        if reason is not None:
            return deny("lifecycle", reason)
        quota_held = True

        # 5 policy
        stages.append("policy")
        fault = self._injected_fault("policy")
        if fault:
            return deny("policy", fault)
        ctx_doc = self._policy_ctx("invoke", handle.intent, handle.cap_type,
                                   handle.secret_id, handle.scope, ctx.payload)
        decision = self._evaluate(ctx_doc)
        if decision.effect != policy_mod.ALLOW:
            return deny("policy", decision.reason or "StepUpRequired")

        # 6 executor constraints
        stages.append("executor")
        fault = self._injected_fault("executor")
        if fault:
            return deny("executor", fault)
        if is_http:
            reason = http_executor.validate_http(handle.scope, ctx.payload,
                                                 self.schemas)
        else:
            reason = ssh_executor.validate_ssh(handle.scope, ctx.payload)
            if reason is None:
                host = ctx.payload.host or handle.scope.host
                presented = (self.ssh_transport.host_key(host)
                             if self.ssh_transport else None)
                if not ssh_executor.verify_host_key(handle.scope.known_hosts_pin,
                                                    presented):
                    reason = ssh_executor.HOST_KEY_MISMATCH
        if reason is not None:
            return deny("executor", reason)

        # 7 execute (first and only vault access)
        stages.append("execute")
        fault = self._injected_fault("execute")
        if fault:
            return deny("execute", fault)
        try:
            secret = self.vault.read_secret(handle.secret_id)
        except (SealedError, VaultError) as exc:
            return deny("execute", f"VaultError:{exc}")
        try:
            if is_http:
                connect = self.http_connect.get(handle.scope.host)
                header, fmt = self.inject_headers.get(
                    handle.secret_id, ("Authorization", "Bearer {}"))
                raw = http_executor.execute_http(handle.scope, ctx.payload,
                                                 secret, connect=connect,
                                                 inject_header=header,
                                                 inject_format=fmt)
                result = {"status": raw.status, "headers": raw.headers,
                          "body": raw.body.decode("utf-8", "replace"),
                          "redactions": raw.redactions,
                          "truncated": raw.truncated}
            else:
                raw = ssh_executor.execute_ssh(handle.scope, ctx.payload, secret,
                                               self.ssh_transport)
                result = {"exit_code": raw.exit_code,
                          "stdout": raw.stdout.decode("utf-8", "replace"),
                          "stderr": raw.stderr.decode("utf-8", "replace"),
                          "truncated": raw.truncated,
                          "host_key_verified": raw.host_key_verified}
        except (http_executor.ExecutorError, ssh_executor.ExecutorError) as exc:
            return deny("execute", f"ExecutorFailure:{exc}")
        finally:
            del secret  # plaintext must not outlive the invocation

        # 8 audit
        stages.append("audit")
        fault = self._injected_fault("audit")
        if fault:
            return BrokerResponse(outcome=DENIED, stage="audit", reason=fault,
                                  stages=stages)
        try:
            index = self._audit(audit_mod.INVOKE_ALLOWED, session_id=session_id,
                                handle_id=handle_id,
                                payload={"policy_rule": decision.rule_id,
                                         "policy_trace": decision.trace,
                                         "result_digest": audit_mod.sha256(
                                             audit_mod.canonical_json(result)).hex()})
        except AuditWriteError:
            return BrokerResponse(outcome=DENIED, stage="audit",
                                  reason="AuditWriteFailed", stages=stages)
        return BrokerResponse(outcome=EXECUTED, result=result,
                              audit_index=index, stages=stages)

    def handle_revoke(self, handle_id: str, session_id: str | None,
                      admin: bool = False) -> BrokerResponse:
        handle = self.store.get(handle_id)
        if handle is not None and not admin and handle.session_id != session_id:
            return self._denied("revoke", "WrongSession", audit_mod.CAP_DENIED,
                                [], session_id=session_id, handle_id=handle_id)
        self.store.revoke(handle_id)
        try:
            index = self._audit(audit_mod.REVOKE, session_id=session_id,
                                handle_id=handle_id)
        except AuditWriteError:
            return BrokerResponse(outcome=DENIED, stage="audit",
                                  reason="AuditWriteFailed")
        return BrokerResponse(outcome=EXECUTED, result={"revoked": handle_id},
                              audit_index=index)

    def handle_audit_prove(self, params: dict,
                           session_id: str | None = None) -> BrokerResponse:
        kind = params.get("proof_kind", audit_mod.INCLUSION)
        try:
            if kind == audit_mod.INCLUSION:
                proof = self.audit.prove_inclusion(
                    int(params["index"]),
                    int(params.get("tree_size") or params.get("new_size")))
            elif kind == audit_mod.CONSISTENCY:
                proof = self.audit.prove_consistency(
                    int(params["old_size"]),
                    int(params.get("new_size") or params.get("tree_size")))
            else:
                return self._denied("audit_prove", "UnknownProofKind",
                                    audit_mod.CAP_DENIED, [],
                                    session_id=session_id)
        except (audit_mod.AuditError, KeyError, TypeError, ValueError) as exc:
            return self._denied("audit_prove", f"BadProofRequest:{exc}",
                                audit_mod.CAP_DENIED, [], session_id=session_id)
        try:
            index = self._audit(audit_mod.PROOF_EXPORTED, session_id=session_id,
                                payload=proof.to_dict())
        except AuditWriteError:
            return BrokerResponse(outcome=DENIED, stage="audit",
                                  reason="AuditWriteFailed")
        return BrokerResponse(outcome=EXECUTED, result={"proof": proof.to_dict()},
                              audit_index=index)

    def approve_step_up(self, challenge_id: str, token: str) -> bool:
        """Admin-side approval; activates every pending handle on the challenge."""
        if not self.policy.step_up_verify(challenge_id, token, self.clock()):
            return False
        for handle_id, handle in list(self.store._handles.items()):
            if handle.challenge_id == challenge_id and handle.pending:
                self.store.approve_step_up(handle_id)
        return True

    # -- policy plumbing ---------------------------------------------------

    def _policy_ctx(self, phase: str, intent: str, cap_type: str, secret_id: str,
                    scope, payload=None) -> dict:
        ctx = {"phase": phase, "intent": intent, "cap_type": cap_type,
               "secret_id": secret_id}
        if isinstance(scope, HttpScope):
            ctx["host"] = scope.host
            ctx["path"] = scope.path_template
        else:
            ctx["host"] = scope.host
            ctx["user"] = scope.user
            ctx["command"] = " ".join(scope.command_prefix)
        if isinstance(payload, HttpInvocation):
            ctx["host"] = payload.host
            ctx["path"] = payload.path
        elif isinstance(payload, SshInvocation):
            ctx["host"] = payload.host or ctx["host"]
            ctx["user"] = payload.user or ctx["user"]
            ctx["command"] = " ".join(payload.args)
        return ctx

    def _evaluate(self, ctx: dict):
        if self.pdp_endpoint:
            return self.policy.evaluate_remote(ctx, self.pdp_endpoint,
                                               self.pdp_timeout_ms)
        return self.policy.evaluate(ctx, self.clock())
