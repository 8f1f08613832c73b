"""Policy engine: declarative allow/deny/step-up rules with fail-closed remote
delegation.

Rules are an ordered list, first match wins, implicit final deny.  Predicates
support exact match and trailing-`*` glob only.  A remote policy decision point
is consulted over HTTP POST; every transport failure maps to Deny.
"""

from __future__ import annotations

import json
import secrets
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field

ALLOW = "Allow"
DENY = "Deny"
STEP_UP = "StepUp"

DEFAULT_PDP_TIMEOUT_MS = 500
DEFAULT_CHALLENGE_TTL_MS = 120_000

# Fields a rule predicate may constrain.  Scope-derived fields are flattened
# into the request context by the caller.
MATCH_FIELDS = ("intent", "cap_type", "secret_id", "host", "path", "user",
                "command", "phase")


class PolicyParseError(Exception):
    pass


@dataclass
class PolicyRule:
    rule_id: str
    effect: str  # Allow | Deny | StepUp
    match: dict  # field -> pattern (exact or trailing-* glob)

    def matches(self, ctx: dict) -> bool:
        for fld, pattern in self.match.items():
            if not glob_match(pattern, str(ctx.get(fld, ""))):
                return False
        return True


@dataclass
class PolicyDecision:
    effect: str
    rule_id: str
    trace: list = field(default_factory=list)
    reason: str | None = None
    challenge_id: str | None = None

    @property
    def allowed(self) -> bool:
        return self.effect == ALLOW


@dataclass
class StepUpChallenge:
    challenge_id: str
    token: str
    created_at_ms: int
    expires_at_ms: int
    approved: bool = False


def glob_match(pattern: str, value: str) -> bool:
    if pattern.endswith("*"):
        return value.startswith(pattern[:-1])
    return value == pattern


def parse_policy_document(document: str | dict) -> list[PolicyRule]:
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except ValueError as exc:
            raise PolicyParseError(f"policy is not valid JSON: {exc}") from exc
    if not isinstance(document, dict) or not isinstance(document.get("rules"), list):
        raise PolicyParseError('policy must be {"rules": [...]}')
    rules: list[PolicyRule] = []
    seen: set[str] = set()
    for i, raw in enumerate(document["rules"]):
        if not isinstance(raw, dict):
            raise PolicyParseError(f"rule {i} is not an object")
        rule_id = raw.get("rule_id")
        effect = raw.get("effect")
        match = raw.get("match", {})
        if not isinstance(rule_id, str) or not rule_id:
            raise PolicyParseError(f"rule {i} missing rule_id")
        if rule_id in seen:
            raise PolicyParseError(f"duplicate rule_id {rule_id!r}")
        if effect not in (ALLOW, DENY, STEP_UP):
            raise PolicyParseError(f"rule {rule_id!r} has invalid effect {effect!r}")
        if not isinstance(match, dict):
            raise PolicyParseError(f"rule {rule_id!r} match must be an object")
        for fld in match:
            if fld not in MATCH_FIELDS:
                raise PolicyParseError(f"rule {rule_id!r} matches unknown field {fld!r}")
        seen.add(rule_id)
        rules.append(PolicyRule(rule_id=rule_id, effect=effect,
                                match={k: str(v) for k, v in match.items()}))
    return rules


class ChallengeStore:
    def __init__(self, ttl_ms: int = DEFAULT_CHALLENGE_TTL_MS):
        self.ttl_ms = ttl_ms
        self._challenges: dict[str, StepUpChallenge] = {}
        self._lock = threading.Lock()

    def create(self, now_ms: int) -> StepUpChallenge:
        challenge = StepUpChallenge(
            challenge_id="chal_" + secrets.token_hex(8),
            token=secrets.token_hex(16),
            created_at_ms=now_ms,
            expires_at_ms=now_ms + self.ttl_ms,
        )
        with self._lock:
            self._challenges[challenge.challenge_id] = challenge
        return challenge

    def get(self, challenge_id: str) -> StepUpChallenge | None:
        with self._lock:
            return self._challenges.get(challenge_id)

    def verify(self, challenge_id: str, approval_token: str, now_ms: int) -> bool:
        """Atomic test-and-set; approval only ever transitions false -> true."""
        with self._lock:
            challenge = self._challenges.get(challenge_id)
            if challenge is None or now_ms > challenge.expires_at_ms:
                return False
            if not secrets.compare_digest(challenge.token, approval_token):
                return False
            challenge.approved = True
            return True


class PolicyEngine:
    """Read-mostly rule set with atomic replacement; evaluations are pure."""

    def __init__(self, rules: list[PolicyRule] | None = None):
        self._rules: list[PolicyRule] = rules or []
        self._lock = threading.Lock()
        self.challenges = ChallengeStore()

    def load_policy(self, document: str | dict) -> int:
        rules = parse_policy_document(document)  # raises; old rules retained
        with self._lock:
            self._rules = rules
        return len(rules)

    @property
    def rules(self) -> list[PolicyRule]:
        with self._lock:
            return list(self._rules)

    def evaluate(self, ctx: dict, now_ms: int = 0) -> PolicyDecision:
        trace: list[str] = []
        for rule in self.rules:
            trace.append(rule.rule_id)
            if rule.matches(ctx):
                if rule.effect == STEP_UP:
                    challenge = self.challenges.create(now_ms)
                    return PolicyDecision(effect=STEP_UP, rule_id=rule.rule_id,
                                          trace=trace,
                                          challenge_id=challenge.challenge_id)
                if rule.effect == DENY:
                    return PolicyDecision(effect=DENY, rule_id=rule.rule_id,
                                          trace=trace, reason=rule.rule_id)
                return PolicyDecision(effect=ALLOW, rule_id=rule.rule_id, trace=trace)
        trace.append("default")
        return PolicyDecision(effect=DENY, rule_id="default", trace=trace,
                              reason="default")

    def evaluate_remote(self, ctx: dict, endpoint: str,
                        timeout_ms: int = DEFAULT_PDP_TIMEOUT_MS) -> PolicyDecision:
        """Delegates to an external PDP.  Any failure whatsoever is a Deny."""
        body = json.dumps(ctx).encode("utf-8")
        request = urllib.request.Request(
            endpoint, data=body, method="POST",
            headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(request, timeout=timeout_ms / 1000.0) as resp:
                payload = json.loads(resp.read(65536).decode("utf-8"))
            effect = str(payload["effect"]).lower()
            rule_id = str(payload.get("rule_id", "pdp"))
            if effect == "allow":
                return PolicyDecision(effect=ALLOW, rule_id=rule_id, trace=[rule_id])
            if effect == "step_up":
                challenge = self.challenges.create(0)
                return PolicyDecision(effect=STEP_UP, rule_id=rule_id,
                                      trace=[rule_id],
                                      challenge_id=challenge.challenge_id)
            return PolicyDecision(effect=DENY, rule_id=rule_id, trace=[rule_id],
                                  reason=str(payload.get("reason", rule_id)))
        except Exception:
            return PolicyDecision(effect=DENY, rule_id="pdp_unavailable",
                                  trace=["pdp_unavailable"],
                                  reason="pdp_unavailable")

    def step_up_verify(self, challenge_id: str, approval_token: str,
                       now_ms: int) -> bool:
        return self.challenges.verify(challenge_id, approval_token, now_ms)
