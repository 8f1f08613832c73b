"""Append-only audit log: linear hash chain for streaming verification plus a
Merkle history tree for inclusion and consistency proofs.

SHA-256 throughout, with 0x00/0x01 leaf/node domain separation.  The chain's
genesis prev_hash is 32 zero bytes.  Event bodies carry digests only, never
secret plaintext.  Every append is flushed before the triggering broker
operation responds; a failed write fails that operation closed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

GENESIS = b"\x00" * 32
LOG_HEADER = {"format": 1, "type": "capseal-audit"}

# Event kinds
REGISTER = "Register"
CAP_ISSUED = "CapIssued"
CAP_DENIED = "CapDenied"
INVOKE_ALLOWED = "InvokeAllowed"
INVOKE_DENIED = "InvokeDenied"
REVOKE = "Revoke"
PROOF_EXPORTED = "ProofExported"
POLICY_TRACE = "PolicyTrace"

INCLUSION = "Inclusion"
CONSISTENCY = "Consistency"


class AuditError(Exception):
    pass


class AuditWriteError(AuditError):
    """The log could not be durably written; the caller must fail closed."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass
class AuditEvent:
    index: int
    timestamp_ms: int
    kind: str
    session_id: str | None
    handle_id: str | None
    reason: str | None
    payload_digest: str
    prev_hash: str
    event_hash: str

    def body_bytes(self) -> bytes:
        body = asdict(self)
        del body["prev_hash"]
        del body["event_hash"]
        return canonical_json(body)


def compute_event_hash(prev_hash_hex: str, body_bytes: bytes) -> str:
    return sha256(bytes.fromhex(prev_hash_hex) + body_bytes).hex()


@dataclass
class AuditProof:
    proof_kind: str  # Inclusion | Consistency
    tree_size: int
    root_hash: str
    path: list  # [{"hash": hex, "side": "left"|"right"|None}]
    index: int | None = None
    old_size: int | None = None
    old_root: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# --- Merkle history tree (leaf = event_hash bytes) --------------------------

def leaf_hash(leaf: bytes) -> bytes:
    return sha256(b"\x00" + leaf)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(b"\x01" + left + right)


def _split(n: int) -> int:
    """Largest power of two strictly less than n."""
    k = 1
    while k * 2 < n:
        k *= 2
    return k


def merkle_root(leaves: list[bytes]) -> bytes:
    n = len(leaves)
    if n == 0:
        return sha256(b"")
    if n == 1:
        return leaf_hash(leaves[0])
    k = _split(n)
    return node_hash(merkle_root(leaves[:k]), merkle_root(leaves[k:]))


def inclusion_path(m: int, leaves: list[bytes]) -> list[tuple[bytes, str]]:
    """Audit path for leaf m, with each sibling's side relative to the subtree."""
    n = len(leaves)
    if n == 1:
        return []
    k = _split(n)
    if m < k:
        return inclusion_path(m, leaves[:k]) + [(merkle_root(leaves[k:]), "right")]
    return inclusion_path(m - k, leaves[k:]) + [(merkle_root(leaves[:k]), "left")]


def consistency_path(m: int, leaves: list[bytes]) -> list[bytes]:
    return _subproof(m, leaves, True)


def _subproof(m: int, leaves: list[bytes], whole: bool) -> list[bytes]:
    n = len(leaves)
    if m == n:
        return [] if whole else [merkle_root(leaves)]
    k = _split(n)
    if m <= k:
        return _subproof(m, leaves[:k], whole) + [merkle_root(leaves[k:])]
    return _subproof(m - k, leaves[k:], False) + [merkle_root(leaves[:k])]


def verify_inclusion(leaf: bytes, index: int, tree_size: int,
                     path: list[bytes], root: bytes) -> bool:
    if index >= tree_size:
        return False
    fn, sn = index, tree_size - 1
    r = leaf_hash(leaf)
    for p in path:
        if sn == 0:
            return False
        if fn % 2 == 1 or fn == sn:
            r = node_hash(p, r)
            if fn % 2 == 0:
                while fn % 2 == 0 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            r = node_hash(r, p)
        fn >>= 1
        sn >>= 1
    return sn == 0 and r == root


def verify_consistency(old_size: int, new_size: int, old_root: bytes,
                       new_root: bytes, path: list[bytes]) -> bool:
    if old_size > new_size or old_size < 1:
        return False
    if old_size == new_size:
        return old_root == new_root and not path
    # An old size that is an exact power of two contributes its own root.
    full = list(path)
    if old_size & (old_size - 1) == 0:
        full = [old_root] + full
    if not full:
        return False
    fn, sn = old_size - 1, new_size - 1
    while fn % 2 == 1:
        fn >>= 1
        sn >>= 1
    fr = sr = full[0]
    for c in full[1:]:
        if sn == 0:
            return False
        if fn % 2 == 1 or fn == sn:
            fr = node_hash(c, fr)
            sr = node_hash(c, sr)
            if fn % 2 == 0:
                while fn % 2 == 0 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            sr = node_hash(sr, c)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == old_root and sr == new_root


# --- The log itself ---------------------------------------------------------

class AuditLog:
    """Single-writer append-only log.  Readers see immutable prefixes."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.events: list[AuditEvent] = []
        self._fh = None
        self.write_hook = None  # test fault injection: callable(line) may raise
        if self.path is not None:
            fresh = not self.path.exists() or self.path.stat().st_size == 0
            self._fh = open(self.path, "a", encoding="utf-8")
            if fresh:
                self._fh.write(json.dumps(LOG_HEADER, sort_keys=True) + "\n")
                self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def append(self, kind: str, timestamp_ms: int, session_id: str | None = None,
               handle_id: str | None = None, reason: str | None = None,
               payload=None) -> AuditEvent:
        prev = self.events[-1].event_hash if self.events else GENESIS.hex()
        digest = sha256(canonical_json(payload) if payload is not None else b"").hex()
        event = AuditEvent(index=len(self.events), timestamp_ms=timestamp_ms,
                           kind=kind, session_id=session_id, handle_id=handle_id,
                           reason=reason, payload_digest=digest,
                           prev_hash=prev, event_hash="")
        event.event_hash = compute_event_hash(prev, event.body_bytes())
        line = json.dumps(asdict(event), sort_keys=True)
        if self.write_hook is not None:
            self.write_hook(line)
        if self._fh is not None:
            try:
                self._fh.write(line + "\n")
                self._fh.flush()
            except OSError as exc:
                raise AuditWriteError(str(exc)) from exc
        self.events.append(event)
        return event

    # -- proofs ------------------------------------------------------------

    def _leaves(self, size: int) -> list[bytes]:
        return [bytes.fromhex(e.event_hash) for e in self.events[:size]]

    def root(self, tree_size: int | None = None) -> str:
        if tree_size is None:
            tree_size = len(self.events)
        if tree_size > len(self.events):
            raise AuditError("tree_size beyond log length")
        return merkle_root(self._leaves(tree_size)).hex()

    def prove_inclusion(self, index: int, tree_size: int) -> AuditProof:
        if not (0 <= index < tree_size <= len(self.events)):
            raise AuditError("index/tree_size out of range")
        leaves = self._leaves(tree_size)
        path = [{"hash": h.hex(), "side": side}
                for h, side in inclusion_path(index, leaves)]
        return AuditProof(proof_kind=INCLUSION, tree_size=tree_size,
                          root_hash=merkle_root(leaves).hex(), path=path,
                          index=index)

    def prove_consistency(self, old_size: int, new_size: int) -> AuditProof:
        if not (0 < old_size <= new_size <= len(self.events)):
            raise AuditError("sizes out of range")
        leaves = self._leaves(new_size)
        path = [{"hash": h.hex(), "side": None}
                for h in consistency_path(old_size, leaves)]
        return AuditProof(proof_kind=CONSISTENCY, tree_size=new_size,
                          root_hash=merkle_root(leaves).hex(), path=path,
                          old_size=old_size,
                          old_root=merkle_root(leaves[:old_size]).hex())


def verify_proof(proof: AuditProof, leaf_event_hash: str | None = None) -> bool:
    path = [bytes.fromhex(p["hash"]) for p in proof.path]
    if proof.proof_kind == INCLUSION:
        if leaf_event_hash is None or proof.index is None:
            return False
        return verify_inclusion(bytes.fromhex(leaf_event_hash), proof.index,
                                proof.tree_size, path,
                                bytes.fromhex(proof.root_hash))
    if proof.proof_kind == CONSISTENCY:
        if proof.old_size is None or proof.old_root is None:
            return False
        return verify_consistency(proof.old_size, proof.tree_size,
                                  bytes.fromhex(proof.old_root),
                                  bytes.fromhex(proof.root_hash), path)
    return False


# --- Offline verification ---------------------------------------------------

def read_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text("utf-8").splitlines()
    records = [json.loads(line) for line in lines if line.strip()]
    if records and records[0].get("type") == "capseal-audit":
        records = records[1:]
    return records


def verify_chain(records: list[dict]) -> int | None:
    """Recomputes every link; returns the first bad index, or None if intact."""
    prev = GENESIS.hex()
    for i, rec in enumerate(records):
        try:
            event = AuditEvent(**rec)
        except TypeError:
            return i
        if event.index != i or event.prev_hash != prev:
            return i
        if compute_event_hash(prev, event.body_bytes()) != event.event_hash:
            return i
        prev = event.event_hash
    return None


def verify_log_file(path: str | Path) -> int | None:
    return verify_chain(read_log(path))


# --- Optional checkpoint signing --------------------------------------------

def sign_checkpoint(signing_key, tree_size: int, root_hash: str) -> bytes:
    """Detached Ed25519 signature over (tree_size, root_hash)."""
    if signing_key is None:
        raise AuditError("checkpoint signing is not configured")
    return signing_key.sign(canonical_json({"tree_size": tree_size,
                                            "root_hash": root_hash}))


def verify_checkpoint(public_key, signature: bytes, tree_size: int,
                      root_hash: str) -> bool:
    from cryptography.exceptions import InvalidSignature
    try:
        public_key.verify(signature, canonical_json({"tree_size": tree_size,
                                                     "root_hash": root_hash}))
        return True
    except InvalidSignature:
        return False
