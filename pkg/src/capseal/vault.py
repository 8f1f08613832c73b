"""Encrypted secret vault.

Secrets are sealed with ChaCha20-Poly1305 under a 256-bit master key, one fresh
96-bit nonce per record, and stored as JSON lines behind a header that names
the format and cipher.  Plaintext exists only in broker memory, and every
executor read bumps an access counter the leakage experiments assert on.
"""

from __future__ import annotations

import base64
import json
import os
import threading
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

FORMAT_VERSION = 1
AEAD_ID = "chacha20poly1305"
_CHECK_PLAINTEXT = b"capseal-vault-check"

API_KEY = "ApiKey"
SSH_KEY = "SshKey"
GENERIC = "Generic"


class VaultError(Exception):
    pass


class SealedError(VaultError):
    pass


def load_master_key(env_var: str = "CAPSEAL_MASTER_KEY",
                    key_file: str | Path | None = None) -> bytes:
    """Key file wins over the environment; the key is 32 bytes, hex-encoded."""
    if key_file is not None:
        hex_key = Path(key_file).read_text("utf-8").strip()
    else:
        hex_key = os.environ.get(env_var, "")
    if not hex_key:
        raise VaultError("no master key configured")
    try:
        key = bytes.fromhex(hex_key)
    except ValueError as exc:
        raise VaultError("master key must be hex") from exc
    if len(key) != 32:
        raise VaultError("master key must be 32 bytes")
    return key


class SecretVault:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._key: bytes | None = None
        self._records: dict[str, dict] = {}
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def create(cls, path: str | Path, master_key: bytes) -> "SecretVault":
        vault = cls(path)
        aead = ChaCha20Poly1305(master_key)
        nonce = os.urandom(12)
        header = {
            "format": FORMAT_VERSION,
            "aead": AEAD_ID,
            "check_nonce": base64.b64encode(nonce).decode(),
            "check_ct": base64.b64encode(
                aead.encrypt(nonce, _CHECK_PLAINTEXT, b"check")).decode(),
        }
        vault.path.parent.mkdir(parents=True, exist_ok=True)
        with open(vault.path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        os.chmod(vault.path, 0o600)
        vault._key = master_key
        return vault

    def unseal(self, master_key: bytes) -> None:
        with self._lock:
            header, records = self._load_file()
            aead = ChaCha20Poly1305(master_key)
            try:
                check = aead.decrypt(base64.b64decode(header["check_nonce"]),
                                     base64.b64decode(header["check_ct"]), b"check")
            except InvalidTag:
                raise VaultError("wrong master key; vault remains sealed") from None
            if check != _CHECK_PLAINTEXT:
                raise VaultError("wrong master key; vault remains sealed")
            self._key = master_key
            self._records = records

    def seal(self) -> None:
        with self._lock:
            self._key = None
            self._records = {}

    @property
    def sealed(self) -> bool:
        return self._key is None

    def _load_file(self) -> tuple[dict, dict]:
        if not self.path.is_file():
            raise VaultError(f"vault file missing: {self.path}")
        records: dict[str, dict] = {}
        with open(self.path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != FORMAT_VERSION or header.get("aead") != AEAD_ID:
                raise VaultError("unsupported vault format")
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    records[rec["secret_id"]] = rec
        return header, records

    # -- operations --------------------------------------------------------

    def put_secret(self, secret_id: str, plaintext: str, kind_hint: str = GENERIC,
                   now_ms: int = 0, overwrite: bool = False) -> None:
        if not plaintext:
            raise VaultError("empty plaintext rejected")
        with self._lock:
            if self._key is None:
                raise SealedError("vault is sealed")
            if secret_id in self._records and not overwrite:
                raise VaultError(f"secret {secret_id!r} already exists")
            aead = ChaCha20Poly1305(self._key)
            nonce = os.urandom(12)
            record = {
                "secret_id": secret_id,
                "nonce": base64.b64encode(nonce).decode(),
                "ct": base64.b64encode(
                    aead.encrypt(nonce, plaintext.encode("utf-8"),
                                 secret_id.encode("utf-8"))).decode(),
                "created_at_ms": now_ms,
                "kind": kind_hint,
            }
            self._records[secret_id] = record
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                fh.flush()

    def has_secret(self, secret_id: str) -> bool:
        """Existence check for issuance; does not touch the access counter."""
        with self._lock:
            return self._key is not None and secret_id in self._records

    def read_secret(self, secret_id: str) -> str:
        """Broker-internal only.  Every call counts as one plaintext access."""
        with self._lock:
            if self._key is None:
                raise SealedError("vault is sealed")
            record = self._records.get(secret_id)
            if record is None:
                raise VaultError(f"unknown secret {secret_id!r}")
            aead = ChaCha20Poly1305(self._key)
            try:
                plaintext = aead.decrypt(base64.b64decode(record["nonce"]),
                                         base64.b64decode(record["ct"]),
                                         secret_id.encode("utf-8"))
            except InvalidTag:
                raise VaultError(f"secret {secret_id!r} failed authentication") from None
            self._counters[secret_id] = self._counters.get(secret_id, 0) + 1
            return plaintext.decode("utf-8")

    def list_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._records)

    # -- instrumentation ---------------------------------------------------

    def access_count(self, secret_id: str | None = None) -> int:
        with self._lock:
            if secret_id is None:
                return sum(self._counters.values())
            return self._counters.get(secret_id, 0)

    def reset_counters(self) -> None:
        with self._lock:
            self._counters.clear()
