import os

import pytest

from capseal.audit import AuditLog
from capseal.broker import Broker
from capseal.policy import PolicyEngine
from capseal.ssh_executor import SshSimulator
from capseal.transport import PeerIdentity
from capseal.vault import SecretVault


PEER = PeerIdentity(uid=1000, gid=1000, pid=4242)

SSH_FIXTURE = {
    "sshd": {
        "key_type": "ssh-ed25519",
        "key_b64": "AAAAC3NzaC1lZDI1NTE5AAAAIFixtureKey00000000000000000000000000",
        "commands": {
            "cat /etc/hostname": {"stdout": "sshd\n", "exit_code": 0},
        },
    }
}


@pytest.fixture
def peer():
    return PEER


@pytest.fixture
def vault(tmp_path):
    v = SecretVault.create(tmp_path / "vault.jsonl", os.urandom(32))
    v.put_secret("OPENAI_API_KEY", "sk-test-123", "ApiKey")
    v.put_secret("SSH_PROD_KEY", "ssh-secret-material", "SshKey")
    return v


@pytest.fixture
def simulator():
    import copy
    return SshSimulator(copy.deepcopy(SSH_FIXTURE))


@pytest.fixture
def allow_all_policy():
    engine = PolicyEngine()
    engine.load_policy({"rules": [
        {"rule_id": "allow-http", "effect": "Allow", "match": {"intent": "http_*"}},
        {"rule_id": "allow-ssh", "effect": "Allow", "match": {"intent": "ssh_*"}},
    ]})
    return engine


@pytest.fixture
def broker(tmp_path, vault, simulator, allow_all_policy):
    log = AuditLog(tmp_path / "audit.log")
    b = Broker(vault=vault, audit_log=log, policy=allow_all_policy,
               ssh_transport=simulator)
    yield b
    log.close()


@pytest.fixture
def harness_env(tmp_path):
    from capseal.harness.env import build_env
    env = build_env(tmp_path / "harness")
    yield env
    env.close()
