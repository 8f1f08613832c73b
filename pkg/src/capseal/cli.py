"""Operator CLI: run the broker, manage secrets and policies, approve step-ups,
verify audit logs, and drive the benchmarks.

Exit codes: 0 success, 1 denial/verification failure, 2 usage error.
Secret plaintext is accepted on stdin only, never on argv.
"""

from __future__ import annotations

import json
import signal
import sys
import tempfile
import threading
from pathlib import Path

import click

from capseal import audit as audit_mod
from capseal.audit import AuditLog, read_log, verify_chain, merkle_root, AuditProof
from capseal.broker import Broker
from capseal.policy import PolicyEngine, PolicyParseError, parse_policy_document
from capseal.server import Dispatcher, UdsServer
from capseal.vault import SecretVault, VaultError, load_master_key


def _echo_json(doc, as_json: bool):
    if as_json:
        click.echo(json.dumps(doc, sort_keys=True))
    else:
        for key, value in doc.items():
            click.echo(f"{key}: {value}")


def _open_vault(vault_path: str, master_key_file: str | None,
                create: bool = False) -> SecretVault:
    key = load_master_key(key_file=master_key_file)
    path = Path(vault_path)
    if not path.exists():
        if not create:
            raise VaultError(f"vault file missing: {path}")
        return SecretVault.create(path, key)
    vault = SecretVault(path)
    vault.unseal(key)
    return vault


@click.group()
def main():
    """CapSeal secret mediation broker."""


@main.command()
@click.option("--socket", "socket_path", default="./capseal.sock", show_default=True)
@click.option("--vault", "vault_path", default="./vault.jsonl", show_default=True)
@click.option("--master-key-file", default=None,
              help="Hex key file; CAPSEAL_MASTER_KEY env otherwise.")
@click.option("--policy", "policy_path", default=None)
@click.option("--audit-log", "audit_path", default="./audit.log", show_default=True)
@click.option("--state-dir", default="./capseal-state", show_default=True)
@click.option("--pdp-endpoint", default=None)
@click.option("--pdp-timeout-ms", default=500, show_default=True)
def serve(socket_path, vault_path, master_key_file, policy_path, audit_path,
          state_dir, pdp_endpoint, pdp_timeout_ms):
    """Run the broker until SIGTERM/SIGINT."""
    try:
        vault = _open_vault(vault_path, master_key_file, create=True)
    except VaultError as exc:
        # A missing key starts the broker sealed; capability requests will be
        # denied with SealedVault until it is unsealed.
        click.echo(f"warning: vault sealed ({exc})", err=True)
        vault = SecretVault(vault_path) if Path(vault_path).exists() else None
        if vault is None:
            sys.exit(1)
    policy = PolicyEngine()
    if policy_path:
        try:
            policy.load_policy(Path(policy_path).read_text("utf-8"))
        except (OSError, PolicyParseError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
    audit_log = AuditLog(audit_path)
    broker = Broker(vault=vault, audit_log=audit_log, policy=policy,
                    pdp_endpoint=pdp_endpoint, pdp_timeout_ms=pdp_timeout_ms,
                    state_dir=state_dir)
    server = UdsServer(socket_path, Dispatcher(broker))
    server.start()
    click.echo(f"capseal broker listening on {socket_path}")

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    stop.wait()
    server.stop()
    audit_log.close()


@main.group()
def secret():
    """Vault secret management."""


@secret.command("add")
@click.argument("secret_id")
@click.option("--kind", default="Generic", show_default=True,
              type=click.Choice(["ApiKey", "SshKey", "Generic"]))
@click.option("--vault", "vault_path", default="./vault.jsonl", show_default=True)
@click.option("--master-key-file", default=None)
@click.option("--overwrite", is_flag=True)
def secret_add(secret_id, kind, vault_path, master_key_file, overwrite):
    """Add a secret; plaintext is read from stdin."""
    plaintext = sys.stdin.read().rstrip("\n")
    try:
        vault = _open_vault(vault_path, master_key_file, create=True)
        vault.put_secret(secret_id, plaintext, kind, overwrite=overwrite)
    except VaultError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"stored {secret_id}")


@main.group()
def policy():
    """Policy management."""


@policy.command("load")
@click.argument("policy_file", type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True)
def policy_load(policy_file, as_json):
    """Validate a policy document and report its rule count."""
    try:
        rules = parse_policy_document(Path(policy_file).read_text("utf-8"))
    except PolicyParseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    _echo_json({"rules": len(rules)}, as_json)


@main.command()
@click.argument("challenge_id")
@click.option("--state-dir", default="./capseal-state", show_default=True)
def approve(challenge_id, state_dir):
    """Approve a pending step-up challenge on a running broker."""
    challenges_path = Path(state_dir) / "challenges.json"
    if not challenges_path.is_file():
        click.echo("error: no pending challenges", err=True)
        sys.exit(1)
    challenges = json.loads(challenges_path.read_text("utf-8"))
    entry = challenges.get(challenge_id)
    if entry is None:
        click.echo(f"error: unknown challenge {challenge_id}", err=True)
        sys.exit(1)
    approvals_path = Path(state_dir) / "approvals.json"
    approvals = (json.loads(approvals_path.read_text("utf-8"))
                 if approvals_path.is_file() else {})
    approvals[challenge_id] = entry["token"]
    approvals_path.write_text(json.dumps(approvals, sort_keys=True))
    click.echo(f"approved {challenge_id}")


@main.group()
def audit():
    """Audit log verification and proofs."""


@audit.command("verify")
@click.argument("log_file", type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True)
def audit_verify(log_file, as_json):
    """Verify the hash chain; exit 1 with the first bad index on failure."""
    bad = verify_chain(read_log(log_file))
    if bad is None:
        _echo_json({"ok": True, "events": len(read_log(log_file))}, as_json)
        return
    _echo_json({"ok": False, "first_bad_index": bad}, as_json)
    sys.exit(1)


@audit.command("prove")
@click.option("--log", "log_file", required=True, type=click.Path(exists=True))
@click.option("--index", type=int, default=None, help="Inclusion proof leaf.")
@click.option("--size", type=int, required=True, help="Tree size (new size).")
@click.option("--old-size", type=int, default=None,
              help="Consistency proof old size.")
def audit_prove(log_file, index, size, old_size):
    """Produce an inclusion or consistency proof over a log file."""
    records = read_log(log_file)
    leaves = [bytes.fromhex(r["event_hash"]) for r in records]
    if size > len(leaves):
        click.echo("error: size beyond log length", err=True)
        sys.exit(2)
    log = AuditLog()
    from capseal.audit import AuditEvent
    log.events = [AuditEvent(**r) for r in records]
    try:
        if old_size is not None:
            proof = log.prove_consistency(old_size, size)
        elif index is not None:
            proof = log.prove_inclusion(index, size)
        else:
            click.echo("error: need --index or --old-size", err=True)
            sys.exit(2)
    except audit_mod.AuditError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(proof.to_dict(), sort_keys=True))


@main.group()
def bench():
    """Evaluation harness."""


@bench.command("scenario")
@click.option("--system", required=True,
              type=click.Choice(["b1", "b2", "capseal"]))
@click.option("--scenario", "scenario_id", required=True)
@click.option("--n", "n_trials", default=100, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--transcripts", type=click.Path(), default=None)
@click.option("--workdir", type=click.Path(), default=None)
def bench_scenario(system, scenario_id, n_trials, seed, out, transcripts, workdir):
    """Run one security-outcome cell with scripted drivers."""
    from capseal.harness.env import build_env
    from capseal.harness.report import scenario_result_doc, write_json
    from capseal.harness.scenarios import run_scenario

    system_id = {"b1": "B1", "b2": "B2", "capseal": "CapSeal"}[system]
    workdir = workdir or tempfile.mkdtemp(prefix="capseal-bench-")
    env = build_env(workdir)
    try:
        run = run_scenario(env, system_id, scenario_id, n_trials, seed,
                           transcripts_dir=transcripts)
    finally:
        env.close()
    doc = scenario_result_doc(run)
    if out:
        write_json(out, doc)
    click.echo(json.dumps(doc, sort_keys=True))


@bench.command("latency")
@click.option("--system", required=True,
              type=click.Choice(["direct", "s1", "s2", "capseal"]))
@click.option("--protocol", required=True, type=click.Choice(["http", "ssh"]))
@click.option("--rounds", default=10, show_default=True)
@click.option("--warmup", default=5, show_default=True)
@click.option("--trials", default=50, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--workdir", type=click.Path(), default=None)
def bench_latency(system, protocol, rounds, warmup, trials, out, workdir):
    """Run one latency cell against the local targets."""
    from capseal.harness.env import build_env
    from capseal.harness.latency import run_latency
    from capseal.harness.report import latency_result_doc, write_json

    system_id = {"direct": "Direct", "s1": "S1", "s2": "S2",
                 "capseal": "CapSeal"}[system]
    workdir = workdir or tempfile.mkdtemp(prefix="capseal-bench-")
    env = build_env(workdir)
    try:
        result = run_latency(env, system_id, protocol, rounds=rounds,
                             warmup=warmup, trials=trials)
    finally:
        env.close()
    doc = latency_result_doc(result)
    if out:
        write_json(out, doc)
    click.echo(json.dumps(doc, sort_keys=True))


if __name__ == "__main__":
    main()
