"""Command-line surface tests, driving drpki.cli.main directly (plus one
multi-process serve run over real sockets)."""

import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from drpki.cli import main

FIXTURE = Path(__file__).parent / "data" / "churn_90d"


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture()
def workspace(tmp_path):
    assert run_cli("init", "--dir", str(tmp_path), "--scheme", "shamir",
                   "--seed", "11") == 0
    return tmp_path


def _write_roa(path, serial=7, member="memberX"):
    path.write_text(json.dumps({
        "kind": "roa", "serial": serial, "member": member, "asn": 64512,
        "prefixes": [{"prefix": "192.0.2.0/24", "max_length": 24}],
        "not_before": 1_500_000_000, "not_after": 1_900_000_000,
    }))


def test_init_writes_config(workspace):
    cfg = (workspace / "drpki.ini").read_text()
    assert "scheme = shamir" in cfg
    assert "pair_secret" in cfg
    assert "party5" in cfg


def test_keygen_preprocess_sign_workflow(workspace, capsys):
    config = str(workspace / "drpki.ini")
    assert run_cli("keygen", "--config", config, "--member", "memberX") == 0
    assert run_cli("preprocess", "--config", config, "--independent", "3") == 0
    assert run_cli("preprocess", "--config", config, "--member", "memberX", "3") == 0

    key_file = workspace / "member.key"
    assert run_cli("member", "new-key", "--out", str(key_file)) == 0
    assert run_cli("member", "register", "--config", config,
                   "--member", "memberX", "--key", str(key_file)) == 0

    roa_file = workspace / "roa.json"
    _write_roa(roa_file)
    token_file = workspace / "token.json"
    assert run_cli("consent", "issue", "--key", str(key_file),
                   "--member", "memberX", "--action", "ISSUE",
                   "--payload", str(roa_file), "--config", config,
                   "--out", str(token_file)) == 0
    assert run_cli("consent", "show", str(token_file)) == 0

    assert run_cli("sign", "--config", config, "--member", "memberX",
                   "--in", str(roa_file), "--consent", str(token_file)) == 0
    out = capsys.readouterr().out
    assert "published roa-7.obj" in out
    assert (workspace / "data" / "party3" / "objects" / "roa-7.obj").exists()


def test_test_mode_env_var_refuses_production_config(workspace, monkeypatch):
    monkeypatch.setenv("DRPKI_TEST_MODE", "1")
    with pytest.raises(SystemExit):
        run_cli("keygen", "--config", str(workspace / "drpki.ini"),
                "--member", "memberX")
    # a test-mode config is accepted under the env var
    config_path = workspace / "drpki.ini"
    config_path.write_text(
        config_path.read_text().replace("test_mode = false", "test_mode = true")
    )
    assert run_cli("keygen", "--config", str(config_path),
                   "--member", "memberX") == 0


def test_sign_without_consent_aborts(workspace, capsys):
    config = str(workspace / "drpki.ini")
    run_cli("keygen", "--config", config, "--member", "memberX")
    run_cli("preprocess", "--config", config, "--independent", "2")
    run_cli("preprocess", "--config", config, "--member", "memberX", "2")
    roa_file = workspace / "roa.json"
    _write_roa(roa_file)
    assert run_cli("sign", "--config", config, "--member", "memberX",
                   "--in", str(roa_file)) == 1
    assert "aborted: consent-missing" in capsys.readouterr().out


def test_flagged_revoke_with_intervention(workspace, capsys):
    config_path = workspace / "drpki.ini"
    config_path.write_text(
        config_path.read_text().replace("flag_on_failed_consent = false",
                                        "flag_on_failed_consent = true")
    )
    config = str(config_path)
    run_cli("keygen", "--config", config, "--member", "memberX")
    run_cli("preprocess", "--config", config, "--independent", "4")
    run_cli("preprocess", "--config", config, "--member", "memberX", "4")
    crl_file = workspace / "crl.json"
    crl_file.write_text(json.dumps({
        "kind": "crl", "issuer": "memberX", "this_update": 1_600_000_000,
        "revoked_serials": [7],
    }))
    rc = run_cli("sign", "--config", config, "--member", "memberX",
                 "--action", "REVOKE", "--in", str(crl_file))
    assert rc == 2
    out = capsys.readouterr().out
    ticket = out.split("ticket ")[1].split()[0]

    run_cli("intervene", "approve", ticket, "--config", config, "--party", "1")
    run_cli("intervene", "approve", ticket, "--config", config, "--party", "2")
    assert run_cli("intervene", "approve", ticket, "--config", config,
                   "--party", "4", "--complete") == 0
    out = capsys.readouterr().out
    assert "completed: published" in out
    run_cli("intervene", "list", "--config", config)
    assert "completed" in capsys.readouterr().out


def test_bench_command_writes_csv(tmp_path, capsys):
    out = tmp_path / "report.csv"
    assert run_cli("bench", "--scheme", "shamir", "--setting", "lan",
                   "--phases", "online", "--signatures", "2", "--reps", "2",
                   "--tuples", "2", "--out", str(out)) == 0
    assert "shamir" in capsys.readouterr().out
    body = out.read_text().splitlines()
    assert body[0].startswith("scheme,setting,phase")
    assert len(body) == 2


def test_analyze_command(tmp_path, capsys):
    bench_csv = tmp_path / "bench.csv"
    run_cli("bench", "--scheme", "semi", "--setting", "lan",
            "--phases", "online", "--signatures", "2", "--reps", "2",
            "--tuples", "2", "--out", str(bench_csv))
    capsys.readouterr()
    out = tmp_path / "capacity.json"
    plot = tmp_path / "per_day.csv"
    assert run_cli("analyze", "--archive", str(FIXTURE), "--bench",
                   str(bench_csv), "--out", str(out), "--plot-csv", str(plot)) == 0
    report = json.loads(out.read_text())
    assert report["window"]["days"] == 88  # 89 day files, first has no predecessor
    assert report["per_scheme"][0]["scheme"] == "semi"
    assert plot.exists()
    printed = capsys.readouterr().out
    assert "headroom" in printed


def _free_port_base():
    socks = []
    try:
        for _ in range(5):
            s = socket.socket()
            s.bind(("127.0.0.1", 0))
            socks.append(s)
        base = max(s.getsockname()[1] for s in socks) + 100
    finally:
        for s in socks:
            s.close()
    return min(base, 64000)


def test_serve_multiprocess_pipeline(tmp_path):
    base = _free_port_base()
    assert run_cli("init", "--dir", str(tmp_path), "--scheme", "shamir",
                   "--seed", "3", "--port-base", str(base)) == 0
    config = str(tmp_path / "drpki.ini")
    assert run_cli("deal", "--config", config, "--count", "4", "--masks", "6",
                   "--out", str(tmp_path / "data" / "dealer")) == 0
    script = tmp_path / "script.txt"
    script.write_text(
        "keygen tcp-member\n"
        "preprocess-independent 1\n"
        "preprocess-dependent tcp-member 1\n"
        "sign tcp-member " + b"over tcp".hex() + "\n"
        "shutdown\n"
    )
    responders = [
        subprocess.Popen(
            [sys.executable, "-m", "drpki.cli", "serve", "--config", config,
             "--party", str(p)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        for p in (2, 3, 4, 5)
    ]
    time.sleep(0.6)
    initiator = subprocess.run(
        [sys.executable, "-m", "drpki.cli", "serve", "--config", config,
         "--party", "1", "--script", str(script)],
        capture_output=True, text=True, timeout=90,
    )
    outputs = [initiator.stdout]
    for proc in responders:
        out, err = proc.communicate(timeout=90)
        outputs.append(out)
        assert proc.returncode == 0, err
    assert initiator.returncode == 0, initiator.stderr
    signatures = set()
    for out in outputs:
        line = [l for l in out.splitlines() if "signature" in l]
        assert line and "verifies: True" in line[0]
        signatures.add(line[0].split("signature ")[1].split()[0])
    assert len(signatures) == 1  # all five processes assembled the same bytes
