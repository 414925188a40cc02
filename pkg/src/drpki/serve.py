"""TCP node mode: one party per process, driven by authenticated control frames.

The in-process cluster is the primary simulation surface; `drpki serve` runs
the cryptographic phases (key generation, preprocessing, online signing)
between real processes over sockets instead.  Preprocessing material comes
from dealer files written ahead of time by `drpki deal`, matching the
trusted-dealer model.

One party runs with --script and initiates each operation by broadcasting a
control frame; the others follow.  Script lines:

    keygen MEMBER
    preprocess-independent N
    preprocess-dependent MEMBER N
    sign MEMBER HEX-MESSAGE
    shutdown
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

from .algebra import FieldElement, ecdsa_verify
from .preprocessing import FileReplay, TrustedDealer, write_replay_file
from .sharing import MacKeyShare, SchemeId, generate_mac_keys
from .tecdsa import (
    ProtocolConfig,
    keygen,
    preprocess_dependent,
    preprocess_independent,
    sign_online,
)
from .runtime.node import PartyNode
from .runtime.session import PartySession
from .runtime.transport import (
    PHASE_CONTROL,
    PHASE_KEYGEN,
    PHASE_ONLINE,
    PHASE_PREPROCESS_DEPENDENT,
    PHASE_PREPROCESS_INDEPENDENT,
    SessionMessage,
    TcpNodeTransport,
    derive_pair_keys,
)

CONTROL_SID = bytes(16)
TCP_EPOCH = bytes(16)

_OP_PHASE = {
    "keygen": PHASE_KEYGEN,
    "preprocess-independent": PHASE_PREPROCESS_INDEPENDENT,
    "preprocess-dependent": PHASE_PREPROCESS_DEPENDENT,
    "sign": PHASE_ONLINE,
}


def _load_ini(config_path: str):
    import configparser

    cfg = configparser.ConfigParser()
    if not cfg.read(config_path):
        raise SystemExit(f"error: config file not found: {config_path}")
    return cfg


def _addresses(cfg) -> dict[int, tuple[str, int]]:
    out = {}
    for key, value in cfg["addresses"].items():
        party = int(key.removeprefix("party"))
        host, port = value.rsplit(":", 1)
        out[party] = (host, int(port))
    return out


def _pair_secret(cfg) -> bytes:
    raw = cfg["cluster"].get("pair_secret")
    if raw:
        return bytes.fromhex(raw)
    seed = cfg["cluster"].get("seed", "0")
    return hashlib.sha256(f"drpki-pair:{seed}".encode()).digest()


def _scheme(cfg) -> SchemeId:
    from .cli import SCHEME_NAMES

    return SCHEME_NAMES[cfg["cluster"].get("scheme", "shamir")]


def deal_to_files(config_path: str, count: int, out_dir: str, masks: int) -> int:
    """Write per-party dealer output: triples, input masks, MAC key shares."""
    cfg = _load_ini(config_path)
    scheme = _scheme(cfg)
    proto = ProtocolConfig.for_scheme(scheme)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    mac_keys = generate_mac_keys(proto.n) if scheme.has_mac else None
    dealer = TrustedDealer(proto.n, proto.t, None, mac_keys, TCP_EPOCH)
    triples = {p: [] for p in range(1, proto.n + 1)}
    for _ in range(count):
        for p in range(1, proto.n + 1):
            triples[p].append(dealer.next_triple_for(p, scheme))
    mask_records = {p: [] for p in range(1, proto.n + 1)}
    for i in range(masks):
        owner = (i % proto.n) + 1
        for p in range(1, proto.n + 1):
            mask_records[p].append(dealer.next_mask_for(p, scheme, owner))
    for p in range(1, proto.n + 1):
        write_replay_file(
            str(out / f"party{p}.triples"), p, scheme, proto.n, proto.t,
            TCP_EPOCH, triples[p], mask_records[p],
        )
        if mac_keys is not None:
            (out / f"party{p}.mac").write_text(f"{mac_keys[p - 1].alpha_i.value:064x}\n")
    print(f"wrote dealer output for {proto.n} parties under {out_dir} "
          f"({count} triples, {masks} masks each)")
    return 0


class _TcpParty:
    """Shared machinery for the initiating and responding serve roles."""

    def __init__(self, cfg, party: int) -> None:
        self.cfg = cfg
        self.party = party
        self.scheme = _scheme(cfg)
        self.proto = ProtocolConfig.for_scheme(
            self.scheme,
            precompute_r=cfg["cluster"].getboolean("precompute_r", False),
        )
        addresses = _addresses(cfg)
        self.participants = sorted(addresses)
        keys = derive_pair_keys(_pair_secret(cfg), self.proto.n)
        self.transport = TcpNodeTransport(party, addresses, keys,
                                          connect_timeout=30.0)
        data_dir = cfg["cluster"].get("data_dir")
        node_dir = str(Path(data_dir) / f"party{party}") if data_dir else None
        self.node = PartyNode(party, self.proto, node_dir, TCP_EPOCH)
        triple_dir = cfg["cluster"].get("triple_dir", "")
        replay = Path(triple_dir or (data_dir or ".")) / f"party{party}.triples"
        if replay.exists():
            source = FileReplay(str(replay))
            self.node.triple_source = source
            self.node.epoch = source.epoch
        mac_file = Path(triple_dir or (data_dir or ".")) / f"party{party}.mac"
        if mac_file.exists():
            self.node.mac_key = MacKeyShare(
                party, FieldElement(int(mac_file.read_text().strip(), 16))
            )
        self.timeout = cfg["cluster"].getfloat("timeout", 60.0)
        self.op_counter = 0

    def session_for(self, op: dict) -> PartySession:
        self.op_counter += 1
        sid = hashlib.sha256(
            json.dumps(op, sort_keys=True).encode() + self.op_counter.to_bytes(4, "big")
        ).digest()[:16]
        return PartySession(
            self.party, self.participants, sid, _OP_PHASE[op["op"]],
            self.transport, self.scheme, self.proto.t,
            timeout=self.timeout, mac_key=self.node.mac_key, rng=self.node.rng,
        )

    def execute(self, op: dict) -> None:
        name = op["op"]
        env = self.node.env()
        session = self.session_for(op)
        if name == "keygen":
            record = keygen(env, session, op["member"])
            self.node.store_key_record(record)
            print(f"[party {self.party}] keygen {op['member']}: "
                  f"pk {record.pk.to_bytes().hex()}")
        elif name == "preprocess-independent":
            made = preprocess_independent(env, session, op["count"])
            print(f"[party {self.party}] +{len(made)} initial tuples")
        elif name == "preprocess-dependent":
            made = preprocess_dependent(env, session, op["member"], op["count"])
            print(f"[party {self.party}] +{len(made)} final tuples for {op['member']}")
        elif name == "sign":
            message = bytes.fromhex(op["message"])
            result = sign_online(env, session, op["member"], message)
            pk = self.node.key_records[op["member"]].pk
            ok = ecdsa_verify(pk, message, result.signature)
            print(f"[party {self.party}] signature "
                  f"{result.signature.to_bytes().hex()} (verifies: {ok})")
        else:
            raise ValueError(f"unknown op {name!r}")

    def close(self) -> None:
        self.node.close()
        self.transport.close()


def _parse_script_line(line: str) -> dict | None:
    parts = line.split()
    if not parts or parts[0].startswith("#"):
        return None
    name = parts[0]
    if name == "shutdown":
        return {"op": "shutdown"}
    if name == "keygen":
        return {"op": "keygen", "member": parts[1]}
    if name == "preprocess-independent":
        return {"op": "preprocess-independent", "count": int(parts[1])}
    if name == "preprocess-dependent":
        return {"op": "preprocess-dependent", "member": parts[1], "count": int(parts[2])}
    if name == "sign":
        return {"op": "sign", "member": parts[1], "message": parts[2]}
    raise SystemExit(f"error: bad script line: {line!r}")


def serve_node(config_path: str, party: int, script: str | None) -> int:
    cfg = _load_ini(config_path)
    tcp = _TcpParty(cfg, party)
    try:
        if script:
            ops = [
                parsed
                for line in Path(script).read_text().splitlines()
                if (parsed := _parse_script_line(line)) is not None
            ]
            round_no = 0
            for op in ops:
                round_no += 1
                frame = SessionMessage(CONTROL_SID, PHASE_CONTROL, round_no,
                                       party, json.dumps(op, sort_keys=True).encode())
                for peer in tcp.participants:
                    if peer != party:
                        tcp.transport.send(peer, frame)
                if op["op"] == "shutdown":
                    break
                tcp.execute(op)
            return 0
        # responder loop: follow the initiator's control frames
        while True:
            msg = tcp.transport.recv(CONTROL_SID, timeout=tcp.timeout * 10)
            if msg is None:
                print(f"[party {party}] idle timeout, exiting", file=sys.stderr)
                return 1
            op = json.loads(msg.payload.decode())
            if op["op"] == "shutdown":
                print(f"[party {party}] shutdown")
                return 0
            tcp.execute(op)
    finally:
        tcp.close()
