"""Transport, session, and node-workflow tests."""

import json
import random
import threading
import time

import pytest

from drpki.algebra import KeyPair, ecdsa_verify
from drpki.bench import WAN_RTT_MS, critical_path_rtt, one_way_delays
from drpki.preprocessing import TrustedDealer
from drpki.rpki import Action, CrlRecord, IpPrefix, RoaRecord, sign_consent
from drpki.runtime import (
    FRAME_OVERHEAD,
    ConsentPolicy,
    InProcessHub,
    LocalCluster,
    PartySession,
    SessionAbort,
    SignRequest,
    TcpNodeTransport,
    verify_audit_completeness,
)
from drpki.runtime.transport import (
    PHASE_CONTROL,
    PHASE_KEYGEN,
    SessionMessage,
    decode_frame,
    derive_pair_keys,
    encode_frame,
    pair_key,
)
from drpki.sharing import SchemeId
from drpki.tecdsa import PhaseEnv, ProtocolConfig, TupleStore, keygen, preprocess_dependent, preprocess_independent, sign_online

rng = random.Random(0xD21_05)


def make_cluster(scheme=SchemeId.SHAMIR, seed=55, **kwargs):
    return LocalCluster(ProtocolConfig.for_scheme(scheme), seed=seed, **kwargs)


# --- framing -------------------------------------------------------------------

def test_frame_roundtrip_and_auth():
    keys = derive_pair_keys(b"secret", 5)
    key = pair_key(keys, 1, 2)
    msg = SessionMessage(b"S" * 16, PHASE_KEYGEN, 3, 1, b"payload bytes")
    frame = encode_frame(msg, key)
    assert len(frame) == FRAME_OVERHEAD + len(msg.payload)
    assert decode_frame(frame[4:], key) == msg


def test_frame_rejects_flipped_bit_and_wrong_key():
    keys = derive_pair_keys(b"secret", 5)
    key = pair_key(keys, 1, 2)
    msg = SessionMessage(b"S" * 16, PHASE_KEYGEN, 3, 1, b"payload")
    frame = bytearray(encode_frame(msg, key))
    frame[30] ^= 0x01
    assert decode_frame(bytes(frame[4:]), key) is None
    good = encode_frame(msg, key)
    assert decode_frame(good[4:], pair_key(keys, 1, 3)) is None


def test_hub_drops_corrupted_frames():
    keys = derive_pair_keys(b"k", 5)
    hub = InProcessHub(keys)
    msg = SessionMessage(b"T" * 16, PHASE_CONTROL, 1, 1, b"hello")
    hub.corrupt_and_send(1, 2, msg)
    assert hub.dropped_frames == 1
    assert hub.recv(2, b"T" * 16, timeout=0.05) is None


# --- rounds ---------------------------------------------------------------------

def test_echo_round_all_parties_hold_all_payloads():
    cluster = make_cluster()
    results = cluster.run_echo_round(b"ping")
    for party, got in results.items():
        peers = set(cluster.participants) - {party}
        assert set(got) == peers
        assert all(v == b"ping" for v in got.values())
    cluster.close()


def test_silent_party_aborts_all_live_parties():
    cluster = make_cluster()
    started = time.perf_counter()
    with pytest.raises(SessionAbort, match="party unavailable"):
        cluster.run_echo_round(b"x", mute=[3], timeout=0.3)
    assert time.perf_counter() - started < 3.0
    cluster.close()


def test_wan_round_trip_meets_critical_path():
    cluster = make_cluster(latency_ms=one_way_delays(WAN_RTT_MS), timeout=30.0)
    started = time.perf_counter()
    cluster.run_echo_round(b"y", echo_back=True)
    elapsed_ms = (time.perf_counter() - started) * 1000.0
    assert elapsed_ms >= critical_path_rtt(WAN_RTT_MS)  # 308.7 on Sao Paolo-Sydney
    cluster.close()


def test_echo_round_byte_accounting_matches_frame_format():
    cluster = make_cluster()
    before = {p: cluster.hub.counters.sent_by(p, "control")
              for p in cluster.participants}
    cluster.run_echo_round(b"z" * 32)
    for p in cluster.participants:
        sent = cluster.hub.counters.sent_by(p, "control") - before[p]
        assert sent == 4 * (FRAME_OVERHEAD + 32)
    cluster.close()


def test_replayed_round_message_dropped():
    keys = derive_pair_keys(b"rk", 3)
    hub = InProcessHub(keys)
    sid = b"R" * 16
    done = {}

    def party(pid, peers):
        session = PartySession(pid, [1, 2, 3], sid, PHASE_CONTROL,
                               hub.endpoint(pid), SchemeId.SHAMIR, t=1, timeout=2.0)
        done[pid] = session.broadcast(b"m%d" % pid)
        return session

    threads = [threading.Thread(target=party, args=(p, None)) for p in (1, 2, 3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(len(v) == 2 for v in done.values())

    # replay an already-delivered round-1 frame: receiver counts and drops it
    session = PartySession(1, [1, 2, 3], sid, PHASE_CONTROL, hub.endpoint(1),
                           SchemeId.SHAMIR, t=1, timeout=0.2)
    session._high_water = {2: 1, 3: 1}
    session.round = 1
    replay = SessionMessage(sid, PHASE_CONTROL, 1, 2, b"stale")
    hub.send(2, 1, replay)
    with pytest.raises(SessionAbort):
        session.run_round({2: b"", 3: b""})
    assert session.dropped >= 1


# --- TCP transport -----------------------------------------------------------------

def _free_ports(n):
    import socket

    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def test_full_pipeline_over_tcp_sockets():
    n, t = 5, 2
    scheme = SchemeId.SHAMIR
    config = ProtocolConfig.for_scheme(scheme)
    ports = _free_ports(n)
    addresses = {i + 1: ("127.0.0.1", ports[i]) for i in range(n)}
    keys = derive_pair_keys(b"tcp-test", n)
    dealer = TrustedDealer(n, t, random.Random(3))
    epoch = bytes(16)

    transports = {}

    def build(party):
        transports[party] = TcpNodeTransport(party, addresses, keys)

    builders = [threading.Thread(target=build, args=(p,)) for p in addresses]
    for th in builders:
        th.start()
    for th in builders:
        th.join()

    envs = {
        p: PhaseEnv(
            party_id=p, config=config, epoch=epoch,
            tuple_store=TupleStore(None, p),
            triple_source=dealer.view_for(p),
            rng=random.Random(40 + p),
        )
        for p in addresses
    }
    results = {}

    def run_party(p):
        def session(phase, sid):
            return PartySession(p, list(addresses), sid, phase, transports[p],
                                scheme, t, timeout=10.0, rng=envs[p].rng)

        record = keygen(envs[p], session(PHASE_KEYGEN, b"kg" + bytes(14)), "m")
        preprocess_independent(envs[p], session(2, b"pi" + bytes(14)), 1)
        preprocess_dependent(envs[p], session(3, b"pd" + bytes(14)), "m", 1)
        results[p] = (
            record.pk,
            sign_online(envs[p], session(4, b"on" + bytes(14)), "m", b"tcp message"),
        )

    workers = [threading.Thread(target=run_party, args=(p,)) for p in addresses]
    for th in workers:
        th.start()
    for th in workers:
        th.join()
    for tr in transports.values():
        tr.close()

    assert len(results) == n
    pk = results[1][0]
    sigs = {res.signature.to_bytes() for _, res in results.values()}
    assert len(sigs) == 1
    assert ecdsa_verify(pk, b"tcp message", results[1][1].signature)


# --- consent-gated workflow ----------------------------------------------------------

def _issue_fixture(cluster, member="memberA", serial=1):
    pk = cluster.keygen(member)
    cluster.preprocess_independent(4)
    cluster.preprocess_dependent(member, 4)
    member_keys = KeyPair.generate(rng)
    cluster.register_member(member, member_keys.pk)
    roa = RoaRecord(serial=serial, member_id=member, asn=64512,
                    prefixes=(IpPrefix.parse("192.0.2.0/24", 24),),
                    not_before=1500000000, not_after=1600000000, ee_pk=pk)
    return pk, member_keys, roa


def test_issue_with_consent_publishes_at_all_parties():
    cluster = make_cluster()
    pk, member_keys, roa = _issue_fixture(cluster)
    token = sign_consent(member_keys.sk, "memberA", Action.ISSUE, [roa],
                         expiry=int(time.time()) + 600, rng=rng)
    cluster.submit_consent(token)
    outcome = cluster.handle_sign_request(
        SignRequest("memberA", Action.ISSUE, [roa], token)
    )
    assert outcome.status == "published"
    assert outcome.objects[0].verify()
    for node in cluster.nodes.values():
        assert "roa-1.obj" in node.objects
    assert verify_audit_completeness(cluster)
    cluster.close()


def test_revoke_without_consent_aborts_by_default():
    cluster = make_cluster()
    _, _, roa = _issue_fixture(cluster)
    crl = CrlRecord("memberA", 1500000001, (1,))
    before_stock = cluster.final_stock("memberA")
    outcome = cluster.handle_sign_request(
        SignRequest("memberA", Action.REVOKE, [crl], None)
    )
    assert outcome.status == "aborted"
    assert outcome.reason == "consent-missing"
    # conservative policy: the failed attempt still consumed a tuple
    assert cluster.final_stock("memberA") == before_stock - 1
    lines = cluster.nodes[1].audit_lines()
    assert any(json.loads(l)["event"] == "sign_aborted" for l in lines)
    assert not any("crl" in name for name in cluster.nodes[1].objects)
    cluster.close()


def test_flag_policy_requires_quorum_approvals():
    cluster = make_cluster(policy=ConsentPolicy(flag_on_failed_consent=True))
    _, _, roa = _issue_fixture(cluster)
    crl = CrlRecord("memberA", 1500000001, (1,))
    outcome = cluster.handle_sign_request(
        SignRequest("memberA", Action.REVOKE, [crl], None)
    )
    assert outcome.status == "flagged"
    ticket = outcome.ticket_id
    cluster.approve_ticket(ticket, 1)
    cluster.approve_ticket(ticket, 2)
    with pytest.raises(Exception, match="needs 3"):
        cluster.complete_ticket(ticket)
    cluster.approve_ticket(ticket, 5)
    done = cluster.complete_ticket(ticket)
    assert done.status == "published"
    assert 1 in cluster.nodes[2].revoked_serials()
    assert verify_audit_completeness(cluster)
    cluster.close()


def test_issue_never_flag_eligible():
    cluster = make_cluster(policy=ConsentPolicy(flag_on_failed_consent=True))
    _, _, roa = _issue_fixture(cluster)
    outcome = cluster.handle_sign_request(
        SignRequest("memberA", Action.ISSUE, [roa], None)
    )
    assert outcome.status == "aborted"
    cluster.close()


def test_audit_replay_rejects_unconsented_object():
    from drpki.algebra import ecdsa_sign
    from drpki.rpki import PayloadKind, SignedObject, encode_canonical

    cluster = make_cluster()
    rogue = KeyPair.generate(rng)
    roa = RoaRecord(9, "rogue", 1, (IpPrefix.parse("10.0.0.0/8", 8),), 1, 2, rogue.pk)
    payload = encode_canonical(roa)
    obj = SignedObject(PayloadKind.ROA, payload,
                       ecdsa_sign(rogue.sk, payload, rng=rng), rogue.pk)
    for node in cluster.nodes.values():
        node.objects["roa-9.obj"] = obj  # bypasses the consent pipeline entirely
    assert not verify_audit_completeness(cluster)
    cluster.close()


def test_tampered_consent_token_rejected():
    cluster = make_cluster()
    pk, member_keys, roa = _issue_fixture(cluster)
    other = KeyPair.generate(rng)  # wrong member key signs the consent
    token = sign_consent(other.sk, "memberA", Action.ISSUE, [roa],
                         expiry=int(time.time()) + 600, rng=rng)
    cluster.submit_consent(token)
    outcome = cluster.handle_sign_request(
        SignRequest("memberA", Action.ISSUE, [roa], token)
    )
    assert outcome.status == "aborted"
    assert outcome.reason == "consent-invalid"
    cluster.close()


# --- replenishment --------------------------------------------------------------------

def test_replenish_restores_watermark():
    cluster = make_cluster(policy=ConsentPolicy(low_watermark=3, batch_size=6))
    cluster.keygen("m")
    made = cluster.replenish("m")
    assert cluster.initial_stock() >= 3
    assert cluster.final_stock("m") >= 3
    assert made["final"] >= 3
    cluster.close()


def test_flipped_payload_bit_ends_in_timeout_abort():
    # a forged frame is silently dropped; the waiting session sees nothing
    # from that peer and aborts on timeout instead of accepting forged data
    keys = derive_pair_keys(b"auth", 3)
    hub = InProcessHub(keys)
    sid = b"A" * 16
    session = PartySession(1, [1, 2, 3], sid, PHASE_CONTROL, hub.endpoint(1),
                           SchemeId.SHAMIR, t=1, timeout=0.3)
    hub.corrupt_and_send(2, 1, SessionMessage(sid, PHASE_CONTROL, 1, 2, b"forged"))
    hub.send(3, 1, SessionMessage(sid, PHASE_CONTROL, 1, 3, b"honest"))
    with pytest.raises(SessionAbort, match="party unavailable"):
        session.run_round({2: b"", 3: b""})
    assert hub.dropped_frames == 1


def test_sign_request_completes_with_three_live_parties():
    cluster = LocalCluster(ProtocolConfig.for_scheme(SchemeId.SHAMIR), seed=66,
                           participants=[1, 3, 5])
    pk, member_keys, roa = _issue_fixture(cluster, member="threeway")
    token = sign_consent(member_keys.sk, "threeway", Action.ISSUE, [roa],
                         expiry=int(time.time()) + 600, rng=rng)
    cluster.submit_consent(token)
    outcome = cluster.handle_sign_request(
        SignRequest("threeway", Action.ISSUE, [roa], token)
    )
    assert outcome.status == "published"
    assert outcome.objects[0].verify()
    cluster.close()


def test_sign_request_triggers_replenishment_when_depleted():
    cluster = make_cluster(policy=ConsentPolicy(low_watermark=2, batch_size=4))
    pk, member_keys, roa = _issue_fixture(cluster)
    # drain all final tuples
    while cluster.final_stock("memberA") > 0:
        cluster.run_signing("memberA", b"drain")
    token = sign_consent(member_keys.sk, "memberA", Action.ISSUE, [roa],
                         expiry=int(time.time()) + 600, rng=rng)
    cluster.submit_consent(token)
    outcome = cluster.handle_sign_request(
        SignRequest("memberA", Action.ISSUE, [roa], token)
    )
    assert outcome.status == "published"
    cluster.close()


def test_concurrent_signing_and_replenishment_complete():
    cluster = make_cluster(policy=ConsentPolicy(low_watermark=2, batch_size=4))
    members = ["m1", "m2", "m3"]
    for m in members:
        cluster.keygen(m)
    cluster.preprocess_independent(12)
    for m in members:
        cluster.preprocess_dependent(m, 4)

    errors = []
    results = []

    def sign_loop(member):
        try:
            for i in range(3):
                results.append(cluster.run_signing(member, b"%s %d" % (member.encode(), i)))
        except Exception as exc:  # pragma: no cover - failure reporting
            errors.append(exc)

    def replenish_loop():
        try:
            for _ in range(2):
                cluster.replenish()
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=sign_loop, args=(m,)) for m in members]
    threads.append(threading.Thread(target=replenish_loop))
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    assert not errors
    assert len(results) == 9
    cluster.close()


# --- determinism ------------------------------------------------------------------------

def test_fixed_seed_runs_are_byte_identical():
    def run():
        cluster = LocalCluster(
            ProtocolConfig.for_scheme(SchemeId.ADDITIVE_MAC), seed=77,
            clock=lambda: 1_600_000_000.0,
        )
        pk, member_keys, roa = _issue_fixture(cluster, member="det")
        sig = cluster.run_signing("det", b"determinism").signature.to_bytes()
        audits = {p: tuple(n.audit_lines()) for p, n in cluster.nodes.items()}
        cluster.close()
        return sig, audits

    assert run() == run()


def test_keygen_timed_reports_phase_split():
    cluster = make_cluster()
    timing = cluster.keygen_timed("timed-member")
    assert timing["secret_ms"] > 0
    assert timing["public_ms"] > 0
    cluster.close()
