"""The four phases of the joint signing protocol, and the persistent tuple store.

Phases, each executed by every participating party over a synchronous
session:

  1. keygen                  per-member signing key shares and the public key
  2. preprocess_independent  initial tuples (share of k*G, share of 1/k)
  3. preprocess_dependent    final tuples binding a member: share of sk/k
  4. sign_online             field-only assembly of the signature share

Instance-key material is strictly single-use: stores mark tuples consumed
durably before any protocol message references them, so a crash and restart
can never reuse a nonce.
"""

from __future__ import annotations

import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .algebra import (
    GENERATOR,
    OP_COUNTER,
    FieldElement,
    GroupPoint,
    Signature,
    ecdsa_verify,
    hash_to_scalar,
    scalar_mul,
)
from .preprocessing import Triple, TupleReuseError, beaver_diffs, beaver_combine
from .sharing import (
    MacKeyShare,
    ProtocolAbort,
    SchemeId,
    Share,
    deal,
    share_add,
    share_scale_add,
)

DEGENERATE_RETRY_BUDGET = 3


class TecdsaError(Exception):
    pass


class StockDepletedError(TecdsaError):
    """A preprocessing resource ran out; the message names which one."""


class Adversary(Enum):
    HONEST_BUT_CURIOUS = "honest-but-curious"
    MALICIOUS = "malicious"


class Majority(Enum):
    HONEST = "honest"
    DISHONEST = "dishonest"


_SCHEME_TABLE = {
    (Adversary.HONEST_BUT_CURIOUS, Majority.HONEST): SchemeId.SHAMIR,
    (Adversary.MALICIOUS, Majority.HONEST): SchemeId.SHAMIR_CHECKED,
    (Adversary.HONEST_BUT_CURIOUS, Majority.DISHONEST): SchemeId.ADDITIVE,
    (Adversary.MALICIOUS, Majority.DISHONEST): SchemeId.ADDITIVE_MAC,
}
_SCHEME_TO_MODEL = {v: k for k, v in _SCHEME_TABLE.items()}


@dataclass(frozen=True)
class ProtocolConfig:
    """Scheme selection plus the (adversary, majority) model it instantiates."""

    scheme: SchemeId
    n: int = 5
    t: int = 2
    security: Adversary = Adversary.HONEST_BUT_CURIOUS
    majority: Majority = Majority.HONEST
    test_mode: bool = False
    precompute_r: bool = False

    def __post_init__(self) -> None:
        expected = _SCHEME_TABLE[(self.security, self.majority)]
        if expected is not self.scheme:
            raise TecdsaError(
                f"({self.security.value}, {self.majority.value}) maps to "
                f"{expected.name}, not {self.scheme.name}"
            )
        if self.majority is Majority.HONEST:
            if self.t > (self.n - 1) // 2:
                raise TecdsaError("honest majority requires t <= (n-1)/2")
        elif self.t != self.n - 1:
            raise TecdsaError("dishonest majority uses t = n-1")

    @classmethod
    def for_scheme(cls, scheme: SchemeId, n: int = 5, *, test_mode: bool = False,
                   precompute_r: bool = False) -> "ProtocolConfig":
        security, majority = _SCHEME_TO_MODEL[scheme]
        t = (n - 1) // 2 if majority is Majority.HONEST else n - 1
        return cls(scheme, n, t, security, majority, test_mode, precompute_r)

    @property
    def quorum(self) -> int:
        """Parties that must be live for the protocol to complete."""
        return self.t + 1 if self.majority is Majority.HONEST else self.n


@dataclass
class KeyShareRecord:
    member_id: str
    sk_share: Share
    pk: GroupPoint
    epoch: bytes


@dataclass
class InitialTuple:
    """Member-independent material: one instance key's (share of k*G, [1/k])."""

    tuple_id: bytes
    epoch: bytes
    k_point_share: GroupPoint
    k_inv_share: Share
    consumed: bool = False


@dataclass
class FinalTuple:
    """Member-bound material; carries the initial tuple's id (same instance key)."""

    tuple_id: bytes
    epoch: bytes
    member_id: str
    k_point_share: GroupPoint
    k_inv_share: Share
    sk_over_k_share: Share
    r_point: Optional[GroupPoint] = None  # present when R was pre-opened
    consumed: bool = False


# --- durable tuple store -----------------------------------------------------
#
# Append-only record files plus a consumed-id journal, all CRC-protected.
# A checkout appends to the journal and flushes to disk *before* returning,
# so no protocol message can reference a tuple that a restart would resurrect.

_STORE_MAGIC = b"DTS1"
_JOURNAL_MAGIC = b"DTJ1"
_KIND_INITIAL = 0
_KIND_FINAL = 1

_SHARE_PAD = 66
_POINT_PAD = 65
_MEMBER_PAD = 16


def _pad_share(share: Share) -> bytes:
    raw = share.to_bytes()
    return raw + b"\x00" * (_SHARE_PAD - len(raw))


def _unpad_share(blob: bytes) -> Share:
    scheme = SchemeId(blob[0])
    width = 66 if scheme.has_mac else 34
    return Share.from_bytes(blob[:width])


def _pad_point(point: GroupPoint) -> bytes:
    raw = point.to_bytes()
    return raw + b"\x00" * (_POINT_PAD - len(raw))


def _unpad_point(blob: bytes) -> GroupPoint:
    if blob[0] == 0x00:
        return GroupPoint.identity()
    return GroupPoint.from_bytes(blob[:_POINT_PAD])


def _pad_member(member_id: str) -> bytes:
    raw = member_id.encode()
    if len(raw) > _MEMBER_PAD:
        raise TecdsaError(f"member id longer than {_MEMBER_PAD} bytes: {member_id!r}")
    return raw + b"\x00" * (_MEMBER_PAD - len(raw))


def _crc(body: bytes) -> bytes:
    return struct.pack(">I", zlib.crc32(body))


class TupleStore:
    """One party's tuple inventory, optionally persisted under a directory.

    With directory=None the store is memory-only (benchmarks, throwaway
    tests); otherwise every added tuple and every consumption is durable.
    """

    def __init__(self, directory: Optional[str], party: int) -> None:
        self._lock = threading.Lock()
        self.party = party
        self._initial: dict[bytes, InitialTuple] = {}
        self._final: dict[bytes, FinalTuple] = {}
        self._consumed: set[tuple[int, bytes]] = set()
        self._dir = Path(directory) if directory is not None else None
        self._files = {}
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._load()
            self._files["initial"] = open(self._dir / "tuples_initial.dat", "ab")
            self._files["final"] = open(self._dir / "tuples_final.dat", "ab")
            self._files["journal"] = open(self._dir / "tuples.journal", "ab")
            for name, handle in self._files.items():
                if handle.tell() == 0:
                    magic = _JOURNAL_MAGIC if name == "journal" else _STORE_MAGIC
                    handle.write(magic + bytes([self.party]))
                    handle.flush()

    # -- persistence ------------------------------------------------------

    def _read_records(self, path: Path, width: int):
        if not path.exists():
            return
        data = path.read_bytes()
        if len(data) < 5:
            return
        off = 5  # magic + party byte
        while off + width <= len(data):
            body, crc = data[off:off + width - 4], data[off + width - 4:off + width]
            if _crc(body) != crc:
                break  # torn tail write; everything after is discarded
            yield body
            off += width

    def _load(self) -> None:
        init_width = 16 + 16 + _POINT_PAD + _SHARE_PAD + 4
        for body in self._read_records(self._dir / "tuples_initial.dat", init_width):
            tup = InitialTuple(
                tuple_id=body[:16],
                epoch=body[16:32],
                k_point_share=_unpad_point(body[32:32 + _POINT_PAD]),
                k_inv_share=_unpad_share(body[32 + _POINT_PAD:]),
            )
            self._initial[tup.tuple_id] = tup
        fin_width = 16 + 16 + _MEMBER_PAD + _POINT_PAD + 2 * _SHARE_PAD + 1 + _POINT_PAD + 4
        for body in self._read_records(self._dir / "tuples_final.dat", fin_width):
            off = 0
            tid, off = body[:16], 16
            epoch, off = body[off:off + 16], off + 16
            member = body[off:off + _MEMBER_PAD].rstrip(b"\x00").decode()
            off += _MEMBER_PAD
            kpoint = _unpad_point(body[off:off + _POINT_PAD])
            off += _POINT_PAD
            kinv = _unpad_share(body[off:off + _SHARE_PAD])
            off += _SHARE_PAD
            skk = _unpad_share(body[off:off + _SHARE_PAD])
            off += _SHARE_PAD
            has_r = body[off] == 1
            off += 1
            rpt = _unpad_point(body[off:off + _POINT_PAD]) if has_r else None
            self._final[tid] = FinalTuple(tid, epoch, member, kpoint, kinv, skk, rpt)
        journal = self._dir / "tuples.journal"
        if journal.exists():
            data = journal.read_bytes()
            off = 5
            while off + 21 <= len(data):
                body, crc = data[off:off + 17], data[off + 17:off + 21]
                if _crc(body) != crc:
                    break
                self._consumed.add((body[0], body[1:17]))
                off += 21
        for kind, tid in self._consumed:
            pool = self._initial if kind == _KIND_INITIAL else self._final
            if tid in pool:
                pool[tid].consumed = True

    def _append(self, name: str, body: bytes) -> None:
        handle = self._files.get(name)
        if handle is None:
            return
        handle.write(body + _crc(body))
        handle.flush()

    # -- inventory ---------------------------------------------------------

    def add_initial(self, tup: InitialTuple) -> None:
        with self._lock:
            if tup.tuple_id in self._initial:
                raise TupleReuseError("duplicate initial tuple id")
            self._initial[tup.tuple_id] = tup
            self._append(
                "initial",
                tup.tuple_id + tup.epoch + _pad_point(tup.k_point_share)
                + _pad_share(tup.k_inv_share),
            )

    def add_final(self, tup: FinalTuple) -> None:
        with self._lock:
            if tup.tuple_id in self._final:
                raise TupleReuseError("duplicate final tuple id")
            self._final[tup.tuple_id] = tup
            has_r = tup.r_point is not None
            self._append(
                "final",
                tup.tuple_id + tup.epoch + _pad_member(tup.member_id)
                + _pad_point(tup.k_point_share) + _pad_share(tup.k_inv_share)
                + _pad_share(tup.sk_over_k_share) + bytes([1 if has_r else 0])
                + (_pad_point(tup.r_point) if has_r else b"\x00" * _POINT_PAD),
            )

    def _journal_consume(self, kind: int, tuple_id: bytes) -> None:
        self._consumed.add((kind, tuple_id))
        self._append("journal", bytes([kind]) + tuple_id)

    def checkout_initial(self, epoch: bytes) -> InitialTuple:
        with self._lock:
            for tup in self._initial.values():
                if not tup.consumed and tup.epoch == epoch:
                    tup.consumed = True
                    self._journal_consume(_KIND_INITIAL, tup.tuple_id)
                    return tup
        raise StockDepletedError("initial preprocessing tuples depleted")

    def checkout_final(self, member_id: str, epoch: bytes) -> FinalTuple:
        with self._lock:
            for tup in self._final.values():
                if not tup.consumed and tup.member_id == member_id and tup.epoch == epoch:
                    tup.consumed = True
                    self._journal_consume(_KIND_FINAL, tup.tuple_id)
                    return tup
        raise StockDepletedError(f"final tuples for member {member_id!r} depleted")

    def checkout_initial_by_id(self, tuple_id: bytes, epoch: bytes) -> InitialTuple:
        with self._lock:
            tup = self._initial.get(tuple_id)
            if tup is None or tup.consumed or tup.epoch != epoch:
                raise StockDepletedError("initial preprocessing tuples depleted")
            tup.consumed = True
            self._journal_consume(_KIND_INITIAL, tup.tuple_id)
            return tup

    def checkout_final_by_id(self, tuple_id: bytes, member_id: str,
                             epoch: bytes) -> FinalTuple:
        with self._lock:
            tup = self._final.get(tuple_id)
            if (tup is None or tup.consumed or tup.member_id != member_id
                    or tup.epoch != epoch):
                raise StockDepletedError(f"final tuples for member {member_id!r} depleted")
            tup.consumed = True
            self._journal_consume(_KIND_FINAL, tup.tuple_id)
            return tup

    def available_initial_ids(self, epoch: bytes, limit: int = 64) -> list[bytes]:
        with self._lock:
            out = [
                t.tuple_id
                for t in self._initial.values()
                if not t.consumed and t.epoch == epoch
            ]
            return sorted(out)[:limit]

    def available_final_ids(self, member_id: str, epoch: bytes,
                            limit: int = 16) -> list[bytes]:
        with self._lock:
            out = [
                t.tuple_id
                for t in self._final.values()
                if not t.consumed and t.member_id == member_id and t.epoch == epoch
            ]
            return sorted(out)[:limit]

    def initial_stock(self, epoch: bytes) -> int:
        with self._lock:
            return sum(
                1 for t in self._initial.values() if not t.consumed and t.epoch == epoch
            )

    def final_stock(self, member_id: str, epoch: bytes) -> int:
        with self._lock:
            return sum(
                1
                for t in self._final.values()
                if not t.consumed and t.member_id == member_id and t.epoch == epoch
            )

    def consumed_ids(self) -> set[tuple[int, bytes]]:
        with self._lock:
            return set(self._consumed)

    def initial_record(self, tuple_id: bytes) -> Optional[InitialTuple]:
        with self._lock:
            return self._initial.get(tuple_id)

    def close(self) -> None:
        for handle in self._files.values():
            handle.close()
        self._files = {}


# --- per-party phase environment ----------------------------------------------

@dataclass
class PhaseEnv:
    """Everything one party's protocol thread needs to run a phase."""

    party_id: int
    config: ProtocolConfig
    epoch: bytes
    tuple_store: TupleStore
    triple_source: object  # TripleSource view for this party
    key_records: dict = field(default_factory=dict)
    mac_key: Optional[MacKeyShare] = None
    rng: object = None


@dataclass
class SignResult:
    signature: Signature
    tuple_id: bytes
    r_point: GroupPoint
    point_ops_online: int       # curve ops from online entry to s reconstructed
    point_ops_share_step: int   # curve ops between R available and s-open start


# --- phase 1: key generation ----------------------------------------------------

def keygen(env: PhaseEnv, session, member_id: str,
           timings: Optional[dict] = None) -> KeyShareRecord:
    """Generate [sk] for a member and jointly open pk = sk * G.

    Every party contributes locally sampled randomness; the full secret key
    never exists in one place.  Under the authenticated scheme each local
    contribution is bound to MAC shares via a dealer input mask.  `timings`,
    when given, receives the secret-share and public-open millisecond splits.
    """
    cfg = env.config
    scheme = cfg.scheme
    participants = session.participants
    t_start = time.perf_counter()

    if scheme.is_shamir:
        # each party deals a random polynomial; [sk] is the sum of the deals
        contribution = FieldElement.random(env.rng)
        my_deal = deal(scheme, contribution, len(participants), cfg.t,
                       env.rng, owners=participants)
        by_owner = {s.owner: s for s in my_deal}
        payloads = {peer: by_owner[peer].to_bytes() for peer in session.peers}
        replies = session.run_round(payloads)
        sk_share = by_owner[env.party_id]
        try:
            for blob in replies.values():
                sk_share = share_add(sk_share, Share.from_bytes(blob))
        except Exception:
            session.abort("malformed key share payload")
    elif scheme.has_mac:
        # authenticated input: for each party's local sample x_i, consume a
        # dealer mask (m_i revealed to party i), broadcast eps_i = x_i - m_i,
        # and set [x_i] = [m_i] + eps_i; [sk] = sum_i [x_i]
        masks = {
            owner: env.triple_source.next_input_mask(scheme, owner)
            for owner in participants
        }
        my_sample = FieldElement.random(env.rng)
        my_eps = my_sample - masks[env.party_id].cleartext
        replies = session.broadcast(my_eps.to_bytes())
        eps = {env.party_id: my_eps}
        try:
            for peer, blob in replies.items():
                eps[peer] = FieldElement.from_bytes(blob)
        except Exception:
            session.abort("malformed key input payload")
        sk_share = None
        for owner in participants:
            masked = share_scale_add(
                masks[owner].share, FieldElement.one(), eps[owner], env.mac_key
            )
            sk_share = masked if sk_share is None else share_add(sk_share, masked)
    else:
        # plain additive: local samples are already an additive sharing
        sk_share = Share(scheme, env.party_id, FieldElement.random(env.rng))

    t_secret = time.perf_counter()
    pk = session.open_point(scalar_mul(sk_share.value, GENERATOR))
    if pk.is_identity():
        raise ProtocolAbort("degenerate public key")
    t_public = time.perf_counter()
    if timings is not None:
        timings["secret_ms"] = (t_secret - t_start) * 1000.0
        timings["public_ms"] = (t_public - t_secret) * 1000.0
    record = KeyShareRecord(member_id, sk_share, pk, env.epoch)
    env.key_records[member_id] = record
    return record


# --- phase 2: member-independent preprocessing -----------------------------------

def preprocess_independent(env: PhaseEnv, session, count: int) -> list[InitialTuple]:
    """Produce `count` initial tuples from fresh triples.

    Per triple (a, b, c): open c, set [1/k] := [a] and the k*G share to
    (b_i * 1/c) * G, so k = 1/a.  Opened c = 0 discards the triple; after
    three batch attempts still short, error out (a zero product is a ~2/p
    event, so repetition indicates a rigged or broken dealer).
    """
    cfg = env.config
    produced: list[InitialTuple] = []
    attempts = 0
    while len(produced) < count:
        attempts += 1
        if attempts > DEGENERATE_RETRY_BUDGET:
            raise TecdsaError("degenerate preprocessing triples (c = 0) persist")
        need = count - len(produced)
        triples = [env.triple_source.next_triple(cfg.scheme) for _ in range(need)]
        for tr in triples:
            tr.mark_consumed()
        opened_c = session.open_field_batch([tr.c for tr in triples])
        session.run_mac_check()  # authenticate the c opens before using them
        for tr, c in zip(triples, opened_c):
            if c.is_zero():
                continue
            c_inv = c.inv()
            point_share = scalar_mul(tr.b.value * c_inv, GENERATOR)
            tup = InitialTuple(
                tuple_id=tr.triple_id,
                epoch=env.epoch,
                k_point_share=point_share,
                k_inv_share=tr.a,
            )
            env.tuple_store.add_initial(tup)
            produced.append(tup)
    return produced


# --- phase 3: member-dependent preprocessing --------------------------------------

def preprocess_dependent(env: PhaseEnv, session, member_id: str,
                         count: int) -> list[FinalTuple]:
    """Bind `count` initial tuples to a member: [sk/k] = beaver([sk], [1/k]).

    Each initial tuple is consumed (durably) before its Beaver messages are
    sent; one fresh triple is spent per final tuple.  With precompute_r the
    R point is opened here so the online phase stays free of curve work.
    """
    cfg = env.config
    record = env.key_records.get(member_id)
    if record is None:
        raise TecdsaError(f"no key shares for member {member_id!r}")

    # Agree on which unconsumed initial tuples this run binds, so stores left
    # asymmetric by a crash can never pair up different instance keys.
    chosen = _agree_on_tuples(
        session, env.tuple_store.available_initial_ids(env.epoch, limit=count + 16),
        count, "initial preprocessing tuples depleted",
    )
    initials = [env.tuple_store.checkout_initial_by_id(tid, env.epoch) for tid in chosen]
    triples = [env.triple_source.next_triple(cfg.scheme) for _ in range(count)]

    diff_shares: list[Share] = []
    for init, tr in zip(initials, triples):
        d, e = beaver_diffs(record.sk_share, init.k_inv_share, tr)
        diff_shares.extend([d, e])
    opened = session.open_field_batch(diff_shares)
    session.run_mac_check()

    finals = []
    for idx, (init, tr) in enumerate(zip(initials, triples)):
        d, e = opened[2 * idx], opened[2 * idx + 1]
        sk_over_k = beaver_combine(tr, d, e, env.mac_key)
        finals.append(
            FinalTuple(init.tuple_id, env.epoch, member_id,
                       init.k_point_share, init.k_inv_share, sk_over_k)
        )

    if cfg.precompute_r:
        r_points = session.open_point_batch([f.k_point_share for f in finals])
        kept = []
        for f, r in zip(finals, r_points):
            if r.is_identity() or FieldElement(r.x).is_zero():
                continue  # unusable instance key; already consumed, just drop
            f.r_point = r
            kept.append(f)
        finals = kept

    for f in finals:
        env.tuple_store.add_final(f)
    return finals


def _agree_on_tuples(session, my_ids: Sequence[bytes], count: int,
                     depleted_message: str) -> list[bytes]:
    """One round agreeing on `count` tuple ids every participant still holds."""
    payload = b"".join(my_ids)
    replies = session.broadcast(payload)
    common = set(my_ids)
    for blob in replies.values():
        if len(blob) % 16:
            session.abort("malformed tuple id payload")
        common &= {blob[i * 16:(i + 1) * 16] for i in range(len(blob) // 16)}
    if len(common) < count:
        raise StockDepletedError(depleted_message)
    return sorted(common)[:count]


# --- phase 4: online signing ------------------------------------------------------

def sign_online(env: PhaseEnv, session, member_id: str, message: bytes) -> SignResult:
    """Assemble one signature from a final tuple; field operations only.

    The share step computes [s] = H(M) * [1/k] + r_x * [sk/k] locally, then s
    is opened (with the deferred MAC check for the authenticated scheme).
    Every party verifies the assembled signature against the member's public
    key before accepting it; a failure aborts rather than emitting bad bytes.
    """
    cfg = env.config
    record = env.key_records.get(member_id)
    if record is None:
        raise TecdsaError(f"no key shares for member {member_id!r}")
    h = hash_to_scalar(message)

    ops_entry = OP_COUNTER.total()
    for _ in range(DEGENERATE_RETRY_BUDGET):
        chosen = _agree_on_tuples(
            session, env.tuple_store.available_final_ids(member_id, env.epoch),
            1, f"final tuples for member {member_id!r} depleted",
        )
        tup = env.tuple_store.checkout_final_by_id(chosen[0], member_id, env.epoch)
        if tup.r_point is not None:
            r_point = tup.r_point
        else:
            r_point = session.open_point(tup.k_point_share)
        if r_point.is_identity():
            continue
        r_x = FieldElement(r_point.x)
        if r_x.is_zero():
            continue

        ops_r_done = OP_COUNTER.total()
        s_share = share_add(
            share_scale_add(tup.k_inv_share, h, FieldElement.zero(), env.mac_key),
            share_scale_add(tup.sk_over_k_share, r_x, FieldElement.zero(), env.mac_key),
        )
        ops_before_open = OP_COUNTER.total()
        s = session.open_field(s_share)
        session.run_mac_check()
        ops_s_done = OP_COUNTER.total()
        if s.is_zero():
            continue

        signature = Signature(r_x, s)
        if not ecdsa_verify(record.pk, message, signature):
            session.abort("signature invalid")
        return SignResult(
            signature=signature,
            tuple_id=tup.tuple_id,
            r_point=r_point,
            point_ops_online=ops_s_done - ops_entry,
            point_ops_share_step=ops_before_open - ops_r_done,
        )
    raise TecdsaError("degenerate instance keys persist across retry budget")
