"""Party nodes and the five-node signing service.

A PartyNode owns one RIR's durable state: tuple store, key-share records,
member consent registry, published-object store, CRL state, intervention
tickets, and an append-only audit log.  The LocalCluster wires five nodes
over the in-process transport and drives the protocol phases, one thread
per party per session.

The signing workflow follows the consent-gated shape: the member's consent
token reaches every node out of band; the initiating node distributes the
message; every node independently verifies consent and content before the
cryptographic phase runs.  A failed check aborts by default, or raises an
intervention ticket under the flag policy, completing only after a quorum
of recorded manual approvals.
"""

from __future__ import annotations

import hashlib
import json
import random
import secrets
import threading
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional, Sequence

from ..algebra import GroupPoint
from ..preprocessing import TrustedDealer
from ..rpki import (
    Action,
    ConsentToken,
    ConsentVerdict,
    CrlRecord,
    PayloadKind,
    PayloadRecord,
    SignedObject,
    TrustAnchorLocator,
    decode_canonical,
    encode_canonical,
    verify_consent,
)
from ..sharing import MacKeyShare, ProtocolAbort, Share, generate_mac_keys
from ..tecdsa import (
    KeyShareRecord,
    PhaseEnv,
    ProtocolConfig,
    SignResult,
    StockDepletedError,
    TecdsaError,
    TupleStore,
    keygen,
    preprocess_dependent,
    preprocess_independent,
    sign_online,
)
from .session import FaultPlan, PartySession, SessionAbort
from .transport import (
    PHASE_CONTROL,
    PHASE_KEYGEN,
    PHASE_ONLINE,
    PHASE_PREPROCESS_DEPENDENT,
    PHASE_PREPROCESS_INDEPENDENT,
    InProcessHub,
    derive_pair_keys,
)


class CrashError(Exception):
    """Injected failure for restart testing; names the crash point."""


def _derive_seed(seed: int, label: str) -> int:
    """Stable sub-seed derivation (process-independent, unlike hash())."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class CrashPoint:
    """Fires a CrashError the first time the named pipeline step is reached."""

    at: str
    fired: bool = False

    def __call__(self, point: str) -> None:
        if not self.fired and point == self.at:
            self.fired = True
            raise CrashError(point)


@dataclass
class ConsentPolicy:
    """Per-action abort-vs-flag policy plus replenishment parameters.

    The replenishment batch defaults to the 1000-tuple amortization unit the
    benchmarks use; scale it down for interactive demos.
    """

    flag_on_failed_consent: bool = False
    flag_eligible: tuple[Action, ...] = (Action.REVOKE, Action.TRANSFER)
    consume_tuple_on_failed_consent: bool = True
    low_watermark: int = 100
    batch_size: int = 1000
    auto_replenish: bool = True


@dataclass
class InterventionTicket:
    """A flagged request awaiting manual approvals (one copy per party)."""

    ticket_id: str
    member_id: str
    action: Action
    reason: str  # consent-missing | consent-invalid
    created_at: float
    payload_blobs: list[bytes]
    approved: bool = False
    completed: bool = False


@dataclass
class SignRequest:
    member_id: str
    action: Action
    payloads: list[PayloadRecord]
    consent: Optional[ConsentToken] = None
    transfer_id: Optional[bytes] = None


@dataclass
class SignOutcome:
    status: str  # published | aborted | flagged
    objects: list[SignedObject] = dc_field(default_factory=list)
    ticket_id: Optional[str] = None
    reason: Optional[str] = None
    sign_results: list[SignResult] = dc_field(default_factory=list)


_KIND_FOR_RECORD = {
    "RoaRecord": PayloadKind.ROA,
    "CrlRecord": PayloadKind.CRL,
    "EeCertRecord": PayloadKind.CERT,
}


class PartyNode:
    """One RIR node: stores, registries, audit log, and durable state."""

    def __init__(self, party_id: int, config: ProtocolConfig,
                 data_dir: Optional[str], epoch: bytes,
                 clock: Callable[[], float] = time.time) -> None:
        self.party_id = party_id
        self.config = config
        self.epoch = epoch
        self.clock = clock
        self.dir = Path(data_dir) if data_dir is not None else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "objects").mkdir(exist_ok=True)

        self.tuple_store = TupleStore(str(self.dir) if self.dir else None, party_id)
        self.key_records: dict[str, KeyShareRecord] = {}
        self.mac_key: Optional[MacKeyShare] = None
        self.member_registry: dict[str, GroupPoint] = {}
        self.consent_inbox: dict[str, ConsentToken] = {}
        self.objects: dict[str, SignedObject] = {}  # filename -> object
        self.crl_state: dict[str, tuple[int, ...]] = {}
        self.tickets: dict[str, InterventionTicket] = {}
        self.retired_epochs: set[bytes] = set()
        self.tainted_epochs: set[bytes] = set()
        self.audit_seq = 0
        self._audit_lines: list[str] = []
        self.rng: Optional[random.Random] = None
        self.triple_source = None
        self.fault_plan: Optional[FaultPlan] = None
        self._lock = threading.Lock()
        if self.dir is not None:
            self._load()

    # -- persistence --------------------------------------------------------

    def _state_path(self) -> Path:
        return self.dir / "state.json"

    def _load(self) -> None:
        state = self._state_path()
        if state.exists():
            blob = json.loads(state.read_text())
            self.retired_epochs = {bytes.fromhex(e) for e in blob.get("retired", [])}
            self.tainted_epochs = {bytes.fromhex(e) for e in blob.get("tainted", [])}
            if blob.get("mac_alpha"):
                from ..algebra import FieldElement

                self.mac_key = MacKeyShare(
                    self.party_id, FieldElement(int(blob["mac_alpha"], 16))
                )
        keys = self.dir / "keys.jsonl"
        if keys.exists():
            for line in keys.read_text().splitlines():
                rec = json.loads(line)
                self.key_records[rec["member"]] = KeyShareRecord(
                    rec["member"],
                    Share.from_bytes(bytes.fromhex(rec["share"])),
                    GroupPoint.from_bytes(bytes.fromhex(rec["pk"])),
                    bytes.fromhex(rec["epoch"]),
                )
        members = self.dir / "members.json"
        if members.exists():
            for mid, pk_hex in json.loads(members.read_text()).items():
                self.member_registry[mid] = GroupPoint.from_bytes(bytes.fromhex(pk_hex))
        crl = self.dir / "crl.json"
        if crl.exists():
            self.crl_state = {
                k: tuple(v) for k, v in json.loads(crl.read_text()).items()
            }
        tickets = self.dir / "tickets.jsonl"
        if tickets.exists():
            for line in tickets.read_text().splitlines():
                rec = json.loads(line)
                ticket = InterventionTicket(
                    rec["ticket_id"], rec["member"], Action[rec["action"]],
                    rec["reason"], rec["created_at"],
                    [bytes.fromhex(b) for b in rec["payloads"]],
                    rec["approved"], rec["completed"],
                )
                self.tickets[ticket.ticket_id] = ticket
        objects_dir = self.dir / "objects"
        for path in sorted(objects_dir.glob("*.obj")):
            self.objects[path.name] = SignedObject.from_bytes(path.read_bytes())
        audit = self.dir / "audit.jsonl"
        if audit.exists():
            self.audit_seq = len(audit.read_text().splitlines())

    def _save_state(self) -> None:
        if self.dir is None:
            return
        blob = {
            "retired": [e.hex() for e in sorted(self.retired_epochs)],
            "tainted": [e.hex() for e in sorted(self.tainted_epochs)],
            "mac_alpha": f"{self.mac_key.alpha_i.value:x}" if self.mac_key else None,
        }
        self._state_path().write_text(json.dumps(blob))

    def _persist_ticket(self, ticket: InterventionTicket) -> None:
        if self.dir is None:
            return
        rec = {
            "ticket_id": ticket.ticket_id,
            "member": ticket.member_id,
            "action": ticket.action.name,
            "reason": ticket.reason,
            "created_at": ticket.created_at,
            "payloads": [b.hex() for b in ticket.payload_blobs],
            "approved": ticket.approved,
            "completed": ticket.completed,
        }
        with open(self.dir / "tickets.jsonl", "a") as out:
            out.write(json.dumps(rec, sort_keys=True) + "\n")

    def audit(self, event: str, **fields) -> None:
        """Append one audit entry; logical sequence numbers keep logs replayable."""
        with self._lock:
            self.audit_seq += 1
            entry = {"seq": self.audit_seq, "event": event}
            entry.update(fields)
            line = json.dumps(entry, sort_keys=True)
            if self.dir is not None:
                with open(self.dir / "audit.jsonl", "a") as out:
                    out.write(line + "\n")
                    out.flush()
            else:
                self._audit_lines.append(line)

    def audit_lines(self) -> list[str]:
        if self.dir is not None:
            path = self.dir / "audit.jsonl"
            return path.read_text().splitlines() if path.exists() else []
        return list(self._audit_lines)

    # -- registries ----------------------------------------------------------

    def register_member(self, member_id: str, consent_pk: GroupPoint) -> None:
        self.member_registry[member_id] = consent_pk
        if self.dir is not None:
            (self.dir / "members.json").write_text(
                json.dumps({m: pk.to_bytes().hex()
                            for m, pk in self.member_registry.items()},
                           sort_keys=True)
            )

    def submit_consent(self, token: ConsentToken) -> None:
        self.consent_inbox[token.member_id] = token

    def store_key_record(self, record: KeyShareRecord) -> None:
        self.key_records[record.member_id] = record
        if self.dir is not None:
            rec = {
                "member": record.member_id,
                "share": record.sk_share.to_bytes().hex(),
                "pk": record.pk.to_bytes().hex(),
                "epoch": record.epoch.hex(),
            }
            with open(self.dir / "keys.jsonl", "a") as out:
                out.write(json.dumps(rec, sort_keys=True) + "\n")

    def env(self) -> PhaseEnv:
        if self.epoch in self.retired_epochs:
            raise TecdsaError("epoch retired after a failed authentication check")
        return PhaseEnv(
            party_id=self.party_id,
            config=self.config,
            epoch=self.epoch,
            tuple_store=self.tuple_store,
            triple_source=self.triple_source,
            key_records=self.key_records,
            mac_key=self.mac_key,
            rng=self.rng,
        )

    # -- publication -----------------------------------------------------------

    def object_filename(self, obj: SignedObject) -> str:
        record = obj.record()
        if isinstance(record, CrlRecord):
            return f"crl-{record.issuer_id}-{record.this_update}.obj"
        return f"{obj.payload_kind.name.lower()}-{record.serial}.obj"

    def publish_batch(self, objects: Sequence[SignedObject],
                      ticket_id: Optional[str] = None) -> None:
        """Atomically publish a batch: all files, CRL merge, manifest, one audit entry."""
        names = []
        for obj in objects:
            name = self.object_filename(obj)
            names.append(name)
            self.objects[name] = obj
            record = obj.record()
            if isinstance(record, CrlRecord):
                merged = sorted(set(self.crl_state.get(record.issuer_id, ()))
                                | set(record.revoked_serials))
                self.crl_state[record.issuer_id] = tuple(merged)
        if self.dir is not None:
            for name, obj in zip(names, objects):
                (self.dir / "objects" / name).write_bytes(obj.to_bytes())
            (self.dir / "crl.json").write_text(
                json.dumps({k: list(v) for k, v in sorted(self.crl_state.items())})
            )
            manifest = "".join(
                f"{name} {self.objects[name].digest.hex()}\n"
                for name in sorted(self.objects)
            )
            (self.dir / "objects" / "manifest.txt").write_text(manifest)
        self.audit(
            "published",
            digests=[obj.digest.hex() for obj in objects],
            ticket=ticket_id,
        )

    def revoked_serials(self) -> set[int]:
        out: set[int] = set()
        for serials in self.crl_state.values():
            out.update(serials)
        return out

    def export_tal(self, trust_anchor_member: str = "#ta") -> TrustAnchorLocator:
        record = self.key_records.get(trust_anchor_member)
        if record is None:
            raise TecdsaError(f"no trust anchor key at party {self.party_id}")
        return TrustAnchorLocator(
            f"rsync://rir{self.party_id}.example/repository/", record.pk
        )

    def close(self) -> None:
        self.tuple_store.close()


class LocalCluster:
    """Five RIR nodes over the in-process transport, driven phase by phase.

    With a seed, every sampling source is derived deterministically, so two
    runs of the same scenario produce byte-identical audit logs and signed
    objects (zero-latency transport assumed).
    """

    def __init__(
        self,
        config: ProtocolConfig,
        data_dir: Optional[str] = None,
        seed: Optional[int] = None,
        latency_ms: Optional[dict] = None,
        participants: Optional[Sequence[int]] = None,
        policy: Optional[ConsentPolicy] = None,
        timeout: float = 10.0,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.config = config
        self.policy = policy or ConsentPolicy()
        self.timeout = timeout
        self.clock = clock
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.participants = sorted(participants) if participants else list(
            range(1, config.n + 1)
        )
        self.n_live = len(self.participants)

        pair_secret, epoch, boots = self._load_or_create_cluster_state(seed)
        self.epoch = epoch
        self.pair_keys = derive_pair_keys(pair_secret, config.n)
        self.hub = InProcessHub(self.pair_keys, latency_ms)

        seeded = seed is not None
        # the dealer stream is salted with the boot count so a restart can
        # never replay tuple ids that an earlier boot already persisted
        self._dealer_rng = (
            random.Random(_derive_seed(seed, f"dealer-boot{boots}")) if seeded else None
        )

        self.nodes: dict[int, PartyNode] = {}
        for party in self.participants:
            node_dir = str(self.data_dir / f"party{party}") if self.data_dir else None
            node = PartyNode(party, config, node_dir, self.epoch, clock)
            node.rng = random.Random(_derive_seed(seed, f"party{party}")) if seeded else None
            self.nodes[party] = node

        # MAC key shares are epoch material: restarts reuse the persisted
        # shares, and the dealer must authenticate under exactly those.
        mac_keys = None
        if config.scheme.has_mac:
            mac_rng = random.Random(_derive_seed(seed, "mac")) if seeded else None
            fresh = {
                mk.owner: mk
                for mk in generate_mac_keys(config.n, mac_rng)
                if mk.owner in self.participants
            }
            mac_keys = []
            for party in self.participants:
                node = self.nodes[party]
                if node.mac_key is None:
                    node.mac_key = fresh[party]
                    node._save_state()
                mac_keys.append(node.mac_key)

        self.dealer = TrustedDealer(
            self.n_live, config.t, self._dealer_rng, mac_keys, self.epoch,
            owners=self.participants,
        )
        for party in self.participants:
            self.nodes[party].triple_source = self.dealer.view_for(party)

        self._session_counter = 0
        self._session_lock = threading.Lock()
        self._member_locks: dict[str, threading.Lock] = {}
        self._member_locks_guard = threading.Lock()
        self._preprocess_lock = threading.Lock()
        self._initiator_counter = 0
        self.crash_hook: Optional[Callable[[str], None]] = None

    # -- setup helpers ----------------------------------------------------------

    def _load_or_create_cluster_state(self, seed) -> tuple[bytes, bytes, int]:
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            state = self.data_dir / "cluster.json"
            if state.exists():
                blob = json.loads(state.read_text())
                boots = blob.get("boots", 1) + 1
                blob["boots"] = boots
                state.write_text(json.dumps(blob))
                return (
                    bytes.fromhex(blob["pair_secret"]),
                    bytes.fromhex(blob["epoch"]),
                    boots,
                )
        if seed is not None:
            setup_rng = random.Random(_derive_seed(seed, "setup"))
            pair_secret = setup_rng.getrandbits(256).to_bytes(32, "big")
            epoch = setup_rng.getrandbits(128).to_bytes(16, "big")
        else:
            pair_secret = secrets.token_bytes(32)
            epoch = secrets.token_bytes(16)
        if self.data_dir is not None:
            (self.data_dir / "cluster.json").write_text(
                json.dumps(
                    {"pair_secret": pair_secret.hex(), "epoch": epoch.hex(), "boots": 1}
                )
            )
        return pair_secret, epoch, 1

    def _member_lock(self, member_id: str) -> threading.Lock:
        with self._member_locks_guard:
            if member_id not in self._member_locks:
                self._member_locks[member_id] = threading.Lock()
            return self._member_locks[member_id]

    def _maybe_crash(self, point: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point)

    def _next_session_id(self, phase: int) -> bytes:
        with self._session_lock:
            self._session_counter += 1
            counter = self._session_counter
        return hashlib.sha256(
            self.epoch + bytes([phase]) + counter.to_bytes(8, "big")
        ).digest()[:16]

    def _require_liveness(self) -> None:
        cfg = self.config
        if cfg.scheme.requires_all_parties and self.n_live < cfg.n:
            raise SessionAbort("party unavailable")
        if self.n_live < cfg.quorum:
            raise SessionAbort("party unavailable")

    # -- phase runner -------------------------------------------------------------

    def _run_phase(self, phase: int, fn, timeout: Optional[float] = None):
        """Execute fn(node, session) on every live party, one thread per party."""
        self._require_liveness()
        session_id = self._next_session_id(phase)
        results: dict[int, object] = {}
        errors: dict[int, BaseException] = {}

        def runner(party: int) -> None:
            node = self.nodes[party]
            session = PartySession(
                party_id=party,
                participants=self.participants,
                session_id=session_id,
                phase=phase,
                endpoint=self.hub.endpoint(party),
                scheme=self.config.scheme,
                t=self.config.t,
                timeout=timeout if timeout is not None else self.timeout,
                mac_key=node.mac_key,
                rng=node.rng,
                fault_plan=node.fault_plan,
            )
            try:
                results[party] = fn(node, session)
            except BaseException as exc:  # collected and re-raised below
                errors[party] = exc

        threads = [
            threading.Thread(target=runner, args=(p,), daemon=True)
            for p in self.participants
        ]
        for th in threads:
            th.start()
        for th in threads:
            th.join()

        if errors:
            root = self._root_error(errors)
            if isinstance(root, ProtocolAbort) and "MAC check failed" in str(root):
                self.retire_epoch()
            raise root
        return results

    @staticmethod
    def _root_error(errors: dict[int, BaseException]) -> BaseException:
        ranked = sorted(
            errors.values(),
            key=lambda e: (isinstance(e, SessionAbort) and str(e).startswith("peer "),),
        )
        return ranked[0]

    def retire_epoch(self) -> None:
        for node in self.nodes.values():
            node.retired_epochs.add(self.epoch)
            node._save_state()
            node.audit("epoch_retired", epoch=self.epoch.hex())

    # -- protocol phases ------------------------------------------------------------

    def keygen(self, member_id: str) -> GroupPoint:
        if len(member_id.encode()) > 16:
            raise TecdsaError(f"member id longer than 16 bytes: {member_id!r}")
        if any(member_id in n.key_records for n in self.nodes.values()):
            raise TecdsaError(f"member {member_id!r} already has a live key")

        def fn(node: PartyNode, session: PartySession) -> KeyShareRecord:
            record = keygen(node.env(), session, member_id)
            node.store_key_record(record)
            node.audit("keygen", member=member_id, pk=record.pk.to_bytes().hex())
            return record

        results = self._run_phase(PHASE_KEYGEN, fn)
        pks = {r.pk.to_bytes() for r in results.values()}
        if len(pks) != 1:
            raise ProtocolAbort("public key disagreement")
        self._maybe_crash("after_keygen")
        return next(iter(results.values())).pk

    def keygen_timed(self, member_id: str) -> dict:
        """Key generation reporting the slowest party's phase-split timings."""
        per_party: dict[int, dict] = {p: {} for p in self.participants}

        def fn(node: PartyNode, session: PartySession) -> KeyShareRecord:
            record = keygen(node.env(), session, member_id,
                            timings=per_party[node.party_id])
            node.store_key_record(record)
            node.audit("keygen", member=member_id, pk=record.pk.to_bytes().hex())
            return record

        self._run_phase(PHASE_KEYGEN, fn)
        return {
            "secret_ms": max(t["secret_ms"] for t in per_party.values()),
            "public_ms": max(t["public_ms"] for t in per_party.values()),
        }

    def preprocess_independent(self, count: int) -> int:
        with self._preprocess_lock:
            def fn(node: PartyNode, session: PartySession):
                return preprocess_independent(node.env(), session, count)

            results = self._run_phase(PHASE_PREPROCESS_INDEPENDENT, fn)
        self._maybe_crash("after_preprocess_independent")
        return len(next(iter(results.values())))

    def preprocess_dependent(self, member_id: str, count: int) -> int:
        with self._preprocess_lock:
            def fn(node: PartyNode, session: PartySession):
                return preprocess_dependent(node.env(), session, member_id, count)

            results = self._run_phase(PHASE_PREPROCESS_DEPENDENT, fn)
        self._maybe_crash("after_preprocess_dependent")
        return len(next(iter(results.values())))

    def run_signing(self, member_id: str, message: bytes,
                    return_all: bool = False):
        """The pure cryptographic online phase (consent checks live upstream)."""
        if self.epoch in next(iter(self.nodes.values())).tainted_epochs:
            if not self.config.test_mode:
                raise TecdsaError("epoch tainted by test-mode reconstruction")

        def fn(node: PartyNode, session: PartySession):
            return sign_online(node.env(), session, member_id, message)

        results = self._run_phase(PHASE_ONLINE, fn)
        sigs = {r.signature.to_bytes() for r in results.values()}
        if len(sigs) != 1:
            raise ProtocolAbort("signature disagreement")
        self._maybe_crash("after_sign")
        if return_all:
            return results
        return results[self.participants[0]]

    # -- stock management --------------------------------------------------------

    def initial_stock(self) -> int:
        return min(
            n.tuple_store.initial_stock(self.epoch) for n in self.nodes.values()
        )

    def final_stock(self, member_id: str) -> int:
        return min(
            n.tuple_store.final_stock(member_id, self.epoch)
            for n in self.nodes.values()
        )

    def replenish(self, member_id: Optional[str] = None,
                  low_watermark: Optional[int] = None,
                  batch_size: Optional[int] = None) -> dict:
        """Refill preprocessing stock below the low watermark, with backoff."""
        watermark = low_watermark if low_watermark is not None else self.policy.low_watermark
        batch = batch_size if batch_size is not None else self.policy.batch_size
        made = {"initial": 0, "final": 0}
        members = [member_id] if member_id else sorted(
            next(iter(self.nodes.values())).key_records
        )
        need_final = sum(
            batch for m in members if self.final_stock(m) < watermark
        )
        if self.initial_stock() < watermark + need_final:
            made["initial"] = self._retry_phase(
                lambda: self.preprocess_independent(watermark + need_final)
            )
        for m in members:
            if self.final_stock(m) < watermark:
                made["final"] += self._retry_phase(
                    lambda m=m: self.preprocess_dependent(m, batch)
                )
        return made

    def _retry_phase(self, fn, attempts: int = 3):
        last: Optional[BaseException] = None
        for i in range(attempts):
            try:
                return fn()
            except ProtocolAbort as exc:
                last = exc
                time.sleep(0.01 * (2 ** i))
        raise TecdsaError(f"replenishment failed after {attempts} attempts: {last}")

    # -- consent-gated signing workflow --------------------------------------------

    def submit_consent(self, token: ConsentToken) -> None:
        for node in self.nodes.values():
            node.submit_consent(token)

    def register_member(self, member_id: str, consent_pk: GroupPoint) -> None:
        for node in self.nodes.values():
            node.register_member(member_id, consent_pk)

    def handle_sign_request(self, request: SignRequest) -> SignOutcome:
        with self._member_lock(request.member_id):
            return self._handle_sign_request_locked(request)

    def _handle_sign_request_locked(self, request: SignRequest) -> SignOutcome:
        if not request.payloads:
            return SignOutcome("aborted", reason="empty request")
        if request.member_id not in self.nodes[self.participants[0]].key_records:
            return SignOutcome("aborted", reason="no signing key for member")
        self._maybe_crash("before_consent")
        initiator = self.participants[self._initiator_counter % self.n_live]
        self._initiator_counter += 1
        payload_blobs = [encode_canonical(rec) for rec in request.payloads]
        digest = hashlib.sha256(b"".join(payload_blobs)).hexdigest()

        def control_fn(node: PartyNode, session: PartySession):
            # step 3: the initiator distributes the message to be signed
            blob = b"".join(
                len(b).to_bytes(4, "big") + b for b in payload_blobs
            ) if session.party_id == initiator else b""
            replies = session.broadcast(blob)
            raw = blob if session.party_id == initiator else replies[initiator]
            records, off = [], 0
            while off < len(raw):
                ln = int.from_bytes(raw[off:off + 4], "big")
                records.append(decode_canonical(raw[off + 4:off + 4 + ln]))
                off += 4 + ln
            # step 4: every party checks content and consent independently
            token = node.consent_inbox.get(request.member_id)
            verdict = verify_consent(
                token, request.action, records, node.member_registry, node.clock()
            )
            node.audit(
                "consent_verdict",
                member=request.member_id,
                action=request.action.name,
                digest=digest,
                objects=[
                    hashlib.sha256(encode_canonical(r)).hexdigest() for r in records
                ],
                verdict=verdict.value,
            )
            votes = session.broadcast(verdict.value.encode())
            ok_votes = sum(1 for v in votes.values() if v == b"ok")
            if verdict is ConsentVerdict.OK:
                ok_votes += 1
            return verdict, ok_votes

        try:
            control = self._run_phase(PHASE_CONTROL, control_fn)
        except ProtocolAbort as exc:
            return SignOutcome("aborted", reason=str(exc))

        my_verdict, ok_votes = control[initiator]
        quorum = self.config.quorum
        if ok_votes < quorum:
            reason = (
                "consent-missing"
                if my_verdict is ConsentVerdict.MISSING
                else "consent-invalid"
            )
            if self.policy.consume_tuple_on_failed_consent:
                for node in self.nodes.values():
                    try:
                        node.tuple_store.checkout_final(request.member_id, self.epoch)
                    except StockDepletedError:
                        pass
            if (
                self.policy.flag_on_failed_consent
                and request.action in self.policy.flag_eligible
            ):
                ticket_id = hashlib.sha256(
                    digest.encode() + request.member_id.encode()
                ).hexdigest()[:16]
                for node in self.nodes.values():
                    ticket = InterventionTicket(
                        ticket_id, request.member_id, request.action, reason,
                        node.clock(), list(payload_blobs),
                    )
                    node.tickets[ticket_id] = ticket
                    node._persist_ticket(ticket)
                    node.audit("ticket_created", ticket=ticket_id, reason=reason)
                return SignOutcome("flagged", ticket_id=ticket_id, reason=reason)
            for node in self.nodes.values():
                node.audit("sign_aborted", member=request.member_id,
                           digest=digest, reason=reason)
            return SignOutcome("aborted", reason=reason)

        self._maybe_crash("after_consent")
        outcome = self._sign_and_publish(request.member_id, payload_blobs,
                                         request.payloads, ticket_id=None)
        if outcome.status == "published":
            for node in self.nodes.values():
                node.consent_inbox.pop(request.member_id, None)
        return outcome

    def _sign_and_publish(self, member_id: str, payload_blobs: list[bytes],
                          records: list[PayloadRecord],
                          ticket_id: Optional[str]) -> SignOutcome:
        objects: list[SignedObject] = []
        sign_results: list[SignResult] = []
        pk = self.nodes[self.participants[0]].key_records[member_id].pk
        for idx, (blob, record) in enumerate(zip(payload_blobs, records)):
            if self.final_stock(member_id) < 1:
                if not self.policy.auto_replenish:
                    raise StockDepletedError(
                        f"final tuples for member {member_id!r} depleted"
                    )
                self.replenish(member_id)
            try:
                result = self.run_signing(member_id, blob)
            except ProtocolAbort as exc:
                for node in self.nodes.values():
                    node.audit("sign_aborted", member=member_id, reason=str(exc))
                return SignOutcome("aborted", reason=str(exc))
            sign_results.append(result)
            kind = _KIND_FOR_RECORD[type(record).__name__]
            objects.append(SignedObject(kind, blob, result.signature, pk))
            if idx + 1 < len(payload_blobs):
                self._maybe_crash("between_transfer_signatures")
        self._maybe_crash("before_publish")
        for node in self.nodes.values():
            node.publish_batch(objects, ticket_id=ticket_id)
        self._maybe_crash("after_publish")
        return SignOutcome("published", objects=objects,
                           ticket_id=ticket_id, sign_results=sign_results)

    # -- intervention tickets ----------------------------------------------------

    def approve_ticket(self, ticket_id: str, party: int) -> int:
        node = self.nodes[party]
        ticket = node.tickets.get(ticket_id)
        if ticket is None:
            raise TecdsaError(f"unknown ticket {ticket_id}")
        if not ticket.approved:
            ticket.approved = True
            node._persist_ticket(ticket)
            node.audit("ticket_approved", ticket=ticket_id)
        return self.ticket_approvals(ticket_id)

    def ticket_approvals(self, ticket_id: str) -> int:
        return sum(
            1
            for node in self.nodes.values()
            if ticket_id in node.tickets and node.tickets[ticket_id].approved
        )

    def complete_ticket(self, ticket_id: str) -> SignOutcome:
        """Finish a flagged request once a quorum of approvals is recorded."""
        approvals = self.ticket_approvals(ticket_id)
        needed = self.config.t + 1
        if approvals < needed:
            raise TecdsaError(
                f"ticket {ticket_id} has {approvals} approvals, needs {needed}"
            )
        sample = next(
            node.tickets[ticket_id]
            for node in self.nodes.values()
            if ticket_id in node.tickets
        )
        if sample.completed:
            raise TecdsaError(f"ticket {ticket_id} already completed")
        records = [decode_canonical(b) for b in sample.payload_blobs]
        with self._member_lock(sample.member_id):
            outcome = self._sign_and_publish(
                sample.member_id, sample.payload_blobs, records, ticket_id=ticket_id
            )
        if outcome.status == "published":
            for node in self.nodes.values():
                if ticket_id in node.tickets:
                    node.tickets[ticket_id].completed = True
                    node._persist_ticket(node.tickets[ticket_id])
                    node.audit("ticket_completed", ticket=ticket_id)
        return outcome

    # -- test-mode reconstruction ---------------------------------------------------

    def _require_test_mode(self) -> None:
        if not self.config.test_mode:
            raise TecdsaError("reconstruction requires an explicit test-mode config")
        for node in self.nodes.values():
            node.tainted_epochs.add(self.epoch)
            node._save_state()

    def test_reconstruct_sk(self, member_id: str):
        from ..sharing import open_shares

        self._require_test_mode()
        shares = [
            node.key_records[member_id].sk_share for node in self.nodes.values()
        ]
        return open_shares(shares, self.n_live, self.config.t)

    def test_reconstruct_k(self, tuple_id: bytes):
        from ..sharing import open_shares

        self._require_test_mode()
        shares = []
        for node in self.nodes.values():
            record = node.tuple_store.initial_record(tuple_id)
            if record is None:
                raise TecdsaError("unknown tuple id")
            shares.append(record.k_inv_share)
        return open_shares(shares, self.n_live, self.config.t).inv()

    # -- misc -----------------------------------------------------------------------

    def run_echo_round(self, payload: bytes, mute: Sequence[int] = (),
                       timeout: Optional[float] = None,
                       echo_back: bool = False) -> dict:
        """One broadcast round (optionally followed by an echo), for tests/bench."""
        mute_set = set(mute)

        def fn(node: PartyNode, session: PartySession):
            if node.party_id in mute_set:
                time.sleep((timeout if timeout is not None else self.timeout) + 0.5)
                return {}
            got = session.broadcast(payload)
            if echo_back:
                got = session.broadcast(b"".join(got[p] for p in sorted(got)))
            return got

        return self._run_phase(PHASE_CONTROL, fn, timeout=timeout)

    def set_fault(self, party: int, plan: Optional[FaultPlan]) -> None:
        self.nodes[party].fault_plan = plan

    def close(self) -> None:
        for node in self.nodes.values():
            node.close()


def verify_audit_completeness(cluster: LocalCluster) -> bool:
    """Replay audit logs: every published object digest must be covered, at a
    quorum of parties, by an ok consent verdict over that exact object or by
    a completed intervention ticket."""
    quorum = cluster.config.quorum
    published: set[str] = set()
    for node in cluster.nodes.values():
        for obj in node.objects.values():
            published.add(obj.digest.hex())
    for digest in published:
        covered = 0
        for node in cluster.nodes.values():
            events = [json.loads(line) for line in node.audit_lines()]
            batches = [
                e for e in events if e["event"] == "published" and digest in e["digests"]
            ]
            ok_here = False
            for batch in batches:
                if batch.get("ticket"):
                    ok_here |= any(
                        e["event"] == "ticket_completed"
                        and e["ticket"] == batch["ticket"]
                        for e in events
                    )
                else:
                    ok_here |= any(
                        e["event"] == "consent_verdict"
                        and e["verdict"] == "ok"
                        and digest in e.get("objects", ())
                        for e in events
                    )
            if ok_here:
                covered += 1
        if covered < quorum:
            return False
    return True
