"""Benchmark harness: per-phase timings, throughput, and communication bytes.

Reports the three protocol phases (key generation, preprocessing, online
signing) across the four schemes under two network settings: LAN (zero
latency, in-process) and WAN-sim (the measured inter-region RTT matrix
injected as per-pair one-way delays of RTT/2).

Offline preprocessing here is dealer-based, so preprocessing rows are NOT
comparable to OT-based offline costs; every row carries an explicit
offline_source=dealer label.  Timing of a phase is the wall time until the
last party completes.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

from .runtime import LocalCluster
from .sharing import ProtocolAbort, SchemeId
from .tecdsa import ProtocolConfig

# Inter-region round-trip latencies in milliseconds, measured between the
# five instance regions standing in for the RIR locations:
#   1 Frankfurt (RIPE NCC), 2 N. Virginia (ARIN), 3 Sydney (APNIC),
#   4 Sao Paolo (LACNIC), 5 Mumbai (AFRINIC)
WAN_RTT_MS: dict[tuple[int, int], float] = {
    (1, 2): 85.6,
    (1, 3): 283.2,
    (1, 4): 203.7,
    (1, 5): 114.9,
    (2, 3): 196.7,
    (2, 4): 119.9,
    (2, 5): 180.6,
    (3, 4): 308.7,
    (3, 5): 228.3,
    (4, 5): 301.0,
}

PHASES = ("keygen", "preprocessing", "online")
SETTINGS = ("lan", "wan")

CSV_FIELDS = [
    "scheme",
    "setting",
    "phase",
    "runs",
    "unit_count",
    "mean_ms",
    "stddev_ms",
    "per_unit_ms",
    "throughput_per_s",
    "bytes_per_party",
    "secret_ms",
    "public_ms",
    "offline_source",
    "status",
]

SCHEME_LABELS = {
    SchemeId.ADDITIVE: "semi",
    SchemeId.ADDITIVE_MAC: "mascot",
    SchemeId.SHAMIR: "shamir",
    SchemeId.SHAMIR_CHECKED: "mal-shamir",
}
LABEL_TO_SCHEME = {v: k for k, v in SCHEME_LABELS.items()}


def one_way_delays(rtt_ms: dict[tuple[int, int], float]) -> dict[tuple[int, int], float]:
    """Per-direction delay matrix: half the pair RTT, both directions."""
    out: dict[tuple[int, int], float] = {}
    for (a, b), rtt in rtt_ms.items():
        out[(a, b)] = rtt / 2.0
        out[(b, a)] = rtt / 2.0
    return out


def critical_path_rtt(rtt_ms: dict[tuple[int, int], float]) -> float:
    return max(rtt_ms.values())


def load_latency_matrix(path: str) -> dict[tuple[int, int], float]:
    """Parse a 5x5 table of RTT milliseconds (CSV; row i column j = RTT i->j)."""
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    cells = [row.split(",") for row in rows]
    n = len(cells)
    out: dict[tuple[int, int], float] = {}
    for i in range(n):
        if len(cells[i]) != n:
            raise ValueError(f"latency matrix row {i + 1} has {len(cells[i])} columns")
        for j in range(n):
            if i == j:
                continue
            value = float(cells[i][j])
            if value:
                out[(min(i, j) + 1, max(i, j) + 1)] = value
    return out


def save_latency_matrix(rtt_ms: dict[tuple[int, int], float], path: str, n: int = 5) -> None:
    lines = []
    for i in range(1, n + 1):
        row = []
        for j in range(1, n + 1):
            if i == j:
                row.append("0")
            else:
                row.append(str(rtt_ms[(min(i, j), max(i, j))]))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class BenchRow:
    scheme: str
    setting: str
    phase: str
    runs: int
    unit_count: int
    mean_ms: float
    stddev_ms: float
    per_unit_ms: float
    throughput_per_s: float
    bytes_per_party: float
    secret_ms: float = 0.0
    public_ms: float = 0.0
    offline_source: str = "dealer"
    status: str = "ok"


def _make_cluster(scheme: SchemeId, setting: str, seed: Optional[int],
                  rtt_ms: Optional[dict] = None) -> LocalCluster:
    cfg = ProtocolConfig.for_scheme(scheme)
    latency = None
    if setting == "wan":
        latency = one_way_delays(rtt_ms or WAN_RTT_MS)
    timeout = 60.0 if setting == "wan" else 10.0
    return LocalCluster(cfg, seed=seed, latency_ms=latency, timeout=timeout)


def count_bytes(cluster: LocalCluster, phase_label: Optional[str] = None) -> dict[int, int]:
    """Exact sent-byte totals per party, whole frames, optionally one phase."""
    return {
        party: cluster.hub.counters.sent_by(party, phase_label)
        for party in cluster.participants
    }


def _mean_bytes_per_party(cluster: LocalCluster, phase_label: str,
                          before: dict) -> float:
    after = cluster.hub.counters.snapshot()
    totals = []
    for party in cluster.participants:
        key = (party, phase_label)
        totals.append(after.get(key, 0) - before.get(key, 0))
    return statistics.fmean(totals)


def bench_phase(
    phase: str,
    scheme: SchemeId,
    setting: str,
    repetitions: int = 10,
    tuples: int = 1000,
    signatures: int = 20,
    seed: Optional[int] = 1,
    rtt_ms: Optional[dict] = None,
) -> BenchRow:
    """Benchmark one phase for one scheme under one network setting.

    keygen runs `repetitions` fresh key generations (mean and stddev);
    preprocessing amortizes both preprocessing stages over `tuples` tuples;
    online signs `signatures` messages one session at a time.
    """
    label = SCHEME_LABELS[scheme]
    cluster = _make_cluster(scheme, setting, seed, rtt_ms)
    try:
        if phase == "keygen":
            durations, secrets_ms, publics_ms = [], [], []
            for i in range(repetitions):
                before = time.perf_counter()
                timing = cluster.keygen_timed(f"bench-member-{i}")
                durations.append((time.perf_counter() - before) * 1000.0)
                secrets_ms.append(timing["secret_ms"])
                publics_ms.append(timing["public_ms"])
            return BenchRow(
                scheme=label, setting=setting, phase=phase,
                runs=repetitions, unit_count=repetitions,
                mean_ms=statistics.fmean(durations),
                stddev_ms=statistics.stdev(durations) if len(durations) > 1 else 0.0,
                per_unit_ms=statistics.fmean(durations),
                throughput_per_s=1000.0 / statistics.fmean(durations),
                bytes_per_party=_mean_bytes_per_party(
                    cluster, "keygen", {}
                ) / repetitions,
                secret_ms=statistics.fmean(secrets_ms),
                public_ms=statistics.fmean(publics_ms),
            )

        if phase == "preprocessing":
            cluster.keygen("bench-member")
            before_bytes = cluster.hub.counters.snapshot()
            started = time.perf_counter()
            cluster.preprocess_independent(tuples)
            cluster.preprocess_dependent("bench-member", tuples)
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            bytes_ind = _mean_bytes_per_party(
                cluster, "preprocess_independent", before_bytes
            )
            bytes_dep = _mean_bytes_per_party(
                cluster, "preprocess_dependent", before_bytes
            )
            return BenchRow(
                scheme=label, setting=setting, phase=phase,
                runs=1, unit_count=tuples,
                mean_ms=elapsed_ms, stddev_ms=0.0,
                per_unit_ms=elapsed_ms / tuples,
                throughput_per_s=tuples / (elapsed_ms / 1000.0),
                bytes_per_party=(bytes_ind + bytes_dep) / tuples,
            )

        if phase == "online":
            cluster.keygen("bench-member")
            cluster.preprocess_independent(signatures)
            cluster.preprocess_dependent("bench-member", signatures)
            before_bytes = cluster.hub.counters.snapshot()
            durations = []
            for i in range(signatures):
                started = time.perf_counter()
                cluster.run_signing("bench-member", b"bench message %d" % i)
                durations.append((time.perf_counter() - started) * 1000.0)
            total_s = sum(durations) / 1000.0
            return BenchRow(
                scheme=label, setting=setting, phase=phase,
                runs=signatures, unit_count=signatures,
                mean_ms=statistics.fmean(durations),
                stddev_ms=statistics.stdev(durations) if len(durations) > 1 else 0.0,
                per_unit_ms=statistics.fmean(durations),
                throughput_per_s=signatures / total_s,
                bytes_per_party=_mean_bytes_per_party(
                    cluster, "online", before_bytes
                ) / signatures,
            )

        if phase == "online-parallel":
            # saturation mode: several members' sessions signing concurrently
            import threading

            members = [f"bench-member-{i}" for i in range(3)]
            per_member = max(1, signatures // len(members))
            for m in members:
                cluster.keygen(m)
            cluster.preprocess_independent(per_member * len(members))
            for m in members:
                cluster.preprocess_dependent(m, per_member)
            errors: list[BaseException] = []

            def drive(member: str) -> None:
                try:
                    for i in range(per_member):
                        cluster.run_signing(member, b"parallel %d" % i)
                except BaseException as exc:
                    errors.append(exc)

            started = time.perf_counter()
            workers = [threading.Thread(target=drive, args=(m,)) for m in members]
            for w in workers:
                w.start()
            for w in workers:
                w.join()
            elapsed_s = time.perf_counter() - started
            if errors:
                raise errors[0]
            done = per_member * len(members)
            return BenchRow(
                scheme=label, setting=setting, phase=phase,
                runs=done, unit_count=done,
                mean_ms=elapsed_s * 1000.0 / done, stddev_ms=0.0,
                per_unit_ms=elapsed_s * 1000.0 / done,
                throughput_per_s=done / elapsed_s,
                bytes_per_party=0.0,  # phases interleave; see the latency rows
            )

        raise ValueError(f"unknown phase {phase!r}")
    except ProtocolAbort as exc:
        return BenchRow(
            scheme=label, setting=setting, phase=phase,
            runs=0, unit_count=0, mean_ms=0.0, stddev_ms=0.0, per_unit_ms=0.0,
            throughput_per_s=0.0, bytes_per_party=0.0,
            status=f"failed: {exc}",
        )
    finally:
        cluster.close()


def run_benchmarks(
    schemes: Sequence[SchemeId] = tuple(SchemeId),
    settings: Sequence[str] = SETTINGS,
    phases: Sequence[str] = PHASES,
    out_csv: Optional[str] = None,
    repetitions: int = 10,
    tuples: int = 1000,
    signatures: int = 20,
    seed: Optional[int] = 1,
    rtt_ms: Optional[dict] = None,
) -> list[BenchRow]:
    rows = []
    for setting in settings:
        for scheme in schemes:
            for phase in phases:
                rows.append(
                    bench_phase(phase, scheme, setting,
                                repetitions=repetitions, tuples=tuples,
                                signatures=signatures, seed=seed, rtt_ms=rtt_ms)
                )
    if out_csv:
        write_csv(rows, out_csv)
    return rows


def write_csv(rows: Sequence[BenchRow], path: str) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.DictWriter(out, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def read_csv(path: str) -> list[BenchRow]:
    rows = []
    with open(path, newline="") as handle:
        for rec in csv.DictReader(handle):
            rows.append(
                BenchRow(
                    scheme=rec["scheme"], setting=rec["setting"], phase=rec["phase"],
                    runs=int(rec["runs"]), unit_count=int(rec["unit_count"]),
                    mean_ms=float(rec["mean_ms"]), stddev_ms=float(rec["stddev_ms"]),
                    per_unit_ms=float(rec["per_unit_ms"]),
                    throughput_per_s=float(rec["throughput_per_s"]),
                    bytes_per_party=float(rec["bytes_per_party"]),
                    secret_ms=float(rec.get("secret_ms") or 0.0),
                    public_ms=float(rec.get("public_ms") or 0.0),
                    offline_source=rec.get("offline_source", "dealer"),
                    status=rec.get("status", "ok"),
                )
            )
    return rows
