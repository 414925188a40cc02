#!/usr/bin/env python3
"""Generate the synthetic 90-day churn fixture committed under tests/data/.

Writes one listing file per day (date,rir,asn,prefix,maxlen,member) plus a
golden JSON computed here with plain set arithmetic, independent of the
analyzer implementation.  The series includes one missing day (a gap), one
empty day (anomalous), and duplicate lines, to pin the edge-case semantics.

Run from the repository root:  python3 scripts/gen_churn_fixture.py
"""

import json
import random
import statistics
from datetime import date, timedelta
from pathlib import Path

OUT_DIR = Path("tests/data/churn_90d")
GOLDEN = Path("tests/data/churn_90d_golden.json")

START = date(2020, 3, 1)
DAYS = 90
MISSING_DAY = date(2020, 4, 2)   # gap in the archive
EMPTY_DAY = date(2020, 5, 10)    # repository wiped for a day (anomaly)
DUP_DAY = date(2020, 3, 15)      # duplicate lines within one day

RIRS = ["ripencc", "arin", "apnic", "lacnic", "afrinic"]


def roa_line(day, entry):
    rir, asn, prefix, maxlen, member = entry
    return f"{day.isoformat()},{rir},{asn},{prefix},{maxlen},{member}"


def main():
    rng = random.Random(90_210)
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    for old in OUT_DIR.glob("*.csv"):
        old.unlink()

    def fresh_entry(i):
        rir = rng.choice(RIRS)
        asn = rng.randrange(64496, 65536)
        prefix = f"10.{rng.randrange(256)}.{rng.randrange(256)}.0/24"
        member = f"member{rng.randrange(400)}"
        return (rir, asn, prefix, 24 + rng.randrange(0, 9), member)

    universe = {fresh_entry(i) for i in range(800)}
    current = set(rng.sample(sorted(universe), 500))

    day_sets = {}
    day = START
    for _ in range(DAYS):
        if day != START:
            removals = rng.randrange(0, 18)
            additions = rng.randrange(0, 22)
            stay = sorted(current)
            for victim in rng.sample(stay, min(removals, len(stay))):
                current.discard(victim)
            for _ in range(additions):
                current.add(fresh_entry(0))
        if day == EMPTY_DAY:
            day_sets[day] = set()
        elif day == MISSING_DAY:
            pass  # archive gap: no file at all
        else:
            day_sets[day] = set(current)
        day += timedelta(days=1)

    for d, entries in sorted(day_sets.items()):
        lines = [roa_line(d, e) for e in sorted(entries)]
        if d == DUP_DAY and lines:
            lines.append(lines[0])  # duplicate line, must collapse with a warning
        (OUT_DIR / f"{d.isoformat()}.csv").write_text("\n".join(lines) + "\n")

    # golden values via direct set arithmetic over what was written
    ordered = sorted(day_sets)
    days_out = []
    prev = None
    for d in ordered:
        cur = day_sets[d]
        if prev is None:
            days_out.append({"date": d.isoformat(), "added": None, "removed": None,
                             "size": len(cur)})
        else:
            days_out.append({
                "date": d.isoformat(),
                "added": len(cur - day_sets[prev]),
                "removed": len(day_sets[prev] - cur),
                "size": len(cur),
                "after_gap": (d - prev).days > 1,
                "anomalous_empty": len(cur) == 0 and len(day_sets[prev]) > 0,
            })
        prev = d

    monthly = {}
    for entry in days_out:
        if entry["added"] is None:
            continue
        month = entry["date"][:7]
        monthly.setdefault(month, []).append(entry)
    monthly_out = {
        month: {
            "mean_added": statistics.fmean(e["added"] for e in entries),
            "mean_removed": statistics.fmean(e["removed"] for e in entries),
            "max_added": max(e["added"] for e in entries),
            "max_removed": max(e["removed"] for e in entries),
            "days": len(entries),
        }
        for month, entries in sorted(monthly.items())
    }

    GOLDEN.write_text(json.dumps({
        "days": days_out,
        "monthly": monthly_out,
        "gaps": [MISSING_DAY.isoformat()],
        "duplicate_lines": 1,
    }, indent=1) + "\n")
    print(f"wrote {len(day_sets)} day files, golden at {GOLDEN}")


if __name__ == "__main__":
    main()
