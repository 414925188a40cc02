#!/usr/bin/env python3
"""Convert daily RPKI repository dumps into the analyzer's listing format.

The public historical archive stores one `roas.csv` per RIR per day under
<root>/<rir>/<YYYY>/<MM>/<DD>/roas.csv with the header

    URI,ASN,IP Prefix,Max Length,Not Before,Not After

This script flattens that layout into one listing file per day
(OUT/<YYYY-MM-DD>.csv) with lines `date,rir,asn,prefix,maxlen,member`,
which `drpki analyze --archive OUT` consumes.  The member column is the
issuing certificate's URI directory (the archive does not expose member
names).  Fetching the archive itself is out of scope; point this at a local
mirror.

Usage:  python3 scripts/convert_rpki_archive.py ARCHIVE_ROOT OUT_DIR
"""

import csv
import sys
from pathlib import Path


def convert(archive_root: str, out_dir: str) -> int:
    root = Path(archive_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    days = {}
    for roas in sorted(root.glob("**/roas.csv")):
        parts = roas.parent.parts
        if len(parts) < 4:
            continue
        year, month, day = parts[-3], parts[-2], parts[-1]
        rir = parts[-4]
        date = f"{year}-{month}-{day}"
        rows = days.setdefault(date, [])
        with open(roas, newline="") as handle:
            for rec in csv.DictReader(handle):
                uri = rec.get("URI", "")
                asn = rec.get("ASN", "").removeprefix("AS")
                prefix = rec.get("IP Prefix", "")
                maxlen = rec.get("Max Length", "") or prefix.rsplit("/", 1)[-1]
                if not asn or not prefix:
                    continue
                member = uri.rsplit("/", 1)[0] if "/" in uri else uri
                rows.append(f"{date},{rir},{asn},{prefix},{maxlen},{member}")
    if not days:
        print(f"no roas.csv files found under {archive_root}", file=sys.stderr)
        return 1
    for date, rows in sorted(days.items()):
        (out / f"{date}.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(days)} day listings to {out_dir}")
    return 0


if __name__ == "__main__":
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        raise SystemExit(2)
    raise SystemExit(convert(sys.argv[1], sys.argv[2]))
