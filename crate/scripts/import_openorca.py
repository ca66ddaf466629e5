#!/usr/bin/env python3
"""Convert the OpenOrca dataset to the benchmark's line-delimited JSON.

Reads parquet (needs pandas with a parquet engine), JSONL or CSV with the
columns system_prompt, question and response, and writes one
{"system", "question", "response"} object per line.

    python scripts/import_openorca.py 1M-GPT4-Augmented.parquet -o prompts.jsonl --limit 20000
"""

import argparse
import csv
import json
import sys
from pathlib import Path


def rows(path):
    suffix = path.suffix.lower()
    if suffix == ".parquet":
        import pandas as pd

        yield from pd.read_parquet(path).to_dict("records")
    elif suffix in (".jsonl", ".json"):
        with path.open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    yield json.loads(line)
    elif suffix == ".csv":
        with path.open(encoding="utf-8", newline="") as f:
            yield from csv.DictReader(f)
    else:
        sys.exit(f"unsupported input format: {path}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("input", type=Path)
    ap.add_argument("-o", "--output", type=Path, required=True)
    ap.add_argument("--limit", type=int, default=None, help="stop after this many records")
    ap.add_argument("--no-response", action="store_true", help="drop the reference response")
    args = ap.parse_args()

    written = skipped = 0
    with args.output.open("w", encoding="utf-8") as out:
        for row in rows(args.input):
            question = (row.get("question") or "").strip()
            if not question:
                skipped += 1
                continue
            rec = {"system": (row.get("system_prompt") or row.get("system") or "").strip(), "question": question}
            if not args.no_response and row.get("response"):
                rec["response"] = row["response"]
            out.write(json.dumps(rec, ensure_ascii=False) + "\n")
            written += 1
            if args.limit is not None and written >= args.limit:
                break
    print(f"wrote {written} records to {args.output}, skipped {skipped} without a question", file=sys.stderr)


if __name__ == "__main__":
    main()
