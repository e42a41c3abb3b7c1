#!/usr/bin/env python3
"""Regenerate the synthetic gold classification fixtures.

Produces data/gold_train.jsonl (800 records, 364 Include / 436 Exclude) and
data/gold_eval.jsonl (200 records, 98 Include / 102 Exclude) with a fixed
seed so the files are reproducible.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

SEED = 20240501
SPLITS = {
    "gold_train.jsonl": (800, 364, 9100001),
    "gold_eval.jsonl": (200, 98, 9200001),
}


def main() -> None:
    out_dir = Path(__file__).resolve().parent.parent / "data"
    rng = random.Random(SEED)
    for filename, (size, include, first_pmid) in SPLITS.items():
        labels = ["Include"] * include + ["Exclude"] * (size - include)
        rng.shuffle(labels)
        path = out_dir / filename
        with path.open("w", encoding="utf-8") as handle:
            for offset, label in enumerate(labels):
                handle.write(json.dumps({"pmid": str(first_pmid + offset), "label": label}) + "\n")
        print(f"wrote {path} ({size} records, {include} Include)")


if __name__ == "__main__":
    main()
