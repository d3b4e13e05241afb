#!/usr/bin/env python3
"""Regenerate the shipped base-vocabulary frequency file.

Builds a deterministic pseudo-word list with Zipf-like counts: a head of
common function words that must never be remapped, plus a long tail of
rare syllable words the space codec can claim. Output format is one
token<TAB>count per line.
"""

import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "src/scenebench/data/base_vocab_freq.tsv"

HEAD = [
    "the", "a", "of", "to", "and", "in", "is", "it", "on", "at", "for",
    "with", "as", "by", "this", "that", "car", "road", "left", "right",
    "stop", "light", "lane", "turn", "ahead", "vehicle", "person", "sign",
    "green", "red", "street", "traffic", "driver", "speed", "front",
]

ONSETS = ["br", "cl", "dr", "fl", "gr", "kr", "pl", "sk", "sn", "tr", "vl", "zm"]
VOWELS = ["a", "e", "i", "o", "u", "ae", "oi", "ui"]
CODAS = ["ck", "ft", "lp", "mb", "nd", "rk", "sp", "x", "zz", "th", "gn", "wl"]


def main() -> None:
    rng = random.Random(20240315)
    words = []
    seen = set(HEAD)
    for onset in ONSETS:
        for vowel in VOWELS:
            for coda in CODAS:
                w = onset + vowel + coda
                if w not in seen:
                    seen.add(w)
                    words.append(w)
    rng.shuffle(words)
    tail = words[:420]

    lines = []
    for rank, word in enumerate(HEAD):
        lines.append(f"{word}\t{1_000_000 // (rank + 1)}")
    for rank, word in enumerate(tail):
        # rare tail: counts in [1, 40], descending with jitter
        count = max(1, 40 - rank // 12 + rng.randrange(0, 3))
        lines.append(f"{word}\t{count}")
    OUT.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines)} tokens to {OUT}")


if __name__ == "__main__":
    main()
