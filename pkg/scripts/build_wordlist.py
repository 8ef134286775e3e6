"""Regenerate src/k12bert/data/english_words.txt.

Needs the optional ``english-words`` and ``wordfreq`` packages; neither is a
runtime dependency. The output is the union of Webster's 2nd (public domain)
and every wordfreq English entry with Zipf frequency >= 2.0, which adds the
inflected forms web2 lacks.
"""
import re
import sys
from pathlib import Path

import wordfreq
from english_words import get_english_words_set

WORD = re.compile(r"^[a-z]+(?:'[a-z]+)?$")
MIN_ZIPF = 2.0


def main(out: Path) -> None:
    words = {w for w in get_english_words_set(["web2"], lower=True) if WORD.match(w)}
    for w in wordfreq.top_n_list("en", 200_000, wordlist="large"):
        if WORD.match(w) and wordfreq.zipf_frequency(w, "en", wordlist="large") >= MIN_ZIPF:
            words.add(w)
    with open(out, "w", encoding="utf-8") as f:
        f.write("# English wordlist: web2 + wordfreq (zipf >= 2.0). One lowercase word per line.\n")
        for w in sorted(words):
            f.write(w + "\n")
    print(f"wrote {len(words)} words to {out}")


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src" / "k12bert" / "data" / "english_words.txt"
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else default)
