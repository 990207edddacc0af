"""Rebuild the bundled toy corpus from Project Gutenberg Shakespeare texts.

The source texts ship inside the ``shakespeare`` sdist on PyPI
(``pip download --no-deps shakespeare==0.6``). Each speech becomes one
document (one line), lowercased and restricted to a small character set.

    python scripts/build_corpus.py /path/to/shksprdata/texts src/wslab/data/toy_corpus.txt
"""
import re
import sys
from pathlib import Path

PLAYS = [
    "twelfth_night_gut.txt",
    "midsummer_nights_dream_gut.txt",
    "much_ado_about_nothing_gut.txt",
    "as_you_like_it_gut.txt",
    "tempest_gut.txt",
    "merchant_of_venice_gut.txt",
]
KEEP = re.compile(r"[^a-z ,.;:'!?]")
SPEAKER = re.compile(r"^[A-Z][A-Z .'-]+\.$")


def speeches(text):
    current = []
    for line in text.splitlines():
        line = line.strip()
        if SPEAKER.match(line):
            if current:
                yield " ".join(current)
            current = []
        elif not line or line.startswith("["):
            if current:
                yield " ".join(current)
            current = []
        else:
            current.append(line)
    if current:
        yield " ".join(current)


def clean(doc):
    doc = KEEP.sub(" ", doc.lower().replace("--", " "))
    return re.sub(r"\s+", " ", doc).strip()


def main(src_dir, out_path):
    docs = []
    for name in PLAYS:
        text = Path(src_dir, name).read_text(encoding="latin-1")
        docs.extend(d for d in map(clean, speeches(text)) if len(d) >= 80)
    Path(out_path).write_text("\n".join(docs) + "\n", encoding="utf-8")
    print(f"{len(docs)} documents, {sum(map(len, docs))} chars -> {out_path}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
