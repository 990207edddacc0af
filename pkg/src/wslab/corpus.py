"""Char/whitespace tokenization and prompt/continuation windows."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNK = "<unk>"
BUNDLED_CORPUS = Path(__file__).parent / "data" / "toy_corpus.txt"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    mode: str = "char"
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("char", "whitespace"):
            raise ValueError(f"unknown vocabulary mode {self.mode!r}")
        if not self.tokens or self.tokens[0] != UNK:
            raise ValueError("token 0 must be the reserved unknown token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path) -> None:
        lines = [f"# mode={self.mode}"]
        lines += [f"{i}\t{t}" for i, t in enumerate(self.tokens)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        mode = "char"
        tokens = []
        for line in Path(path).read_text(encoding="utf-8").split("\n"):
            if line.startswith("# mode="):
                mode = line[len("# mode="):]
                continue
            if not line:
                continue
            idx, tok = line.split("\t", 1)
            if int(idx) != len(tokens):
                raise ValueError(f"vocabulary file out of order at id {idx}")
            tokens.append(tok)
        return cls(tuple(tokens), mode)


@dataclass(frozen=True)
class PromptPair:
    prompt: tuple[int, ...]
    reference: tuple[int, ...]
    window: tuple[int, int]  # (document index, start offset)


def _units(text: str, mode: str) -> list[str]:
    return list(text) if mode == "char" else text.split()


def build_vocabulary(corpus_text: str, mode: str = "char", max_size: int = 64) -> Vocabulary:
    """Keep the ``max_size - 1`` most frequent units after the reserved id 0.

    Ties are broken by first occurrence, which ``Counter.most_common`` already
    does since its sort is stable over insertion order.
    """
    if not corpus_text:
        raise ValueError("empty corpus")
    if max_size < 1:
        raise ValueError("max_size must be positive")
    # newlines separate documents and are never units
    counts = Counter(u for u in _units(corpus_text, mode) if u not in (UNK, "\n", "\r"))
    if not counts:
        raise ValueError("empty corpus")
    kept = [u for u, _ in counts.most_common(max_size - 1)]
    return Vocabulary((UNK, *kept), mode)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    get = vocab.index.get
    return [get(u, 0) for u in _units(text, vocab.mode)]


def detokenize(seq, vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize` for text without unknown units.

    Whitespace mode joins with single spaces, so it only round-trips text whose
    words are already separated by one space.
    """
    V = vocab.size
    out = []
    for i in seq:
        i = int(i)
        if not 0 <= i < V:
            raise ValueError(f"token id out of range: {i} (V={V})")
        out.append(vocab.tokens[i])
    return ("" if vocab.mode == "char" else " ").join(out)


def read_corpus(path=None) -> list[str]:
    """One document per nonempty line; defaults to the bundled toy corpus."""
    path = BUNDLED_CORPUS if path is None else Path(path)
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def _windows(docs: list[list[int]], prompt_len: int, ref_len: int) -> list[tuple[int, int]]:
    span = prompt_len + ref_len
    out = []
    for d, ids in enumerate(docs):
        for start in range(0, len(ids), span):
            if len(ids) - start >= prompt_len + 1:
                out.append((d, start))
    return out


def make_prompt_pairs(
    corpus,
    vocab: Vocabulary,
    prompt_len: int,
    n_train: int,
    n_test: int,
    rng_seed: int,
    ref_len: int = 32,
) -> tuple[list[PromptPair], list[PromptPair]]:
    """Sample disjoint train/test prompt windows without replacement.

    ``corpus`` is either raw text (one document per line) or a list of
    documents. Each document is cut into non-overlapping spans of
    ``prompt_len + ref_len`` tokens; a span shorter than ``prompt_len + 1``
    is dropped.
    """
    if prompt_len < 1:
        raise ValueError("prompt_len must be positive")
    docs = corpus.splitlines() if isinstance(corpus, str) else list(corpus)
    token_docs = [tokenize(doc.strip(), vocab) for doc in docs]
    windows = _windows(token_docs, prompt_len, ref_len)
    need = n_train + n_test
    if need > len(windows):
        raise ValueError(f"insufficient corpus: need {need} windows, have {len(windows)}")
    # test windows come first in one permutation, so growing n_train nests
    # the train sets and leaves the test set unchanged
    order = np.random.default_rng(rng_seed).permutation(len(windows))
    picked = np.concatenate([order[n_test:need], order[:n_test]])

    def pair(w):
        d, start = windows[w]
        ids = token_docs[d]
        return PromptPair(
            prompt=tuple(ids[start:start + prompt_len]),
            reference=tuple(ids[start + prompt_len:start + prompt_len + ref_len]),
            window=(d, start),
        )

    pairs = [pair(int(w)) for w in picked]
    return pairs[:n_train], pairs[n_train:]


def training_windows(corpus, vocab: Vocabulary, length: int, exclude=()) -> list[list[int]]:
    """Non-overlapping token windows of exactly ``length`` tokens.

    Documents listed in ``exclude`` (indices) are skipped; used to keep the
    provider's training text away from held-out prompt documents.
    """
    docs = corpus.splitlines() if isinstance(corpus, str) else list(corpus)
    skip = set(exclude)
    out = []
    for d, doc in enumerate(docs):
        if d in skip:
            continue
        ids = tokenize(doc.strip(), vocab)
        for start in range(0, len(ids) - length + 1, length):
            out.append(ids[start:start + length])
    return out
