"""Word-level tokenization, vocabulary construction, and id encoding."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK, SEP, CLS = 0, 1, 2, 3, 4, 5
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<cls>"]
N_SPECIALS = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"[a-z0-9_]+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


def corpus_hash(corpus) -> str:
    """sha256 over the tokenized corpus, one sentence per line."""
    h = hashlib.sha256()
    for sentence in corpus:
        h.update(" ".join(tokenize(sentence)).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class Vocab:
    """Bijection between non-special tokens and ids 6..; specials fixed at 0-5."""

    id_to_token: list[str]
    min_frequency: int = 1
    source_hash: str = ""
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.id_to_token[:N_SPECIALS] != SPECIAL_TOKENS:
            raise ValueError("ids 0-5 must be the special tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token: str):
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.id_to_token):
            raise ValueError(f"id {idx} out of range for vocabulary of {len(self.id_to_token)}")
        return self.id_to_token[idx]


@dataclass
class TokenizedInstruction:
    surface: str
    tokens: list[str]
    ids: list[int]


def build_vocab(corpus, min_frequency: int = 1) -> Vocab:
    """Count tokens over ``corpus``; keep those with count >= min_frequency.

    Ids are assigned by descending count, ties broken lexicographically, so
    construction is deterministic.
    """
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for sentence in corpus:
        counts.update(tokenize(sentence))
    kept = sorted(
        (t for t, c in counts.items() if c >= min_frequency),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(SPECIAL_TOKENS + kept, min_frequency=min_frequency, source_hash=corpus_hash(corpus))


def encode(text: str, vocab: Vocab) -> list[int]:
    """Token ids for ``text``; out-of-vocabulary words map to UNK."""
    return [vocab.id_of(t) for t in tokenize(text)]


def decode(ids, vocab: Vocab) -> str:
    """Tokens joined by spaces; special ids are never emitted."""
    words = []
    for idx in ids:
        token = vocab.token_of(int(idx))
        if int(idx) >= N_SPECIALS:
            words.append(token)
    return " ".join(words)


def to_instruction(text: str, vocab: Vocab) -> TokenizedInstruction:
    tokens = tokenize(text)
    return TokenizedInstruction(text, tokens, [vocab.id_of(t) for t in tokens])


def save_vocab(vocab: Vocab, path) -> None:
    """One token per line after a header; line number = id - 6."""
    lines = [f"# min_frequency={vocab.min_frequency} corpus_hash={vocab.source_hash}"]
    lines.extend(vocab.id_to_token[N_SPECIALS:])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing vocabulary header line")
    m = re.match(r"#\s*min_frequency=(\d+)\s+corpus_hash=(\S*)", lines[0])
    if not m:
        raise ValueError(f"{path}: malformed vocabulary header: {lines[0]!r}")
    return Vocab(SPECIAL_TOKENS + lines[1:], min_frequency=int(m.group(1)), source_hash=m.group(2))


def vocab_file_hash(vocab: Vocab) -> str:
    """Stable hash of the vocabulary content; checkpoints refuse a mismatch."""
    h = hashlib.sha256()
    h.update(f"{vocab.min_frequency}\n".encode())
    for token in vocab.id_to_token:
        h.update(token.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
