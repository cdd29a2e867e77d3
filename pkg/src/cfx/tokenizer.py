"""WordPiece tokenization with character offsets, and packing for both tasks."""

from __future__ import annotations

import hashlib
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

CLS, SEP, UNK, PAD = "[CLS]", "[SEP]", "[UNK]", "[PAD]"
SPECIALS = (PAD, UNK, CLS, SEP)
CONT = "##"
DEFAULT_MAX_LEN = 128
MAX_CHARS_PER_WORD = 100


class VocabError(ValueError):
    pass


class PackingError(ValueError):
    pass


class Vocab:
    """Immutable token <-> id mapping.  Line number in the vocab file is the id."""

    def __init__(self, tokens: Iterable[str], lowercase: bool = True):
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.ids:
                raise VocabError(f"duplicate token {tok!r} at line {i}")
            if not tok or "\n" in tok:
                raise VocabError(f"invalid token at line {i}")
            self.ids[tok] = i
        missing = [s for s in SPECIALS if s not in self.ids]
        if missing:
            raise VocabError(f"vocab lacks special tokens {missing}")
        self.lowercase = lowercase

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.ids

    @property
    def cls_id(self) -> int:
        return self.ids[CLS]

    @property
    def sep_id(self) -> int:
        return self.ids[SEP]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path, lowercase: bool = True) -> Vocab:
        text = Path(path).read_bytes().decode("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, lowercase=lowercase)


@dataclass(frozen=True)
class SubToken:
    text: str  # vocab entry, including "##" for continuations
    start: int
    end: int
    word_index: int

    @property
    def is_continuation(self) -> bool:
        return self.text.startswith(CONT)


@dataclass
class PackedSeq:
    ids: list[int]
    segments: list[int]
    statement_mask: list[bool]
    char_spans: list[tuple[int, int]]
    token_firsts: list[int]
    pieces: list[str] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def statement_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.statement_mask) if m]


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def normalize(text: str, lowercase: bool) -> str:
    """Length-preserving lowercasing so offsets stay valid."""
    if not lowercase:
        return text
    out = []
    for ch in text:
        low = ch.lower()
        out.append(low if len(low) == 1 else ch)
    return "".join(out)


def split_words(text: str) -> list[tuple[int, int]]:
    """Whitespace split, with every punctuation character as its own word."""
    spans = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace():
            if start is not None:
                spans.append((start, i))
                start = None
        elif _is_punct(ch):
            if start is not None:
                spans.append((start, i))
                start = None
            spans.append((i, i + 1))
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(text)))
    return spans


def wordpiece_tokenize(text: str, vocab: Vocab) -> list[SubToken]:
    norm = normalize(text, vocab.lowercase)
    out: list[SubToken] = []
    for w, (ws, we) in enumerate(split_words(norm)):
        word = norm[ws:we]
        if len(word) > MAX_CHARS_PER_WORD:
            out.append(SubToken(UNK, ws, we, w))
            continue
        pieces = []
        pos = 0
        while pos < len(word):
            end = len(word)
            found = None
            while end > pos:
                cand = word[pos:end] if pos == 0 else CONT + word[pos:end]
                if cand in vocab.ids:
                    found = cand
                    break
                end -= 1
            if found is None:
                pieces = None
                break
            pieces.append(SubToken(found, ws + pos, ws + end, w))
            pos = end
        if pieces is None:
            out.append(SubToken(UNK, ws, we, w))
        else:
            out.extend(pieces)
    return out


def _firsts(subs: list[SubToken], offset: int) -> list[int]:
    firsts = []
    seen = set()
    for i, s in enumerate(subs):
        if s.word_index not in seen:
            seen.add(s.word_index)
            firsts.append(offset + i)
    return firsts


def pack_classification(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> PackedSeq:
    if max_len < 3:
        raise PackingError(f"max_len must be >= 3, got {max_len}")
    subs = wordpiece_tokenize(text, vocab)
    budget = max_len - 2
    truncated = len(subs) > budget
    subs = subs[:budget]
    n = len(subs)
    return PackedSeq(
        ids=[vocab.cls_id] + [vocab.ids[s.text] for s in subs] + [vocab.sep_id],
        segments=[0] * (n + 2),
        statement_mask=[False] + [True] * n + [False],
        char_spans=[(0, 0)] + [(s.start, s.end) for s in subs] + [(0, 0)],
        token_firsts=_firsts(subs, 1),
        pieces=[CLS] + [s.text for s in subs] + [SEP],
        truncated=truncated,
    )


def pack_qa(query: str, statement: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> PackedSeq:
    """``[CLS] query [SEP] statement [SEP]``; only the statement is truncated."""
    q = wordpiece_tokenize(query, vocab)
    if len(q) + 3 >= max_len:
        raise PackingError(
            f"query needs {len(q)} sub-tokens; max_len {max_len} leaves no room for the statement"
        )
    s = wordpiece_tokenize(statement, vocab)
    budget = max_len - len(q) - 3
    truncated = len(s) > budget
    s = s[:budget]
    nq, ns = len(q), len(s)
    ids = [vocab.cls_id] + [vocab.ids[t.text] for t in q] + [vocab.sep_id]
    ids += [vocab.ids[t.text] for t in s] + [vocab.sep_id]
    head = nq + 2
    return PackedSeq(
        ids=ids,
        segments=[0] * head + [1] * (ns + 1),
        statement_mask=[False] * head + [True] * ns + [False],
        char_spans=[(0, 0)] * head + [(t.start, t.end) for t in s] + [(0, 0)],
        token_firsts=_firsts(s, head),
        pieces=[CLS] + [t.text for t in q] + [SEP] + [t.text for t in s] + [SEP],
        truncated=truncated,
    )


def build_vocab(corpus: Iterable[str], target_size: int, lowercase: bool = True) -> Vocab:
    """Deterministic vocabulary: specials, characters, whole words, then continuations.

    Each alphabet character is added both as a word head and as a ``##``
    continuation, so every word of the corpus tokenizes without [UNK].
    Ties in frequency are broken lexicographically.
    """
    words: Counter[str] = Counter()
    chars: set[str] = set()
    empty = True
    for line in corpus:
        norm = normalize(line, lowercase)
        for s, e in split_words(norm):
            w = norm[s:e]
            words[w] += 1
            chars.update(w)
            empty = False
    if empty:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    alphabet = sorted(chars)
    tokens = list(SPECIALS)
    for ch in alphabet:
        tokens.append(ch)
    for ch in alphabet:
        tokens.append(CONT + ch)
    if target_size < len(alphabet) + len(SPECIALS):
        raise VocabError(
            f"target_size {target_size} below alphabet ({len(alphabet)}) + {len(SPECIALS)} specials"
        )
    have = set(tokens)

    def fill(counter: Counter[str]) -> None:
        for tok, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0])):
            if len(tokens) >= target_size:
                return
            if tok not in have:
                tokens.append(tok)
                have.add(tok)

    fill(words)
    inner: Counter[str] = Counter()
    for w, c in words.items():
        for i in range(1, len(w)):
            for j in range(i + 2, len(w) + 1):
                inner[CONT + w[i:j]] += c
    fill(inner)
    return Vocab(tokens, lowercase=lowercase)
