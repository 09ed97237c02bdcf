"""Byte-pair-encoding tokenizer with a reversible word-boundary scheme.

Training is byte level: the base alphabet is the set of bytes observed in
the corpus, so any text over that alphabet round-trips.  Merges are learned
inside whitespace-delimited words only, which keeps the vocabulary free of
duplicated space-marked variants (one token "happy", never a second
"_happy").

Two encoding modes expose the two boundary schemes:

* ``space-marked``: every single space becomes the marker glyph token
  (U+2581), mimicking classic BPE output where boundary marks ride along in
  the sub-word stream.  Decoding is a best-effort join (marker -> space).
* ``splitter``: every single space becomes the dedicated splitter special
  token, so ``decode(encode(text)) == text`` exactly for any text over the
  training alphabet.

Vocabulary file grammar (UTF-8, line oriented)::

    stacklm-bpe v1
    alphabet <count>
    <symbol>                   # one per base symbol, id order
    merges <count>
    <left> <right>             # one per merge, id order
    specials <count>
    <name> <sentinel>          # one per special, id order

Symbols are percent-escaped: bytes outside printable ASCII, ``%`` and the
space byte are written as ``%XX``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

MARKER = "▁".encode("utf-8")

SPECIAL_NAMES = ("end_of_document", "mask", "pad", "unknown", "splitter")

DEFAULT_SENTINELS = {
    "end_of_document": "<|eod|>",
    "mask": "<|mask|>",
    "pad": "<|pad|>",
    "unknown": "<|unk|>",
    "splitter": "<|split|>",
}

MODES = ("space-marked", "splitter")


class TokenizerError(ValueError):
    pass


def _escape(symbol: bytes) -> str:
    out = []
    for b in symbol:
        if 0x21 <= b <= 0x7E and b != 0x25:
            out.append(chr(b))
        else:
            out.append(f"%{b:02X}")
    return "".join(out)


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        if text[i] == "%":
            out.append(int(text[i + 1 : i + 3], 16))
            i += 3
        else:
            out.append(ord(text[i]))
            i += 1
    return bytes(out)


@dataclass
class TokenizerVocab:
    """Ordered BPE vocabulary: specials, then base symbols, then merges."""

    alphabet: list[bytes]
    merges: list[tuple[bytes, bytes]]
    sentinels: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SENTINELS))

    def __post_init__(self):
        self.specials = {name: i for i, name in enumerate(SPECIAL_NAMES)}
        self.id_to_token: list[bytes | None] = [None] * len(SPECIAL_NAMES)
        self.token_to_id: dict[bytes, int] = {}
        for sym in self.alphabet:
            self.token_to_id[sym] = len(self.id_to_token)
            self.id_to_token.append(sym)
        self.merge_ranks: dict[tuple[bytes, bytes], int] = {}
        for rank, (left, right) in enumerate(self.merges):
            joined = left + right
            if joined in self.token_to_id:
                raise TokenizerError(f"merge {rank} would duplicate token {joined!r}")
            self.merge_ranks[(left, right)] = rank
            self.token_to_id[joined] = len(self.id_to_token)
            self.id_to_token.append(joined)
        self._word_cache: dict[bytes, tuple[int, ...]] = {}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def eod_id(self) -> int:
        return self.specials["end_of_document"]

    @property
    def mask_id(self) -> int:
        return self.specials["mask"]

    @property
    def pad_id(self) -> int:
        return self.specials["pad"]

    @property
    def unknown_id(self) -> int:
        return self.specials["unknown"]

    @property
    def splitter_id(self) -> int:
        return self.specials["splitter"]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.specials.values())

    def _merge_pass(self, symbols: list[bytes]) -> list[bytes]:
        while len(symbols) >= 2:
            best_rank = None
            for left, right in zip(symbols, symbols[1:]):
                rank = self.merge_ranks.get((left, right))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            merged: list[bytes] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return symbols

    def _encode_segment(self, segment: bytes) -> tuple[int, ...]:
        if not segment:
            return ()
        cached = self._word_cache.get(segment)
        if cached is not None:
            return cached
        symbols = [segment[i : i + 1] for i in range(len(segment))]
        known = [s for s in symbols if s in self.token_to_id]
        # unknown bytes split the segment; merges never bridge them
        ids: list[int] = []
        run: list[bytes] = []

        def flush():
            for sym in self._merge_pass(run):
                ids.append(self.token_to_id[sym])
            run.clear()

        for sym in symbols:
            if sym in self.token_to_id:
                run.append(sym)
            else:
                flush()
                ids.append(self.unknown_id)
        flush()
        result = tuple(ids)
        if len(known) == len(symbols):
            self._word_cache[segment] = result
        return result


def train_bpe(
    corpus: str | Iterable[str],
    target_vocab_size: int,
    sentinels: dict[str, str] | None = None,
) -> TokenizerVocab:
    """Learn a BPE vocabulary by greedy highest-frequency pair merging.

    Merging stops at ``target_vocab_size`` total entries or when no pair
    occurs at least twice.  Ties break to the lexicographically smallest
    pair so training is deterministic.
    """
    if isinstance(corpus, str):
        corpus = [corpus]
    word_counts: Counter[bytes] = Counter()
    seen_bytes: set[int] = set()
    for chunk in corpus:
        raw = chunk.encode("utf-8")
        seen_bytes.update(raw)
        for word in raw.split():
            word_counts[word] += 1
    if not seen_bytes:
        raise TokenizerError("cannot train a vocabulary on an empty corpus")

    alphabet = [bytes([b]) for b in sorted(seen_bytes)]
    if MARKER not in alphabet:
        alphabet.append(MARKER)
    base_size = len(SPECIAL_NAMES) + len(alphabet)
    if target_vocab_size <= base_size:
        raise TokenizerError(
            f"target vocabulary size {target_vocab_size} must exceed "
            f"alphabet ({len(alphabet)}) plus specials ({len(SPECIAL_NAMES)})"
        )

    words: dict[tuple[bytes, ...], int] = {
        tuple(w[i : i + 1] for i in range(len(w))): c for w, c in word_counts.items()
    }
    merges: list[tuple[bytes, bytes]] = []
    produced: set[bytes] = set(alphabet)

    while base_size + len(merges) < target_vocab_size:
        pair_counts: Counter[tuple[bytes, bytes]] = Counter()
        for symbols, count in words.items():
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] += count
        best_pair = None
        best_count = 1
        for pair, count in pair_counts.items():
            if pair[0] + pair[1] in produced:
                continue  # a duplicate token string would break the id bijection
            if count > best_count or (count == best_count and (best_pair is None or pair < best_pair)):
                best_pair, best_count = pair, count
        if best_pair is None or best_count < 2:
            break
        merges.append(best_pair)
        produced.add(best_pair[0] + best_pair[1])
        left, right = best_pair
        joined = left + right
        updated: dict[tuple[bytes, ...], int] = {}
        for symbols, count in words.items():
            if left in symbols and right in symbols:
                out: list[bytes] = []
                i = 0
                n = len(symbols)
                while i < n:
                    if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
                        out.append(joined)
                        i += 2
                    else:
                        out.append(symbols[i])
                        i += 1
                symbols = tuple(out)
            updated[symbols] = updated.get(symbols, 0) + count
        words = updated

    return TokenizerVocab(alphabet, merges, dict(sentinels or DEFAULT_SENTINELS))


def encode(text: str, vocab: TokenizerVocab, mode: str = "splitter") -> list[int]:
    """Tokenize ``text``; word boundaries become splitter or marker tokens."""
    if mode not in MODES:
        raise TokenizerError(f"unknown mode {mode!r}; expected one of {MODES}")
    boundary = vocab.splitter_id if mode == "splitter" else vocab.token_to_id[MARKER]
    ids: list[int] = []
    for i, segment in enumerate(text.encode("utf-8").split(b" ")):
        if i > 0:
            ids.append(boundary)
        ids.extend(vocab._encode_segment(segment))
    return ids


def decode(ids: Sequence[int], vocab: TokenizerVocab, mode: str = "splitter") -> str:
    """Inverse of ``encode`` (exact in splitter mode, best-effort otherwise)."""
    if mode not in MODES:
        raise TokenizerError(f"unknown mode {mode!r}; expected one of {MODES}")
    marker_id = vocab.token_to_id[MARKER]
    pieces: list[bytes] = []
    for raw in ids:
        i = int(raw)
        if i < 0 or i >= vocab.size:
            raise IndexError(f"token id {i} outside vocabulary of size {vocab.size}")
        if i == vocab.splitter_id and mode == "splitter":
            pieces.append(b" ")
        elif i == marker_id and mode == "space-marked":
            pieces.append(b" ")
        elif i in vocab.special_ids:
            name = SPECIAL_NAMES[i]
            pieces.append(vocab.sentinels[name].encode("utf-8"))
        else:
            pieces.append(vocab.id_to_token[i])
    return b"".join(pieces).decode("utf-8", errors="replace")


def save_vocab(vocab: TokenizerVocab, path: str) -> None:
    lines = ["stacklm-bpe v1", f"alphabet {len(vocab.alphabet)}"]
    lines.extend(_escape(sym) for sym in vocab.alphabet)
    lines.append(f"merges {len(vocab.merges)}")
    lines.extend(f"{_escape(l)} {_escape(r)}" for l, r in vocab.merges)
    lines.append(f"specials {len(SPECIAL_NAMES)}")
    for name in SPECIAL_NAMES:
        lines.append(f"{name} {vocab.sentinels[name]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path: str) -> TokenizerVocab:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "stacklm-bpe v1":
        raise TokenizerError(f"{path} is not a stacklm-bpe v1 vocabulary file")
    pos = 1

    def header(expected: str) -> int:
        nonlocal pos
        tag, count = lines[pos].split()
        if tag != expected:
            raise TokenizerError(f"expected {expected!r} section, found {tag!r}")
        pos += 1
        return int(count)

    alphabet = []
    for _ in range(header("alphabet")):
        alphabet.append(_unescape(lines[pos]))
        pos += 1
    merges = []
    for _ in range(header("merges")):
        left, right = lines[pos].split()
        merges.append((_unescape(left), _unescape(right)))
        pos += 1
    sentinels = {}
    for _ in range(header("specials")):
        name, sentinel = lines[pos].split(maxsplit=1)
        sentinels[name] = sentinel
        pos += 1
    return TokenizerVocab(alphabet, merges, sentinels)
