"""Corpus-to-batch pipeline: packing, masking and batch assembly.

Corpus files are UTF-8 plain text with one document per blank-line-separated
block.  Encoded documents are packed greedily into fixed-length sequences
(in corpus order, separated by the end-of-document token); the final partial
sequence is padded and its pad positions carry zero loss weight.

Token caches are a pair of little-endian binary files:

* ``<name>.bin``: the concatenated token ids as uint32.
* ``<name>.idx``: magic ``STKTOK1\\n`` (8 bytes), then ``n_docs + 1``
  uint64 offsets into the .bin (prefix sums of document lengths).

Batch construction is deterministic: the content of batch ``k`` depends
only on (packed corpus, seed, k), never on timing, so sharded and replayed
runs see identical data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .bpe import SPECIAL_NAMES, TokenizerVocab, encode

_IDX_MAGIC = b"STKTOK1\n"
_MASK_DOMAIN = 0xB0CA
_SOP_DOMAIN = 0x50B1


class DataError(ValueError):
    pass


@dataclass
class PackedSequenceBatch:
    """One training batch; optional fields depend on the objective."""

    ids: np.ndarray                       # (batch, seq_len) int64
    loss_mask: np.ndarray                 # (batch, seq_len) float
    example_ids: np.ndarray               # (batch,) global sequence indices
    mlm_targets: Optional[np.ndarray] = None   # original ids where corrupted
    sop_labels: Optional[np.ndarray] = None    # (batch,) 1 = original order
    type_ids: Optional[np.ndarray] = None      # (batch, seq_len) segment markers
    attention_mask: Optional[np.ndarray] = None  # (batch, seq_len) 1 = attendable
    source_ids: Optional[np.ndarray] = None    # (batch, src_len) for seq2seq
    source_mask: Optional[np.ndarray] = None   # (batch, src_len) 1 = real token
    target_out: Optional[np.ndarray] = None    # (batch, seq_len) seq2seq targets

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    def shard(self, index: int, n_shards: int) -> "PackedSequenceBatch":
        if self.batch_size % n_shards != 0:
            raise DataError(f"batch size {self.batch_size} not divisible by {n_shards} shards")
        step = self.batch_size // n_shards
        sl = slice(index * step, (index + 1) * step)

        def cut(a):
            return None if a is None else a[sl]

        return replace(
            self,
            ids=self.ids[sl],
            loss_mask=self.loss_mask[sl],
            example_ids=self.example_ids[sl],
            mlm_targets=cut(self.mlm_targets),
            sop_labels=cut(self.sop_labels),
            type_ids=cut(self.type_ids),
            attention_mask=cut(self.attention_mask),
            source_ids=cut(self.source_ids),
            source_mask=cut(self.source_mask),
            target_out=cut(self.target_out),
        )


@dataclass
class MaskingPolicy:
    """Whole-word n-gram corruption settings."""

    corruption_rate: float = 0.15
    ngram_max: int = 3
    mask_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.corruption_rate < 1.0:
            raise DataError(f"corruption_rate must lie in (0, 1), got {self.corruption_rate}")
        if self.ngram_max < 1:
            raise DataError("ngram_max must be at least 1")
        total = self.mask_prob + self.random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"action probabilities must sum to 1, got {total}")


# ---------------------------------------------------------------------------
# Corpus IO
# ---------------------------------------------------------------------------


def read_documents(path: str) -> list[str]:
    """Blank-line-separated document blocks from a UTF-8 text file."""
    with open(path, encoding="utf-8") as fh:
        raw = fh.read()
    docs = []
    for block in raw.split("\n\n"):
        block = block.strip("\n")
        if block.strip():
            docs.append(block)
    return docs


def write_token_cache(path_prefix: str, streams: Sequence[Sequence[int]]) -> None:
    flat = np.concatenate([np.asarray(s, dtype="<u4") for s in streams]) if streams else np.zeros(0, "<u4")
    offsets = np.zeros(len(streams) + 1, dtype="<u8")
    np.cumsum([len(s) for s in streams], out=offsets[1:])
    flat.tofile(path_prefix + ".bin")
    with open(path_prefix + ".idx", "wb") as fh:
        fh.write(_IDX_MAGIC)
        offsets.tofile(fh)


def read_token_cache(path_prefix: str) -> list[np.ndarray]:
    with open(path_prefix + ".idx", "rb") as fh:
        magic = fh.read(len(_IDX_MAGIC))
        if magic != _IDX_MAGIC:
            raise DataError(f"{path_prefix}.idx is not a token cache index")
        offsets = np.fromfile(fh, dtype="<u8")
    flat = np.fromfile(path_prefix + ".bin", dtype="<u4")
    if offsets.size == 0 or offsets[-1] != flat.size:
        raise DataError(f"token cache {path_prefix} is inconsistent with its index")
    return [flat[offsets[i] : offsets[i + 1]].astype(np.int64) for i in range(offsets.size - 1)]


def encode_corpus(docs: Iterable[str], vocab: TokenizerVocab, mode: str = "splitter") -> list[list[int]]:
    return [encode(doc, vocab, mode) for doc in docs]


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------


def pack_documents(
    token_streams: Sequence[Sequence[int]],
    seq_len: int,
    eod_id: int,
    pad_id: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy in-order packing into (sequences, loss_mask) arrays.

    Each document is followed by the end-of-document id; sequences are cut
    every ``seq_len`` tokens, so documents may span sequence boundaries.
    Pad positions (final sequence only) get mask 0.
    """
    if seq_len < 2:
        raise DataError(f"seq_len must be at least 2, got {seq_len}")
    streams = [list(s) for s in token_streams if len(s) > 0]
    if not streams:
        raise DataError("packing needs at least one non-empty document")
    sequences: list[list[int]] = []
    buffer: list[int] = []
    for stream in streams:
        buffer.extend(stream)
        buffer.append(eod_id)
        while len(buffer) >= seq_len:
            sequences.append(buffer[:seq_len])
            buffer = buffer[seq_len:]
    pad_count = 0
    if buffer:
        pad_count = seq_len - len(buffer)
        sequences.append(buffer + [pad_id] * pad_count)
    ids = np.asarray(sequences, dtype=np.int64)
    mask = np.ones_like(ids, dtype=np.float64)
    if pad_count:
        mask[-1, seq_len - pad_count :] = 0.0
    return ids, mask


# ---------------------------------------------------------------------------
# Whole-word n-gram masking
# ---------------------------------------------------------------------------


def word_spans(row: np.ndarray, special_ids: frozenset[int]) -> list[tuple[int, int]]:
    """Maximal runs of non-special positions: the word units for masking."""
    spans = []
    start = None
    for i, token in enumerate(row):
        if int(token) in special_ids:
            if start is not None:
                spans.append((start, i))
                start = None
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(row)))
    return spans


def apply_whole_word_ngram_mask(
    batch: PackedSequenceBatch,
    policy: MaskingPolicy,
    boundaries: Sequence[Sequence[tuple[int, int]]],
    vocab: TokenizerVocab,
    seed: int,
) -> PackedSequenceBatch:
    """Corrupt whole-word n-grams and mark them in the loss mask.

    Word-level n-grams (n uniform in [1, ngram_max], capped at the
    remaining budget) are chosen until ceil(corruption_rate * word_count)
    word units are covered, at least one per sequence.  Every position of a
    chosen word receives the mask token, a random content token or its
    original value according to the action split.  Special positions are
    never corrupted.
    """
    ids = batch.ids.copy()
    targets = batch.ids.copy()
    loss_mask = np.zeros_like(batch.loss_mask)
    content_base = len(SPECIAL_NAMES)
    seed_key = (seed,) if isinstance(seed, int) else tuple(int(s) for s in seed)
    for r in range(batch.batch_size):
        spans = list(boundaries[r])
        if not spans:
            continue
        rng = np.random.default_rng((_MASK_DOMAIN, *seed_key, int(batch.example_ids[r])))
        n_words = len(spans)
        target_count = max(1, math.ceil(policy.corruption_rate * n_words))
        chosen: set[int] = set()
        while len(chosen) < target_count:
            budget = target_count - len(chosen)
            n = int(rng.integers(1, min(policy.ngram_max, budget) + 1))
            open_words = [i for i in range(n_words) if i not in chosen]
            start = int(open_words[rng.integers(len(open_words))])
            for w in range(start, min(start + n, n_words)):
                chosen.add(w)
        for w in sorted(chosen):
            lo, hi = spans[w]
            for pos in range(lo, hi):
                loss_mask[r, pos] = 1.0
                u = rng.random()
                if u < policy.mask_prob:
                    ids[r, pos] = vocab.mask_id
                elif u < policy.mask_prob + policy.random_prob:
                    ids[r, pos] = int(rng.integers(content_base, vocab.size))
    return replace(batch, ids=ids, loss_mask=loss_mask, mlm_targets=targets)


def make_sop_example(
    segment_a: Sequence[int], segment_b: Sequence[int], seed: int
) -> tuple[list[int], list[int], int]:
    """Swap the two segments with probability one half; label 1 = original order."""
    if len(segment_a) == 0 or len(segment_b) == 0:
        raise DataError("segment-order examples need two non-empty segments")
    rng = np.random.default_rng((_SOP_DOMAIN, seed))
    if rng.random() < 0.5:
        return list(segment_b), list(segment_a), 0
    return list(segment_a), list(segment_b), 1


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def _rows_for_batch(n_rows: int, batch_index: int, batch_size: int) -> np.ndarray:
    return (batch_index * batch_size + np.arange(batch_size)) % n_rows


def make_lm_batch(packed: tuple[np.ndarray, np.ndarray], batch_index: int, batch_size: int) -> PackedSequenceBatch:
    ids, mask = packed
    rows = _rows_for_batch(ids.shape[0], batch_index, batch_size)
    return PackedSequenceBatch(ids=ids[rows], loss_mask=mask[rows], example_ids=rows)


def make_mlm_batch(
    packed: tuple[np.ndarray, np.ndarray],
    batch_index: int,
    batch_size: int,
    policy: MaskingPolicy,
    vocab: TokenizerVocab,
    seed: int,
) -> PackedSequenceBatch:
    """Masked-token batch with segment-order labels.

    Segments are the two contiguous halves of each packed sequence; they
    are swapped with probability one half before masking, and segment
    markers (0/1) follow the swapped layout.
    """
    ids, mask = packed
    rows = _rows_for_batch(ids.shape[0], batch_index, batch_size)
    seq_len = ids.shape[1]
    half = seq_len // 2
    out_ids = np.empty((batch_size, seq_len), dtype=np.int64)
    out_mask = np.empty((batch_size, seq_len), dtype=np.float64)
    labels = np.empty(batch_size, dtype=np.int64)
    type_ids = np.zeros((batch_size, seq_len), dtype=np.int64)
    type_ids[:, half:] = 1
    for j, row in enumerate(rows):
        example_seed = int(np.random.default_rng((_SOP_DOMAIN, seed, batch_index, int(row))).integers(2**31))
        a, b, label = make_sop_example(ids[row, :half], ids[row, half:], example_seed)
        out_ids[j] = np.concatenate([a, b])
        ma, mb = mask[row, :half], mask[row, half:]
        out_mask[j] = np.concatenate([ma, mb] if label == 1 else [mb, ma])
        labels[j] = label
    batch = PackedSequenceBatch(
        ids=out_ids,
        loss_mask=out_mask,
        example_ids=rows,
        sop_labels=labels,
        type_ids=type_ids,
    )
    boundaries = [word_spans(out_ids[j], vocab.special_ids) for j in range(batch_size)]
    masked = apply_whole_word_ngram_mask(batch, policy, boundaries, vocab, (seed, batch_index))
    return masked


def make_seq2seq_batch(
    packed: tuple[np.ndarray, np.ndarray],
    batch_index: int,
    batch_size: int,
    eod_id: int,
) -> PackedSequenceBatch:
    """Split each packed sequence into source and target halves.

    The decoder input is the target shifted right behind an end-of-document
    start sentinel; ``target_out`` holds the aligned next-token targets.
    """
    ids, mask = packed
    rows = _rows_for_batch(ids.shape[0], batch_index, batch_size)
    half = ids.shape[1] // 2
    src = ids[rows, :half]
    src_mask = mask[rows, :half]
    tgt = ids[rows, half:]
    tgt_mask = mask[rows, half:]
    dec_in = np.concatenate([np.full((batch_size, 1), eod_id, dtype=np.int64), tgt[:, :-1]], axis=1)
    return PackedSequenceBatch(
        ids=dec_in,
        loss_mask=tgt_mask,
        example_ids=rows,
        source_ids=src,
        source_mask=src_mask,
        target_out=tgt,
    )
