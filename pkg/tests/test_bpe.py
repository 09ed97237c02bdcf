import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stacklm import bpe
from stacklm.bpe import TokenizerError, decode, encode, load_vocab, save_vocab, train_bpe

BASE = len(bpe.SPECIAL_NAMES)


def base_size(vocab):
    return BASE + len(vocab.alphabet)


def test_single_candidate_pair_is_merged_first():
    vocab = train_bpe("aaaa", BASE + 2 + 1)  # specials + {a, marker} + one merge
    assert vocab.merges[0] == (b"a", b"a")


def test_highest_frequency_pair_wins():
    # "ab" occurs 4 times inside words; merges never span the space
    vocab = train_bpe("abab abab", 64)
    assert vocab.merges[0] == (b"a", b"b")
    assert all(b" " not in left + right for left, right in vocab.merges)


def test_tie_break_is_lexicographic():
    # "ba" and "ab" both occur twice; (a,b) < (b,a)
    vocab = train_bpe("ab ab ba ba", BASE + 4 + 1)  # alphabet {space,a,b,marker}
    assert vocab.merges[0] == (b"a", b"b")


def test_target_size_must_exceed_base():
    with pytest.raises(TokenizerError):
        train_bpe("abc abc", BASE + 4)  # alphabet {a,b,c,marker}


def test_empty_corpus_rejected():
    with pytest.raises(TokenizerError):
        train_bpe("", 100)


def test_training_stops_when_no_pair_repeats():
    vocab = train_bpe("ab cd", 1000)
    assert vocab.size < 1000


def test_ids_are_contiguous_and_specials_first():
    vocab = train_bpe("hello hello world", 64)
    assert sorted(vocab.specials.values()) == list(range(BASE))
    assert vocab.size == BASE + len(vocab.alphabet) + len(vocab.merges)
    merged_ids = [vocab.token_to_id[l + r] for l, r in vocab.merges]
    assert merged_ids == list(range(base_size(vocab), vocab.size))


@pytest.fixture(scope="module")
def english_vocab():
    corpus = (
        "the happy dog chased the happy cat over the happy hill\n"
        "while a very happy bird sang a happy song about happy days\n"
        "and the dog and the cat and the bird were happy together\n"
    )
    return train_bpe(corpus * 4, 400)


def test_encode_empty(english_vocab):
    assert encode("", english_vocab) == []
    assert decode([], english_vocab) == ""


def test_round_trip_exact_in_splitter_mode(english_vocab):
    for text in ["hello world", "the happy  dog", " leading", "trailing ", "a   b", "happy\nhappy days"]:
        assert decode(encode(text, english_vocab), english_vocab) == text


def test_whole_word_merges_to_single_token(english_vocab):
    ids = encode("happy", english_vocab)
    assert len(ids) == 1
    # the same id shows up after a boundary: no space-prefixed duplicate
    tail = encode("so happy", english_vocab)
    assert tail[-1] == ids[0]


def test_space_marked_mode_inserts_marker(english_vocab):
    marker_id = english_vocab.token_to_id[bpe.MARKER]
    ids = encode("happy days", english_vocab, mode="space-marked")
    assert marker_id in ids
    assert english_vocab.splitter_id not in ids
    assert decode(ids, english_vocab, mode="space-marked") == "happy days"


def test_decode_specials(english_vocab):
    v = english_vocab
    assert decode([v.eod_id], v) == "<|eod|>"
    assert decode([v.mask_id, v.pad_id, v.unknown_id], v) == "<|mask|><|pad|><|unk|>"
    # splitter decodes to a space in splitter mode, sentinel otherwise
    assert decode([v.splitter_id], v) == " "
    assert decode([v.splitter_id], v, mode="space-marked") == "<|split|>"


def test_decode_rejects_unknown_id(english_vocab):
    with pytest.raises(IndexError):
        decode([english_vocab.size], english_vocab)


def test_unknown_bytes_map_to_unknown_id(english_vocab):
    ids = encode("happyé", english_vocab)  # e-acute never seen in training
    assert english_vocab.unknown_id in ids


def test_prefix_stability_across_documents(english_vocab):
    docs = ["the happy dog", "a happy song", "happy days together"]
    joined = []
    for doc in docs:
        joined.extend(encode(doc, english_vocab))
        joined.append(english_vocab.eod_id)
    per_doc = sum([encode(d, english_vocab) + [english_vocab.eod_id] for d in docs], [])
    assert joined == per_doc


def test_training_is_deterministic():
    corpus = "some words repeat words repeat some some words"
    a = train_bpe(corpus, 80)
    b = train_bpe(corpus, 80)
    assert a.merges == b.merges
    assert a.alphabet == b.alphabet


def test_save_load_round_trip(tmp_path, english_vocab):
    path = tmp_path / "vocab.txt"
    save_vocab(english_vocab, str(path))
    loaded = load_vocab(str(path))
    assert loaded.merges == english_vocab.merges
    assert loaded.alphabet == english_vocab.alphabet
    assert loaded.sentinels == english_vocab.sentinels
    text = "the happy cat sang"
    assert encode(text, loaded) == encode(text, english_vocab)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("something else\n")
    with pytest.raises(TokenizerError):
        load_vocab(str(path))


@pytest.mark.parametrize("target", [30000, 30522, 21128, 26240, 29752])
def test_reference_vocabulary_sizes_are_accepted(target):
    vocab = train_bpe("plenty of words " * 3, target)
    assert vocab.size <= target


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=string.ascii_lowercase + " .,\n", max_size=60))
def test_round_trip_property(text):
    vocab = _PROPERTY_VOCAB
    assert decode(encode(text, vocab), vocab) == text


_PROPERTY_VOCAB = train_bpe(string.ascii_lowercase + " .,\n" + " the and cat dog" * 5, 300)
