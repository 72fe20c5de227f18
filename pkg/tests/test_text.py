import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualpath import functional as F
from dualpath.autograd import Tensor
from dualpath.errors import DataError, FormatError, ParameterError, ParseError
from dualpath.text import (
    PAD,
    Vocabulary,
    build_vocabulary,
    decode,
    encode_sentence,
    init_word_embedding,
    load_embedding_table,
    save_embedding_table,
    tokenize,
)

WORDS = [f"w{i}" for i in range(12)]


@pytest.fixture
def vocab():
    return Vocabulary(WORDS)


class TestBuildVocabulary:
    def test_first_occurrence_order(self):
        v = build_vocabulary(["a dog runs", "a cat"])
        # a, dog, runs, cat: four distinct tokens
        assert v.words == ["a", "dog", "runs", "cat"]
        assert len(v) == 4

    def test_allowlist(self):
        v = build_vocabulary(["a dog runs"], allowlist={"dog"})
        assert len(v) == 1
        assert decode(encode_sentence("a dog runs", v), v) == ["dog"]

    def test_deterministic(self):
        corpus = ["Two red circles.", "a pair of red shapes, on gray!"]
        assert build_vocabulary(corpus) == build_vocabulary(corpus)

    def test_tokenizer_strips_case_and_punctuation(self):
        assert tokenize("Two RED circles, on gray.") == ["two", "red", "circles", "on", "gray"]

    def test_min_count(self):
        v = build_vocabulary(["a b", "a c"], min_count=2)
        assert v.words == ["a"]

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            build_vocabulary([])

    def test_bijection(self):
        v = build_vocabulary(["x y z y x w"])
        assert sorted(v.index(w) for w in v.words) == list(range(len(v)))


class TestEncode:
    def test_eighteen_words_left(self, vocab):
        code = encode_sentence(" ".join(WORDS[i % 12] for i in range(18)), vocab, 32)
        assert code.n == 18
        assert (code.indices[:18] != PAD).all() and (code.indices[18:] == PAD).all()

    def test_forty_words_clipped(self, vocab):
        words = [WORDS[i % 12] for i in range(40)]
        code = encode_sentence(" ".join(words), vocab, 32)
        assert code.n == 32
        assert decode(code, vocab) == words[:32]

    @pytest.mark.parametrize("offset", range(6))
    def test_shift_placement(self, vocab, offset):
        code = encode_sentence("w1 w2 w3", vocab, 8, "shift", offset=offset)
        assert list(np.flatnonzero(code.indices != PAD)) == [offset, offset + 1, offset + 2]

    def test_shift_offsets_cover_range(self, vocab):
        rng = np.random.default_rng(0)
        offsets = {encode_sentence("w1 w2 w3", vocab, 8, "shift", rng).offset for _ in range(300)}
        assert offsets == set(range(6))

    def test_no_known_word_names_sentence(self, vocab):
        with pytest.raises(DataError, match="zebra"):
            encode_sentence("zebra crossing", vocab)

    def test_unknown_mode(self, vocab):
        with pytest.raises(ParameterError):
            encode_sentence("w1", vocab, mode="centre")

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=12), st.integers(0, 2**31))
    def test_shift_keeps_word_multiset(self, words, seed):
        v = Vocabulary(WORDS)
        sentence = " ".join(words)
        left = encode_sentence(sentence, v, 8)
        shifted = encode_sentence(sentence, v, 8, "shift", np.random.default_rng(seed))
        assert sorted(left.indices[left.indices != PAD]) == sorted(shifted.indices[shifted.indices != PAD])
        nz = np.flatnonzero(shifted.indices != PAD)
        assert len(nz) == shifted.n and (np.diff(nz) == 1).all()

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.sampled_from(WORDS + ["oov", "x"]), min_size=1, max_size=12))
    def test_round_trip(self, words):
        v = Vocabulary(WORDS)
        kept = [w for w in words if w in v][:8]
        if not kept:
            return
        assert decode(encode_sentence(" ".join(words), v, 8), v) == kept


class TestEmbedding:
    def test_identity_table_gives_one_hot(self):
        v = Vocabulary(WORDS, embedding=np.eye(12))
        table = init_word_embedding(v, source="table", dtype=np.float64)
        code = encode_sentence("w3 w0 w7", v, 6)
        np.testing.assert_array_equal(F.embedding(code.indices, table).data, code.one_hot(12))

    def test_random_is_seeded(self, vocab):
        a = init_word_embedding(vocab, 5, "random", np.random.default_rng(3))
        b = init_word_embedding(vocab, 5, "random", np.random.default_rng(3))
        np.testing.assert_array_equal(a.data, b.data)

    def test_table_rows_copied(self):
        table = np.random.default_rng(1).standard_normal((12, 4))
        v = Vocabulary(WORDS, embedding=table)
        emb = init_word_embedding(v, source="table", dtype=np.float64)
        code = encode_sentence("w5", v, 1)
        np.testing.assert_array_equal(F.embedding(code.indices, emb).data[0], table[v.index("w5")])

    def test_row_count_mismatch(self):
        with pytest.raises(FormatError):
            Vocabulary(WORDS, embedding=np.zeros((11, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 8), st.integers(0, 2**31))
    def test_lookup_equals_dense_product(self, d, length, seed):
        rng = np.random.default_rng(seed)
        words = [f"t{i}" for i in range(d)]
        v = Vocabulary(words)
        table = rng.standard_normal((d, 3))
        n = int(rng.integers(1, length + 1))
        sentence = " ".join(rng.choice(words, size=n))
        code = encode_sentence(sentence, v, length, "shift", rng)
        looked_up = F.embedding(code.indices, Tensor(table)).data
        np.testing.assert_allclose(looked_up, code.one_hot(d) @ table, atol=1e-12)


class TestFiles:
    def test_vocabulary_round_trip(self, tmp_path, vocab):
        vocab.save(tmp_path / "v.txt")
        assert Vocabulary.load(tmp_path / "v.txt") == vocab
        assert (tmp_path / "v.txt").read_text().splitlines()[1] == "w1\t1"

    def test_vocabulary_bad_line(self, tmp_path):
        (tmp_path / "v.txt").write_text("a\t0\nb 1\n")
        with pytest.raises(ParseError, match=":2"):
            Vocabulary.load(tmp_path / "v.txt")

    def test_embedding_table_round_trip(self, tmp_path):
        table = np.random.default_rng(0).standard_normal((4, 3))
        save_embedding_table(table, tmp_path / "e.txt")
        assert (tmp_path / "e.txt").read_text().splitlines()[0] == "4 3"
        np.testing.assert_array_equal(load_embedding_table(tmp_path / "e.txt"), table)

    def test_embedding_table_short(self, tmp_path):
        (tmp_path / "e.txt").write_text("3 2\n1 2\n3 4\n")
        with pytest.raises(FormatError):
            load_embedding_table(tmp_path / "e.txt")
