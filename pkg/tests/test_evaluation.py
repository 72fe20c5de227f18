import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualpath.data import render_image
from dualpath.errors import DataError, FormatError, NumericError
from dualpath.evaluation import (
    FeatureBank,
    RetrievalReport,
    deletion_similarities,
    extract_features,
    image_features,
    indicator_s,
    lower_median,
    metrics_from_similarity,
    pearson_diagnostic,
    retrieval_metrics,
    word_importance,
)
from dualpath.data import ImageTextGroup
from dualpath.model import DualPathModel, ModelConfig
from dualpath.text import Vocabulary, encode_sentence
from helpers import brute_force_metrics

EXAMPLE = np.array([[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.2, 0.2, 0.7]])


def random_instance(rng):
    g = int(rng.integers(1, 11))
    per = rng.integers(1, 4, size=g)
    caption_group = np.repeat(np.arange(g), per)
    # coarse values force ties so the tie rule is exercised
    sim = rng.integers(-4, 5, size=(g, len(caption_group))) / 4.0
    return sim, caption_group


class TestRecall:
    def test_identity(self):
        rep = metrics_from_similarity(np.eye(3), [0, 1, 2])
        for d in ("i2t", "t2i"):
            assert rep.recall[d][1] == 1.0 and rep.median_rank[d] == 1

    def test_diagonal_example(self):
        rep = metrics_from_similarity(EXAMPLE, [0, 1, 2])
        assert rep.recall["i2t"][1] == rep.recall["t2i"][1] == 1.0
        assert rep.median_rank["i2t"] == 1

    def test_anti_diagonal_example(self):
        # caption j belongs to image 2 - j; the centre pair (1, 1) still matches
        caption_group = [2, 1, 0]
        rep = metrics_from_similarity(EXAMPLE, caption_group)
        oracle = brute_force_metrics(EXAMPLE, caption_group)
        for d in ("i2t", "t2i"):
            assert rep.recall[d][1] == pytest.approx(1 / 3)
            assert rep.recall[d] == pytest.approx(oracle[d][0])
            assert rep.median_rank[d] == oracle[d][1] == 2

    def test_ties_broken_by_index(self):
        rep = metrics_from_similarity(np.array([[0.5, 0.5], [0.5, 0.5]]), [0, 1])
        # image 0 finds caption 0 first, image 1 finds its caption second
        assert rep.recall["i2t"][1] == 0.5

    def test_brute_force_agreement(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            sim, caption_group = random_instance(rng)
            rep = metrics_from_similarity(sim, caption_group, (1, 5, 10))
            oracle = brute_force_metrics(sim, caption_group, (1, 5, 10))
            for d in ("i2t", "t2i"):
                assert rep.recall[d] == pytest.approx(oracle[d][0])
                assert rep.median_rank[d] == oracle[d][1]

    def test_monotone_in_k_and_full_gallery(self):
        rng = np.random.default_rng(0)
        sim, caption_group = random_instance(rng)
        ks = tuple(range(1, len(caption_group) + 1))
        rep = metrics_from_similarity(sim, caption_group, ks)
        for d in ("i2t", "t2i"):
            values = [rep.recall[d][k] for k in ks]
            assert values == sorted(values) and all(0 <= v <= 1 for v in values)
        assert rep.recall["i2t"][len(caption_group)] == 1.0

    def test_lower_median(self):
        assert lower_median(np.array([4, 1, 3, 2])) == 2
        assert lower_median(np.array([5, 1, 3])) == 3

    def test_empty(self):
        with pytest.raises(DataError):
            metrics_from_similarity(np.zeros((0, 0)), [])


class TestIndicatorS:
    def test_identical(self):
        x = np.random.default_rng(0).uniform(-1, 1, 500)
        assert indicator_s(x, x) == pytest.approx(1.0)

    def test_disjoint(self):
        rng = np.random.default_rng(0)
        assert indicator_s(rng.uniform(0.5, 1, 500), rng.uniform(-1, -0.5, 500)) == 0.0

    def test_uniform_overlap(self):
        rng = np.random.default_rng(0)
        s = indicator_s(rng.uniform(0, 1, 100_000), rng.uniform(-0.5, 0.5, 100_000))
        assert abs(s - 0.5) <= 0.02

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(-1, 1, 300), rng.normal(0, 0.3, 300).clip(-1, 1)
        assert indicator_s(a, b) == indicator_s(b, a)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            indicator_s([1.5], [0.0])

    def test_rounding_tolerated(self):
        assert indicator_s([1.0 + 1e-9], [1.0]) == pytest.approx(1.0)

    def test_report_s_in_unit_interval(self):
        rng = np.random.default_rng(2)
        bank = FeatureBank(rng.standard_normal((4, 5)), rng.standard_normal((8, 5)), np.repeat(np.arange(4), 2))
        rep = retrieval_metrics(bank)
        assert 0 <= rep.s <= 1
        left, p, q = rep.histogram
        assert len(left) == 100 and p.sum() == pytest.approx(1) and q.sum() == pytest.approx(1)


class TestPearson:
    def test_examples(self):
        v = np.array([1.0, 3.0, 2.0, 5.0])
        corr = pearson_diagnostic(np.stack([v, 2 * v + 7, -v]))
        np.testing.assert_allclose(corr[0], [1.0, 1.0, -1.0], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31))
    def test_symmetric_unit_diagonal(self, m, seed):
        corr = pearson_diagnostic(np.random.default_rng(seed).standard_normal((m, 6)))
        assert np.array_equal(corr, corr.T) and np.all(np.diag(corr) == 1.0)

    def test_constant_row_named(self):
        with pytest.raises(NumericError, match="row 1"):
            pearson_diagnostic(np.array([[1.0, 2.0], [3.0, 3.0]]))


class TestReportAndBank:
    def test_tsv_round_trip(self):
        rng = np.random.default_rng(3)
        bank = FeatureBank(rng.standard_normal((3, 4)), rng.standard_normal((6, 4)), [0, 0, 1, 1, 2, 2])
        rep = retrieval_metrics(bank)
        text = rep.to_tsv()
        assert text.splitlines()[0].split("\t")[:2] == ["R@1", "i2t"]
        back = RetrievalReport.from_tsv(text)
        assert back.recall == rep.recall and back.median_rank == rep.median_rank and back.s == rep.s
        assert "img->txt" in rep.table()
        assert len(rep.histogram_tsv().splitlines()) == 100

    def test_bank_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        bank = FeatureBank(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), [0, 1, 2])
        bank.save(tmp_path / "b.npz")
        assert FeatureBank.load(tmp_path / "b.npz") == bank

    def test_bad_bank_file(self, tmp_path):
        (tmp_path / "b.npz").write_bytes(b"nope")
        with pytest.raises(FormatError):
            FeatureBank.load(tmp_path / "b.npz")

    def test_invalid_caption_map(self):
        with pytest.raises(DataError):
            FeatureBank(np.ones((2, 3)), np.ones((2, 3)), [0, 2])

    def test_non_finite(self):
        with pytest.raises(NumericError):
            FeatureBank(np.full((1, 2), np.nan), np.ones((1, 2)), [0])


WORDS = ["a", "red", "blue", "circle", "square", "on", "gray"]


@pytest.fixture(scope="module")
def probe_setup():
    vocab = Vocabulary(WORDS)
    cfg = ModelConfig(vocab_size=len(vocab), num_classes=3, embed_dim=8, word_embed_dim=6, image_size=16,
                      image_channels=(4, 8), text_channels=(6, 8), max_len=8, dtype="float64")
    return DualPathModel(cfg).eval(), vocab


class TestModelDiagnostics:
    def test_symmetric_image_flip_average(self, probe_setup):
        model, _ = probe_setup
        img = render_image(("red", "circle", 1, "gray"), size=16)
        np.testing.assert_array_equal(image_features(model, img[None]), model.image_forward(img[None]).data)

    def test_bank_shapes_and_determinism(self, probe_setup):
        model, vocab = probe_setup
        groups = [ImageTextGroup(i, render_image((c, "square", 2, "gray"), size=16), [f"a {c} square", f"{c} on gray"])
                  for i, c in enumerate(["red", "blue"])]
        bank = extract_features(model, groups, vocab)
        assert bank.image.shape == (2, 8) and bank.text.shape == (4, 8)
        assert list(bank.caption_group) == [0, 0, 1, 1]
        assert extract_features(model, groups, vocab) == bank

    def test_pad_deletion_is_noop(self, probe_setup):
        model, vocab = probe_setup
        img = image_features(model, render_image(("blue", "square", 1, "gray"), size=16)[None])[0]
        code = encode_sentence("a blue square", vocab, 8)
        sims = deletion_similarities(model, img, code.indices, [5, 6, 7])
        assert sims[0] == sims[1] == sims[2]

    def test_duplicate_word_equal_drops(self, probe_setup):
        model, vocab = probe_setup
        img = render_image(("red", "circle", 1, "gray"), size=16)
        drops = {d.position: d.drop for d in word_importance(model, img, "red red circle", vocab)}
        assert drops[0] == drops[1]
        assert len(drops) == 3

    def test_single_word_caption(self, probe_setup):
        model, vocab = probe_setup
        with pytest.raises(DataError):
            word_importance(model, render_image(("red", "circle", 1, "gray"), size=16), "circle", vocab)
