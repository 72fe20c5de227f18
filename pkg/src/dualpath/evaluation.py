"""Feature extraction, retrieval metrics and embedding diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autograd import no_grad
from .data import flip_horizontal
from .errors import DataError, FormatError, NumericError
from .model import DualPathModel
from .text import PAD, Vocabulary, encode_sentence
from .train import caption_table, encode_words

DEFAULT_KS = (1, 5, 10)
DIRECTIONS = ("i2t", "t2i")


@dataclass
class FeatureBank:
    """Image features [G, D], caption features [C, D] and the caption-to-image-row map."""

    image: np.ndarray
    text: np.ndarray
    caption_group: np.ndarray
    group_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        self.caption_group = np.asarray(self.caption_group, dtype=np.int64)
        if self.group_ids is None:
            self.group_ids = np.arange(len(self.image))
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        if self.image.ndim != 2 or self.text.ndim != 2 or self.image.shape[1] != self.text.shape[1]:
            raise DataError(f"bank shapes {self.image.shape} and {self.text.shape} are incompatible")
        if len(self.caption_group) != len(self.text):
            raise DataError("caption map length differs from the number of caption features")
        if len(self.caption_group) and (self.caption_group.min() < 0 or self.caption_group.max() >= len(self.image)):
            raise DataError("a caption maps to a group outside the bank")
        if not (np.isfinite(self.image).all() and np.isfinite(self.text).all()):
            raise NumericError("feature bank contains non-finite values")

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureBank) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("image", "text", "caption_group", "group_ids")
        )

    def similarity(self) -> np.ndarray:
        """Cosine similarity [G, C] between every image and every caption."""
        return _unit(self.image) @ _unit(self.text).T

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, image=self.image, text=self.text, caption_group=self.caption_group, group_ids=self.group_ids)

    @classmethod
    def load(cls, path) -> "FeatureBank":
        try:
            with np.load(path) as z:
                return cls(z["image"], z["text"], z["caption_group"], z["group_ids"])
        except (KeyError, ValueError, OSError) as exc:
            raise FormatError(f"{path}: not a feature bank ({exc})") from None


def _unit(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] <= 1e-12)
    if bad.size:
        raise NumericError(f"feature row {int(bad[0])} has near-zero norm")
    return x / norms


def image_features(model: DualPathModel, images: np.ndarray, batch: int = 128) -> np.ndarray:
    """Average of the descriptors of each image and its mirror image."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            chunk = images[i : i + batch]
            plain = model.image_forward(chunk).data.astype(np.float64)
            mirrored = model.image_forward(flip_horizontal(chunk)).data.astype(np.float64)
            out.append((plain + mirrored) / 2.0)
    return np.concatenate(out)


def text_features(model: DualPathModel, codes: np.ndarray, batch: int = 256) -> np.ndarray:
    with no_grad():
        return np.concatenate(
            [model.text_forward(codes[i : i + batch]).data.astype(np.float64) for i in range(0, len(codes), batch)]
        )


def extract_features(model: DualPathModel, groups: list, vocab: Vocabulary) -> FeatureBank:
    """Eval-mode bank for one split: flip-averaged images, left-aligned captions."""
    if not groups:
        raise DataError("cannot extract features from an empty split")
    was_training = model.training
    model.eval()
    try:
        img = image_features(model, np.stack([g.image for g in groups]))
        words, owner = caption_table(groups, vocab)
        txt = text_features(model, encode_words(words, model.config.max_len, "left"))
    finally:
        model.train(was_training)
    return FeatureBank(img, txt, owner, np.asarray([g.group_id for g in groups]))


# --------------------------------------------------------------------------
# ranking metrics
# --------------------------------------------------------------------------


def ranks_of_truth(similarity: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1-based rank of the best-placed true item for each query row.

    Items are ordered by descending score; equal scores keep ascending item
    index. ``truth`` is a boolean matrix of the same shape as ``similarity``.
    """
    order = np.argsort(-similarity, axis=1, kind="stable")
    hits = np.take_along_axis(truth, order, axis=1)
    if not hits.any(axis=1).all():
        raise DataError("a query has no ground-truth item")
    return hits.argmax(axis=1) + 1


def lower_median(values: np.ndarray) -> float:
    """Median; for an even count, the lower of the two central values."""
    v = np.sort(np.asarray(values))
    return float(v[(len(v) - 1) // 2])


@dataclass
class RetrievalReport:
    recall: dict = field(default_factory=dict)  # direction -> {K: value}
    median_rank: dict = field(default_factory=dict)  # direction -> value
    s: Optional[float] = None
    histogram: Optional[tuple] = None  # (bin_left, p, q)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RetrievalReport):
            return False
        same_hist = (self.histogram is None) == (other.histogram is None) and (
            self.histogram is None or all(np.array_equal(a, b) for a, b in zip(self.histogram, other.histogram))
        )
        return (self.recall, self.median_rank, self.s) == (other.recall, other.median_rank, other.s) and same_hist

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for d in DIRECTIONS:
            for k, v in self.recall.get(d, {}).items():
                out.append((f"R@{k}", d, v))
            if d in self.median_rank:
                out.append(("medr", d, self.median_rank[d]))
        if self.s is not None:
            out.append(("S", "all", self.s))
        return out

    def to_tsv(self) -> str:
        return "".join(f"{m}\t{d}\t{float(v)!r}\n" for m, d, v in self.rows())

    def histogram_tsv(self) -> str:
        if self.histogram is None:
            return ""
        return "".join(f"{float(l)!r}\t{float(p)!r}\t{float(q)!r}\n" for l, p, q in zip(*self.histogram))

    def table(self) -> str:
        ks = sorted({k for d in self.recall.values() for k in d})
        head = ["direction"] + [f"R@{k}" for k in ks] + ["Med r"]
        lines = ["  ".join(f"{h:>9}" for h in head)]
        names = {"i2t": "img->txt", "t2i": "txt->img"}
        for d in DIRECTIONS:
            if d not in self.recall:
                continue
            cells = [names[d]] + [f"{self.recall[d][k]:.4f}" for k in ks] + [f"{self.median_rank[d]:g}"]
            lines.append("  ".join(f"{c:>9}" for c in cells))
        if self.s is not None:
            lines.append(f"indicator S = {self.s:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "RetrievalReport":
        report = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            metric, direction, value = line.split("\t")
            if metric == "S":
                report.s = float(value)
            elif metric == "medr":
                report.median_rank[direction] = float(value)
            else:
                report.recall.setdefault(direction, {})[int(metric[2:])] = float(value)
        return report


def metrics_from_similarity(similarity: np.ndarray, caption_group: np.ndarray,
                            ks: Sequence[int] = DEFAULT_KS) -> RetrievalReport:
    """Recall@K and median rank in both directions from an image-by-caption score matrix.

    An image query is answered by any caption of its group; a caption query by
    its own image.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    caption_group = np.asarray(caption_group)
    if similarity.size == 0:
        raise DataError("empty bank")
    truth = caption_group[None, :] == np.arange(similarity.shape[0])[:, None]
    report = RetrievalReport()
    for direction, sim, t in (("i2t", similarity, truth), ("t2i", similarity.T, truth.T)):
        ranks = ranks_of_truth(sim, t)
        report.recall[direction] = {int(k): float(np.mean(ranks <= k)) for k in ks}
        report.median_rank[direction] = lower_median(ranks)
    return report


def retrieval_metrics(bank: FeatureBank, ks: Sequence[int] = DEFAULT_KS, bins: int = 100) -> RetrievalReport:
    """Full report for a bank: Recall@K, Med r, indicator S and its histograms."""
    if len(bank.image) == 0 or len(bank.text) == 0:
        raise DataError("empty bank")
    sim = bank.similarity()
    report = metrics_from_similarity(sim, bank.caption_group, ks)
    pos, neg = positive_negative(sim, bank.caption_group)
    if len(pos) and len(neg):
        report.s = indicator_s(pos, neg, bins)
        report.histogram = similarity_histograms(pos, neg, bins)
    return report


# --------------------------------------------------------------------------
# distribution overlap
# --------------------------------------------------------------------------


def positive_negative(similarity: np.ndarray, caption_group: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Matching and non-matching image-caption similarities."""
    truth = np.asarray(caption_group)[None, :] == np.arange(similarity.shape[0])[:, None]
    return similarity[truth], similarity[~truth]


def _histogram(values: np.ndarray, bins: int, tol: float = 1e-6) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DataError("indicator S needs non-empty samples")
    if np.any(values < -1 - tol) or np.any(values > 1 + tol):
        raise DataError("similarities must lie in [-1, 1]")
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
    return counts / values.size


def similarity_histograms(pos, neg, bins: int = 100) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return edges[:-1], _histogram(pos, bins), _histogram(neg, bins)


def indicator_s(pos, neg, bins: int = 100) -> float:
    """Overlap ``sum_b min(P_b, Q_b)`` of the two similarity histograms over [-1, 1].

    0 means the two samples are separable, 1 means their histograms coincide.
    """
    return float(np.minimum(_histogram(pos, bins), _histogram(neg, bins)).sum())


def pearson_diagnostic(features) -> np.ndarray:
    """Pairwise Pearson correlation between feature rows, symmetric with unit diagonal.

    Raises:
        NumericError: if a row is constant.
    """
    x = np.asarray(features, dtype=np.float64)
    centred = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1)
    flat = np.flatnonzero(norms <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0))))
    if flat.size:
        raise NumericError(f"feature row {int(flat[0])} has zero variance")
    unit = centred / norms[:, None]
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    return corr


# --------------------------------------------------------------------------
# word importance
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WordDrop:
    position: int
    word: str
    drop: float


def _deleted(code_indices: np.ndarray, p: int) -> np.ndarray:
    # remove position p and close the gap from the right
    return np.concatenate([np.delete(code_indices, p), [PAD]]).astype(np.int64)


def _similarities(model: DualPathModel, image_feature: np.ndarray, codes: np.ndarray) -> np.ndarray:
    feats = text_features(model, codes)
    img = image_feature / np.linalg.norm(image_feature)
    return (feats / np.linalg.norm(feats, axis=1, keepdims=True)) @ img


def deletion_similarities(model: DualPathModel, image_feature: np.ndarray, code_indices: np.ndarray,
                          positions: Sequence[int]) -> np.ndarray:
    """Cosine between ``image_feature`` and the code with each listed position deleted.

    Deleting a PAD cell leaves a left-aligned code unchanged.
    """
    codes = np.stack([_deleted(code_indices, p) for p in positions])
    return _similarities(model, image_feature, codes)


def word_importance(model: DualPathModel, image: np.ndarray, caption: str, vocab: Vocabulary) -> list[WordDrop]:
    """Similarity drop caused by deleting each word, largest first.

    Raises:
        DataError: if the caption has fewer than two in-vocabulary words.
    """
    model.eval()
    code = encode_sentence(caption, vocab, model.config.max_len, "left")
    if code.n < 2:
        raise DataError(f"word probing needs at least two in-vocabulary words: {caption!r}")
    img = image_features(model, image[None])[0]
    positions = list(range(code.n))
    # baseline and deletions share one forward batch
    codes = np.stack([code.indices] + [_deleted(code.indices, p) for p in positions])
    sims = _similarities(model, img, codes)
    drops = [WordDrop(p, vocab.words[code.indices[p]], float(sims[0] - s)) for p, s in zip(positions, sims[1:])]
    return sorted(drops, key=lambda d: (-d.drop, d.position))
