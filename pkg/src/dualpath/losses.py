"""Cosine similarity, the bidirectional ranking loss, the instance loss and negative sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import functional as F
from .autograd import Tensor, as_tensor
from .errors import NumericError, ParameterError, SamplingError
from .model import classify

EPS = 1e-12

Scalar = Union[Tensor, float]


def cosine_similarity(f_x, f_y, eps: float = EPS) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises:
        NumericError: if either vector has norm <= ``eps``.
    """
    x = np.asarray(f_x.data if isinstance(f_x, Tensor) else f_x, dtype=np.float64).ravel()
    y = np.asarray(f_y.data if isinstance(f_y, Tensor) else f_y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx <= eps or ny <= eps:
        raise NumericError(f"cosine similarity undefined for near-zero norm ({nx:.3g}, {ny:.3g})")
    return float(np.clip(np.dot(x / nx, y / ny), -1.0, 1.0))


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two [N, D] tensors, differentiable."""
    return F.rowwise_dot(F.l2_normalize(a, EPS), F.l2_normalize(b, EPS))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.0  # ranking
    lambda2: float = 1.0  # visual instance
    lambda3: float = 1.0  # textual instance

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative, got {getattr(self, name)}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)


STAGE1 = LossWeights(0.0, 1.0, 1.0)
STAGE2 = LossWeights(1.0, 1.0, 1.0)


@dataclass
class QuadBatch:
    """Anchors ``(f_Ia, f_Ta)`` and their negatives ``(f_In, f_Tn)``, row aligned.

    ``f_Tn`` is the negative caption for each image anchor and ``f_In`` the
    negative image for each caption anchor.
    """

    f_Ia: Tensor
    f_Ta: Tensor
    f_In: Tensor
    f_Tn: Tensor
    anchor_ids: np.ndarray
    neg_image_ids: np.ndarray
    neg_text_ids: np.ndarray

    def __post_init__(self):
        self.anchor_ids = np.asarray(self.anchor_ids)
        for ids in (self.neg_image_ids, self.neg_text_ids):
            if np.any(np.asarray(ids) == self.anchor_ids):
                raise SamplingError("a negative shares its anchor's class")


def ranking_loss(batch: QuadBatch, margin: float = 1.0) -> Tensor:
    """Batch mean of ``[a - D(Ia,Ta) + D(Ia,Tn)]_+ + [a - D(Ta,Ia) + D(Ta,In)]_+``.

    Cosine is symmetric, so ``D(Ta, Ia)`` reuses the positive similarity.
    """
    pos = pairwise_cosine(batch.f_Ia, batch.f_Ta)
    neg_text = pairwise_cosine(batch.f_Ia, batch.f_Tn)
    neg_image = pairwise_cosine(batch.f_Ta, batch.f_In)
    return ranking_loss_from_similarities(pos, neg_text, neg_image, margin)


def ranking_loss_from_similarities(pos, neg_text, neg_image, margin: float = 1.0) -> Tensor:
    """Hinge form of the ranking loss on precomputed similarity vectors."""
    pos, neg_text, neg_image = as_tensor(pos), as_tensor(neg_text), as_tensor(neg_image)
    image_term = F.relu(F.add(F.sub(neg_text, pos), margin))
    text_term = F.relu(F.add(F.sub(neg_image, pos), margin))
    return F.mean(F.add(image_term, text_term))


def instance_loss(f_img: Tensor, f_text: Tensor, class_ids, w_share: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax cross-entropy of both modalities through the shared classifier.

    Returns:
        ``(L_visual, L_textual)``, each a batch mean.

    Raises:
        LabelIndexError: if a class id is outside ``[0, N)``.
    """
    class_ids = np.asarray(class_ids)
    visual = F.softmax_cross_entropy(classify(f_img, w_share), class_ids)
    textual = F.softmax_cross_entropy(classify(f_text, w_share), class_ids)
    return visual, textual


def combined_loss(rank: Optional[Scalar], visual: Optional[Scalar], textual: Optional[Scalar],
                  weights: LossWeights) -> Tensor:
    """``lambda1 * rank + lambda2 * visual + lambda3 * textual``.

    Terms with a zero weight are skipped entirely and may be passed as None.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    total: Optional[Tensor] = None
    for weight, term in zip(weights.as_tuple(), (rank, visual, textual)):
        if weight == 0:
            continue
        if term is None:
            raise ParameterError("a loss term with nonzero weight is missing")
        scaled = F.mul(as_tensor(term), weight)
        total = scaled if total is None else F.add(total, scaled)
    return total if total is not None else Tensor(np.float64(0.0))


def negative_indices(class_ids, strategy: str = "random", rng: Optional[np.random.Generator] = None,
                     similarity: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Pick in-batch negatives for every anchor row.

    Args:
        class_ids: Class of each batch row.
        strategy: ``random`` draws one non-matching row per anchor and uses it
            for both the negative image and the negative caption. ``hardest``
            takes the non-matching caption most similar to each image anchor
            and the non-matching image most similar to each caption anchor.
        rng: Generator for ``random``.
        similarity: ``[B, B]`` image-to-caption cosine matrix for ``hardest``.

    Returns:
        ``(neg_image_rows, neg_text_rows)``.

    Raises:
        SamplingError: if the batch holds a single class.
    """
    ids = np.asarray(class_ids)
    if len(np.unique(ids)) < 2:
        raise SamplingError("negative sampling needs at least two distinct classes in the batch")
    allowed = ids[:, None] != ids[None, :]
    if strategy == "random":
        if rng is None:
            raise ParameterError("random negative sampling needs a generator")
        rows = np.empty(len(ids), dtype=np.int64)
        for i in range(len(ids)):
            candidates = np.flatnonzero(allowed[i])
            rows[i] = candidates[rng.integers(len(candidates))]
        return rows, rows.copy()
    if strategy == "hardest":
        if similarity is None:
            raise ParameterError("hardest negative sampling needs the similarity matrix")
        masked = np.where(allowed, similarity, -np.inf)
        return masked.T.argmax(axis=1), masked.argmax(axis=1)
    raise ParameterError(f"unknown negative strategy {strategy!r}")


def sample_negatives(f_img: Tensor, f_text: Tensor, class_ids, strategy: str = "random",
                     rng: Optional[np.random.Generator] = None) -> QuadBatch:
    """Build a :class:`QuadBatch` from aligned image and caption features of one batch."""
    similarity = None
    if strategy == "hardest":
        a = f_img.data / np.linalg.norm(f_img.data, axis=1, keepdims=True)
        b = f_text.data / np.linalg.norm(f_text.data, axis=1, keepdims=True)
        similarity = a @ b.T
    neg_img, neg_txt = negative_indices(class_ids, strategy, rng, similarity)
    ids = np.asarray(class_ids)
    return QuadBatch(
        f_Ia=f_img,
        f_Ta=f_text,
        f_In=F.take_rows(f_img, neg_img),
        f_Tn=F.take_rows(f_text, neg_txt),
        anchor_ids=ids,
        neg_image_ids=ids[neg_img],
        neg_text_ids=ids[neg_txt],
    )
