"""Two-stage training: instance loss with a frozen image backbone, then end-to-end fine-tuning.

Every stochastic choice inside an epoch (caption order, flips, position
shifts, dropout masks, negatives) draws from a generator derived from
``(seed, stage, epoch, purpose)``. Resuming at epoch ``k`` therefore replays
exactly the draws an uninterrupted run would make.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .autograd import Tensor, backward, no_grad
from .data import Dataset, augment_image
from .errors import ConfigError, DataError, ParseError
from .losses import STAGE1, STAGE2, LossWeights, combined_loss, instance_loss, ranking_loss, sample_negatives
from .model import DualPathModel, save_checkpoint
from .nn import calibrate_batchnorm
from .optim import sgd_momentum_step, zero_grad
from .text import PAD, Vocabulary, place, tokenize

_PURPOSES = {"order": 0, "augment": 1, "dropout": 2, "negatives": 3}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training stage.

    The loss weights default to the stage preset: (0, 1, 1) for stage 1 and
    (1, 1, 1) for stage 2. Other weights are accepted only with
    ``custom_weights=True``, which the loss-regime comparison uses.
    """

    stage: int = 1
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 300
    lambda1: Optional[float] = None
    lambda2: Optional[float] = None
    lambda3: Optional[float] = None
    margin: float = 1.0
    shift_mode: str = "shift"
    negatives: str = "random"
    seed: int = 0
    checkpoint_every: int = 0
    patience: int = 0
    custom_weights: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        preset = (STAGE1 if self.stage == 1 else STAGE2).as_tuple()
        for name, default in zip(("lambda1", "lambda2", "lambda3"), preset):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.weights.as_tuple() != preset and not self.custom_weights:
            raise ConfigError(
                f"stage {self.stage} uses loss weights {preset}; got {self.weights.as_tuple()} (set custom_weights)"
            )
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid optimizer settings lr={self.lr} momentum={self.momentum}")
        if self.batch_size < 2 or self.epochs < 0:
            raise ConfigError(f"invalid batch_size={self.batch_size} or epochs={self.epochs}")
        if self.shift_mode not in ("shift", "left"):
            raise ConfigError(f"shift_mode must be 'shift' or 'left', got {self.shift_mode!r}")
        if self.negatives not in ("random", "hardest"):
            raise ConfigError(f"negatives must be 'random' or 'hardest', got {self.negatives!r}")
        if self.margin < 0 or self.checkpoint_every < 0 or self.patience < 0:
            raise ConfigError("margin, checkpoint_every and patience must be nonnegative")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in self.to_dict().items()), encoding="utf-8")


def _coerce(key: str, raw: str, annotation: str):
    raw = str(raw).strip()
    try:
        if "bool" in annotation:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if "Optional" in annotation and raw in ("None", ""):
            return None
        if "float" in annotation:
            return float(raw)
        if "int" in annotation:
            return int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"option {key}: cannot parse {raw!r}") from None


def read_key_values(path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError(path, lineno, f"expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


@dataclass
class EpochRecord:
    epoch: int
    err_img: float
    err_text: float
    rank_loss: float
    total_loss: float
    seconds: float


@dataclass
class TrainLog:
    """Per-epoch records; ``seconds`` is wall time and is excluded from equality."""

    records: list = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ConfigError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrainLog) or len(self) != len(other):
            return False
        key = lambda r: (r.epoch, r.err_img, r.err_text, r.rank_loss, r.total_loss)  # noqa: E731
        return all(
            np.array_equal(np.array(key(a)), np.array(key(b)), equal_nan=True)
            for a, b in zip(self.records, other.records)
        )

    def to_tsv(self) -> str:
        lines = ["epoch\terr_img\terr_text\trank_loss\ttotal_loss\tseconds"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{r.err_img!r}\t{r.err_text!r}\t{r.rank_loss!r}\t{r.total_loss!r}\t{r.seconds:.3f}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if lineno == 1 or not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ParseError(path, lineno, f"expected 6 columns, got {len(parts)}")
            try:
                log.append(EpochRecord(int(parts[0]), *(float(p) for p in parts[1:])))
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
        return log


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


def epoch_rng(seed: int, stage: int, epoch: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stage), int(epoch), _PURPOSES[purpose]])


@dataclass
class Batch:
    images: np.ndarray  # [B, 3, H, W]
    codes: np.ndarray  # [B, L]
    class_ids: np.ndarray  # [B]
    group_rows: np.ndarray  # [B] row of the group inside the split
    flipped: np.ndarray  # [B] bool
    caption_rows: np.ndarray  # [B] flat caption index inside the split


def caption_table(groups: list, vocab: Vocabulary) -> tuple[list, np.ndarray]:
    """Word indices of every caption in a split and the group row each belongs to."""
    words, owner = [], []
    for row, g in enumerate(groups):
        for caption in g.captions:
            idx = vocab.lookup(tokenize(caption))
            if not idx:
                raise DataError(f"caption of group {g.group_id} has no in-vocabulary word: {caption!r}")
            words.append(idx)
            owner.append(row)
    return words, np.asarray(owner, dtype=np.int64)


def encode_words(words: list, max_len: int, mode: str, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    codes = np.full((len(words), max_len), PAD, dtype=np.int64)
    for i, w in enumerate(words):
        w = w[:max_len]
        offset = 0 if mode == "left" else int(rng.integers(0, max_len - len(w) + 1))
        codes[i] = place(w, max_len, offset).indices
    return codes


def epoch_iterate(groups: list, batch_size: int, rng: np.random.Generator, vocab: Vocabulary,
                  max_len: int, shift_mode: str = "shift", augment: bool = True,
                  words: Optional[list] = None) -> Iterator[Batch]:
    """Shuffle all captions of a split and yield batches; the last batch may be short.

    Each element pairs a caption (position-shifted when ``shift_mode`` is
    ``shift``) with its group's image (randomly flipped when ``augment``) and
    the group's class id.
    """
    if words is None:
        words, owner = caption_table(groups, vocab)
    else:
        owner = np.asarray([row for row, g in enumerate(groups) for _ in g.captions], dtype=np.int64)
    order = rng.permutation(len(words))
    for start in range(0, len(order), batch_size):
        rows = order[start : start + batch_size]
        g_rows = owner[rows]
        images, flipped = [], []
        for r in g_rows:
            img = groups[r].image
            if augment:
                out = augment_image(img, rng, "train")
                flipped.append(out is not img)
                img = out
            else:
                flipped.append(False)
            images.append(img)
        codes = encode_words([words[r] for r in rows], max_len, shift_mode, rng)
        yield Batch(
            images=np.stack(images),
            codes=codes,
            class_ids=np.asarray([groups[r].group_id for r in g_rows], dtype=np.int64),
            group_rows=g_rows,
            flipped=np.asarray(flipped),
            caption_rows=rows,
        )


# --------------------------------------------------------------------------
# evaluation during training
# --------------------------------------------------------------------------


def classification_error(model: DualPathModel, groups: list, vocab: Vocabulary,
                         image_features: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Eval-mode instance classification error of the image path and the text path.

    Images are evaluated unflipped and captions left-aligned. ``image_features``
    may supply precomputed backbone outputs for the unflipped images.
    """
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            ids = np.asarray([g.group_id for g in groups])
            if image_features is None:
                f_img = _batched(lambda x: model.image_forward(x), np.stack([g.image for g in groups]))
            else:
                f_img = model.image_head(Tensor(image_features)).data
            err_img = float(np.mean((f_img @ model.w_share.data).argmax(axis=1) != ids))
            words, owner = caption_table(groups, vocab)
            codes = encode_words(words, model.config.max_len, "left")
            f_txt = _batched(lambda c: model.text_forward(c), codes)
            err_text = float(np.mean((f_txt @ model.w_share.data).argmax(axis=1) != ids[owner]))
    finally:
        model.train(was_training)
    return err_img, err_text


def _batched(fn, inputs: np.ndarray, size: int = 128) -> np.ndarray:
    return np.concatenate([fn(inputs[i : i + size]).data for i in range(0, len(inputs), size)])


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def stage1_setup(model: DualPathModel, groups: list) -> None:
    """Freeze the image backbone and fix its batchnorm statistics on the training images.

    The backbone's BN layers run in eval mode for the whole stage, so its
    output is a fixed function of the input image.
    """
    backbone = model.image_backbone
    backbone.freeze()
    images = np.stack([g.image for g in groups] + [g.image[..., ::-1] for g in groups])
    nhwc = np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=model.dtype)
    batches = [Tensor(nhwc[i : i + 64]) for i in range(0, len(nhwc), 64)]
    calibrate_batchnorm(backbone, backbone, batches)


def _backbone_cache(model: DualPathModel, groups: list) -> np.ndarray:
    """Frozen backbone outputs [2, G, C] for unflipped and flipped images."""
    backbone = model.image_backbone
    backbone.eval()
    with no_grad():
        out = []
        for flip in (False, True):
            imgs = np.stack([g.image[..., ::-1] if flip else g.image for g in groups])
            nhwc = np.ascontiguousarray(imgs.transpose(0, 2, 3, 1), dtype=model.dtype)
            out.append(np.concatenate([backbone(Tensor(nhwc[i : i + 64])).data for i in range(0, len(nhwc), 64)]))
    return np.stack(out)


def _set_modes(model: DualPathModel, stage: int) -> None:
    model.train()
    model.image_backbone.freeze(stage == 1)
    if stage == 1:
        model.image_backbone.eval()


def train(model: DualPathModel, dataset: Dataset, config: TrainConfig, vocab: Vocabulary, *,
          start_epoch: int = 0, log: Optional[TrainLog] = None, checkpoint_path=None,
          meta: Optional[dict] = None, progress=None) -> tuple[DualPathModel, TrainLog]:
    """Run epochs ``start_epoch .. config.epochs - 1`` of the configured stage.

    Args:
        model: Model to update in place.
        dataset: Corpus; only the train split is used.
        config: Stage hyperparameters.
        vocab: Vocabulary for caption encoding.
        start_epoch: First epoch to run (for resuming).
        log: Existing log to extend.
        checkpoint_path: Where to write the checkpoint every
            ``config.checkpoint_every`` epochs and at the end.
        meta: Extra checkpoint header entries.
        progress: Optional callable receiving each :class:`EpochRecord`.

    Raises:
        ConfigError: if the train split has fewer captions than one batch.
    """
    groups = dataset.train
    words, _ = caption_table(groups, vocab)
    if len(words) < config.batch_size:
        raise ConfigError(f"train split has {len(words)} captions, fewer than batch size {config.batch_size}")
    log = log if log is not None else TrainLog()
    stage = config.stage
    weights = config.weights
    # with no instance term the shared classifier receives no gradient
    model.w_share.frozen = weights.lambda2 == 0 and weights.lambda3 == 0
    cache = _backbone_cache(model, groups) if stage == 1 else None
    params = model.parameters()
    best_err, since_best = math.inf, 0

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        _set_modes(model, stage)
        order_rng = epoch_rng(config.seed, stage, epoch, "order")
        drop_rng = epoch_rng(config.seed, stage, epoch, "dropout")
        neg_rng = epoch_rng(config.seed, stage, epoch, "negatives")
        rank_sum = total_sum = 0.0
        n_batches = 0
        for batch in epoch_iterate(groups, config.batch_size, order_rng, vocab, model.config.max_len,
                                   config.shift_mode, words=words):
            if len(batch.class_ids) < 2:
                continue  # batchnorm needs two rows
            if cache is not None:
                f_img = model.image_head(Tensor(cache[batch.flipped.astype(int), batch.group_rows]), drop_rng)
            else:
                f_img = model.image_forward(batch.images, drop_rng)
            f_txt = model.text_forward(batch.codes, drop_rng)
            rank = visual = textual = None
            if weights.lambda1 > 0:
                quad = sample_negatives(f_img, f_txt, batch.class_ids, config.negatives, neg_rng)
                rank = ranking_loss(quad, config.margin)
                rank_sum += float(rank.data)
            if weights.lambda2 > 0 or weights.lambda3 > 0:
                visual, textual = instance_loss(f_img, f_txt, batch.class_ids, model.w_share)
            loss = combined_loss(rank, visual, textual, weights)
            zero_grad(params)
            backward(loss)
            sgd_momentum_step(params, config.lr, config.momentum)
            total_sum += float(loss.data)
            n_batches += 1
        err_img, err_text = classification_error(model, groups, vocab, None if cache is None else cache[0])
        record = EpochRecord(
            epoch=epoch,
            err_img=err_img,
            err_text=err_text,
            rank_loss=rank_sum / n_batches if weights.lambda1 > 0 else float("nan"),
            total_loss=total_sum / n_batches,
            seconds=time.perf_counter() - t0,
        )
        log.append(record)
        if progress is not None:
            progress(record)
        done = epoch + 1 == config.epochs
        if config.patience:
            err = err_img + err_text
            if err < best_err:
                best_err, since_best = err, 0
            else:
                since_best += 1
            done = done or since_best >= config.patience
        if checkpoint_path is not None and (done or (config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0)):
            save_checkpoint(model, checkpoint_path, {**(meta or {}), "stage": stage, "epoch": epoch + 1})
        if done:
            break
    model.eval()
    return model, log


def train_stage1(model: DualPathModel, dataset: Dataset, config: TrainConfig, vocab: Vocabulary,
                 **kwargs) -> tuple[DualPathModel, TrainLog]:
    """Stage 1: image backbone frozen (BN statistics fixed), instance loss on everything else.

    Raises:
        ConfigError: if ``config.stage`` is not 1 or the dataset is too small.
    """
    if config.stage != 1:
        raise ConfigError(f"train_stage1 needs a stage-1 config, got stage {config.stage}")
    if kwargs.get("start_epoch", 0) == 0:
        words, _ = caption_table(dataset.train, vocab)
        if len(words) < config.batch_size:
            raise ConfigError(f"train split has {len(words)} captions, fewer than batch size {config.batch_size}")
        stage1_setup(model, dataset.train)
    return train(model, dataset, config, vocab, **kwargs)


def train_stage2(model: DualPathModel, dataset: Dataset, config: TrainConfig, vocab: Vocabulary,
                 stage1_meta: dict, expected_hash: Optional[str] = None, **kwargs) -> tuple[DualPathModel, TrainLog]:
    """Stage 2: end-to-end fine-tuning of a stage-1 model with ranking plus instance loss.

    Args:
        stage1_meta: Checkpoint header of the starting model; must record stage
            1 (or stage 2 when resuming) and the model's config hash.
        expected_hash: Config hash the caller expects, e.g. from a config file.

    Raises:
        ConfigError: on a stage mismatch or a config hash mismatch.
    """
    if config.stage != 2:
        raise ConfigError(f"train_stage2 needs a stage-2 config, got stage {config.stage}")
    resuming = kwargs.get("start_epoch", 0) > 0
    want_stage = "2" if resuming else "1"
    if str(stage1_meta.get("stage")) != want_stage:
        raise ConfigError(f"stage mismatch: checkpoint records stage {stage1_meta.get('stage')}, need {want_stage}")
    got = stage1_meta.get("config_hash")
    if got != model.config.config_hash() or (expected_hash is not None and got != expected_hash):
        raise ConfigError(f"config mismatch: checkpoint hash {got} vs expected {expected_hash or model.config.config_hash()}")
    return train(model, dataset, config, vocab, **kwargs)
