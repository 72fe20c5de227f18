"""Command-line interface: ``dualpath <command> [flags]``.

Every command validates its inputs and output paths before writing anything
and exits nonzero with a one-line ``error:`` diagnostic on failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional

from .data import generate_corpus, load_dataset, save_dataset
from .errors import ConfigError, DualPathError, UsageError
from .evaluation import FeatureBank, extract_features, retrieval_metrics, word_importance
from .experiments import comparison_table, comparison_tsv, compare_losses, train_vocabulary
from .model import DualPathModel, ModelConfig, load_checkpoint, save_checkpoint
from .text import Vocabulary
from .train import TrainConfig, TrainLog, read_key_values, train_stage1, train_stage2

CORPUS_KEYS = {"sizes", "captions_per_group", "image_size", "position_jitter"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"stage", "seed"}
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"vocab_size", "num_classes", "init_seed", "image_size"}
# "stage1.<key>" / "stage2.<key>" override a training key for one stage only
STAGE_PREFIXES = ("stage1.", "stage2.")

# fixed output names under --out
VOCAB_FILE = "vocab.txt"
REPORT_TABLE, REPORT_TSV, HISTOGRAM_TSV = "report.txt", "report.tsv", "histograms.tsv"
PROBE_TSV = "word_importance.tsv"
COMPARE_TABLE, COMPARE_TSV = "compare_losses.txt", "compare_losses.tsv"
DEFAULT_EPOCHS = {1: 300, 2: 100}


def stage_files(stage: int) -> tuple[str, str, str]:
    """Checkpoint, log and config file names written by ``train --stage N``."""
    return f"stage{stage}.ckpt", f"stage{stage}_log.tsv", f"stage{stage}_config.txt"


def bank_file(split: str) -> str:
    return f"bank_{split}.npz"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualpath", description="Dual-path image-text embedding toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="flat key=value settings file")
        p.add_argument("--seed", type=int, default=0, help="seed for every stochastic choice")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        return p

    def inputs(p, data=True, vocab=True, required=True):
        if data:
            p.add_argument("--data", type=Path, required=required, help="corpus directory")
        if vocab:
            p.add_argument("--vocab", type=Path, required=required, help="vocabulary file")

    def split(p, default="val"):
        p.add_argument("--split", choices=("train", "val", "test"), default=default)

    command("gen-corpus", "generate the synthetic corpus")
    inputs(command("build-vocab", "vocabulary over the training captions"), vocab=False)
    p = command("train", "train one stage")
    inputs(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--checkpoint", type=Path, help="stage-1 model (stage 2) or a checkpoint to resume")
    p.add_argument("--strategy", choices=("random", "hardest"), help="negative sampling")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p = command("eval", "retrieval report for one split")
    inputs(p, required=False)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--bank", type=Path, help="evaluate a saved feature bank instead of a model")
    split(p)
    p = command("embed", "write the feature bank of one split")
    inputs(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    split(p)
    p = command("probe-words", "word-deletion importance over one split")
    inputs(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    split(p, "test")
    p = command("compare-losses", "rank-only vs instance-only vs full training")
    inputs(p)
    p.add_argument("--strategy", choices=("random", "hardest"), help="negative sampling")
    split(p)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def load_settings(path: Optional[Path]) -> dict[str, str]:
    """Read ``--config``; every key must belong to the corpus, model or training settings."""
    if path is None:
        return {}
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = read_key_values(path)
    known = CORPUS_KEYS | TRAIN_KEYS | MODEL_KEYS
    unknown = sorted(k for k in values if k not in known and _unprefixed(k) not in TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
    return values


def _unprefixed(key: str) -> Optional[str]:
    for prefix in STAGE_PREFIXES:
        if key.startswith(prefix):
            return key[len(prefix):]
    return None


def model_config(settings: dict, vocab: Vocabulary, dataset, seed: int) -> ModelConfig:
    values = {k: v for k, v in settings.items() if k in MODEL_KEYS}
    values.update(vocab_size=str(len(vocab)), num_classes=str(dataset.num_classes), init_seed=str(seed))
    if dataset.train:
        values["image_size"] = str(dataset.train[0].image.shape[-1])
    return ModelConfig.from_dict(values)


def train_config(settings: dict, stage: int, seed: int, epochs: Optional[int] = None,
                 strategy: Optional[str] = None) -> TrainConfig:
    values = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    prefix = f"stage{stage}."
    values.update({k[len(prefix):]: v for k, v in settings.items() if k.startswith(prefix)})
    values.setdefault("epochs", str(DEFAULT_EPOCHS[stage]))
    if epochs is not None:
        values["epochs"] = str(epochs)
    if strategy is not None:
        values["negatives"] = strategy
    values.update(stage=str(stage), seed=str(seed))
    return TrainConfig.from_dict(values)


def require_file(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    if not path.exists():
        raise DualPathError(f"{what} not found: {path}")
    return path


def claim_outputs(out: Path, names, overwrite: bool) -> list[Path]:
    """Refuse to clobber existing outputs unless ``overwrite``; returns the output paths."""
    paths = [out / n for n in names]
    existing = [p for p in paths if p.exists()]
    if existing and not overwrite:
        raise DualPathError(f"output exists: {existing[0]} (use --overwrite)")
    return paths


def _load(args):
    dataset = load_dataset(require_file(args.data, "--data"))
    vocab = Vocabulary.load(require_file(args.vocab, "--vocab"))
    return dataset, vocab


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_corpus(args, settings) -> None:
    kwargs = {}
    if "sizes" in settings:
        kwargs["sizes"] = tuple(int(v) for v in settings["sizes"].split(","))
    if "captions_per_group" in settings:
        kwargs["captions_per_group"] = int(settings["captions_per_group"])
    if "image_size" in settings:
        kwargs["image_size"] = int(settings["image_size"])
    if "position_jitter" in settings:
        kwargs["position_jitter"] = float(settings["position_jitter"])
    dataset = generate_corpus(seed=args.seed, **kwargs)
    if args.out.exists() and any(args.out.iterdir()) and not args.overwrite:
        raise DualPathError(f"output exists: {args.out} is not empty (use --overwrite)")
    save_dataset(dataset, args.out, overwrite=True)
    print(f"wrote {len(dataset.all_groups())} groups to {args.out}")


def cmd_build_vocab(args, settings) -> None:
    dataset = load_dataset(require_file(args.data, "--data"))
    (path,) = claim_outputs(args.out, [VOCAB_FILE], args.overwrite)
    vocab = train_vocabulary(dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(path)
    print(f"wrote {len(vocab)} words to {path}")


def cmd_train(args, settings) -> None:
    dataset, vocab = _load(args)
    stage = args.stage
    cfg = train_config(settings, stage, args.seed, args.epochs, args.strategy)
    expected = model_config(settings, vocab, dataset, args.seed)
    ckpt_path, log_path, cfg_path = claim_outputs(args.out, stage_files(stage), args.overwrite)
    start_epoch, log = 0, TrainLog()
    model: Optional[DualPathModel] = None
    meta: dict = {}
    if args.checkpoint is not None:
        model, meta = load_checkpoint(require_file(args.checkpoint, "--checkpoint"))
        if meta.get("config_hash") != expected.config_hash():
            raise ConfigError(
                f"config mismatch: checkpoint {args.checkpoint} has hash {meta.get('config_hash')}, "
                f"settings give {expected.config_hash()}"
            )
        if str(meta.get("stage")) == str(stage):
            start_epoch = int(meta.get("epoch", 0))
            prior = args.checkpoint.parent / stage_files(stage)[1]
            if prior.is_file():
                log.records = [r for r in TrainLog.load(prior).records if r.epoch < start_epoch]
        elif stage == 1:
            raise ConfigError(f"stage mismatch: {args.checkpoint} records stage {meta.get('stage')}")
    elif stage == 2:
        raise UsageError("train --stage 2 needs --checkpoint with a stage-1 model")
    if model is None:
        model = DualPathModel(expected)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(cfg_path)

    def progress(record):
        print(f"epoch {record.epoch}: err_img {record.err_img:.4f} err_text {record.err_text:.4f} "
              f"loss {record.total_loss:.4f} ({record.seconds:.1f}s)", flush=True)

    kwargs = dict(start_epoch=start_epoch, log=log, checkpoint_path=ckpt_path, meta={"seed": args.seed},
                  progress=progress)
    if stage == 1:
        _, log = train_stage1(model, dataset, cfg, vocab, **kwargs)
    else:
        _, log = train_stage2(model, dataset, cfg, vocab, meta, expected.config_hash(), **kwargs)
    log.save(log_path)
    if not ckpt_path.exists():  # zero remaining epochs
        save_checkpoint(model, ckpt_path, {"seed": args.seed, "stage": stage, "epoch": start_epoch})
    print(f"wrote {ckpt_path}")


def cmd_eval(args, settings) -> None:
    if args.bank is not None:
        bank = FeatureBank.load(require_file(args.bank, "--bank"))
    else:
        dataset, vocab = _load(args)
        model, _ = load_checkpoint(require_file(args.checkpoint, "--checkpoint"))
        bank = extract_features(model, dataset.split(args.split), vocab)
    paths = claim_outputs(args.out, [REPORT_TABLE, REPORT_TSV, HISTOGRAM_TSV], args.overwrite)
    report = retrieval_metrics(bank)
    for path, text in zip(paths, (report.table(), report.to_tsv(), report.histogram_tsv())):
        _write(path, text)
    print(report.table(), end="")


def cmd_embed(args, settings) -> None:
    dataset, vocab = _load(args)
    model, _ = load_checkpoint(require_file(args.checkpoint, "--checkpoint"))
    (path,) = claim_outputs(args.out, [bank_file(args.split)], args.overwrite)
    bank = extract_features(model, dataset.split(args.split), vocab)
    path.parent.mkdir(parents=True, exist_ok=True)
    bank.save(path)
    print(f"wrote {path} ({bank.image.shape[0]} images, {bank.text.shape[0]} captions)")


def cmd_probe_words(args, settings) -> None:
    dataset, vocab = _load(args)
    model, _ = load_checkpoint(require_file(args.checkpoint, "--checkpoint"))
    (path,) = claim_outputs(args.out, [PROBE_TSV], args.overwrite)
    rows = ["group_id\tcaption\trank\tposition\tword\tdrop"]
    for g in dataset.split(args.split):
        for ci, caption in enumerate(g.captions):
            for rank, d in enumerate(word_importance(model, g.image, caption, vocab), 1):
                rows.append(f"{g.group_id}\t{ci}\t{rank}\t{d.position}\t{d.word}\t{d.drop!r}")
    _write(path, "\n".join(rows) + "\n")
    print(f"wrote {path}")


def cmd_compare_losses(args, settings) -> None:
    dataset, vocab = _load(args)
    paths = claim_outputs(args.out, [COMPARE_TABLE, COMPARE_TSV], args.overwrite)
    cfg1 = train_config(settings, 1, args.seed, strategy=args.strategy)
    cfg2 = train_config(settings, 2, args.seed, strategy=args.strategy)
    reports = compare_losses(dataset, vocab, model_config(settings, vocab, dataset, args.seed), cfg1, cfg2,
                             args.split)
    _write(paths[0], comparison_table(reports))
    _write(paths[1], comparison_tsv(reports))
    print(comparison_table(reports), end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "probe-words": cmd_probe_words,
    "compare-losses": cmd_compare_losses,
}


def run(argv=None) -> int:
    """Execute one command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        settings = load_settings(args.config)
        COMMANDS[args.command](args, settings)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (DualPathError, OSError, ValueError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
