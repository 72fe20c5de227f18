"""Dual-path image/text network and its checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import functional as F
from .autograd import Parameter, Tensor
from .errors import ConfigError, DimensionError, FormatError
from .nn import BatchNorm, Conv2d, Linear, Module, ResidualBlock
from .text import Vocabulary, glorot_uniform, init_word_embedding


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Widths are desk-scale defaults."""

    vocab_size: int
    num_classes: int
    embed_dim: int = 64
    word_embed_dim: int = 32
    image_size: int = 32
    image_channels: tuple = (16, 32, 64, 64)
    text_channels: tuple = (32, 32, 64, 64)
    blocks_per_stage: int = 1
    text_stride: int = 1
    text_pad: str = "left"
    max_len: int = 32
    dropout: float = 0.75
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    init_seed: int = 0
    embedding_source: str = "random"
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 1 or self.num_classes < 1:
            raise ConfigError("vocab_size and num_classes must be positive")
        sizes = (self.embed_dim, self.word_embed_dim, self.image_size, self.max_len, *self.image_channels,
                 *self.text_channels)
        if not self.image_channels or min(sizes) < 1:
            raise ConfigError("dimensions, widths and lengths must be positive")
        if len(self.image_channels) != len(self.text_channels):
            raise ConfigError("image and text paths need the same number of stages")
        if self.text_stride not in (1, 2):
            raise ConfigError(f"text_stride must be 1 or 2, got {self.text_stride}")
        if self.text_pad not in ("left", "right"):
            raise ConfigError(f"text_pad must be left or right, got {self.text_pad!r}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.embedding_source not in ("random", "table"):
            raise ConfigError(f"embedding_source must be random or table, got {self.embedding_source!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in names:
                raise ConfigError(f"unknown model config key {key!r}")
            default = names[key].default
            if key in ("vocab_size", "num_classes") or isinstance(default, int) and not isinstance(default, bool):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            elif isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in str(raw).split(",") if v.strip())
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)

    def config_hash(self) -> str:
        text = "".join(f"{k}={v}\n" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class Head(Module):
    """fc -> batchnorm -> relu -> dropout -> fc."""

    def __init__(self, d_in, d_out, dropout, *, rng, dtype, bn_momentum, bn_epsilon):
        super().__init__()
        self.dropout = dropout
        self.fc1 = Linear(d_in, d_out, rng=rng, dtype=dtype)
        self.bn = BatchNorm(d_out, bn_momentum, bn_epsilon, dtype)
        self.fc2 = Linear(d_out, d_out, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = F.relu(self.bn(self.fc1(x)))
        h = F.dropout(h, self.dropout, self.training, rng)
        return self.fc2(h)


class ImageBackbone(Module):
    """Stem (conv-bn-relu, 2x2 max pool), stages of 3x3 residual blocks, global pooling."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c0 = cfg.image_channels[0]
        self.stem = Conv2d(3, c0, (3, 3), 1, rng=rng, dtype=dtype, layout="NHWC")
        self.stem_bn = BatchNorm(c0, cfg.bn_momentum, cfg.bn_epsilon, dtype, channel_axis=-1)
        self.blocks = _stages(c0, cfg.image_channels, (3, 3), cfg, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        """[N, H, W, 3] -> [N, C_last]."""
        h = F.relu(self.stem_bn(self.stem(x)))
        h = F.pool2d(h, (2, 2), "max", layout="NHWC")
        for block in self.blocks:
            h = block(h)
        return F.global_avg_pool(h, "NHWC")


class TextBackbone(Module):
    """Stages of 1x2 residual blocks over the word-vector sequence, then pooling over length."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        self.blocks = _stages(cfg.word_embed_dim, cfg.text_channels, (1, 2), cfg, rng, dtype, cfg.text_stride,
                              "before" if cfg.text_pad == "left" else "after")

    def forward(self, x: Tensor) -> Tensor:
        """[N, 1, L, E] -> [N, C_last]."""
        h = x
        for block in self.blocks:
            h = block(h)
        return F.global_avg_pool(h, "NHWC")


def _stages(c_in, widths, kernel, cfg, rng, dtype, downsample: int = 2, even_pad: str = "after") -> list:
    blocks = []
    for stage, width in enumerate(widths):
        for b in range(cfg.blocks_per_stage):
            stride = downsample if stage > 0 and b == 0 else 1
            blocks.append(
                ResidualBlock(c_in, width, kernel, stride=stride, rng=rng, dtype=dtype,
                              bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_epsilon, even_pad=even_pad)
            )
            c_in = width
    return blocks


class DualPathModel(Module):
    """Image CNN and text CNN with unshared heads and one shared classifier ``w_share`` [D, N]."""

    def __init__(self, cfg: ModelConfig, vocab: Optional[Vocabulary] = None):
        super().__init__()
        self.config = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.init_seed)
        self.image_backbone = ImageBackbone(cfg, rng, dtype)
        self.image_head = Head(cfg.image_channels[-1], cfg.embed_dim, cfg.dropout, rng=rng, dtype=dtype,
                               bn_momentum=cfg.bn_momentum, bn_epsilon=cfg.bn_epsilon)
        if cfg.embedding_source == "table":
            if vocab is None or len(vocab) != cfg.vocab_size:
                raise ConfigError("table embedding init needs the matching vocabulary")
            self.word_embedding = init_word_embedding(vocab, cfg.word_embed_dim, "table", dtype=dtype)
        else:
            self.word_embedding = Parameter(glorot_uniform(rng, cfg.vocab_size, cfg.word_embed_dim, dtype))
        self.text_backbone = TextBackbone(cfg, rng, dtype)
        self.text_head = Head(cfg.text_channels[-1], cfg.embed_dim, cfg.dropout, rng=rng, dtype=dtype,
                              bn_momentum=cfg.bn_momentum, bn_epsilon=cfg.bn_epsilon)
        self.w_share = Parameter(
            (rng.standard_normal((cfg.embed_dim, cfg.num_classes)) * np.sqrt(1.0 / cfg.embed_dim)).astype(dtype)
        )
        for name, p in self.named_parameters():
            p.name = name

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def image_forward(self, images, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Descriptors [N, D] for a batch of images [N, 3, H, W]."""
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected images of shape [N, 3, {size}, {size}], got {x.shape}")
        if x.shape[2:] != (size, size):
            raise DimensionError(f"image spatial size {x.shape[2:]} does not match config ({size}, {size})")
        x = Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype))
        return self.image_head(self.image_backbone(x), rng)

    def embed_words(self, codes) -> Tensor:
        """Lookup layer: [N, L] word indices -> [N, 1, L, E] channels-last word-vector maps."""
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.config.max_len:
            raise DimensionError(f"expected codes of shape [N, {self.config.max_len}], got {codes.shape}")
        vectors = F.embedding(codes, self.word_embedding)  # [N, L, E]
        n, length, e = vectors.shape
        return F.reshape(vectors, (n, 1, length, e))

    def text_forward(self, codes, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Descriptors [N, D] for a batch of sentence codes [N, L]."""
        return self.text_head(self.text_backbone(self.embed_words(codes)), rng)

    def classify(self, features: Tensor) -> Tensor:
        return classify(features, self.w_share)

    def image_parameters(self) -> list[Parameter]:
        return self.image_backbone.parameters()


def classify(features: Tensor, w_share: Tensor) -> Tensor:
    """Bias-free class scores ``features @ w_share``."""
    if features.ndim != 2 or features.shape[1] != w_share.shape[0]:
        raise DimensionError(f"features {features.shape} do not match classifier {w_share.shape}")
    return F.matmul(features, w_share)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"DUALPATH-CKPT\n"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _records(model: DualPathModel):
    for name, p in model.named_parameters():
        yield f"param:{name}", p.data
        yield f"momentum:{name}", p.momentum_buffer
    for name, buf in model.named_buffers():
        yield f"buffer:{name}", buf


def save_checkpoint(model: DualPathModel, path, meta: Optional[dict] = None) -> None:
    """Write parameters, momentum buffers, BN running statistics, config and ``meta``.

    Layout: magic, uint32 version, uint32-length key=value header, uint32
    record count, records (uint16 name length, name, uint8 dtype code, uint8
    ndim, uint32 dims, little-endian raw values), 32-byte SHA-256 of all
    preceding bytes.
    """
    header = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    header["config_hash"] = model.config.config_hash()
    for k, v in (meta or {}).items():
        header[f"meta.{k}"] = str(v)
    text = "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(text)), text]
    records = list(_records(model))
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        code = _CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    """Parse a checkpoint into ``(model_config_values, meta, arrays)`` after integrity checks."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic header)")
    if len(raw) < len(MAGIC) + 4 + 32:
        raise FormatError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    reader = _Reader(body, path)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted checkpoint)")
    (hlen,) = reader.unpack("<I")
    header: dict[str, str] = {}
    for line in reader.take(hlen).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(body):
        raise FormatError(f"{path}: trailing bytes after the last record")
    model_values = {k[len("model."):]: v for k, v in header.items() if k.startswith("model.")}
    meta = {k[len("meta."):]: v for k, v in header.items() if k.startswith("meta.")}
    cfg = ModelConfig.from_dict(model_values)
    if header.get("config_hash") != cfg.config_hash():
        raise FormatError(f"{path}: stored config hash does not match the stored config")
    meta["config_hash"] = header["config_hash"]
    return model_values, meta, arrays


def load_checkpoint(path) -> tuple[DualPathModel, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, meta)``."""
    model_values, meta, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(model_values)
    model = DualPathModel(dataclasses.replace(cfg, embedding_source="random"))
    model.config = cfg
    load_state(model, arrays, path)
    return model, meta


def load_state(model: DualPathModel, arrays: dict, path="<memory>") -> None:
    expected = {name for name, _ in _records(model)}
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise FormatError(f"{path}: record mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in model.named_parameters():
        _check_shape(path, name, p.data.shape, arrays[f"param:{name}"].shape)
        p.data = arrays[f"param:{name}"].astype(p.data.dtype, copy=True)
        p.momentum_buffer = arrays[f"momentum:{name}"].astype(p.data.dtype, copy=True)
    modules = dict(_named_modules(model))
    for name, _ in model.named_buffers():
        owner, _, attr = name.rpartition(".")
        buf = arrays[f"buffer:{name}"]
        _check_shape(path, name, getattr(modules[owner], attr).shape, buf.shape)
        setattr(modules[owner], attr, buf.astype(np.float64, copy=True))


def _check_shape(path, name, want, got):
    if tuple(want) != tuple(got):
        raise FormatError(f"{path}: {name} has shape {tuple(got)}, model expects {tuple(want)}")


def _named_modules(module: Module, prefix: str = ""):
    yield prefix.rstrip("."), module
    for name, child in module.children():
        yield from _named_modules(child, prefix + name + ".")
