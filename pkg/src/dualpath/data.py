"""Synthetic image/caption groups and the on-disk corpus format.

Every group is one image plus several captions and is its own class. The
synthetic generator draws a unique (color, shape, count, background) tuple per
group, renders it as colored glyphs on a flat background and writes lexically
varied captions from templates and per-attribute synonym tables.

Directory layout read and written here::

    images/<group_id>.ppm   binary PPM (P6, 8-bit)
    captions.tsv            group_id<TAB>caption
    splits.tsv              group_id<TAB>train|val|test
    spec.txt                key=value generation record
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, DataError, ParseError
from .text import tokenize

SPLITS = ("train", "val", "test")

COLOR_RGB = {
    "red": (230, 30, 30),
    "green": (30, 190, 50),
    "blue": (40, 80, 240),
    "yellow": (240, 225, 30),
    "purple": (150, 50, 200),
    "orange": (255, 140, 10),
    "cyan": (20, 220, 220),
    "pink": (250, 120, 190),
}
BACKGROUND_RGB = {
    "gray": (128, 128, 128),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
    "brown": (110, 70, 30),
}

COLOR_WORDS = {
    "red": ("red", "crimson"),
    "green": ("green", "emerald"),
    "blue": ("blue", "azure"),
    "yellow": ("yellow", "golden"),
    "purple": ("purple", "violet"),
    "orange": ("orange", "amber"),
    "cyan": ("cyan", "turquoise"),
    "pink": ("pink", "rosy"),
}
# (singular, plural) surface forms
SHAPE_WORDS = {
    "circle": (("circle", "circles"), ("disc", "discs")),
    "square": (("square", "squares"), ("box", "boxes")),
    "triangle": (("triangle", "triangles"), ("wedge", "wedges")),
    "cross": (("cross", "crosses"), ("plus", "pluses")),
}
COUNT_WORDS = {
    1: ("one", "single"),
    2: ("two", "twin"),
    3: ("three", "triple"),
    4: ("four", "quadruple"),
}
BACKGROUND_WORDS = {
    "gray": ("gray", "grey"),
    "white": ("white", "pale"),
    "black": ("black", "dark"),
    "brown": ("brown", "tan"),
}

TEMPLATES = (
    "a picture of {n} {c} {s} on a {b} background",
    "a {b} background with {n} {c} {s}",
    "{n} {c} {s} drawn on a {b} field",
    "a {b} scene showing {n} {s} in {c}",
    "there is a {b} backdrop behind {n} {c} {s}",
    "{n} {s} colored {c} over a {b} canvas",
)

# glyph centres in unit coordinates, per count
LAYOUTS = {
    1: ((0.5, 0.5),),
    2: ((0.3, 0.5), (0.7, 0.5)),
    3: ((0.5, 0.28), (0.28, 0.72), (0.72, 0.72)),
    4: ((0.3, 0.3), (0.7, 0.3), (0.3, 0.7), (0.7, 0.7)),
}


@dataclass(frozen=True)
class Grammar:
    """Attribute vocabulary of the synthetic corpus."""

    colors: tuple = ("red", "green", "blue", "yellow", "purple", "orange")
    shapes: tuple = ("circle", "square", "triangle", "cross")
    counts: tuple = (1, 2, 3, 4)
    backgrounds: tuple = ("gray", "white", "black")

    def __post_init__(self):
        for name, values, table in (
            ("color", self.colors, COLOR_WORDS),
            ("shape", self.shapes, SHAPE_WORDS),
            ("count", self.counts, COUNT_WORDS),
            ("background", self.backgrounds, BACKGROUND_WORDS),
        ):
            unknown = [v for v in values if v not in table]
            if unknown:
                raise DataError(f"unsupported {name} value(s): {unknown}")
            if len(set(values)) != len(values):
                raise DataError(f"duplicate {name} values")

    def tuples(self) -> list[tuple]:
        return list(itertools.product(self.colors, self.shapes, self.counts, self.backgrounds))

    @property
    def capacity(self) -> int:
        return len(self.colors) * len(self.shapes) * len(self.counts) * len(self.backgrounds)

    def surface_forms(self) -> dict[str, tuple[str, object]]:
        """Map every attribute word to ``(attribute_name, value)``."""
        forms: dict[str, tuple[str, object]] = {}
        for c in self.colors:
            for w in COLOR_WORDS[c]:
                forms[w] = ("color", c)
        for s in self.shapes:
            for pair in SHAPE_WORDS[s]:
                for w in pair:
                    forms[w] = ("shape", s)
        for n in self.counts:
            for w in COUNT_WORDS[n]:
                forms[w] = ("count", n)
        for b in self.backgrounds:
            for w in BACKGROUND_WORDS[b]:
                forms[w] = ("background", b)
        return forms


@dataclass(eq=False)
class ImageTextGroup:
    group_id: int
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    captions: list
    attributes: Optional[tuple] = None

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ImageTextGroup)
            and self.group_id == other.group_id
            and self.captions == other.captions
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )


@dataclass(eq=False)
class Dataset:
    train: list
    val: list
    test: list
    spec: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def num_classes(self) -> int:
        return len(self.train)

    def all_groups(self) -> list:
        return [*self.train, *self.val, *self.test]

    def validate(self) -> None:
        seen: set[int] = set()
        for name in SPLITS:
            for g in self.split(name):
                if g.group_id in seen:
                    raise DataError(f"group {g.group_id} appears more than once")
                seen.add(g.group_id)
                if not g.captions:
                    raise DataError(f"group {g.group_id} has no captions")
        train_ids = sorted(g.group_id for g in self.train)
        if train_ids != list(range(len(train_ids))):
            raise DataError("train group ids must form the contiguous range [0, N_train)")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and all(self.split(s) == other.split(s) for s in SPLITS)
            and self.spec == other.spec
        )


# --------------------------------------------------------------------------
# rendering and captions
# --------------------------------------------------------------------------


def _glyph_mask(shape: str, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= 0.5 * (dy + r))
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise DataError(f"unknown shape {shape!r}")


def render_image(attributes: tuple, size: int = 32, jitter: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw ``count`` glyphs of ``shape`` in ``color`` on a ``background`` fill.

    ``jitter`` is an optional [count, 2] array of centre offsets in unit
    coordinates. Values are quantized to multiples of 1/255 so the image
    survives an 8-bit round trip exactly.
    """
    color, shape, count, background = attributes
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB[background]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = 0.12 * size
    for i, (ux, uy) in enumerate(LAYOUTS[count]):
        if jitter is not None:
            ux, uy = ux + jitter[i, 0], uy + jitter[i, 1]
        img[_glyph_mask(shape, xx, yy, ux * size, uy * size, r)] = COLOR_RGB[color]
    return (img.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def realize_caption(attributes: tuple, template: str, rng: np.random.Generator) -> str:
    color, shape, count, background = attributes
    synonym = SHAPE_WORDS[shape][rng.integers(len(SHAPE_WORDS[shape]))]
    return template.format(
        n=COUNT_WORDS[count][rng.integers(len(COUNT_WORDS[count]))],
        c=COLOR_WORDS[color][rng.integers(len(COLOR_WORDS[color]))],
        s=synonym[0] if count == 1 else synonym[1],
        b=BACKGROUND_WORDS[background][rng.integers(len(BACKGROUND_WORDS[background]))],
    )


def parse_caption(caption: str, grammar: Grammar) -> tuple:
    """Recover ``(color, shape, count, background)`` from a generated caption."""
    forms = grammar.surface_forms()
    found: dict[str, object] = {}
    for tok in tokenize(caption):
        if tok in forms:
            attr, value = forms[tok]
            if attr in found and found[attr] != value:
                raise DataError(f"conflicting {attr} words in {caption!r}")
            found[attr] = value
    missing = [a for a in ("color", "shape", "count", "background") if a not in found]
    if missing:
        raise DataError(f"caption {caption!r} does not mention {missing}")
    return found["color"], found["shape"], found["count"], found["background"]


def attribute_positions(caption: str, grammar: Grammar) -> dict[str, list[int]]:
    """Token positions of each attribute word (and the article ``a``) in a caption."""
    forms = grammar.surface_forms()
    positions: dict[str, list[int]] = {"color": [], "shape": [], "count": [], "background": [], "article": []}
    for i, tok in enumerate(tokenize(caption)):
        if tok in forms:
            positions[forms[tok][0]].append(i)
        elif tok == "a":
            positions["article"].append(i)
    return positions


def generate_corpus(
    grammar: Grammar = Grammar(),
    sizes: Sequence[int] = (64, 16, 16),
    captions_per_group: int = 5,
    seed: int = 0,
    image_size: int = 32,
    position_jitter: float = 0.06,
) -> Dataset:
    """Draw a synthetic dataset with one unique attribute tuple per group.

    Args:
        grammar: Attribute values to combine.
        sizes: Group counts for the train, val and test splits.
        captions_per_group: Distinct captions written for every group.
        seed: Seed for tuple selection, glyph jitter and caption wording.
        image_size: Side length of the square images.
        position_jitter: Maximum per-glyph centre offset in unit coordinates.

    Raises:
        CapacityError: if the grammar has fewer tuples than requested groups,
            or a group cannot receive ``captions_per_group`` distinct captions.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 0:
        raise DataError(f"sizes must be three non-negative counts, got {sizes}")
    total = sum(sizes)
    if total > grammar.capacity:
        raise CapacityError(f"{total} groups requested but the grammar only has {grammar.capacity} attribute tuples")
    if captions_per_group < 1:
        raise DataError("captions_per_group must be at least 1")
    rng = np.random.default_rng(seed)
    tuples = grammar.tuples()
    chosen = [tuples[i] for i in rng.permutation(len(tuples))[:total]]

    groups = []
    for gid, attributes in enumerate(chosen):
        group_rng = np.random.default_rng([seed, gid])
        count = attributes[2]
        jitter = group_rng.uniform(-position_jitter, position_jitter, size=(count, 2)) if position_jitter else None
        image = render_image(attributes, image_size, jitter)
        captions = _distinct_captions(attributes, captions_per_group, group_rng)
        groups.append(ImageTextGroup(gid, image, captions, attributes))

    n_train, n_val, _ = sizes
    spec = {
        "seed": str(seed),
        "colors": ",".join(grammar.colors),
        "shapes": ",".join(grammar.shapes),
        "counts": ",".join(str(c) for c in grammar.counts),
        "backgrounds": ",".join(grammar.backgrounds),
        "sizes": ",".join(str(s) for s in sizes),
        "captions_per_group": str(captions_per_group),
        "image_size": str(image_size),
        "position_jitter": repr(float(position_jitter)),
    }
    ds = Dataset(groups[:n_train], groups[n_train : n_train + n_val], groups[n_train + n_val :], spec)
    ds.validate()
    return ds


def _distinct_captions(attributes, k: int, rng: np.random.Generator) -> list[str]:
    captions: list[str] = []
    order = rng.permutation(len(TEMPLATES))
    attempts = 0
    while len(captions) < k:
        template = TEMPLATES[order[len(captions) % len(TEMPLATES)]]
        caption = realize_caption(attributes, template, rng)
        attempts += 1
        if caption not in captions:
            captions.append(caption)
        elif attempts > 200 * k:
            raise CapacityError(f"cannot write {k} distinct captions for {attributes}")
    return captions


def grammar_from_spec(spec: dict) -> Grammar:
    return Grammar(
        colors=tuple(spec["colors"].split(",")),
        shapes=tuple(spec["shapes"].split(",")),
        counts=tuple(int(c) for c in spec["counts"].split(",")),
        backgrounds=tuple(spec["backgrounds"].split(",")),
    )


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def augment_image(image: np.ndarray, rng: Optional[np.random.Generator] = None, mode: str = "train",
                  crop_jitter: int = 0) -> np.ndarray:
    """Image augmentation for training and the two deterministic eval views.

    ``train`` flips with probability 0.5 and, if ``crop_jitter > 0``, shifts the
    image by up to that many pixels with edge padding.
    """
    if mode == "eval_noflip":
        return image
    if mode == "eval_flip":
        return flip_horizontal(image)
    if mode != "train":
        raise DataError(f"unknown augmentation mode {mode!r}")
    if rng is None:
        raise DataError("train augmentation needs a generator")
    out = image
    if rng.random() < 0.5:
        out = flip_horizontal(out)
    if crop_jitter > 0:
        dy, dx = rng.integers(-crop_jitter, crop_jitter + 1, size=2)
        h, w = out.shape[-2:]
        padded = np.pad(out, ((0, 0), (crop_jitter, crop_jitter), (crop_jitter, crop_jitter)), mode="edge")
        out = padded[:, crop_jitter + dy : crop_jitter + dy + h, crop_jitter + dx : crop_jitter + dx + w]
        out = np.ascontiguousarray(out)
    return out


# --------------------------------------------------------------------------
# disk format
# --------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [3,H,W] float image in [0,1] as 8-bit binary PPM."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos) if len(raw) - pos >= w * h * 3 else None
    if pixels is None:
        raise DataError(f"{path}: truncated PPM raster")
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def save_dataset(dataset: Dataset, root, overwrite: bool = False) -> None:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not overwrite:
        raise FileExistsError(f"{root} is not empty (use overwrite)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "captions.tsv", "w", encoding="utf-8") as cap, open(root / "splits.tsv", "w", encoding="utf-8") as spl:
        for name in SPLITS:
            for g in dataset.split(name):
                write_ppm(root / "images" / f"{g.group_id}.ppm", g.image)
                spl.write(f"{g.group_id}\t{name}\n")
                for c in g.captions:
                    if "\t" in c or "\n" in c:
                        raise DataError(f"caption of group {g.group_id} contains a tab or newline")
                    cap.write(f"{g.group_id}\t{c}\n")
    with open(root / "spec.txt", "w", encoding="utf-8") as fh:
        for key in sorted(dataset.spec):
            fh.write(f"{key}={dataset.spec[key]}\n")


def _read_tsv(path: Path) -> list[tuple[int, int, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip().isdigit():
                raise ParseError(path, lineno, f"expected 'group_id<TAB>value', got {line!r}")
            rows.append((lineno, int(parts[0]), parts[1]))
    return rows


def load_dataset(root) -> Dataset:
    """Read a corpus directory written by :func:`save_dataset` (or by hand)."""
    root = Path(root)
    for required in ("captions.tsv", "splits.tsv"):
        if not (root / required).is_file():
            raise DataError(f"missing {root / required}")
    captions: dict[int, list[str]] = {}
    cap_rows = _read_tsv(root / "captions.tsv")
    if not cap_rows:
        raise DataError(f"{root / 'captions.tsv'} contains no captions")
    for _, gid, text in cap_rows:
        captions.setdefault(gid, []).append(text)
    splits: dict[str, list] = {s: [] for s in SPLITS}
    seen: set[int] = set()
    for lineno, gid, name in _read_tsv(root / "splits.tsv"):
        if name not in SPLITS:
            raise ParseError(root / "splits.tsv", lineno, f"unknown split {name!r}")
        if gid in seen:
            raise ParseError(root / "splits.tsv", lineno, f"group {gid} listed twice")
        seen.add(gid)
        image_path = root / "images" / f"{gid}.ppm"
        if not image_path.is_file():
            raise DataError(f"group {gid}: missing image file {image_path}")
        if gid not in captions:
            raise DataError(f"group {gid}: no captions in captions.tsv")
        splits[name].append(ImageTextGroup(gid, read_ppm(image_path), captions[gid]))
    orphans = sorted(set(captions) - seen)
    if orphans:
        raise DataError(f"captions reference group {orphans[0]} which has no split entry")
    spec: dict[str, str] = {}
    if (root / "spec.txt").is_file():
        with open(root / "spec.txt", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                if "=" not in line:
                    raise ParseError(root / "spec.txt", lineno, f"expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                spec[key] = value
    for name in SPLITS:
        splits[name].sort(key=lambda g: g.group_id)
    ds = Dataset(splits["train"], splits["val"], splits["test"], spec)
    ds.validate()
    if "colors" in spec:
        grammar = grammar_from_spec(spec)
        for g in ds.all_groups():
            g.attributes = parse_caption(g.captions[0], grammar)
    return ds
