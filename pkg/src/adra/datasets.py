"""Synthetic factor-image datasets and anomaly-task protocol builders.

Images are filled shapes (square / circle / triangle / diamond) of a palette
color placed on a neutral background at one of a grid of positions, at one
of a few sizes, plus Gaussian pixel noise. A class is a (shape, color) pair.
Two palette colors are reserved: their combinations never appear as task
classes and form the pool the outlier-exposure corpus is drawn from.

Builders for the one-versus-rest, hold-one-out and small-mode protocols are
pure functions of (dataset, arguments, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from adra.errors import ConfigurationError, ContractError, FormatError
from adra.seeding import seeded_rng

DEFAULT_FACTORS = (("shape", 4), ("color", 5), ("pos_x", 4), ("pos_y", 4), ("size", 3))

# RGB palette; the last RESERVED_COLORS entries never appear in task classes.
PALETTE = np.array([
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.90],
    [0.95, 0.85, 0.20],
    [0.85, 0.20, 0.85],
], dtype=np.float32)
RESERVED_COLORS = 2
BACKGROUND = 0.45

MAGIC = b"ADRA\x01"


@dataclass(frozen=True)
class FactorSpec:
    factors: tuple = DEFAULT_FACTORS
    image_size: int = 32
    noise_std: float = 0.02

    def __post_init__(self):
        names = [n for n, _ in self.factors]
        if names != [n for n, _ in DEFAULT_FACTORS]:
            raise ConfigurationError(f"unsupported factor layout {names}")
        if any(card < 2 for _, card in self.factors):
            raise ConfigurationError("every factor cardinality must be >= 2")
        if self.cardinality("color") > len(PALETTE):
            raise ConfigurationError(
                f"at most {len(PALETTE)} colors available")
        r_max = max_radius(self)
        usable = self.image_size - 2 * int(np.ceil(r_max))
        if usable < max(self.cardinality("pos_x"), self.cardinality("pos_y")):
            raise ConfigurationError(
                f"image size {self.image_size} too small to render the "
                f"largest shape at every position")

    def cardinality(self, name: str) -> int:
        for n, card in self.factors:
            if n == name:
                return card
        raise KeyError(name)

    @property
    def total_combinations(self) -> int:
        return int(np.prod([card for _, card in self.factors]))


def radius_for(spec: FactorSpec, size_level: int) -> float:
    return spec.image_size * (0.12 + 0.05 * size_level)


def max_radius(spec: FactorSpec) -> float:
    return radius_for(spec, spec.cardinality("size") - 1)


def task_pairs(spec: FactorSpec, class_count: int = 10) -> list[tuple[int, int]]:
    """(shape, color) pairs usable as task classes (reserved colors excluded)."""
    shapes = spec.cardinality("shape")
    colors = spec.cardinality("color") - RESERVED_COLORS
    pairs = [(s, c) for s in range(shapes) for c in range(colors)]
    if class_count > len(pairs):
        raise ConfigurationError(
            f"{class_count} classes requested but only {len(pairs)} "
            f"non-reserved shape/color pairs exist")
    return pairs[:class_count]


def corpus_pairs(spec: FactorSpec) -> list[tuple[int, int]]:
    """(shape, color) pairs reserved for corpus-only use."""
    shapes = spec.cardinality("shape")
    colors = spec.cardinality("color")
    return [(s, c) for s in range(shapes)
            for c in range(colors - RESERVED_COLORS, colors)]


def render(spec: FactorSpec, factor_row) -> np.ndarray:
    """Noise-free image (3, S, S) for one factor combination."""
    shape, color, px, py, size = (int(v) for v in factor_row)
    s = spec.image_size
    r = radius_for(spec, size)
    margin = int(np.ceil(max_radius(spec)))
    span = s - 2 * margin
    cx = margin + (px + 0.5) / spec.cardinality("pos_x") * span
    cy = margin + (py + 0.5) / spec.cardinality("pos_y") * span
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    if shape == 0:  # square
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.9
    elif shape == 1:  # circle
        mask = dx ** 2 + dy ** 2 <= r ** 2
    elif shape == 2:  # upward triangle
        width = (dy + r) / 2.0
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= width)
    elif shape == 3:  # diamond
        mask = np.abs(dx) + np.abs(dy) <= r * 1.2
    else:
        raise ConfigurationError(f"shape code {shape} out of range")
    img = np.full((3, s, s), BACKGROUND, dtype=np.float32)
    rgb = PALETTE[color]
    for ch in range(3):
        img[ch][mask] = rgb[ch]
    return img


@dataclass
class LabeledDataset:
    images: np.ndarray          # (n, 3, S, S) float32
    labels: np.ndarray          # (n,) int64
    factor_values: Optional[np.ndarray]  # (n, F) int64 or None
    split: str

    def __len__(self):
        return len(self.images)

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


def generate(spec: FactorSpec, seed: int, split: str = "train",
             per_class: Optional[int] = 200, pairs=None,
             label_base: int = 0) -> LabeledDataset:
    """Sample and render a labeled dataset.

    One image per sampled factor combination; position and size are drawn
    uniformly per sample, pixel noise ~ N(0, noise_std). `per_class=None`
    renders the exhaustive position x size grid once per class. Splits are
    disjoint by construction: every (seed, split, class) triple gets its own
    random stream.
    """
    if pairs is None:
        pairs = task_pairs(spec)
    n_px = spec.cardinality("pos_x")
    n_py = spec.cardinality("pos_y")
    n_sz = spec.cardinality("size")
    images, labels, factors = [], [], []
    for ci, (shape, color) in enumerate(pairs):
        if per_class is None:
            grid = [(px, py, sz) for px in range(n_px)
                    for py in range(n_py) for sz in range(n_sz)]
        else:
            rng = seeded_rng(seed, split, "factors", label_base + ci)
            grid = zip(rng.integers(0, n_px, per_class),
                       rng.integers(0, n_py, per_class),
                       rng.integers(0, n_sz, per_class))
        noise_rng = seeded_rng(seed, split, "noise", label_base + ci)
        for px, py, sz in grid:
            row = (shape, color, int(px), int(py), int(sz))
            img = render(spec, row)
            if spec.noise_std > 0:
                img = img + noise_rng.normal(
                    0.0, spec.noise_std, size=img.shape).astype(np.float32)
                img = np.clip(img, 0.0, 1.0)
            images.append(img)
            labels.append(label_base + ci)
            factors.append(row)
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        factor_values=np.asarray(factors, dtype=np.int64),
        split=split)


@dataclass
class Benchmark:
    """A task dataset (train/test over task classes) plus the corpus pool."""

    spec: FactorSpec
    train: LabeledDataset
    test: LabeledDataset
    corpus: LabeledDataset

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.train.labels.tolist()))


def make_benchmark(spec: FactorSpec = FactorSpec(), seed: int = 0,
                   class_count: int = 10, train_per_class: int = 200,
                   test_per_class: int = 100,
                   corpus_per_class: int = 200) -> Benchmark:
    pairs = task_pairs(spec, class_count)
    reserved = corpus_pairs(spec)
    return Benchmark(
        spec=spec,
        train=generate(spec, seed, "train", train_per_class, pairs),
        test=generate(spec, seed, "test", test_per_class, pairs),
        corpus=generate(spec, seed, "train", corpus_per_class, reserved,
                        label_base=class_count))


# ---------------------------------------------------------------------------
# protocol builders
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    protocol: str                 # one-vs-rest | hold-one-out | small-mode
    nominal_classes: frozenset
    corpus_classes: frozenset
    r: Optional[float] = None     # small-mode only
    seed: int = 0

    def __post_init__(self):
        if self.nominal_classes & self.corpus_classes:
            raise ConfigurationError(
                "corpus classes must be disjoint from nominal classes")


@dataclass
class Task:
    name: str
    nominal_images: np.ndarray
    test: LabeledDataset
    test_anomaly: np.ndarray      # (n,) uint8, 1 = anomalous
    nominal_indices: np.ndarray   # indices into the train split


def _require_class(dataset: LabeledDataset, c: int):
    if c not in dataset.labels:
        raise ContractError(f"class {c} absent from dataset")


def build_one_vs_rest(train: LabeledDataset, test: LabeledDataset, c: int) -> Task:
    """S_n = train samples of class c; anomalies = every other test class."""
    _require_class(train, c)
    idx = train.class_indices(c)
    return Task(
        name=f"ovr-{c}",
        nominal_images=train.images[idx],
        test=test,
        test_anomaly=(test.labels != c).astype(np.uint8),
        nominal_indices=idx)


def build_hold_one_out(train: LabeledDataset, test: LabeledDataset, c: int) -> Task:
    """S_n = train samples of every class except c; anomalies = class c."""
    _require_class(train, c)
    idx = np.nonzero(train.labels != c)[0]
    return Task(
        name=f"hoo-{c}",
        nominal_images=train.images[idx],
        test=test,
        test_anomaly=(test.labels == c).astype(np.uint8),
        nominal_indices=idx)


def build_small_mode(train: LabeledDataset, y_a: int, y_b: int, r: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """All of y_a plus a deterministic subsample of round(r * n_b) of y_b.

    Returns (images, train indices). Rounding is half-up.
    """
    if y_a == y_b:
        raise ContractError("small-mode requires two distinct classes")
    if not 0.0 <= r <= 1.0:
        raise ContractError(f"mixture rate r={r} outside [0, 1]")
    _require_class(train, y_a)
    _require_class(train, y_b)
    idx_a = train.class_indices(y_a)
    idx_b = train.class_indices(y_b)
    count = int(np.floor(r * len(idx_b) + 0.5))
    chosen = seeded_rng(seed, "small-mode", y_a, y_b).permutation(len(idx_b))[:count]
    idx = np.concatenate([idx_a, np.sort(idx_b[chosen])])
    return train.images[idx], idx


def build_corpus(dataset: LabeledDataset, excluded: set, m: int, seed: int,
                 allow_replace: bool = False) -> np.ndarray:
    """m unlabeled samples from the non-excluded classes of a train split."""
    present = set(dataset.labels.tolist())
    if not set(excluded) <= present:
        raise ContractError(
            f"excluded classes {sorted(set(excluded) - present)} absent from dataset")
    pool = np.nonzero(~np.isin(dataset.labels, sorted(excluded)))[0]
    if len(pool) == 0:
        raise ContractError("no classes left after exclusion")
    rng = seeded_rng(seed, "corpus")
    if m <= len(pool):
        chosen = rng.permutation(len(pool))[:m]
    elif allow_replace:
        chosen = rng.integers(0, len(pool), size=m)
    else:
        raise ContractError(
            f"requested {m} corpus samples but only {len(pool)} available")
    return dataset.images[pool[np.sort(chosen)]]


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_dataset(dataset: LabeledDataset, path):
    """Binary dataset file: magic, u32 rank + dims, f32 data, label block,
    optional factor block (all little-endian)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        images = np.ascontiguousarray(dataset.images, dtype="<f4")
        fh.write(struct.pack("<I", images.ndim))
        fh.write(struct.pack(f"<{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
        labels = np.asarray(dataset.labels, dtype="<u4")
        fh.write(struct.pack("<I", len(labels)))
        fh.write(labels.tobytes())
        if dataset.factor_values is not None:
            rows, cols = dataset.factor_values.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(dataset.factor_values, dtype="<u4").tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated dataset file (wanted {count} bytes, "
                          f"got {len(data)})")
    return data


def load_dataset(path, split: str = "train") -> LabeledDataset:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError("bad magic bytes (not a dataset file)")
        rank, = struct.unpack("<I", _read_exact(fh, 4))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        count = int(np.prod(dims)) if rank else 1
        images = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
        images = images.reshape(dims).astype(np.float32)
        n_labels, = struct.unpack("<I", _read_exact(fh, 4))
        labels = np.frombuffer(_read_exact(fh, 4 * n_labels), dtype="<u4")
        factor_values = None
        header = fh.read(8)
        if header:
            if len(header) != 8:
                raise FormatError("truncated factor block header")
            rows, cols = struct.unpack("<II", header)
            raw = np.frombuffer(_read_exact(fh, 4 * rows * cols), dtype="<u4")
            factor_values = raw.reshape(rows, cols).astype(np.int64)
        return LabeledDataset(images=images,
                              labels=labels.astype(np.int64),
                              factor_values=factor_values, split=split)
