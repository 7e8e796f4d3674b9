"""Datasets with class-disjoint splits, their on-disk format, and episode sampling.

Tensor files (one per class) are little-endian::

    b"FSDS" | u16 version=1 | u32 count | u32 c | u32 h | u32 w | count*c*h*w f32

A manifest is plain text with one ``<class_name> <tensor_path> <split>`` line
per class; blank lines and lines starting with ``#`` are skipped.  Relative
tensor paths resolve against the manifest's directory.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
MAGIC = b"FSDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


class DatasetError(ValueError):
    pass


@dataclass
class ClassImages:
    name: str
    images: np.ndarray  # (n, c, h, w) float64 in [0, 1]
    split: str
    path: str | None = None


@dataclass
class Dataset:
    classes: list[ClassImages]

    def __post_init__(self):
        self.validate()

    def validate(self, min_images: int = 1) -> None:
        seen: dict[str, str] = {}
        shape = None
        for cls in self.classes:
            where = f"class {cls.name!r}" + (f" ({cls.path})" if cls.path else "")
            if cls.split not in SPLITS:
                raise DatasetError(f"{where}: unknown split {cls.split!r}")
            if cls.name in seen:
                raise DatasetError(f"{where}: assigned to both {seen[cls.name]!r} and {cls.split!r}")
            seen[cls.name] = cls.split
            if cls.images.ndim != 4:
                raise DatasetError(f"{where}: expected (n, c, h, w) images, got {cls.images.shape}")
            if shape is not None and cls.images.shape[1:] != shape:
                raise DatasetError(f"{where}: image shape {cls.images.shape[1:]} differs from {shape}")
            shape = cls.images.shape[1:]
            if cls.images.shape[0] < min_images:
                raise DatasetError(f"{where}: {cls.images.shape[0]} images, need at least {min_images}")
            if not np.all(np.isfinite(cls.images)) or cls.images.min() < 0 or cls.images.max() > 1:
                raise DatasetError(f"{where}: pixel values outside [0, 1]")

    def split_indices(self, split: str) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c.split == split]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split_indices(s)) for s in SPLITS}

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.classes[0].images.shape[1:])


@dataclass
class Episode:
    """One C-way K-shot task.  Images are class-major; labels are 0..C-1."""

    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    class_ids: list[int]
    support_index: np.ndarray  # (C, K) image indices within each class
    query_index: np.ndarray  # (C, Q)
    split: str = "train"
    seed: object = None
    meta: dict = field(default_factory=dict)

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    def overlaps(self) -> int:
        """Number of images shared between support and query."""
        return sum(len(set(s) & set(q)) for s, q in zip(self.support_index, self.query_index))


def sample_episode(dataset: Dataset, split: str, n_way: int, k_shot: int, q_per_class: int,
                   rng: np.random.Generator) -> Episode:
    pool = dataset.split_indices(split)
    if len(pool) < n_way:
        raise DatasetError(f"split {split!r} has {len(pool)} classes, need {n_way}")
    chosen = [pool[i] for i in rng.choice(len(pool), size=n_way, replace=False)]
    support, query, s_idx, q_idx = [], [], [], []
    for cid in chosen:
        imgs = dataset.classes[cid].images
        need = k_shot + q_per_class
        if imgs.shape[0] < need:
            raise DatasetError(f"class {dataset.classes[cid].name!r} has {imgs.shape[0]} images, need {need}")
        pick = rng.choice(imgs.shape[0], size=need, replace=False)
        s_idx.append(pick[:k_shot])
        q_idx.append(pick[k_shot:])
        support.append(imgs[pick[:k_shot]])
        query.append(imgs[pick[k_shot:]])
    return Episode(
        support=np.concatenate(support),
        support_labels=np.repeat(np.arange(n_way), k_shot),
        query=np.concatenate(query),
        query_labels=np.repeat(np.arange(n_way), q_per_class),
        class_ids=chosen,
        support_index=np.array(s_idx),
        query_index=np.array(q_idx),
        split=split,
    )


def episode_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one episode, keyed by (seed, stream...)."""
    return np.random.default_rng([seed, *stream])


# ---------------------------------------------------------------------------
# synthetic data


def _split_names(n_classes: int, fractions=(0.6, 0.2, 0.2)) -> list[str]:
    n_train = int(round(n_classes * fractions[0]))
    n_val = int(round(n_classes * fractions[1]))
    n_test = n_classes - n_train - n_val
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


# saturated colours shared by every class; a class is a pair of them
_PALETTE = np.array([[1, -1, -1], [-1, 1, -1], [-1, -1, 1], [-1, 1, 1], [1, -1, 1], [1, 1, -1]], dtype=float)


def generate_synthetic(n_classes: int = 20, images_per_class: int = 60, resolution: int = 32,
                       seed: int = 0, channels: int = 3, n_way: int = 5, template_amp: float = 0.008,
                       blob_amp: float = 0.12) -> Dataset:
    """Procedural classes built from two cues that are shared across classes.

    A large, loosely placed cue: two Gaussian blobs whose colours come from a
    common palette (a class owns one ordered colour pair) with jittered
    position and brightness.  A faint, exact cue: the sum of two of eight
    fixed +-1 pixel templates (a class owns one template pair) at amplitude
    ``template_amp``.  The faint cue is noise free and so the easiest to
    fit, but a perturbation of ``template_amp`` per pixel can swap it for
    another class's.  Unseen classes reuse the same colours and templates in
    new combinations.  Images also get a random distractor blob and pixel
    noise.  Splits are 60/20/20 by class.
    """
    if n_classes < 2 * n_way:
        raise ValueError(f"need at least {2 * n_way} classes for {n_way}-way episodes, got {n_classes}")
    rng = np.random.default_rng(seed)
    r, n = resolution, images_per_class
    yy, xx = np.meshgrid((np.arange(r) + 0.5) / r, (np.arange(r) + 0.5) / r, indexing="ij")
    palette = _PALETTE if channels == 3 else rng.choice([-1.0, 1.0], size=(6, channels))
    templates = rng.choice([-1.0, 1.0], size=(8, channels, r, r))
    template_pairs = list(itertools.combinations(range(len(templates)), 2))
    colour_pairs = list(itertools.permutations(range(len(palette)), 2))
    template_order = rng.permutation(len(template_pairs))
    colour_order = rng.permutation(len(colour_pairs))
    splits = _split_names(n_classes)

    def blob(cy, cx, width):
        return np.exp(-((yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2) / (2 * width ** 2))

    classes = []
    for c in range(n_classes):
        t_pair = template_pairs[template_order[c % len(template_pairs)]]
        c_pair = colour_pairs[colour_order[c % len(colour_pairs)]]
        centers = rng.uniform(0.25, 0.75, size=(2, 2))
        widths = rng.uniform(0.1, 0.16, size=2)

        img = np.full((n, channels, r, r), 0.5)
        img += template_amp * templates[list(t_pair)].sum(axis=0)[None]
        shift = rng.normal(0, 0.12, size=(n, 2, 2))
        scale = rng.uniform(0.5, 1.5, size=(n, 2))
        for b in range(2):
            g = blob(centers[b, 0] + shift[:, b, 0], centers[b, 1] + shift[:, b, 1], widths[b])
            img += blob_amp * scale[:, b, None, None, None] * g[:, None] * palette[c_pair[b]][None, :, None, None]
        g = blob(rng.uniform(0, 1, size=n), rng.uniform(0, 1, size=n), 0.15)
        img += 0.1 * g[:, None] * rng.uniform(-1, 1, size=(n, channels))[:, :, None, None]
        img += rng.normal(0, 0.03, size=img.shape)
        classes.append(ClassImages(f"class{c:03d}", np.clip(img, 0.0, 1.0), splits[c]))
    return Dataset(classes)


# ---------------------------------------------------------------------------
# on-disk format


def write_tensor_file(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, n, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    expected = n * c * h * w * 4
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(n, c, h, w).astype(np.float64)


def save_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.txt") -> Path:
    """Write one tensor file per class plus a manifest; returns the manifest path.

    Pixels are stored as float32, so callers that need bit-identical arrays
    after a round trip should quantize first (``generate_synthetic`` output is
    quantized by ``quantize``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# class_name tensor_file split"]
    for cls in dataset.classes:
        fname = f"{cls.name}.fsds"
        write_tensor_file(out / fname, cls.images)
        lines.append(f"{cls.name} {fname} {cls.split}")
    manifest = out / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest, min_images: int = 1) -> Dataset:
    manifest = Path(manifest)
    if not manifest.exists():
        raise DatasetError(f"{manifest}: no such manifest")
    classes = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(f"{manifest}:{lineno}: expected '<name> <path> <split>', got {line!r}")
        name, rel, split = parts
        path = Path(rel) if os.path.isabs(rel) else manifest.parent / rel
        if not path.exists():
            raise DatasetError(f"{manifest}:{lineno}: missing tensor file {path}")
        classes.append(ClassImages(name, read_tensor_file(path), split, str(path)))
    ds = Dataset.__new__(Dataset)
    ds.classes = classes
    ds.validate(min_images)
    return ds


def quantize(dataset: Dataset) -> Dataset:
    """Round pixels to float32 so they survive the on-disk format unchanged."""
    return Dataset([ClassImages(c.name, c.images.astype(np.float32).astype(np.float64), c.split, c.path)
                    for c in dataset.classes])
