"""Labelled image datasets: synthetic generators, image-folder ingestion, splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from cass.errors import ConfigError, ContractError, InvalidInputError

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class LabeledImageDataset:
    """Images (uint8 ``(3, H, W)`` tensors) with class-index or multi-hot labels.

    ``split_assignment`` is an array of ``"train" | "val" | "test"`` (or empty
    strings before :func:`split` runs). ``predefined`` marks assignments that
    came with the source data and must be honoured.
    """

    images: list
    labels: np.ndarray
    class_names: list[str]
    task_kind: str = "multiclass"
    split_assignment: np.ndarray | None = None
    predefined: bool = False
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.task_kind not in ("multiclass", "multilabel"):
            raise ContractError(f"unknown task kind {self.task_kind!r}")
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        if self.task_kind == "multilabel" and self.labels.ndim != 2:
            raise ContractError("multilabel datasets need multi-hot label rows")
        if self.split_assignment is None:
            self.split_assignment = np.array([""] * len(self.labels), dtype=object)
        if not self.sample_ids:
            self.sample_ids = [f"s{i:05d}" for i in range(len(self.labels))]

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        return np.flatnonzero(self.split_assignment == split)

    def class_counts(self, split: str | None = None, indices=None) -> np.ndarray:
        idx = self.indices(split) if indices is None else np.asarray(indices, dtype=int)
        if self.task_kind == "multilabel":
            return self.labels[idx].sum(axis=0).astype(int)
        return np.bincount(self.labels[idx].astype(int), minlength=self.num_classes)

    def stratum(self, indices) -> list:
        """Per-sample stratification key (class index, or the multi-hot tuple)."""
        if self.task_kind == "multilabel":
            return [tuple(int(v) for v in self.labels[i]) for i in indices]
        return [int(self.labels[i]) for i in indices]

    def stack(self, indices) -> torch.Tensor:
        return torch.stack([self.images[i] for i in indices])


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

def stratified_order(keys: list, rng: np.random.Generator) -> np.ndarray:
    """Order positions so that every prefix is close to class-proportional.

    Each item gets the key ``(rank within its stratum + u) / stratum size``
    with ``u ~ U(0, 1)``; sorting by it interleaves strata evenly.
    """
    keys = list(keys)
    groups: dict = {}
    for pos, k in enumerate(keys):
        groups.setdefault(k, []).append(pos)
    score = np.empty(len(keys))
    for k in sorted(groups, key=repr):
        members = np.array(groups[k])
        members = members[rng.permutation(len(members))]
        score[members] = (np.arange(len(members)) + rng.random(len(members))) / len(members)
    return np.argsort(score, kind="stable")


def split_sizes(n: int, val_frac: float = 0.1, test_frac: float = 0.2) -> tuple[int, int, int]:
    test = round_half_up(test_frac * n)
    val = round_half_up(val_frac * n)
    return n - val - test, val, test


def split(dataset: LabeledImageDataset, seed: int, val_frac: float = 0.1, test_frac: float = 0.2) -> LabeledImageDataset:
    """Assign a stratified 70/10/20 train/val/test split (in place; also returned).

    ``test = round(0.2 N)``, ``val = round(0.1 N)``, train takes the rest.
    If the source came with its own test split, that split is kept and
    validation is carved out of the remaining pool at the same 70:10 ratio.
    """
    n = len(dataset)
    if n < 10:
        raise ConfigError(f"need at least 10 samples to split, got {n}")
    rng = np.random.default_rng([seed, 0x5EED])
    assign = np.array(["train"] * n, dtype=object)
    if dataset.predefined and (dataset.split_assignment == "test").any():
        pool = np.flatnonzero(dataset.split_assignment != "test")
        assign[dataset.split_assignment == "test"] = "test"
        n_val = round_half_up(len(pool) * val_frac / (1.0 - test_frac))
        order = pool[stratified_order(dataset.stratum(pool), rng)]
        assign[order[:n_val]] = "val"
    else:
        _, n_val, n_test = split_sizes(n, val_frac, test_frac)
        order = stratified_order(dataset.stratum(range(n)), rng)
        assign[order[:n_test]] = "test"
        assign[order[n_test:n_test + n_val]] = "val"
    dataset.split_assignment = assign
    return dataset


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def class_sizes(n: int, classes: int, imbalance_ratio: float = 1.0) -> np.ndarray:
    """Per-class counts summing to ``n``; geometric decay from largest to smallest
    class with ``largest / smallest == imbalance_ratio``."""
    if classes < 1 or n < classes:
        raise ConfigError("need n >= classes >= 1")
    if classes == 1:
        return np.array([n])
    w = imbalance_ratio ** (-np.arange(classes) / (classes - 1))
    raw = n * w / w.sum()
    counts = np.maximum(np.floor(raw).astype(int), 1)
    while counts.sum() < n:
        counts[np.argmax(raw - counts)] += 1
    while counts.sum() > n:
        counts[np.argmax(np.where(counts > 1, counts - raw, -np.inf))] -= 1
    return counts


_SHAPES = ("disc", "square", "ring", "cross", "triangle", "bar")


def _shape_mask(kind, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disc":
        return (dx ** 2 + dy ** 2) <= r ** 2
    if kind == "square":
        return (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
    if kind == "ring":
        d = np.sqrt(dx ** 2 + dy ** 2)
        return (d <= r) & (d >= r * 0.55)
    if kind == "cross":
        return ((np.abs(u) <= r * 0.3) & (np.abs(v) <= r)) | ((np.abs(v) <= r * 0.3) & (np.abs(u) <= r))
    if kind == "triangle":
        return (v <= r * 0.6) & (v >= -r + 1.6 * np.abs(u))
    return (np.abs(u) <= r) & (np.abs(v) <= r * 0.35)


def _class_signatures(classes: int, rng: np.random.Generator) -> list[dict]:
    sigs = []
    hues = (np.arange(classes) / classes + rng.random()) % 1.0
    for c in range(classes):
        sigs.append({
            "shape": _SHAPES[c % len(_SHAPES)],
            "color": _hsv_to_rgb(hues[c], 0.55 + 0.3 * rng.random(), 0.75 + 0.2 * rng.random()),
            "freq": 0.25 + 0.5 * rng.random(),
            "orient": math.pi * rng.random(),
        })
    return sigs


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _render(sig_list, size, rng, noise, color_jitter):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    base = 0.3 + 0.3 * rng.random()
    img = np.full((3, size, size), base) + 0.05 * rng.standard_normal((3, 1, 1))
    for sig in sig_list:
        # class-specific texture, faint
        phase = 2 * math.pi * rng.random()
        wave = np.sin(sig["freq"] * (math.cos(sig["orient"]) * xx + math.sin(sig["orient"]) * yy) + phase)
        img += 0.06 * wave[None]
    for sig in sig_list:
        r = size * (0.18 + 0.1 * rng.random())
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(sig["shape"], yy, xx, cy, cx, r, 2 * math.pi * rng.random())
        color = np.clip(sig["color"] + color_jitter * rng.standard_normal(3), 0, 1)
        img[:, mask] = color[:, None]
    img += noise * rng.standard_normal(img.shape)
    return torch.from_numpy((np.clip(img, 0, 1) * 255).round().astype(np.uint8))


def synth_dataset(n: int, classes: int, image_size: int = 32, structure_seed: int = 0, *,
                  imbalance_ratio: float = 1.0, task_kind: str = "multiclass",
                  noise: float = 0.08, color_jitter: float = 0.12, sample_seed: int | None = None) -> LabeledImageDataset:
    """Images whose content is generated from per-class signatures.

    Each class owns a shape, a colour and a faint oriented stripe texture;
    position, rotation, scale, background and pixel noise are nuisance
    variables. ``structure_seed`` fixes the signatures, ``sample_seed``
    (default: the same) fixes the individual samples. In multilabel mode every
    image carries a random non-empty subset of the class shapes.
    """
    if n < classes:
        raise ConfigError("need n >= classes")
    srng = np.random.default_rng([structure_seed, 1])
    sigs = _class_signatures(classes, srng)
    rng = np.random.default_rng([structure_seed if sample_seed is None else sample_seed, 2])
    if task_kind == "multilabel":
        labels = (rng.random((n, classes)) < 0.35).astype(int)
        empty = labels.sum(1) == 0
        labels[empty, rng.integers(0, classes, empty.sum())] = 1
        images = [_render([sigs[c] for c in np.flatnonzero(row)], image_size, rng, noise, color_jitter) for row in labels]
    else:
        counts = class_sizes(n, classes, imbalance_ratio)
        labels = np.repeat(np.arange(classes), counts)
        labels = labels[rng.permutation(n)]
        images = [_render([sigs[c]], image_size, rng, noise, color_jitter) for c in labels]
    return LabeledImageDataset(images, labels, [f"class_{c}" for c in range(classes)], task_kind)


# --------------------------------------------------------------------------
# image folders
# --------------------------------------------------------------------------

def _load_rgb(path: Path, load_size: int | None) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if load_size:
            im = im.resize((load_size, load_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def _images_in(d: Path):
    return sorted(p for p in d.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_folder(root, *, load_size: int | None = None, labels_csv=None) -> LabeledImageDataset:
    """Read a dataset from disk.

    Multiclass layout: ``root/<class>/*.png``. If ``root/train`` and
    ``root/test`` both exist, each holds class directories and the split is
    taken as predefined. Multilabel: pass ``labels_csv`` with header
    ``sample_id,<class>,<class>...`` and 0/1 entries; ``sample_id`` is the file
    stem of an image anywhere under ``root``.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"{root} is not a directory")
    if labels_csv is not None:
        with open(labels_csv, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "sample_id":
                raise InvalidInputError("label table must start with a 'sample_id' column")
            rows = {r[0]: [int(v) for v in r[1:]] for r in reader if r}
        files = {p.stem: p for p in _images_in(root)}
        missing = sorted(set(rows) - set(files))
        if missing:
            raise InvalidInputError(f"label table references missing images: {missing[:5]}")
        ids = sorted(rows)
        return LabeledImageDataset([_load_rgb(files[i], load_size) for i in ids], np.array([rows[i] for i in ids]),
                                   header[1:], "multilabel", sample_ids=ids)

    predefined = (root / "train").is_dir() and (root / "test").is_dir()
    parts = [("train", root / "train"), ("test", root / "test")] if predefined else [("", root)]
    class_names = sorted({d.name for _, base in parts for d in base.iterdir() if d.is_dir()})
    if not class_names:
        raise InvalidInputError(f"no class directories under {root}")
    images, labels, assign, ids = [], [], [], []
    for split_name, base in parts:
        for c, name in enumerate(class_names):
            d = base / name
            if not d.is_dir():
                continue
            for p in _images_in(d):
                images.append(_load_rgb(p, load_size))
                labels.append(c)
                assign.append(split_name)
                ids.append(str(p.relative_to(root)))
    return LabeledImageDataset(images, np.array(labels), class_names, "multiclass",
                               split_assignment=np.array(assign, dtype=object), predefined=predefined, sample_ids=ids)


def save_image_folder(dataset: LabeledImageDataset, root) -> Path:
    """Inverse of :func:`load_image_folder` for multiclass data (PNG files)."""
    root = Path(root)
    for i, (img, y) in enumerate(zip(dataset.images, dataset.labels)):
        d = root / dataset.class_names[int(y)]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img.numpy().transpose(1, 2, 0)).save(d / f"{i:05d}.png")
    return root
