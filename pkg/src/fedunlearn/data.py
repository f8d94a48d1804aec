"""Datasets, client partitions and backdoor poisoning."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fedunlearn.errors import DataFormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass
class Dataset:
    """Features in ``[0, 1]`` with shape ``[N, d]`` and integer labels.

    Subsets taken with :meth:`take` may be empty; loaders always return ``N >= 1``.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    source_tag: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.ndim != 2:
            raise ShapeError(f"features must be [N, d], got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError("features and labels disagree on N")
        if self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise ValueError(f"labels must lie in [0, {self.class_count})")
            if not np.all(np.isfinite(self.features)):
                raise ValueError("features must be finite")
            if self.features.min() < 0.0 or self.features.max() > 1.0:
                raise ValueError("features must lie in [0, 1]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def image_side(self) -> int:
        side = math.isqrt(self.dim)
        if side * side != self.dim:
            raise ShapeError(f"feature width {self.dim} is not a square image")
        return side

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count, self.source_tag)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: truncated body, need {count} bytes, have {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a flattened Dataset."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise DataFormatError("IDX files contain no samples")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), class_count, f"idx:{Path(images_path).name}")


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``[N, rows, cols]`` and labels ``[N]`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).ravel()
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _render_digit(img8: np.ndarray, side: int, rng, jitter: bool) -> np.ndarray:
    from scipy.ndimage import affine_transform, zoom

    inner = side - 4
    canvas = np.zeros((side, side))
    canvas[2:2 + inner, 2:2 + inner] = np.clip(zoom(img8 / 16.0, inner / 8, order=1), 0.0, 1.0)
    if not jitter:
        return canvas
    ang = np.deg2rad(rng.uniform(-12, 12))
    scale = rng.uniform(0.9, 1.1)
    c, s = np.cos(ang), np.sin(ang)
    m = np.array([[c, -s], [s, c]]) / scale
    center = np.full(2, (side - 1) / 2)
    offset = center - m @ center - rng.uniform(-2, 2, 2)
    return np.clip(affine_transform(canvas, m, offset=offset, order=1), 0.0, 1.0)


def digits_images(copies: int = 1, train_ratio: float = 0.7, seed: int = 0, side: int = 28):
    """MNIST-shaped uint8 images built from scikit-learn's bundled 8x8 digits.

    Each digit is upsampled bilinearly to ``side - 4`` pixels inside a 2-pixel
    blank border, so corners stay empty as in MNIST.  The source digits are
    split into train/test first; every copy after the first is a randomly
    rotated (+-12 deg), scaled (0.9-1.1) and shifted (+-2 px) rendering, so no
    augmented sibling of a test digit lands in the training set.

    Returns ``((train_images, train_labels), (test_images, test_labels))``.
    Needs scikit-learn.
    """
    from sklearn.datasets import load_digits

    if copies < 1:
        raise ValueError("copies must be >= 1")
    digits = load_digits()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(digits.target))
    cut = int(round(train_ratio * len(order)))
    out = []
    for idx in (order[:cut], order[cut:]):
        imgs = [
            _render_digit(digits.images[i], side, rng, k > 0) for k in range(copies) for i in idx
        ]
        labels = np.tile(digits.target[idx], copies)
        out.append((np.rint(np.array(imgs) * 255).astype(np.uint8), labels.astype(np.int64)))
    return tuple(out)


def digits_datasets(copies: int = 1, train_ratio: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """In-memory train/test pair equal to what :func:`write_digits_idx` writes and :func:`load_idx` reads."""
    pair = digits_images(copies, train_ratio, seed)
    tag = f"digits:x{copies}:seed{seed}"
    return tuple(
        Dataset(imgs.reshape(len(imgs), -1) / 255.0, labels, 10, f"{tag}:{name}")
        for (imgs, labels), name in zip(pair, ("train", "test"))
    )


def write_digits_idx(out_dir, copies: int = 1, train_ratio: float = 0.7, seed: int = 0) -> dict:
    """Write the :func:`digits_images` train/test split as four IDX files; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for (imgs, labels), name in zip(digits_images(copies, train_ratio, seed), ("train", "test")):
        img_path = out_dir / f"digits-{name}-images-idx3-ubyte"
        lbl_path = out_dir / f"digits-{name}-labels-idx1-ubyte"
        save_idx(imgs, labels, img_path, lbl_path)
        paths[f"{name}_images"], paths[f"{name}_labels"] = img_path, lbl_path
    return paths


def synth_blobs(classes: int, per_class: int, d: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs around seeded uniform centres in ``[0, 1]^d``, clipped to the cube."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(classes, d))
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(0.0, 1.0, size=(classes * per_class, d))
    features = np.clip(centers[labels] + spread * noise, 0.0, 1.0)
    return Dataset(features, labels, classes, f"blobs:{classes}x{per_class}x{d}")


def train_test_split(dataset: Dataset, train_ratio: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(train_ratio * len(dataset)))
    return dataset.take(np.sort(order[:cut])), dataset.take(np.sort(order[cut:]))


@dataclass
class Partition:
    """Disjoint per-client sample indices plus a forget flag for every sample."""

    client_indices: list
    forget_flags: np.ndarray

    def __post_init__(self):
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]
        self.forget_flags = np.asarray(self.forget_flags, dtype=bool)
        allidx = np.concatenate(self.client_indices) if self.client_indices else np.empty(0, np.int64)
        if len(np.unique(allidx)) != len(allidx):
            raise ValueError("client index sets overlap")
        if allidx.size and (allidx.min() < 0 or allidx.max() >= len(self.forget_flags)):
            raise ValueError("client indices out of range")

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    @property
    def n_total(self) -> int:
        return sum(len(ix) for ix in self.client_indices)

    @property
    def n_target(self) -> int:
        return sum(self.n_forget(c) for c in range(self.n_clients))

    def n_forget(self, client: int) -> int:
        return int(self.forget_flags[self.client_indices[client]].sum())

    def n_retain(self, client: int) -> int:
        return len(self.client_indices[client]) - self.n_forget(client)

    def forget_indices(self, client: int) -> np.ndarray:
        ix = self.client_indices[client]
        return ix[self.forget_flags[ix]]

    def retain_indices(self, client: int) -> np.ndarray:
        ix = self.client_indices[client]
        return ix[~self.forget_flags[ix]]

    def target_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([self.forget_indices(c) for c in range(self.n_clients)]))


def partition_random(dataset: Dataset, n_clients: int, seed: int) -> Partition:
    n = len(dataset)
    if not 1 <= n_clients <= n:
        raise ValueError(f"need 1 <= n_clients <= N ({n}), got {n_clients}")
    order = np.random.default_rng(seed).permutation(n)
    return Partition(np.array_split(order, n_clients), np.zeros(n, dtype=bool))


def partition_preferential(
    dataset: Dataset, n_clients: int = 5, shared_classes=(0, 1, 2, 3, 4),
    exclusive_classes=(5, 6, 7, 8, 9), seed: int = 0,
) -> Partition:
    """Shared classes split evenly over all clients; exclusive class ``k`` goes wholly to client ``k``."""
    shared, exclusive = list(shared_classes), list(exclusive_classes)
    if len(exclusive) != n_clients:
        raise ValueError("need exactly one exclusive class per client")
    if set(shared) & set(exclusive):
        raise ValueError("shared and exclusive classes overlap")
    present = set(np.unique(dataset.labels).tolist())
    missing = [c for c in shared + exclusive if c not in present]
    if missing:
        raise ValueError(f"classes {missing} absent from dataset")
    rng = np.random.default_rng(seed)
    parts: list[list] = [[] for _ in range(n_clients)]
    for c in shared:
        members = rng.permutation(np.flatnonzero(dataset.labels == c))
        for k, chunk in enumerate(np.array_split(members, n_clients)):
            parts[k].append(chunk)
    for k, c in enumerate(exclusive):
        parts[k].append(np.flatnonzero(dataset.labels == c))
    return Partition([np.sort(np.concatenate(p)) for p in parts], np.zeros(len(dataset), dtype=bool))


@dataclass(frozen=True)
class Selector:
    """What to forget: ``client`` (id), ``class`` (label) or ``samples`` (index list)."""

    kind: str
    value: object = None

    @classmethod
    def client(cls, client_id: int) -> "Selector":
        return cls("client", int(client_id))

    @classmethod
    def label(cls, label: int) -> "Selector":
        return cls("class", int(label))

    @classmethod
    def samples(cls, indices) -> "Selector":
        return cls("samples", tuple(int(i) for i in indices))


def mark_forget(partition: Partition, selector: Selector, labels=None) -> Partition:
    """New partition whose forget flags are exactly the samples picked by ``selector``."""
    flags = np.zeros_like(partition.forget_flags)
    assigned = np.concatenate(partition.client_indices)
    if selector.kind == "client":
        if not 0 <= selector.value < partition.n_clients:
            raise ValueError(f"no client {selector.value}")
        flags[partition.client_indices[selector.value]] = True
    elif selector.kind == "class":
        if labels is None:
            raise ValueError("class selector needs the dataset labels")
        labels = np.asarray(labels)
        flags[assigned[labels[assigned] == selector.value]] = True
    elif selector.kind == "samples":
        idx = np.asarray(selector.value, dtype=np.int64)
        if not np.isin(idx, assigned).all():
            raise ValueError("sample selector names indices not held by any client")
        flags[idx] = True
    else:
        raise ValueError(f"unknown selector kind {selector.kind!r}")
    return Partition(partition.client_indices, flags)


@dataclass(frozen=True)
class BackdoorSpec:
    trigger_size: int = 3
    trigger_value: float = 1.0
    corner: str = "top-right"
    target_label: int = 9
    poisoned_client: int = 0

    def __post_init__(self):
        if self.corner not in CORNERS:
            raise ValueError(f"corner must be one of {CORNERS}")
        if self.trigger_size < 1:
            raise ValueError("trigger_size must be positive")


def trigger_positions(side: int, spec: BackdoorSpec) -> np.ndarray:
    """Flat pixel indices covered by the trigger patch in a ``side x side`` image."""
    s = spec.trigger_size
    if s > side:
        raise ValueError(f"trigger of size {s} does not fit a {side}x{side} image")
    r0 = 0 if spec.corner.startswith("top") else side - s
    c0 = 0 if spec.corner.endswith("left") else side - s
    rows, cols = np.meshgrid(np.arange(r0, r0 + s), np.arange(c0, c0 + s), indexing="ij")
    return (rows * side + cols).ravel()


def apply_trigger(features: np.ndarray, spec: BackdoorSpec) -> np.ndarray:
    x = np.array(features, dtype=np.float64, copy=True)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    side = math.isqrt(x.shape[1])
    if side * side != x.shape[1]:
        raise ShapeError(f"feature width {x.shape[1]} is not a square image")
    x[:, trigger_positions(side, spec)] = spec.trigger_value
    return x[0] if squeeze else x


def poison(dataset: Dataset, partition: Partition, spec: BackdoorSpec) -> Dataset:
    """Stamp the trigger on every sample of the poisoned client and relabel it as the target."""
    if spec.target_label >= dataset.class_count:
        raise ValueError("target_label outside the label range")
    if not 0 <= spec.poisoned_client < partition.n_clients:
        raise ValueError(f"no client {spec.poisoned_client}")
    idx = partition.client_indices[spec.poisoned_client]
    features = dataset.features.copy()
    labels = dataset.labels.copy()
    features[idx] = apply_trigger(features[idx], spec)
    labels[idx] = spec.target_label
    return replace(dataset, features=features, labels=labels, source_tag=dataset.source_tag + "+backdoor")
