"""Dataset ingestion, leave-one-out protocol splits and deterministic batching.

Every loader returns a :class:`LabeledImageSet` with float32 pixels in
``[0, 1]`` laid out as ``(N, C, H, W)``.
"""

from __future__ import annotations

import gzip
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

MNIST_IMAGES_MAGIC = 0x00000803
MNIST_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
PROTOCOLS = ("one_vs_rest", "rest_vs_one")
MANIFEST_VERSION = 1


class DataFormatError(ValueError):
    """A dataset file does not match its binary layout."""


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        n, c, h, w = self.images.shape
        if c not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {c}")
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        if len(self.labels) != n:
            raise ValueError(f"{len(self.labels)} labels for {n} images")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside class_names")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices], list(self.class_names))

    def class_index(self, name) -> int:
        """Position of a class in ``class_names``; MNIST digits are named "0".."9"."""
        key = str(name)
        if key in self.class_names:
            return self.class_names.index(key)
        raise KeyError(f"unknown class {name!r}; valid classes: {', '.join(self.class_names)}")


@dataclass
class ProtocolSplit:
    protocol: str
    target_class: str
    train: LabeledImageSet
    test: LabeledImageSet
    test_anomaly_flags: np.ndarray
    split_ratio: float
    seed: int
    train_indices: np.ndarray = field(repr=False)
    test_indices: np.ndarray = field(repr=False)
    dataset: dict = field(default_factory=dict)

    @property
    def anomalous_classes(self) -> list[str]:
        names = self.train.class_names
        if self.protocol == "one_vs_rest":
            return [self.target_class]
        return [c for c in names if c != self.target_class]

    def normal_test(self) -> LabeledImageSet:
        return self.test.subset(np.flatnonzero(~self.test_anomaly_flags))


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    shuffle: bool = True
    seed: int = 0
    drop_last: bool = False


# ---------------------------------------------------------------- loaders


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path, labels_path) -> LabeledImageSet:
    """Read an MNIST IDX image/label file pair (optionally gzipped)."""
    img = _read_maybe_gzip(images_path)
    lab = _read_maybe_gzip(labels_path)
    if len(img) < 16:
        raise DataFormatError(f"{images_path}: truncated header")
    if len(lab) < 8:
        raise DataFormatError(f"{labels_path}: truncated header")

    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != MNIST_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad magic number 0x{magic:08x}, expected 0x{MNIST_IMAGES_MAGIC:08x}")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != MNIST_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad magic number 0x{lmagic:08x}, expected 0x{MNIST_LABELS_MAGIC:08x}")
    if ln != n:
        raise DataFormatError(f"item count mismatch: images header says {n}, labels header says {ln}")
    if rows != cols:
        raise DataFormatError(f"{images_path}: rows={rows} != cols={cols}")
    if len(img) - 16 != n * rows * cols:
        raise DataFormatError(
            f"{images_path}: payload holds {len(img) - 16} bytes, dimensions need {n * rows * cols}"
        )
    if len(lab) - 8 != n:
        raise DataFormatError(f"{labels_path}: payload holds {len(lab) - 8} bytes, item count is {n}")

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if n and labels.max() > 9:
        raise DataFormatError(f"{labels_path}: label {labels.max()} outside 0-9")
    return LabeledImageSet(pixels.astype(np.float32) / 255.0, labels, [str(d) for d in range(10)])


def load_mnist_dir(root) -> LabeledImageSet:
    """Load and concatenate every IDX image/label pair in a directory.

    Canonical train and t10k files are merged (train first) so that the
    protocol split can re-partition the whole corpus.
    """
    root = Path(root)
    image_files = sorted(root.glob("*images-idx3-ubyte*"), key=lambda p: (not p.name.startswith("train"), p.name))
    if not image_files:
        raise FileNotFoundError(f"no *images-idx3-ubyte* files under {root}")
    parts = []
    for img in image_files:
        lab = img.with_name(img.name.replace("images-idx3", "labels-idx1"))
        if not lab.exists():
            raise FileNotFoundError(f"label file {lab} missing for {img}")
        parts.append(load_mnist_idx(img, lab))
    return concat(parts)


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if not raw:
        warnings.warn(f"{path} is empty; contributes no records", stacklevel=3)
        return np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, np.int64)
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataFormatError(
            f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; truncated record at byte offset {offset}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10_binary(dir_path) -> LabeledImageSet:
    """Read the CIFAR-10 binary distribution (five train batches, one test batch)."""
    root = Path(dir_path)
    files = [root / f"data_batch_{i}.bin" for i in range(1, 6)] + [root / "test_batch.bin"]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 batch files: {', '.join(missing)}")
    names = CIFAR_CLASSES
    meta = root / "batches.meta.txt"
    if meta.exists():
        names = [s.strip() for s in meta.read_text().splitlines() if s.strip()] or CIFAR_CLASSES
    pixels, labels = zip(*(_read_cifar_batch(f) for f in files))
    labels = np.concatenate(labels)
    if len(labels) and labels.max() >= len(names):
        raise DataFormatError(f"label {labels.max()} outside the {len(names)} CIFAR classes")
    return LabeledImageSet(np.concatenate(pixels).astype(np.float32) / 255.0, labels, list(names))


def load_image_folder(root, category=None, resolution=256, channels=3) -> LabeledImageSet:
    """Load an MVTec-style tree: ``<category>/<split>/<condition>/*.png``.

    The condition directory becomes the label; ``good`` is always class 0.
    Images are resized with bilinear resampling to ``resolution``.
    """
    from PIL import Image, UnidentifiedImageError

    base = Path(root)
    if category is not None:
        base = base / str(category)
    if not base.is_dir():
        raise FileNotFoundError(f"image folder {base} does not exist")

    by_condition: dict[str, list[Path]] = {}
    for split_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        for cond_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            files = sorted(f for f in cond_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise ValueError(f"empty class directory {cond_dir}")
            by_condition.setdefault(cond_dir.name, []).extend(files)
    if not by_condition:
        raise ValueError(f"no <split>/<condition>/ image directories under {base}")

    names = sorted(by_condition, key=lambda c: (c != "good", c))
    mode = "L" if channels == 1 else "RGB"
    images, labels, bad = [], [], []
    for label, cond in enumerate(names):
        for f in by_condition[cond]:
            try:
                with Image.open(f) as im:
                    im = im.convert(mode).resize((resolution, resolution), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError):
                bad.append(str(f))
                continue
            images.append(arr[None] if channels == 1 else arr.transpose(2, 0, 1))
            labels.append(label)
    if bad:
        raise DataFormatError("undecodable images: " + ", ".join(bad))
    return LabeledImageSet(np.stack(images), np.array(labels), names)


_PRIMITIVES = ("disk", "square", "cross", "ring", "triangle", "hbar", "vbar", "diagonal")


def _draw(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "cross":
        t = max(r * 0.25, 1.0)
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r * 0.6)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "hbar":
        return (np.abs(dy) <= max(r * 0.3, 1.0)) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= max(r * 0.3, 1.0)) & (np.abs(dy) <= r)
    if kind == "diagonal":
        return (np.abs(dy - dx) <= max(r * 0.35, 1.0)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    raise AssertionError(kind)


def synth_dataset(num_classes, per_class, resolution=28, seed=0) -> LabeledImageSet:
    """Small fixture of jittered geometric primitives, one primitive per class."""
    if num_classes < 1 or per_class < 1 or resolution < 8:
        raise ValueError("num_classes, per_class must be positive and resolution >= 8")
    if num_classes > len(_PRIMITIVES):
        raise ValueError(f"at most {len(_PRIMITIVES)} classes available, asked for {num_classes}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float32)
    images = np.zeros((num_classes * per_class, 1, resolution, resolution), np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, label in enumerate(labels):
        r = resolution * rng.uniform(0.22, 0.32)
        cy, cx = resolution / 2 + rng.uniform(-0.12, 0.12, size=2) * resolution
        mask = _draw(_PRIMITIVES[label], yy, xx, cy, cx, r)
        images[i, 0] = mask * rng.uniform(0.75, 1.0)
    return LabeledImageSet(images, labels, list(_PRIMITIVES[:num_classes]))


def concat(parts: Sequence[LabeledImageSet]) -> LabeledImageSet:
    names = parts[0].class_names
    if any(p.class_names != names for p in parts):
        raise ValueError("cannot concatenate sets with different class_names")
    return LabeledImageSet(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), list(names)
    )


def load_dataset(spec: dict) -> LabeledImageSet:
    """Materialize a dataset from its manifest/config description."""
    kind = spec["kind"]
    if kind == "mnist":
        return load_mnist_dir(spec["path"])
    if kind == "cifar10":
        return load_cifar10_binary(spec["path"])
    if kind == "folder":
        return load_image_folder(
            spec["path"], spec.get("category"), int(spec.get("resolution", 256)), int(spec.get("channels", 3))
        )
    if kind == "synth":
        return synth_dataset(
            int(spec.get("num_classes", 2)),
            int(spec.get("per_class", 40)),
            int(spec.get("resolution", 28)),
            int(spec.get("seed", 0)),
        )
    raise ValueError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------- protocols


def build_protocol(images: LabeledImageSet, protocol, target_class, split_ratio=0.8, seed=0, dataset=None) -> ProtocolSplit:
    """Leave-one-out split with a per-class stratified train/test partition.

    Each normal class is shuffled with ``seed`` and cut at ``split_ratio``;
    every image of an anomalous class goes to the test set.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must be in (0, 1), got {split_ratio}")
    target = images.class_index(target_class)
    counts = np.bincount(images.labels, minlength=len(images.class_names))
    if counts[target] == 0:
        raise ValueError(f"class {target_class!r} has no images")

    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(len(images.class_names)):
        idx = np.flatnonzero(images.labels == c)
        if len(idx) == 0:
            continue
        anomalous = (c == target) if protocol == "one_vs_rest" else (c != target)
        if anomalous:
            test_idx.append(idx)
            continue
        if len(idx) < 2:
            raise ValueError(f"class {images.class_names[c]!r} has {len(idx)} image(s); cannot split")
        idx = rng.permutation(idx)
        k = min(max(int(round(split_ratio * len(idx))), 1), len(idx) - 1)
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])

    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return _split_from_indices(images, protocol, images.class_names[target], train_idx, test_idx, split_ratio, seed, dataset)


def _split_from_indices(images, protocol, target_name, train_idx, test_idx, split_ratio, seed, dataset):
    target = images.class_index(target_name)
    test_labels = images.labels[test_idx]
    if protocol == "one_vs_rest":
        flags = test_labels == target
    else:
        flags = test_labels != target
    return ProtocolSplit(
        protocol=protocol,
        target_class=target_name,
        train=images.subset(train_idx),
        test=images.subset(test_idx),
        test_anomaly_flags=np.asarray(flags, dtype=bool),
        split_ratio=float(split_ratio),
        seed=int(seed),
        train_indices=np.asarray(train_idx, dtype=np.int64),
        test_indices=np.asarray(test_idx, dtype=np.int64),
        dataset=dict(dataset or {}),
    )


def manifest_dict(split: ProtocolSplit) -> dict:
    return {
        "format_version": MANIFEST_VERSION,
        "dataset": split.dataset,
        "class_names": list(split.train.class_names),
        "protocol": split.protocol,
        "target_class": split.target_class,
        "seed": split.seed,
        "split_ratio": split.split_ratio,
        "train_indices": split.train_indices.tolist(),
        "test_indices": split.test_indices.tolist(),
        "test_anomaly_flags": [int(f) for f in split.test_anomaly_flags],
    }


def save_manifest(split: ProtocolSplit, path) -> None:
    text = json.dumps(manifest_dict(split), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_manifest(path, images: LabeledImageSet | None = None) -> ProtocolSplit:
    """Rebuild a split from its manifest, loading the dataset if not supplied."""
    m = json.loads(Path(path).read_text(encoding="utf-8"))
    if m.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(f"{path}: unsupported manifest version {m.get('format_version')}")
    if images is None:
        images = load_dataset(m["dataset"])
    if list(images.class_names) != m["class_names"]:
        raise DataFormatError(f"{path}: dataset class names do not match the manifest")
    split = _split_from_indices(
        images, m["protocol"], m["target_class"], np.array(m["train_indices"], dtype=np.int64),
        np.array(m["test_indices"], dtype=np.int64), m["split_ratio"], m["seed"], m["dataset"],
    )
    if split.test_anomaly_flags.astype(int).tolist() != m["test_anomaly_flags"]:
        raise DataFormatError(f"{path}: anomaly flags disagree with the labels of the loaded dataset")
    return split


# ---------------------------------------------------------------- batching


def batch_indices(n, plan: BatchPlan, epoch=0) -> list[np.ndarray]:
    if plan.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if plan.batch_size > n:
        raise ValueError(f"batch_size {plan.batch_size} exceeds the {n} available images")
    if plan.shuffle:
        order = np.random.default_rng([plan.seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [order[i:i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


def make_batches(images: LabeledImageSet, plan: BatchPlan, epoch=0) -> Iterator[np.ndarray]:
    """Yield image batches; the order depends only on (seed, epoch)."""
    for idx in batch_indices(len(images), plan, epoch):
        yield images.images[idx]
