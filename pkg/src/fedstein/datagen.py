"""Synthetic multi-domain datasets, IDX (MNIST-format) loading, splitting.

Each synthetic domain draws class-conditional Gaussians around shared base
means and then applies its own rotation, per-feature scale and shift::

    x = scale * R(rotation) @ (class_mean + noise) + shift

Label marginals are identical across domains, so domains differ only in
their feature distribution.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from .errors import CountMismatchError, FormatError

__all__ = [
    "DomainSpec",
    "Dataset",
    "make_multidomain",
    "default_benchmark",
    "load_idx",
    "write_idx",
    "split",
    "write_csv",
    "read_csv",
    "IDX_IMAGE_MAGIC",
    "IDX_LABEL_MAGIC",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class DomainSpec:
    id: str
    rotation: float = 0.0  # radians, acts on the first two features
    scale: Union[float, Sequence[float]] = 1.0
    shift: Union[float, Sequence[float]] = 0.0
    noise: float = 1.0
    samples_per_class: int = 200

    def __post_init__(self):
        if np.any(np.asarray(self.scale, dtype=np.float64) <= 0):
            raise ValueError(f"domain {self.id}: scale must be positive")
        if self.samples_per_class < 1:
            raise ValueError(f"domain {self.id}: samples_per_class must be >= 1")
        if self.noise < 0:
            raise ValueError(f"domain {self.id}: noise must be non-negative")
        for name in ("scale", "shift"):
            v = getattr(self, name)
            if not np.isscalar(v):
                object.__setattr__(self, name, tuple(float(t) for t in v))

    def transform(self, points: np.ndarray) -> np.ndarray:
        d = points.shape[1]
        out = points.copy()
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        out[:, :2] = points[:, :2] @ rot.T
        return out * _per_feature(self.scale, d) + _per_feature(self.shift, d)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "rotation": self.rotation,
            "scale": list(self.scale) if not np.isscalar(self.scale) else self.scale,
            "shift": list(self.shift) if not np.isscalar(self.shift) else self.shift,
            "noise": self.noise,
            "samples_per_class": self.samples_per_class,
        }


def _per_feature(v, d: int) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(d, float(arr))
    if arr.size != d:
        raise ValueError(f"expected {d} per-feature values, got {arr.size}")
    return arr


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    domain: str
    classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.features) != len(self.labels):
            raise CountMismatchError(f"{len(self.features)} samples but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.domain, self.classes)


def make_multidomain(class_count: int, base_means, domain_specs: Sequence[DomainSpec], seed=0) -> List[Dataset]:
    means = np.asarray(base_means, dtype=np.float64)
    if means.shape[0] != class_count:
        raise ValueError(f"{means.shape[0]} base means for {class_count} classes")
    if means.ndim != 2 or means.shape[1] < 2:
        raise ValueError("base means need at least 2 features")
    if len(np.unique(means, axis=0)) != class_count:
        raise ValueError("base class means must be pairwise distinct")
    out = []
    for k, dom in enumerate(domain_specs):
        rng = np.random.default_rng([int(seed), k])
        n = dom.samples_per_class
        labels = np.repeat(np.arange(class_count), n)
        raw = means[labels] + dom.noise * rng.standard_normal((labels.size, means.shape[1]))
        out.append(Dataset(dom.transform(raw), labels, dom.id, class_count))
    return out


DEFAULT_BASE_MEANS = ((0.0, 2.0), (-1.7320508075688772, -1.0), (1.7320508075688772, -1.0))


def default_domains(samples_per_class: int = 200) -> List[DomainSpec]:
    """Five feature-shifted domains around a 3-class, 2-feature problem."""
    return [
        DomainSpec("d0", 0.0, 1.0, 0.0, 0.8, samples_per_class),
        DomainSpec("d1", 0.4, (2.0, 0.7), (4.0, -2.0), 0.8, samples_per_class),
        DomainSpec("d2", -0.6, (0.6, 1.8), (-3.0, 3.0), 0.8, samples_per_class),
        DomainSpec("d3", 1.2, (1.5, 1.5), (-5.0, -4.0), 0.8, samples_per_class),
        DomainSpec("d4", -1.5, (0.8, 2.5), (6.0, 5.0), 0.8, samples_per_class),
    ]


def default_benchmark(seed=0, samples_per_class: int = 200) -> List[Dataset]:
    return make_multidomain(3, DEFAULT_BASE_MEANS, default_domains(samples_per_class), seed)


def split(dataset: Dataset, test_fraction: float, seed=0):
    """Stratified shuffle split into ``(train, test)``; both keep original order."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        if idx.size < 2:
            raise ValueError(f"class {cls} has fewer than 2 samples")
        perm = rng.permutation(idx)
        n_test = min(max(int(round(idx.size * test_fraction)), 1), idx.size - 1)
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    return (
        dataset.subset(np.sort(np.concatenate(train_idx))),
        dataset.subset(np.sort(np.concatenate(test_idx))),
    )


def _read_header(data: bytes, n_words: int, path) -> tuple:
    if len(data) < 4 * n_words:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(f">{n_words}I", data[: 4 * n_words])


def load_idx(images_path, labels_path, domain: str = "idx", classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1], shape ``[n, 1, h, w]``."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    magic, = _read_header(img, 1, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    _, n, h, w = _read_header(img, 4, images_path)
    magic, = _read_header(lab, 1, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    _, n_labels = _read_header(lab, 2, labels_path)
    pixels = img[16:]
    labels = lab[8:]
    if len(pixels) != n * h * w:
        raise FormatError(f"{images_path}: expected {n * h * w} pixel bytes, found {len(pixels)}")
    if len(labels) != n_labels:
        raise FormatError(f"{labels_path}: expected {n_labels} label bytes, found {len(labels)}")
    if n != n_labels:
        raise CountMismatchError(f"{n} images but {n_labels} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    classes = max(classes, int(y.max()) + 1) if y.size else classes
    return Dataset(x, y, domain, classes)


def write_idx(images: np.ndarray, labels, images_path, labels_path):
    """Write uint8 images ``[n, h, w]`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGE_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABEL_MAGIC, labels.size) + labels.tobytes())


def write_csv(datasets: Sequence[Dataset], path):
    """One row per sample: ``domain,label,x0,...``; features flattened, repr precision."""
    datasets = list(datasets)
    shape = datasets[0].features.shape[1:]
    d = int(np.prod(shape))
    with open(path, "w", newline="") as fh:
        fh.write(f"# shape={'x'.join(str(s) for s in shape)} classes={datasets[0].classes}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain", "label"] + [f"x{i}" for i in range(d)])
        for ds in datasets:
            flat = ds.features.reshape(len(ds), -1)
            for row, label in zip(flat, ds.labels):
                writer.writerow([ds.domain, int(label)] + [repr(float(v)) for v in row])


def read_csv(path) -> List[Dataset]:
    """Inverse of :func:`write_csv`; returns one Dataset per domain in file order."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# shape="):
            raise FormatError(f"{path}: missing '# shape=' header line")
        try:
            meta = dict(tok.split("=", 1) for tok in first[2:].split())
            shape = tuple(int(s) for s in meta["shape"].split("x"))
            classes = int(meta["classes"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: malformed header {first.strip()!r}") from exc
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["domain", "label"]:
            raise FormatError(f"{path}: expected 'domain,label,...' column header")
        rows: dict = {}
        for line in reader:
            if len(line) != len(header):
                raise FormatError(f"{path}: row has {len(line)} fields, expected {len(header)}")
            feats, labels = rows.setdefault(line[0], ([], []))
            labels.append(int(line[1]))
            feats.append([float(v) for v in line[2:]])
    return [
        Dataset(np.array(f).reshape((-1,) + shape), np.array(l), dom, classes)
        for dom, (f, l) in rows.items()
    ]
