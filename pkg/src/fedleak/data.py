"""Datasets in [0,1]^d and their split into device shards."""

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, PartitionError
from .rng import child_rng


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray  # (n, d), entries in [0, 1]
    labels: np.ndarray  # (n,), ints in [0, n_classes)
    n_classes: int
    shape: tuple = ()  # image grid, e.g. (28, 28) or (3, 32, 32); () means flat

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) == 0:
            raise ValueError("samples must be a nonempty (n, d) matrix")
        if len(y) != len(x):
            raise ValueError("samples/labels length mismatch")
        if x.min() < 0.0 or x.max() > 1.0:
            raise FormatError("samples must lie in [0, 1]")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise FormatError(f"labels must lie in [0, {self.n_classes})")
        shape = tuple(self.shape) or (x.shape[1],)
        if int(np.prod(shape)) != x.shape[1]:
            raise ValueError(f"shape {shape} does not match d={x.shape[1]}")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "shape", shape)

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def d(self):
        return self.samples.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.n_classes, self.shape)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, nbytes, what):
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise OSError(f"truncated IDX file while reading {what}: wanted {nbytes} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, limit=None, normalize=True, n_classes=10):
    """Read an IDX image/label pair (MNIST, Fashion-MNIST layout).

    Only the first `limit` samples are decoded. Pixel bytes are divided by 255
    when `normalize` is set; otherwise they must already lie in {0, 1}.
    """
    if limit is not None and limit < 1:
        raise ValueError("limit must be >= 1")
    with _open(images_path) as f:
        magic, n_img = struct.unpack(">II", _read_exact(f, 8, "image header"))
        # 0x0803 is the MNIST layout; 0x0804 allows a trailing channel axis
        if magic not in (IDX_IMAGES_MAGIC, IDX_IMAGES_MAGIC + 1):
            raise FormatError(f"bad image magic number 0x{magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(">" + "I" * (ndim - 1), _read_exact(f, 4 * (ndim - 1), "image dims"))
        n = n_img
        if limit is not None and limit > n_img:
            warnings.warn(f"limit {limit} exceeds the {n_img} samples in {images_path}; clamping")
        if limit is not None:
            n = min(limit, n_img)
        per = int(np.prod(dims))
        raw = _read_exact(f, n * per, "pixels")
    with _open(labels_path) as f:
        magic, n_lab = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"bad label magic number 0x{magic:08x}")
        if n_lab != n_img:
            raise FormatError(f"{n_img} images but {n_lab} labels")
        labels = np.frombuffer(_read_exact(f, n, "labels"), dtype=np.uint8).astype(np.int64)
    if labels.max() >= n_classes:
        raise FormatError(f"label {labels.max()} out of range for {n_classes} classes")
    x = np.frombuffer(raw, dtype=np.uint8).reshape(n, per).astype(np.float64)
    if normalize:
        x /= 255.0
    return Dataset(x, labels, n_classes, tuple(dims))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images of shape (n, rows, cols[, ...]) and labels as IDX files (.gz honoured)."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise ValueError("IDX writer expects uint8 arrays")
    head = struct.pack(">I", 0x00000800 | images.ndim) + struct.pack(">" + "I" * images.ndim, *images.shape)
    for path, payload in (
        (images_path, head + images.tobytes()),
        (labels_path, struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()),
    ):
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as f:
            f.write(payload)


def load_cifar10(batch_paths, limit=None, normalize=True):
    """CIFAR-10 binary batches: 1 label byte followed by 3072 pixel bytes (CHW) per record."""
    rec = 1 + 3072
    chunks = []
    for p in batch_paths:
        buf = Path(p).read_bytes()
        if len(buf) % rec:
            raise OSError(f"truncated CIFAR-10 batch {p}")
        chunks.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec))
    arr = np.concatenate(chunks)
    if limit is not None:
        if limit > len(arr):
            warnings.warn(f"limit {limit} exceeds the {len(arr)} CIFAR-10 records; clamping")
        arr = arr[:limit]
    x = arr[:, 1:].astype(np.float64)
    if normalize:
        x /= 255.0
    return Dataset(x, arr[:, 0].astype(np.int64), 10, (3, 32, 32))


def synthesize(n, d, n_classes, seed=0, noise=0.1):
    """Gaussian class clusters clipped to [0,1]^d, one random centre per class."""
    if min(n, d, n_classes) < 1:
        raise ValueError("n, d and n_classes must be >= 1")
    rng = child_rng(seed, "synthesize")
    centres = rng.uniform(0.15, 0.85, size=(n_classes, d))
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    x = centres[labels] + noise * rng.standard_normal((n, d))
    return Dataset(np.clip(x, 0.0, 1.0), labels, n_classes)


@dataclass(frozen=True)
class Partition:
    device_indices: tuple  # N int arrays into the dataset
    weights: np.ndarray  # p_k = n_k / sum n_i

    @property
    def n_devices(self):
        return len(self.device_indices)

    @property
    def sizes(self):
        return np.array([len(ix) for ix in self.device_indices])

    def shard(self, ds, k):
        return ds.subset(self.device_indices[k])


def _weights(shards):
    sizes = np.array([len(s) for s in shards], dtype=np.float64)
    p = sizes / sizes.sum()
    return p


def partition(ds, n_devices, mode="iid", seed=0, classes=None):
    """Split `ds` across devices.

    mode="iid": shuffle and cut into near-equal shards (sizes differ by at most one).
    mode="classes_per_client": device k gets `classes` labels assigned round-robin;
    each class pool is shuffled and dealt evenly to the devices that claim it,
    leftovers are dropped.
    """
    if n_devices < 1 or n_devices > ds.n:
        raise PartitionError(f"need 1 <= N <= n, got N={n_devices}, n={ds.n}")
    if mode == "iid":
        perm = child_rng(seed, "partition-iid").permutation(ds.n)
        shards = [np.sort(s) for s in np.array_split(perm, n_devices)]
    elif mode == "classes_per_client":
        if classes is None or classes < 1:
            raise ValueError("classes_per_client mode needs classes >= 1")
        if classes > ds.n_classes:
            raise PartitionError(f"classes={classes} exceeds n_classes={ds.n_classes}")
        owned = [[(k * classes + j) % ds.n_classes for j in range(classes)] for k in range(n_devices)]
        claimants = {c: [k for k in range(n_devices) if c in owned[k]] for c in range(ds.n_classes)}
        parts = [[] for _ in range(n_devices)]
        for c, devs in claimants.items():
            if not devs:
                continue
            pool = np.flatnonzero(ds.labels == c)
            pool = child_rng(seed, "partition-class", c).permutation(pool)
            share = len(pool) // len(devs)
            for i, k in enumerate(devs):
                parts[k].append(pool[i * share:(i + 1) * share])
        shards = [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    for k, s in enumerate(shards):
        if len(s) == 0:
            raise PartitionError(f"device {k} received no samples")
    return Partition(tuple(s.astype(np.int64) for s in shards), _weights(shards))
