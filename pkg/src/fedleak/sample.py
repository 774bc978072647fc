"""Bundled MNIST sample (5000 digits shipped with mlxtend) exported as IDX files."""

from pathlib import Path

import numpy as np

from .data import load_idx, write_idx
from .rng import child_rng

IMAGES = "sample-images-idx3-ubyte"
LABELS = "sample-labels-idx1-ubyte"


def export_mnist_sample(out_dir, seed=0):
    """Write the mlxtend MNIST subset (shuffled, since it ships sorted by class) as IDX."""
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    order = child_rng(seed, "mnist-sample").permutation(len(y))
    images = np.rint(X[order]).astype(np.uint8).reshape(-1, 28, 28)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images, y[order].astype(np.uint8), out / IMAGES, out / LABELS)
    return out / IMAGES, out / LABELS


def mnist_sample(out_dir, limit=1000, seed=0):
    out = Path(out_dir)
    if not (out / IMAGES).exists():
        export_mnist_sample(out, seed)
    return load_idx(out / IMAGES, out / LABELS, limit=limit)
