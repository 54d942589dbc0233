"""Dataset acquisition and the on-disk formats the compiler reads.

The intended corpus is Fashion-MNIST (ten clothing classes, 28x28 grayscale
bytes).  When it cannot be downloaded -- build machines here have no outbound
network -- a deterministic synthetic stand-in with the same shape, value
range and class count is generated instead, and every artifact records which
source was used.  The stand-in exercises all downstream contracts equally;
its accuracy numbers are of course not comparable to the real dataset.

Subsets are written as gzipped idx pairs (the MNIST container format) and as
CSV rows of ``label, v1, ..., v784`` with pixel values already scaled into
[0, 1], matching what the consumer's dataset loader expects.
"""

from __future__ import annotations

import csv
import gzip
import os
import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataUnavailableError, ValidationError

IMAGE_SHAPE = (28, 28)
NUM_CLASSES = 10
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DOWNLOAD_TIMEOUT = 20.0

# synthetic stand-in: classes are mixtures of a few shared latent patterns,
# so they overlap enough that a trained classifier stays below 100%
SYNTH_TRAIN = 16000
SYNTH_TEST = 6000
SYNTH_LATENTS = 4
SYNTH_OWN_WEIGHT = 0.35
SYNTH_NOISE = 0.35
SYNTH_CONTRAST = (0.5, 1.3)
SYNTH_MAX_SHIFT = 2


@dataclass
class DataBundle:
    """Train/test split plus where it came from ("fashion-mnist" or "synthetic")."""

    x_train: np.ndarray  # (N, 28, 28) uint8
    y_train: np.ndarray  # (N,) uint8
    x_test: np.ndarray
    y_test: np.ndarray
    source: str


def load_fashion_mnist() -> tuple:
    """Fetch the real corpus via the framework's dataset cache.

    Raises DataUnavailableError when the download fails (offline build
    machines) and there is no cached copy.
    """
    from keras.datasets import fashion_mnist

    old_timeout = socket.getdefaulttimeout()
    socket.setdefaulttimeout(DOWNLOAD_TIMEOUT)
    try:
        return fashion_mnist.load_data()
    except Exception as exc:
        raise DataUnavailableError(
            f"could not fetch the image corpus: {exc}") from exc
    finally:
        socket.setdefaulttimeout(old_timeout)


def synthetic_dataset(n_train: int = SYNTH_TRAIN, n_test: int = SYNTH_TEST,
                      seed: int = 0) -> DataBundle:
    """Deterministic ten-class image set with the corpus's shape and dtype."""
    if n_train < 1 or n_test < 1:
        raise ValidationError("synthetic split sizes must be positive")
    rng = np.random.default_rng(seed)
    latents = rng.uniform(0.0, 1.0, (SYNTH_LATENTS, 7, 7))
    mix = rng.dirichlet(np.ones(SYNTH_LATENTS) * 2.0, NUM_CLASSES)
    own = rng.uniform(0.0, 1.0, (NUM_CLASSES, 7, 7))
    coarse = (np.tensordot(mix, latents, 1) * (1.0 - SYNTH_OWN_WEIGHT)
              + own * SYNTH_OWN_WEIGHT)
    templates = np.kron(coarse, np.ones((4, 4)))

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        cls = rng.integers(0, NUM_CLASSES, n)
        img = templates[cls]
        shift_y = rng.integers(-SYNTH_MAX_SHIFT, SYNTH_MAX_SHIFT + 1, n)
        shift_x = rng.integers(-SYNTH_MAX_SHIFT, SYNTH_MAX_SHIFT + 1, n)
        rows = (np.arange(28)[None, :, None] - shift_y[:, None, None]) % 28
        cols = (np.arange(28)[None, None, :] - shift_x[:, None, None]) % 28
        img = img[np.arange(n)[:, None, None], rows, cols]
        contrast = rng.uniform(*SYNTH_CONTRAST, (n, 1, 1))
        img = img * contrast + rng.normal(0.0, SYNTH_NOISE, (n, 28, 28))
        img = np.clip(img, 0.0, 1.0)
        return np.round(img * 255.0).astype(np.uint8), cls.astype(np.uint8)

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return DataBundle(x_train=x_train, y_train=y_train,
                      x_test=x_test, y_test=y_test, source="synthetic")


def get_dataset(seed: int = 0, n_train: int | None = None,
                n_test: int | None = None,
                allow_synthetic: bool = True) -> DataBundle:
    """Real corpus when reachable, otherwise the synthetic stand-in.

    ``n_train``/``n_test`` cap the split sizes (deterministic head slices of
    the real corpus); for the stand-in they set the generated sizes.
    """
    try:
        (x_train, y_train), (x_test, y_test) = load_fashion_mnist()
    except DataUnavailableError:
        if not allow_synthetic:
            raise
        return synthetic_dataset(n_train or SYNTH_TRAIN,
                                 n_test or SYNTH_TEST, seed)
    if n_train is not None:
        x_train, y_train = x_train[:n_train], y_train[:n_train]
    if n_test is not None:
        x_test, y_test = x_test[:n_test], y_test[:n_test]
    return DataBundle(x_train=x_train, y_train=y_train.astype(np.uint8),
                      x_test=x_test, y_test=y_test.astype(np.uint8),
                      source="fashion-mnist")


def flatten_images(images: np.ndarray) -> np.ndarray:
    """Byte images to the (N, 784) float64 [0, 1] matrix every consumer uses."""
    return images.reshape(images.shape[0], -1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# subset export
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataPaths:
    images: str
    labels: str
    csv: str


def _write_idx(path: str, arr: np.ndarray, magic: int) -> None:
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_idx_images(path: str, images: np.ndarray) -> None:
    if images.ndim != 3 or images.shape[1:] != IMAGE_SHAPE:
        raise ValidationError(
            f"images must have shape (N, {IMAGE_SHAPE[0]}, {IMAGE_SHAPE[1]})")
    _write_idx(path, images, IDX_IMAGES_MAGIC)


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    if labels.ndim != 1:
        raise ValidationError("labels must be a flat vector")
    _write_idx(path, labels, IDX_LABELS_MAGIC)


def write_csv_subset(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Rows of ``label, v1, ...`` with values in [0, 1], written losslessly."""
    flat = flatten_images(images)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(labels, flat):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def export_data(images: np.ndarray, labels: np.ndarray, out_dir: str,
                n: int, stem: str = "test-subset",
                csv_rows: int | None = 100) -> DataPaths:
    """Write the first ``n`` samples as a gzipped idx pair plus a CSV head.

    The idx pair follows the conventional ``-images-idx3-ubyte.gz`` /
    ``-labels-idx1-ubyte.gz`` naming so the consumer can infer the labels
    file from the images path.
    """
    if not 1 <= n <= images.shape[0]:
        raise ValidationError(
            f"subset size {n} not in [1, {images.shape[0]}]")
    images_path = os.path.join(out_dir, f"{stem}-images-idx3-ubyte.gz")
    labels_path = os.path.join(out_dir, f"{stem}-labels-idx1-ubyte.gz")
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    write_idx_images(images_path, images[:n])
    write_idx_labels(labels_path, labels[:n])
    write_csv_subset(csv_path, images[:min(n, csv_rows or n)],
                     labels[:min(n, csv_rows or n)])
    return DataPaths(images=images_path, labels=labels_path, csv=csv_path)
