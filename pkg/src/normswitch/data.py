"""Datasets: CIFAR-10 binary files and a seeded synthetic generator.

Both produce float64 images in [0, 1] with shape (n, 3, h, w) and integer
labels. ``fraction`` keeps a seeded subset of the training split and
``downsample`` applies d x d average pooling to every image.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, ParseError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class DatasetSource:
    kind: str = "synthetic"
    path: str = ""
    test_path: str = ""
    classes: int = 10
    train_samples: int = 512
    test_samples: int = 256
    resolution: int = 32
    noise: float = 0.25
    seed: int = 1234
    fraction: float = 1.0
    downsample: int = 1


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])


def read_cifar10_binary(path):
    """Parse one CIFAR-10 binary batch file into ``(images, labels)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read CIFAR-10 file {path}: {exc.strerror}") from None
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise ParseError(f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD} bytes")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ParseError(f"{path}: label byte {labels.max()} out of range 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def write_cifar10_binary(path, images, labels):
    """Inverse of :func:`read_cifar10_binary` for images in [0, 1]."""
    images = np.asarray(images)
    pix = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def _load_many(paths):
    parts = [read_cifar10_binary(p) for p in paths]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _cifar(source):
    if not source.path:
        raise InputError("cifar10_binary dataset needs a path")
    if os.path.isdir(source.path):
        train = [os.path.join(source.path, f) for f in CIFAR_TRAIN_FILES if os.path.exists(os.path.join(source.path, f))]
        if not train:
            raise InputError(f"no data_batch_*.bin files under {source.path}")
        test = source.test_path or os.path.join(source.path, CIFAR_TEST_FILE)
    else:
        if not os.path.exists(source.path):
            raise InputError(f"dataset file {source.path} does not exist")
        train = [source.path]
        test = source.test_path
    x, y = _load_many(train)
    if test:
        if not os.path.exists(test):
            raise InputError(f"test file {test} does not exist")
        xt, yt = read_cifar10_binary(test)
    else:
        xt, yt = x[:0], y[:0]
    return x, y, xt, yt


def _smooth_field(rng, shape, resolution, cutoff):
    """Random field with energy only at spatial frequencies <= ``cutoff``."""
    spec = rng.standard_normal(shape + (resolution, resolution)) + 1j * rng.standard_normal(shape + (resolution, resolution))
    f = np.fft.fftfreq(resolution) * resolution
    mask = (np.abs(f)[:, None] <= cutoff) & (np.abs(f)[None, :] <= cutoff)
    field = np.real(np.fft.ifft2(spec * mask))
    field -= field.mean(axis=(-2, -1), keepdims=True)
    return field / field.std(axis=(-2, -1), keepdims=True)


def synthetic(source):
    """Class prototypes under random shifts, contrast, brightness and noise.

    Every class owns a smooth 3-channel pattern. A sample is its class
    pattern cyclically shifted by a random offset, scaled by a random
    contrast, offset by a random per-sample brightness, plus pixel noise,
    then clipped to [0, 1].
    """
    if source.classes < 2:
        raise ConfigurationError("synthetic data needs at least 2 classes")
    rng = np.random.default_rng(source.seed)
    r = source.resolution
    protos = _smooth_field(rng, (source.classes, 3), r, cutoff=2)

    def draw(count):
        labels = rng.integers(0, source.classes, size=count)
        shifts = rng.integers(0, r, size=(count, 2))
        contrast = rng.uniform(0.5, 1.5, size=(count, 1, 1, 1))
        bright = rng.normal(0.0, 0.15, size=(count, 1, 1, 1))
        imgs = np.stack([np.roll(protos[k], tuple(s), axis=(1, 2)) for k, s in zip(labels, shifts)])
        imgs = 0.5 + bright + 0.15 * contrast * imgs + source.noise * 0.15 * rng.standard_normal(imgs.shape)
        return np.clip(imgs, 0.0, 1.0), labels.astype(np.int64)

    x, y = draw(source.train_samples)
    xt, yt = draw(source.test_samples)
    return x, y, xt, yt


def subsample(n, fraction, seed):
    """Sorted indices of a seeded ``fraction`` subset of ``range(n)``."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    keep = int(round(fraction * n))
    if keep < 1:
        raise ConfigurationError(f"fraction {fraction} of {n} samples keeps nothing")
    return np.sort(np.random.default_rng(seed).permutation(n)[:keep])


def downsample_images(x, factor):
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ConfigurationError(f"cannot downsample {h}x{w} images by {factor}")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def ingest_dataset(source):
    if source.kind == "synthetic":
        x, y, xt, yt = synthetic(source)
    elif source.kind == "cifar10_binary":
        x, y, xt, yt = _cifar(source)
    else:
        raise ConfigurationError(f"unknown dataset kind {source.kind!r}")
    if source.fraction != 1.0:
        idx = subsample(len(x), source.fraction, source.seed)
        x, y = x[idx], y[idx]
    x = downsample_images(x, source.downsample)
    xt = downsample_images(xt, source.downsample)
    classes = 10 if source.kind == "cifar10_binary" else source.classes
    return Dataset(np.ascontiguousarray(x), y, np.ascontiguousarray(xt), yt, classes)
