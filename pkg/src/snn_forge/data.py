"""Dataset loading: IDX files, synthetic Gaussian blobs, stratified subsets."""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # N, C, H, W
    labels: np.ndarray  # N
    num_classes: int
    mean: np.ndarray = None  # per channel, of the raw [0, 1] data
    std: np.ndarray = None

    def __len__(self):
        return len(self.labels)

    @property
    def empty(self):
        return len(self.labels) == 0

    def take(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std)


def channel_stats(images):
    axes = (0,) + tuple(range(2, images.ndim))
    return images.mean(axis=axes), images.std(axis=axes)


def normalize(images, mean, std):
    shape = (1, -1) + (1,) * (images.ndim - 2)
    return (images - mean.reshape(shape)) / np.where(std > 0, std, 1.0).reshape(shape)


def _read_idx(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, normalize_data=True, num_classes=None):
    """Read big-endian IDX u8 images (N, H, W) and labels (N,).

    Pixels are scaled to [0, 1]; with ``normalize_data`` they are then
    standardised with the dataset's own per-channel mean and std.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if labels.size == 0:
        raise DataFormatError(f"{labels_path}: empty label file")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    x = images.astype(np.float64)[:, None] / 255.0
    mean, std = channel_stats(x)
    if normalize_data:
        x = normalize(x, mean, std)
    num_classes = num_classes or int(labels.max()) + 1
    return Dataset(x, labels, num_classes, mean, std)


def write_idx(path, array):
    """Write a u8 array as IDX (1-D labels or 3-D images)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def synth_gaussian_blobs(num_classes, n, dims=(1, 8, 8), seed=0, separation=4.0, noise=1.0,
                         smooth=1.0):
    """Class-conditional Gaussians with pairwise mean distance ``separation * noise``.

    Class means are orthonormal directions scaled by ``separation/sqrt(2)``.
    For image-shaped ``dims`` the directions are spatially smoothed random
    fields (Gaussian blur of width ``smooth`` pixels) so convolutions can
    pick them up.  Samples are assigned to classes round robin, then shuffled.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    dims = (dims,) if np.isscalar(dims) else tuple(dims)
    d = int(np.prod(dims))
    if num_classes > d:
        raise ValueError(f"cannot place {num_classes} orthogonal means in {d} dimensions")
    rng = np.random.default_rng(seed)
    fields = rng.standard_normal((num_classes,) + dims)
    if smooth and len(dims) == 3:
        fields = ndimage.gaussian_filter(fields, sigma=(0, 0, smooth, smooth), mode="wrap")
    basis, _ = np.linalg.qr(fields.reshape(num_classes, d).T)
    means = basis.T * (separation * noise / np.sqrt(2.0))
    labels = rng.permutation(np.arange(n) % num_classes)
    x = means[labels] + noise * rng.standard_normal((n, d))
    images = x.reshape((n,) + dims)
    mean, std = channel_stats(images) if n else (None, None)
    return Dataset(images, labels.astype(np.int64), num_classes, mean, std)


def stratified_indices(labels, k, seed=0):
    """Sorted indices of a class-balanced subset of size ``k``."""
    labels = np.asarray(labels)
    if k > len(labels):
        raise ValueError(f"cannot take {k} samples from a dataset of {len(labels)}")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    chosen = []
    while len(chosen) < k:
        for c in rng.permutation(classes):
            if len(chosen) == k:
                break
            if pools[c]:
                chosen.append(pools[c].pop())
    return np.array(sorted(chosen), dtype=np.int64)


def subsample(dataset, k, seed=0):
    """Stratified subset of size ``k``; class counts differ by at most one."""
    return dataset.take(stratified_indices(dataset.labels, k, seed))


def train_test_split(dataset, test_fraction=0.2, seed=0):
    """Stratified split into (train, test)."""
    n = len(dataset)
    test_idx = stratified_indices(dataset.labels, int(round(n * test_fraction)), seed)
    mask = np.ones(n, dtype=bool)
    mask[test_idx] = False
    return dataset.take(np.flatnonzero(mask)), dataset.take(test_idx)
