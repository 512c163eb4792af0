"""Dataset ingestion: IDX image/label files and seeded synthetic benchmarks."""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "DatasetError",
    "IdxMagicError",
    "IdxTruncatedError",
    "CountMismatchError",
    "load_idx_images",
    "load_idx_labels",
    "load_idx_dataset",
    "write_idx_images",
    "write_idx_labels",
    "make_synthetic",
    "make_image_blobs",
    "partition_iid",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class IdxMagicError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


def _read_exact(fh, nbytes: int, what: str, path) -> bytes:
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise IdxTruncatedError(f"{path}: truncated while reading {what}")
    return data


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into a (count, rows*cols) float array in [0, 1].

    IDX is big-endian: magic 0x00000803, then count/rows/cols as u32, then one
    unsigned byte per pixel.
    """
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "magic", path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected image magic 0x{IDX_IMAGES_MAGIC:08x}"
            )
        count, rows, cols = struct.unpack(">III", _read_exact(fh, 12, "dimensions", path))
        raw = _read_exact(fh, count * rows * cols, "pixel data", path)
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows * cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "magic", path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected label magic 0x{IDX_LABELS_MAGIC:08x}"
            )
        (count,) = struct.unpack(">I", _read_exact(fh, 4, "count", path))
        raw = _read_exact(fh, count, "label data", path)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Load a matching image/label pair; counts must agree."""
    X = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if len(X) != len(y):
        raise CountMismatchError(
            f"{images_path} has {len(X)} images but {labels_path} has {len(y)} labels"
        )
    return X, y


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images of shape (count, rows, cols) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def partition_iid(
    X: np.ndarray, y: np.ndarray, clients: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle once with ``seed`` and deal samples round-robin across clients.

    Every sample lands in exactly one shard, so the shards cover the data
    disjointly; sizes differ by at most one.
    """
    if clients < 1:
        raise ValueError(f"clients must be >= 1, got {clients}")
    order = np.random.default_rng(np.random.SeedSequence(seed)).permutation(len(X))
    return [(X[order[i::clients]], y[order[i::clients]]) for i in range(clients)]


def make_synthetic(
    classes: int,
    per_client: int,
    clients: int,
    input_dim: int,
    seed: int,
    test_count: int = 0,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], tuple[np.ndarray, np.ndarray]]:
    """Seeded Gaussian class blobs, dealt IID across clients.

    Class means are drawn once (spread 2.0, unit within-class noise), then
    ``clients * per_client`` training samples plus ``test_count`` held-out
    samples are drawn with cycling labels.  Deterministic given the seed.
    """
    if min(classes, per_client, clients, input_dim) < 1:
        raise ValueError("classes, per_client, clients and input_dim must all be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    means = rng.normal(0.0, 2.0, size=(classes, input_dim))

    def draw(count):
        labels = np.arange(count) % classes
        samples = means[labels] + rng.normal(0.0, 1.0, size=(count, input_dim))
        order = rng.permutation(count)
        return samples[order], labels[order]

    X_train, y_train = draw(clients * per_client)
    X_test, y_test = draw(test_count) if test_count else (np.empty((0, input_dim)), np.empty(0, dtype=np.int64))
    parts = partition_iid(X_train, y_train, clients, seed)
    return parts, (X_test, y_test)


def make_image_blobs(
    classes: int, count: int, side: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale blob images: a smooth per-class template plus pixel noise.

    Stands in for a real image corpus where none is on disk; the per-class
    templates are random coarse patterns upsampled to ``side x side``, so the
    classes are learnable but not trivially separable.  Returns uint8 images
    of shape (count, side, side) and integer labels.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    coarse = max(1, side // 4)
    zoom = side // coarse
    templates = []
    for _ in range(classes):
        t = rng.uniform(0.05, 0.75, size=(coarse, coarse))
        t = np.kron(t, np.ones((zoom, zoom)))[:side, :side]
        if t.shape != (side, side):
            pad = np.zeros((side, side))
            pad[: t.shape[0], : t.shape[1]] = t
            t = pad
        templates.append(t)
    templates = np.stack(templates)
    labels = (np.arange(count) % classes).astype(np.int64)
    images = templates[labels] + rng.normal(0.0, 0.15, size=(count, side, side))
    order = rng.permutation(count)
    images, labels = images[order], labels[order]
    return (np.clip(images, 0.0, 1.0) * 255).astype(np.uint8), labels
