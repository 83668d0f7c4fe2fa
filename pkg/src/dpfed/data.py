"""MNIST IDX ingestion and the non-IID label-sorted client partition.

Clients receive two contiguous shards of the label-sorted index sequence,
600 points each, so most clients only ever see two digits. When 600*K
exceeds the dataset size the sorted sequence is tiled, repeating points.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DEFAULT_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

SHARDS_PER_CLIENT = 2
POINTS_PER_CLIENT = 600


class IdxFormatError(ValueError):
    """Raised for bad magic numbers or malformed IDX headers."""


class IdxTruncationError(IdxFormatError):
    """Raised when an IDX stream ends before the declared payload."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, 784) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64, values in [0, 10)

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class ClientPartition:
    """Per-client index lists into a Dataset (each exactly 600 long)."""

    clients: list  # K arrays of point indices
    shards_per_client: int
    points_per_client: int

    @property
    def num_clients(self):
        return len(self.clients)


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode a big-endian IDX3 image stream into a (count, rows, cols) uint8 array."""
    if len(data) < 16:
        raise IdxTruncationError(f"IDX3 header needs 16 bytes, got {len(data)}")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(
            f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"
        )
    need = count * rows * cols
    payload = data[16:]
    if len(payload) < need:
        raise IdxTruncationError(
            f"image payload holds {len(payload)} bytes, header declares {need}"
        )
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(count, rows, cols)


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Decode a big-endian IDX1 label stream into a (count,) uint8 array."""
    if len(data) < 8:
        raise IdxTruncationError(f"IDX1 header needs 8 bytes, got {len(data)}")
    magic, count = struct.unpack(">II", data[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(
            f"bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"
        )
    payload = data[8:]
    if len(payload) < count:
        raise IdxTruncationError(
            f"label payload holds {len(payload)} bytes, header declares {count}"
        )
    labels = np.frombuffer(payload, dtype=np.uint8, count=count)
    if labels.size and labels.max() >= 10:
        raise IdxFormatError(f"label {labels.max()} out of range [0, 10)")
    return labels


def _read_maybe_gzip(path: str) -> bytes:
    """Read a file, transparently handling .gz suffixes and gzip magic."""
    candidate = path if os.path.exists(path) else path + ".gz"
    if not os.path.exists(candidate):
        raise FileNotFoundError(f"dataset file not found: {path}[.gz]")
    with open(candidate, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_dataset(data_dir: str, images_file: str, labels_file: str) -> Dataset:
    """Load one image/label file pair into a flat, [0,1]-scaled Dataset."""
    images = parse_idx_images(_read_maybe_gzip(os.path.join(data_dir, images_file)))
    labels = parse_idx_labels(_read_maybe_gzip(os.path.join(data_dir, labels_file)))
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features=flat, labels=labels.astype(np.int64))


def load_mnist(data_dir: str, files: dict | None = None):
    """Load the standard four MNIST files; returns (train, test) Datasets."""
    names = dict(DEFAULT_FILES)
    if files:
        names.update(files)
    train = load_dataset(data_dir, names["train_images"], names["train_labels"])
    test = load_dataset(data_dir, names["test_images"], names["test_labels"])
    return train, test


def shard_non_iid(dataset: Dataset, num_clients: int, seed: int) -> ClientPartition:
    """Label-sorted sharding: two shuffled shards of 300 points per client.

    The stable sort keeps the original order within each class. If
    600*K exceeds the dataset the sorted sequence is tiled until it is
    long enough, so points repeat but shard contiguity is preserved.
    """
    if num_clients < 1:
        raise ValueError(f"need at least one client, got {num_clients}")
    if len(dataset) == 0:
        raise ValueError("cannot partition an empty dataset")

    order = np.argsort(dataset.labels, kind="stable")
    needed = POINTS_PER_CLIENT * num_clients
    if needed > order.size:
        reps = -(-needed // order.size)  # ceil division
        order = np.tile(order, reps)
    order = order[:needed]

    shard_size = POINTS_PER_CLIENT // SHARDS_PER_CLIENT
    num_shards = SHARDS_PER_CLIENT * num_clients
    shards = order.reshape(num_shards, shard_size)

    rng = np.random.default_rng(seed)
    shard_order = rng.permutation(num_shards)
    clients = [
        np.concatenate(
            [shards[shard_order[SHARDS_PER_CLIENT * k + j]] for j in range(SHARDS_PER_CLIENT)]
        )
        for k in range(num_clients)
    ]
    return ClientPartition(
        clients=clients,
        shards_per_client=SHARDS_PER_CLIENT,
        points_per_client=POINTS_PER_CLIENT,
    )


def label_histogram(partition: ClientPartition, dataset: Dataset, k: int) -> np.ndarray:
    """Per-class sample counts of client k's shard contents."""
    if not 0 <= k < partition.num_clients:
        raise IndexError(f"client {k} out of range [0, {partition.num_clients})")
    return np.bincount(dataset.labels[partition.clients[k]], minlength=10)
