"""Flat binary image datasets (CIFAR record layout) and deterministic batching.

A record is ``label_bytes`` label bytes followed by ``C*H*W`` pixel bytes in
channel-major order (all red, then green, then blue), exactly the layout of
the CIFAR-10/100 binary distributions. When several label bytes are present
(CIFAR-100 stores coarse then fine), the last one is the class index.

A dataset directory holds one ``<split>.bin`` + ``<split>.meta`` pair per
split, where the sidecar is plain ``key=value`` text.
"""
from __future__ import annotations

import logging
import os
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from .seeding import substream

log = logging.getLogger(__name__)

SPLITS = ("train", "eval")


class DataFormatError(ValueError):
    """Malformed record file; ``offset`` is the first byte that cannot be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class DataValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RecordLayout:
    height: int = 32
    width: int = 32
    channels: int = 3
    class_count: int = 10
    label_bytes: int = 1

    @property
    def pixel_bytes(self) -> int:
        return self.height * self.width * self.channels

    @property
    def record_bytes(self) -> int:
        return self.label_bytes + self.pixel_bytes


CIFAR10 = RecordLayout()
CIFAR100 = RecordLayout(class_count=100, label_bytes=2)
TINY_IMAGENET = RecordLayout(height=64, width=64, class_count=200)


@dataclass
class Dataset:
    """Images are stored ``N x C x H x W`` uint8, the on-disk order."""

    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataValidationError(f"images must be N x C x H x W, got shape {tuple(self.images.shape)}")
        if self.images.dtype != torch.uint8:
            raise DataValidationError(f"images must be uint8, got {self.images.dtype}")
        if len(self.images) != len(self.labels):
            raise DataValidationError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.class_count < 1:
            raise DataValidationError("class_count must be positive")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            bad = int(torch.nonzero(self.labels >= self.class_count)[0])
            raise DataValidationError(
                f"record {bad}: label {int(self.labels[bad])} >= class_count {self.class_count}")
        if self.split not in SPLITS:
            raise DataValidationError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return Dataset(self.images[idx].clone(), self.labels[idx].clone(), self.class_count, self.split)

    def layout(self, label_bytes: int = 1) -> RecordLayout:
        c, h, w = self.shape
        return RecordLayout(h, w, c, self.class_count, label_bytes)


@dataclass
class ImageBatch:
    images: torch.Tensor  # uint8 N x C x H x W, or float after augmentation
    labels: torch.Tensor
    indices: torch.Tensor

    def __len__(self) -> int:
        return len(self.indices)


def parse_records(raw: bytes, layout: RecordLayout, split: str = "train") -> Dataset:
    rb = layout.record_bytes
    if len(raw) % rb:
        whole = len(raw) - len(raw) % rb
        raise DataFormatError(
            f"file size {len(raw)} is not a multiple of the {rb}-byte record size", offset=whole)
    n = len(raw) // rb
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, rb)
    labels = torch.from_numpy(arr[:, layout.label_bytes - 1].astype(np.int64))
    pixels = arr[:, layout.label_bytes:].reshape(n, layout.channels, layout.height, layout.width)
    bad = np.nonzero(arr[:, layout.label_bytes - 1] >= layout.class_count)[0]
    if len(bad):
        i = int(bad[0])
        raise DataValidationError(
            f"record {i} (byte offset {i * rb}): label {int(labels[i])} >= class_count {layout.class_count}")
    return Dataset(torch.from_numpy(pixels.copy()), labels, layout.class_count, split)


def load_cifar_binary(path: str | os.PathLike, meta: RecordLayout = CIFAR10, split: str = "train") -> Dataset:
    """Load one or more concatenated records from ``path``."""
    return parse_records(Path(path).read_bytes(), meta, split)


def to_records(dataset: Dataset, label_bytes: int = 1) -> bytes:
    n = len(dataset)
    labels = dataset.labels.numpy().astype(np.uint8).reshape(n, 1)
    pad = np.zeros((n, label_bytes - 1), dtype=np.uint8)
    pixels = dataset.images.reshape(n, dataset.images[0].numel() if n else 0).numpy()
    return np.concatenate([pad, labels, pixels], axis=1).tobytes()


def write_meta(path: str | os.PathLike, layout: RecordLayout, record_count: int) -> None:
    lines = [
        f"height={layout.height}",
        f"width={layout.width}",
        f"channels={layout.channels}",
        f"class_count={layout.class_count}",
        f"label_bytes={layout.label_bytes}",
        f"record_count={record_count}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path: str | os.PathLike) -> tuple[RecordLayout, int | None]:
    fields: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        fields[key.strip()] = int(value)
    layout = RecordLayout(
        height=fields["height"],
        width=fields["width"],
        channels=fields["channels"],
        class_count=fields["class_count"],
        label_bytes=fields.get("label_bytes", 1),
    )
    return layout, fields.get("record_count")


def save_split(dataset: Dataset, directory: str | os.PathLike, label_bytes: int = 1) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bin_path = directory / f"{dataset.split}.bin"
    bin_path.write_bytes(to_records(dataset, label_bytes))
    write_meta(directory / f"{dataset.split}.meta", dataset.layout(label_bytes), len(dataset))
    return bin_path


def load_split(directory: str | os.PathLike, split: str = "train") -> Dataset:
    directory = Path(directory)
    layout, count = read_meta(directory / f"{split}.meta")
    ds = load_cifar_binary(directory / f"{split}.bin", layout, split)
    if count is not None and count != len(ds):
        raise DataValidationError(f"{split}.meta declares {count} records, file holds {len(ds)}")
    return ds


def load_cifar10_batches(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Read the upstream ``cifar-10-batches-bin`` directory into (train, eval)."""
    directory = Path(directory)
    train_raw = b"".join((directory / f"data_batch_{i}.bin").read_bytes() for i in range(1, 6))
    train = parse_records(train_raw, CIFAR10, "train")
    test = load_cifar_binary(directory / "test_batch.bin", CIFAR10, "eval")
    return train, test


def load_dataset_dir(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """(train, eval) from either a converted directory or the upstream CIFAR-10 one."""
    directory = Path(directory)
    if (directory / "train.meta").exists():
        return load_split(directory, "train"), load_split(directory, "eval")
    if (directory / "data_batch_1.bin").exists():
        return load_cifar10_batches(directory)
    raise FileNotFoundError(f"{directory}: neither train.meta nor data_batch_1.bin found")


def balanced_subset(dataset: Dataset, per_class: int) -> Dataset:
    """First ``per_class`` records of every class, in file order."""
    picks = []
    for c in range(dataset.class_count):
        idx = torch.nonzero(dataset.labels == c).flatten()[:per_class]
        if len(idx) < per_class:
            raise DataValidationError(f"class {c} has only {len(idx)} records, need {per_class}")
        picks.append(idx)
    order = torch.sort(torch.cat(picks)).values
    return dataset.subset(order)


def channel_stats(dataset: Dataset) -> tuple[list[float], list[float]]:
    """Per-channel mean and std of pixels scaled to [0, 1]."""
    x = dataset.images.to(torch.float64) / 255.0
    x = x.transpose(0, 1).reshape(x.shape[1], -1)
    return x.mean(dim=1).tolist(), x.std(dim=1, unbiased=False).tolist()


def epoch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    g = torch.Generator()
    g.manual_seed(substream(seed, "shuffle", epoch) & (2**63 - 1))
    return torch.randperm(n, generator=g)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0,
            drop_last: bool = False) -> list[ImageBatch]:
    """One epoch of shuffled minibatches; the order is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if drop_last and batch_size > n:
        log.warning("batch_size %d exceeds dataset size %d with drop_last; no batches", batch_size, n)
        return []
    order = epoch_order(n, seed, epoch)
    stop = n - n % batch_size if drop_last else n
    out = []
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        out.append(ImageBatch(dataset.images[idx], dataset.labels[idx], idx))
    return out


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Run ``items`` in a producer thread through a bounded buffer; order is preserved."""
    if depth <= 0:
        yield from items
        return
    buf: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    errors: list[BaseException] = []
    stop = threading.Event()

    def produce():
        try:
            for item in items:
                while not stop.is_set():
                    try:
                        buf.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as e:  # re-raised in the consumer
            errors.append(e)
        finally:
            buf.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = buf.get()
            if item is done:
                break
            yield item
        if errors:
            raise errors[0]
    finally:
        stop.set()
        while worker.is_alive():
            try:
                buf.get_nowait()
            except queue.Empty:
                pass
            worker.join(timeout=0.05)
