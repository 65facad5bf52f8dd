"""Fixed-capacity FIFO of momentum embeddings with top-1 cosine lookup.

Rows are stored exactly as enqueued and L2-normalized when read. A lookup is
a dense ``Q x D`` similarity scan; at full size (16384 x 2048, f32)
the storage alone is 128 MiB and each query row costs 16384*2048 multiply-adds.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .seeding import generator

NORM_EPS = 1e-12


class QueueError(ValueError):
    pass


class SupportQueue:
    def __init__(self, storage: torch.Tensor, cursor: int = 0, slot_batch: torch.Tensor | None = None,
                 inserted: int = 0):
        if storage.ndim != 2 or storage.shape[0] < 1 or storage.shape[1] < 1:
            raise QueueError(f"storage must be a non-empty Q x D matrix, got {tuple(storage.shape)}")
        self.storage = storage
        self.cursor = cursor
        # id of the enqueue call that wrote each slot; -1 marks random init rows
        self.slot_batch = (torch.full((storage.shape[0],), -1, dtype=torch.long)
                           if slot_batch is None else slot_batch)
        self.inserted = inserted

    @property
    def capacity(self) -> int:
        return self.storage.shape[0]

    @property
    def dim(self) -> int:
        return self.storage.shape[1]

    @property
    def initialized(self) -> torch.Tensor:
        """Per-slot flag: True once the slot holds real data."""
        return self.slot_batch >= 0

    def nbytes(self) -> int:
        return self.storage.numel() * self.storage.element_size()

    def state(self) -> dict[str, torch.Tensor]:
        return {
            "storage": self.storage,
            "slot_batch": self.slot_batch,
            "cursor": torch.tensor([self.cursor, self.inserted], dtype=torch.long),
        }

    @classmethod
    def from_state(cls, state: dict[str, torch.Tensor]) -> "SupportQueue":
        cursor, inserted = (int(v) for v in state["cursor"])
        return cls(state["storage"].clone(), cursor, state["slot_batch"].clone(), inserted)


def init_random(capacity: int, dim: int, seed: int, dtype: torch.dtype = torch.float32) -> SupportQueue:
    """Unit-Gaussian rows, L2-normalized."""
    if capacity < 1 or dim < 1:
        raise QueueError(f"capacity and dim must be >= 1, got {capacity}, {dim}")
    g = generator(seed, "queue")
    rows = torch.randn(capacity, dim, generator=g, dtype=torch.float64)
    return SupportQueue(F.normalize(rows, dim=1, eps=NORM_EPS).to(dtype))


def nn_indices(queue: SupportQueue, z: torch.Tensor) -> torch.Tensor:
    if z.ndim != 2 or z.shape[1] != queue.dim:
        raise QueueError(f"query shape {tuple(z.shape)} does not match queue dim {queue.dim}")
    q = F.normalize(queue.storage, dim=1, eps=NORM_EPS)
    zn = F.normalize(z.detach().to(q.dtype), dim=1, eps=NORM_EPS)
    # torch.argmax returns the first maximal index, i.e. the lowest slot on ties
    return torch.argmax(zn @ q.T, dim=1)


def nn_lookup(queue: SupportQueue, z: torch.Tensor) -> torch.Tensor:
    """For every row of ``z``, the normalized stored row of highest cosine similarity."""
    idx = nn_indices(queue, z)
    with torch.no_grad():
        return F.normalize(queue.storage[idx], dim=1, eps=NORM_EPS).to(z.dtype)


@torch.no_grad()
def enqueue(queue: SupportQueue, batch: torch.Tensor) -> None:
    """Overwrite the oldest rows with ``batch`` in ring order."""
    n = len(batch)
    if batch.ndim != 2 or batch.shape[1] != queue.dim:
        raise QueueError(f"batch shape {tuple(batch.shape)} does not match queue dim {queue.dim}")
    if n > queue.capacity:
        raise QueueError(f"batch of {n} rows exceeds queue capacity {queue.capacity}")
    slots = (queue.cursor + torch.arange(n)) % queue.capacity
    queue.storage[slots] = batch.detach().to(queue.storage.dtype)
    queue.slot_batch[slots] = queue.inserted
    queue.cursor = (queue.cursor + n) % queue.capacity
    queue.inserted += 1
