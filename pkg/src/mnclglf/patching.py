"""2x2 patch split of a view and k-of-4 averaging of the patch encodings.

Row layout convention used throughout: a tensor holding several groups for
one batch of N samples stores group ``j`` in rows ``[j*N, (j+1)*N)``. For
``divide`` the groups are the quadrants in row-major order (top-left,
top-right, bottom-left, bottom-right); for ``combine`` they are the k-subsets
of those quadrants in lexicographic order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import torch

from .nets import NetworkStack, Role, StructureError


class PatchError(ValueError):
    pass


@lru_cache(maxsize=None)
def subsets(k: int) -> tuple[tuple[int, ...], ...]:
    if k not in (1, 2, 3, 4):
        raise PatchError(f"k must be one of 1..4, got {k}")
    return tuple(itertools.combinations(range(4), k))


def combination_count(k: int) -> int:
    return math.comb(4, k)


@dataclass
class CombinationSet:
    k: int
    combined: torch.Tensor  # (s*N) x D

    @property
    def s(self) -> int:
        return combination_count(self.k)

    @property
    def n(self) -> int:
        return len(self.combined) // self.s

    def block(self, j: int) -> torch.Tensor:
        return self.combined[j * self.n:(j + 1) * self.n]


def divide(view: torch.Tensor) -> torch.Tensor:
    """N x C x H x W -> (4N) x C x H/2 x W/2, quadrants stacked row-major."""
    if view.ndim != 4:
        raise PatchError(f"expected N x C x H x W, got shape {tuple(view.shape)}")
    n, c, h, w = view.shape
    if h % 2 or w % 2:
        raise PatchError(f"view height and width must be even, got {h}x{w}")
    hh, hw = h // 2, w // 2
    quads = [view[:, :, :hh, :hw], view[:, :, :hh, hw:], view[:, :, hh:, :hw], view[:, :, hh:, hw:]]
    return torch.cat(quads, dim=0)


def reassemble(patches: torch.Tensor) -> torch.Tensor:
    """Inverse of ``divide``."""
    if len(patches) % 4:
        raise PatchError(f"patch rows {len(patches)} not divisible by 4")
    tl, tr, bl, br = patches.chunk(4, dim=0)
    return torch.cat([torch.cat([tl, tr], dim=3), torch.cat([bl, br], dim=3)], dim=2)


def encode_patches(patches: torch.Tensor, stack: NetworkStack) -> torch.Tensor:
    """Backbone-only encoding of (4N) patches with the stop-gradient stack."""
    if stack.role is not Role.TIED_STOP_GRAD:
        raise StructureError(f"patches are encoded by the stop-gradient stack, got {stack.role.value}")
    with torch.no_grad():
        return stack.backbone(patches)


def combine(encodings: torch.Tensor, k: int) -> CombinationSet:
    """Average every k-subset of the four quadrant encodings of each sample."""
    combos = subsets(k)
    if len(encodings) % 4:
        raise PatchError(f"encoding rows {len(encodings)} not divisible by 4")
    quads = encodings.view(4, len(encodings) // 4, *encodings.shape[1:])
    blocks = [quads[list(c)].mean(dim=0) for c in combos]
    return CombinationSet(k, torch.cat(blocks, dim=0))


def project_combined(cset: CombinationSet, stack: NetworkStack) -> torch.Tensor:
    if stack.role is not Role.TIED_STOP_GRAD:
        raise StructureError(f"combined embeddings are projected by the stop-gradient stack, got {stack.role.value}")
    if len(cset.combined) == 0:
        raise PatchError("empty combination set")
    with torch.no_grad():
        return stack.projector(cset.combined)


def local_branch(view: torch.Tensor, stack: NetworkStack, k: int, pick: int | None = None) -> torch.Tensor:
    """divide -> encode -> combine -> project; ``pick`` keeps only that combination block."""
    cset = combine(encode_patches(divide(view), stack), k)
    if pick is None:
        return project_combined(cset, stack)
    with torch.no_grad():
        return stack.projector(cset.block(pick))
