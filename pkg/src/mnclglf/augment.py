"""Random view generation.

Pipeline per image: uint8 -> [0, 1] float -> random resized crop -> horizontal
flip -> color jitter (random op order) -> grayscale -> gaussian blur ->
per-channel standardization. All randomness comes from a ``torch.Generator``
seeded from the call's seed, so a view is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import torch
import torchvision.transforms.functional as TF

from .data import ImageBatch
from .seeding import generator, substream


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    # brightness, contrast, saturation, hue
    color_jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_kernel: int = 3
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    blur_prob: float = 0.5
    output_hw: tuple[int, int] = (32, 32)
    mean: Optional[tuple[float, ...]] = None
    std: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise AugmentError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not (0 < self.crop_ratio_range[0] <= self.crop_ratio_range[1]):
            raise AugmentError(f"bad crop_ratio_range {self.crop_ratio_range}")
        for name in ("flip_prob", "color_jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise AugmentError(f"{name} must lie in [0, 1], got {p}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise AugmentError(f"blur_kernel must be odd and >= 1, got {self.blur_kernel}")
        if not 0 < self.blur_sigma_range[0] <= self.blur_sigma_range[1]:
            raise AugmentError(f"bad blur_sigma_range {self.blur_sigma_range}")
        h, w = self.output_hw
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise AugmentError(f"output_hw must be even (2x2 patch split), got {self.output_hw}")
        if (self.mean is None) != (self.std is None):
            raise AugmentError("mean and std must be given together")
        if self.std is not None and any(s <= 0 for s in self.std):
            raise AugmentError("std entries must be positive")

    @classmethod
    def for_size(cls, hw: tuple[int, int], **overrides) -> "AugmentPolicy":
        """Default policy with the blur kernel sized to ~10% of the image side."""
        k = max(1, int(0.1 * min(hw)))
        k += 1 - k % 2
        return cls(output_hw=tuple(hw), blur_kernel=k, **overrides)

    @classmethod
    def identity(cls, hw: tuple[int, int] = (32, 32)) -> "AugmentPolicy":
        return cls(crop_scale_range=(1.0, 1.0), crop_ratio_range=(1.0, 1.0), flip_prob=0.0,
                   color_jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, output_hw=tuple(hw))


class ViewTriple(NamedTuple):
    x1: ImageBatch
    x2: ImageBatch
    x3: ImageBatch


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=g, dtype=torch.float64))


def _coin(g: torch.Generator, p: float) -> bool:
    # always consume a draw so the stream layout does not depend on p
    return float(torch.rand((), generator=g, dtype=torch.float64)) < p


def crop_params(g: torch.Generator, h: int, w: int, scale, ratio) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random area/aspect crop, torchvision's rule."""
    area = h * w
    if scale[0] * area < 1:
        raise AugmentError(f"crop scale {scale[0]} leaves less than one pixel of a {h}x{w} image")
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * _uniform(g, *scale)
        aspect = math.exp(_uniform(g, *log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(torch.randint(0, h - ch + 1, (), generator=g))
            left = int(torch.randint(0, w - cw + 1, (), generator=g))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _jitter(img: torch.Tensor, g: torch.Generator, strengths) -> torch.Tensor:
    b, c, s, hue = strengths
    factors = (
        _uniform(g, max(0.0, 1 - b), 1 + b),
        _uniform(g, max(0.0, 1 - c), 1 + c),
        _uniform(g, max(0.0, 1 - s), 1 + s),
        _uniform(g, -hue, hue),
    )
    order = torch.randperm(4, generator=g).tolist()
    rgb = img.shape[0] == 3
    for op in order:
        if op == 0 and b > 0:
            img = TF.adjust_brightness(img, factors[0])
        elif op == 1 and c > 0:
            img = TF.adjust_contrast(img, factors[1])
        elif op == 2 and s > 0 and rgb:
            img = TF.adjust_saturation(img, factors[2])
        elif op == 3 and hue > 0 and rgb:
            img = TF.adjust_hue(img, factors[3])
    return img


def _augment_one(img: torch.Tensor, policy: AugmentPolicy, g: torch.Generator) -> torch.Tensor:
    _, h, w = img.shape
    oh, ow = policy.output_hw
    top, left, ch, cw = crop_params(g, h, w, policy.crop_scale_range, policy.crop_ratio_range)
    if (top, left, ch, cw) != (0, 0, h, w) or (h, w) != (oh, ow):
        img = TF.resized_crop(img, top, left, ch, cw, [oh, ow], antialias=True).clamp_(0.0, 1.0)
    if _coin(g, policy.flip_prob):
        img = img.flip(-1)
    if _coin(g, policy.color_jitter_prob):
        img = _jitter(img, g, policy.color_jitter)
    if _coin(g, policy.grayscale_prob) and img.shape[0] == 3:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    if _coin(g, policy.blur_prob):
        sigma = _uniform(g, *policy.blur_sigma_range)
        if policy.blur_kernel > 1:
            img = TF.gaussian_blur(img, [policy.blur_kernel] * 2, [sigma, sigma])
    # jitter and blur can overshoot [0, 1] by rounding
    return img.clamp(0.0, 1.0)


def to_unit_float(images: torch.Tensor) -> torch.Tensor:
    if images.dtype == torch.uint8:
        return images.to(torch.float32) / 255.0
    return images.to(torch.float32)


def normalize(images: torch.Tensor, policy: AugmentPolicy) -> torch.Tensor:
    if policy.mean is None:
        return images
    mean = torch.tensor(policy.mean, dtype=images.dtype).view(1, -1, 1, 1)
    std = torch.tensor(policy.std, dtype=images.dtype).view(1, -1, 1, 1)
    return (images - mean) / std


def augment_view(batch: ImageBatch, policy: AugmentPolicy, seed: int) -> ImageBatch:
    """One random view of every image in ``batch``.

    uint8 input is scaled to [0, 1]; float input is taken to be on that scale
    already. The result is standardized with ``policy.mean``/``policy.std``
    when those are set.
    """
    if len(batch) == 0:
        raise AugmentError("cannot augment an empty batch")
    x = to_unit_float(batch.images)
    g = generator(seed, "augment")
    out = torch.stack([_augment_one(img, policy, g) for img in x])
    return ImageBatch(normalize(out, policy), batch.labels, batch.indices)


def make_triple(batch: ImageBatch, policy: AugmentPolicy, seed: int) -> ViewTriple:
    """Three views with independent draws from the same policy."""
    return ViewTriple(*(augment_view(batch, policy, substream(seed, "view", i)) for i in range(3)))


def crop_flip_view(batch: ImageBatch, policy: AugmentPolicy, padding: int, seed: int) -> torch.Tensor:
    """Standardized images randomly cropped from a zero-padded copy and randomly flipped."""
    x = to_unit_float(batch.images)
    if tuple(x.shape[-2:]) != tuple(policy.output_hw):
        x = TF.resize(x, list(policy.output_hw), antialias=True)
    n, _, h, w = x.shape
    g = generator(seed, "crop-flip")
    offsets = torch.randint(0, 2 * padding + 1, (n, 2), generator=g).tolist()
    flips = (torch.rand(n, generator=g) < policy.flip_prob).tolist()
    padded = torch.nn.functional.pad(x, (padding,) * 4)
    out = torch.empty_like(x)
    for k, ((i, j), flip) in enumerate(zip(offsets, flips)):
        crop = padded[k, :, i:i + h, j:j + w]
        out[k] = crop.flip(-1) if flip else crop
    return normalize(out, policy)


def plain_view(batch: ImageBatch, policy: AugmentPolicy) -> torch.Tensor:
    """Un-augmented, standardized images (resized if the policy's size differs)."""
    x = to_unit_float(batch.images)
    if tuple(x.shape[-2:]) != tuple(policy.output_hw):
        x = TF.resize(x, list(policy.output_hw), antialias=True)
    return normalize(x, policy)
