"""Write a procedural 10-class, 32x32 RGB dataset in the converted binary layout.

Each class is a shape family (disc, square, triangle, cross, ring, three
stripe orientations, checkerboard, dots) drawn at a random position, scale
and colour over a random-colour noisy background. It stands in for CIFAR-10
when the real data cannot be obtained; results on it are not comparable to
CIFAR-10 numbers.

    python scripts/surrogate_data.py data/surrogate --train-per-class 200 --test-per-class 100
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from mnclglf.data import Dataset, save_split

SIZE = 32
CLASSES = ("disc", "square", "triangle", "cross", "ring", "h-stripes", "v-stripes", "d-stripes", "checker",
           "dots")


def _mask(kind: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    r = rng.uniform(6, 12)
    cy, cx = rng.uniform(r, SIZE - r, size=2)
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    period = rng.uniform(4, 7)
    phase = rng.uniform(0, period)
    if kind == 0:
        return dy**2 + dx**2 <= r**2
    if kind == 1:
        return inside
    if kind == 2:
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == 3:
        w = r / 3
        return inside & ((np.abs(dy) <= w) | (np.abs(dx) <= w))
    if kind == 4:
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= 0.55 * r)
    if kind == 5:
        return inside & (((yy + phase) % period) < period / 2)
    if kind == 6:
        return inside & (((xx + phase) % period) < period / 2)
    if kind == 7:
        return inside & (((xx + yy + phase) % period) < period / 2)
    if kind == 8:
        return inside & ((((yy + phase) // (period / 2)) + ((xx + phase) // (period / 2))) % 2 == 0)
    pts = rng.uniform(0, SIZE, size=(6, 2))
    return np.min((yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2, axis=-1) <= 4.0


def render(kind: int, rng: np.random.Generator) -> np.ndarray:
    bg = rng.uniform(0, 255, size=3)
    fg = (bg + rng.uniform(70, 185, size=3)) % 255
    img = np.empty((SIZE, SIZE, 3))
    img[:] = bg
    img[_mask(kind, rng)] = fg
    img += rng.normal(0, 18, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8).transpose(2, 0, 1)


def make_split(per_class: int, seed: int, split: str) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(CLASSES)), per_class)
    rng.shuffle(labels)
    images = np.stack([render(int(k), rng) for k in labels])
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), len(CLASSES), split)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    save_split(make_split(args.train_per_class, args.seed, "train"), args.out)
    save_split(make_split(args.test_per_class, args.seed + 1, "eval"), args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
