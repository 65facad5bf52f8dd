"""Directory-of-images datasets (e.g. Tiny ImageNet) to in-memory uint8 tensors.

Expected layout: ``<root>/train/<class>/**/<image>`` and an evaluation split
in ``<root>/val`` (or ``eval``/``test``) with either per-class folders or a
Tiny ImageNet style ``val_annotations.txt`` next to an ``images`` folder.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .data import DataFormatError, Dataset

SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def _images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in SUFFIXES)


def _read(paths: list[Path], size: int | None) -> torch.Tensor:
    from PIL import Image

    arrays = []
    for p in paths:
        with Image.open(p) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arrays.append(np.asarray(im, dtype=np.uint8).transpose(2, 0, 1))
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DataFormatError(f"images have differing sizes {sorted(shapes)[:3]}; pass --size")
    return torch.from_numpy(np.stack(arrays)) if arrays else torch.zeros(0, 3, size or 1, size or 1, dtype=torch.uint8)


def _eval_dir(root: Path) -> Path:
    for name in ("val", "eval", "test"):
        if (root / name).is_dir():
            return root / name
    raise FileNotFoundError(f"{root}: no val/, eval/ or test/ directory")


def load_image_folder(root, size: int | None = None) -> tuple[Dataset, Dataset]:
    root = Path(root)
    train_dir = root / "train"
    if not train_dir.is_dir():
        raise FileNotFoundError(f"{train_dir} does not exist")
    classes = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    index = {c: i for i, c in enumerate(classes)}
    train_paths, train_labels = [], []
    for c in classes:
        files = _images(train_dir / c)
        train_paths += files
        train_labels += [index[c]] * len(files)

    eval_dir = _eval_dir(root)
    eval_paths, eval_labels = [], []
    annotations = eval_dir / "val_annotations.txt"
    if annotations.exists():
        for line in annotations.read_text().splitlines():
            parts = line.split("\t")
            if len(parts) < 2:
                continue
            if parts[1] not in index:
                raise DataFormatError(f"{annotations}: unknown class {parts[1]!r}")
            eval_paths.append(eval_dir / "images" / parts[0])
            eval_labels.append(index[parts[1]])
    else:
        for c in sorted(p.name for p in eval_dir.iterdir() if p.is_dir()):
            if c not in index:
                raise DataFormatError(f"{eval_dir}: class folder {c!r} has no training counterpart")
            files = _images(eval_dir / c)
            eval_paths += files
            eval_labels += [index[c]] * len(files)

    train_x, eval_x = _read(train_paths, size), _read(eval_paths, size)
    if len(train_x) and len(eval_x) and train_x.shape[1:] != eval_x.shape[1:]:
        raise DataFormatError(f"train images {tuple(train_x.shape[1:])} vs eval {tuple(eval_x.shape[1:])}; "
                              "pass --size")
    k = len(classes)
    return (Dataset(train_x, torch.tensor(train_labels, dtype=torch.long), k, "train"),
            Dataset(eval_x, torch.tensor(eval_labels, dtype=torch.long), k, "eval"))
