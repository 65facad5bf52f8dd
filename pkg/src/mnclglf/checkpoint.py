"""Checkpoint container.

A zip archive with three members:

``manifest.txt``
    one line per tensor: ``name<TAB>dtype<TAB>shape<TAB>offset<TAB>nbytes``,
    preceded by ``#key=value`` metadata lines (step, epoch, format version).
``tensors.bin``
    the raw little-endian tensor payloads, concatenated in manifest order.
``config.ini``
    the run configuration echo.
"""
from __future__ import annotations

import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_BY_NAME = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save(path: str | os.PathLike, tensors: dict[str, torch.Tensor], config_text: str,
         meta: dict[str, int | str] | None = None) -> Path:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    lines = [f"#format={FORMAT_VERSION}"]
    lines += [f"#{k}={v}" for k, v in (meta or {}).items()]
    chunks = []
    offset = 0
    for name, t in tensors.items():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"bad tensor name {name!r}")
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = _DTYPES[t.dtype]
        raw = t.numpy().astype(code, copy=False).tobytes()
        shape = "x".join(str(d) for d in t.shape) or "scalar"
        lines.append(f"{name}\t{code}\t{shape}\t{offset}\t{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=path.parent)
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.txt", "\n".join(lines) + "\n")
            zf.writestr("tensors.bin", b"".join(chunks))
            zf.writestr("config.ini", config_text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def load(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], str, dict[str, str]]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = zf.read("manifest.txt").decode()
            payload = zf.read("tensors.bin")
            config_text = zf.read("config.ini").decode()
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: not a checkpoint container ({e})") from None
    tensors: dict[str, torch.Tensor] = {}
    meta: dict[str, str] = {}
    for line in manifest.splitlines():
        if not line:
            continue
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            meta[k] = v
            continue
        name, code, shape, offset, nbytes = line.split("\t")
        if code not in _BY_NAME:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        start, n = int(offset), int(nbytes)
        if start + n > len(payload):
            raise CheckpointError(f"{name}: payload truncated")
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(code)).reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if int(meta.get("format", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format')}")
    return tensors, config_text, meta


def load_into(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    """Copy ``prefix``-scoped tensors into ``module``, requiring an exact structural match."""
    own = module.state_dict()
    theirs = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = [k for k in own if k not in theirs]
    extra = [k for k in theirs if k not in own]
    if missing or extra:
        raise CheckpointError(
            f"structure mismatch under {prefix!r}: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, v in own.items():
        if v.shape != theirs[k].shape or v.dtype != theirs[k].dtype:
            raise CheckpointError(
                f"{prefix}{k}: checkpoint has {tuple(theirs[k].shape)} {theirs[k].dtype}, "
                f"model has {tuple(v.shape)} {v.dtype}")
    module.load_state_dict(theirs, strict=True)
