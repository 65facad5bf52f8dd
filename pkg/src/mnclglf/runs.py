"""Output-directory bookkeeping: run manifests, lock files and idempotent re-runs.

Every output directory holds exactly one ``manifest.json``. It is written
before any work starts (``status: running``) and completed with the output
paths at the end. Re-running a command into a directory whose manifest has the
same identity and is complete is a no-op; anything else is refused unless the
caller passes ``force`` (or resumes an interrupted identical run).
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .config import RunConfig, to_ini
from .data import Dataset

MANIFEST = "manifest.json"
LOCK = ".lock"


class RunDirError(RuntimeError):
    pass


def dataset_fingerprint(*datasets: Dataset) -> str:
    h = hashlib.sha256()
    for ds in datasets:
        h.update(f"{ds.split}:{ds.class_count}:{tuple(ds.images.shape)}".encode())
        h.update(ds.images.contiguous().numpy().tobytes())
        h.update(ds.labels.contiguous().numpy().astype("<i8").tobytes())
    return h.hexdigest()


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config: str
    seed: int
    dataset: str
    build: str = field(default_factory=build_id)
    parameters: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    status: str = "running"
    started: float = field(default_factory=time.time)
    finished: float | None = None

    @classmethod
    def for_run(cls, command: str, run: RunConfig, datasets: tuple[Dataset, ...], **parameters) -> "RunManifest":
        return cls(command, to_ini(run), run.train.seed, dataset_fingerprint(*datasets), parameters=parameters)

    def identity(self) -> tuple:
        return (self.command, self.config, self.seed, self.dataset, self.build,
                json.dumps(self.parameters, sort_keys=True))

    def write(self, directory: Path) -> None:
        tmp = directory / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, directory / MANIFEST)

    @classmethod
    def read(cls, directory: Path) -> "RunManifest | None":
        path = Path(directory) / MANIFEST
        if not path.exists():
            return None
        return cls(**json.loads(path.read_text()))


class RunDir:
    """Context manager owning an output directory for the duration of one command.

    ``up_to_date`` is set when an identical complete run already lives there;
    the caller should then skip the work.
    """

    def __init__(self, directory, manifest: RunManifest, force: bool = False, resume: bool = False,
                 clear_on_force: bool = True):
        self.directory = Path(directory)
        self.clear_on_force = clear_on_force
        self.manifest = manifest
        self.force = force
        self.resume = resume
        self.up_to_date = False
        self._locked = False

    def __enter__(self) -> "RunDir":
        self.directory.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.directory / LOCK, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirError(f"{self.directory} is locked by another run "
                              f"(remove {self.directory / LOCK} if that run is dead)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._locked = True
        try:
            self._claim()
        except BaseException:
            self._unlock()
            raise
        return self

    def _claim(self) -> None:
        old = RunManifest.read(self.directory)
        if old is not None:
            same = old.identity() == self.manifest.identity()
            if same and old.status == "complete" and all(Path(p).exists() for p in old.outputs):
                self.up_to_date = True
                self.manifest = old
                return
            if not (self.force or (same and self.resume)):
                reason = "an identical run was interrupted" if same else "it holds a different run"
                raise RunDirError(f"{self.directory}: refusing to overwrite, {reason}; "
                                  f"pass --force to replace it" + (" or --resume" if same else ""))
            if self.force and not self.resume and self.clear_on_force:
                self._clear()
        elif any(p.name != LOCK for p in self.directory.iterdir()) and not self.force:
            raise RunDirError(f"{self.directory} is not empty and has no manifest; pass --force to use it")
        self.manifest.write(self.directory)

    def _clear(self) -> None:
        for p in self.directory.iterdir():
            if p.name == LOCK:
                continue
            if p.is_dir():
                shutil.rmtree(p)
            else:
                p.unlink()

    def complete(self, outputs) -> None:
        self.manifest.outputs = [str(p) for p in outputs]
        self.manifest.status = "complete"
        self.manifest.finished = time.time()
        self.manifest.write(self.directory)

    def _unlock(self) -> None:
        if self._locked:
            (self.directory / LOCK).unlink(missing_ok=True)
            self._locked = False

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc is not None and not self.up_to_date and self.manifest.status == "running":
            self.manifest.status = f"failed: {type(exc).__name__}"
            self.manifest.write(self.directory)
        self._unlock()
