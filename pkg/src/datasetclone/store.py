"""Append-only image store with provenance manifest and integrity checks.

Layout: ``{root}/manifest.jsonl`` plus ``{root}/images/{wnid}/{template}/``
with zero-padded per-class indices. The manifest's first line is a header
object; every following line is one entry. Lines are flushed as written so a
killed run can resume from whatever reached disk.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class StoreError(RuntimeError):
    """Manifest or image I/O problem."""


@dataclass(frozen=True)
class ManifestEntry:
    wnid: str
    class_index: int
    template: str
    background: Optional[str]
    prompt: str
    seed: int
    index_in_class: int
    steps: int
    guidance: float
    width: int
    height: int
    backend_id: str
    file_path: str
    sha256: str
    status: str = "ok"
    error: str = ""

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.wnid, self.template, self.background or "", self.index_in_class)

    def to_dict(self) -> dict:
        return {
            "wnid": self.wnid,
            "class_index": self.class_index,
            "template": self.template,
            "background": self.background,
            "prompt": self.prompt,
            "seed": self.seed,
            "index_in_class": self.index_in_class,
            "steps": self.steps,
            "guidance": self.guidance,
            "width": self.width,
            "height": self.height,
            "backend_id": self.backend_id,
            "file_path": self.file_path,
            "sha256": self.sha256,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(**{k: d.get(k, "" if k == "error" else None) for k in cls.__dataclass_fields__})


@dataclass
class VerifyReport:
    total: int = 0
    ok: int = 0
    failed: int = 0
    missing_files: list[str] = field(default_factory=list)
    checksum_mismatches: list[str] = field(default_factory=list)
    count_by_class: dict[str, int] = field(default_factory=dict)
    bad_lines: list[tuple[int, str]] = field(default_factory=list)

    @property
    def integrity_errors(self) -> int:
        return len(self.missing_files) + len(self.checksum_mismatches) + len(self.bad_lines)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "ok": self.ok,
            "failed": self.failed,
            "missing_files": self.missing_files,
            "checksum_mismatches": self.checksum_mismatches,
            "count_by_class": self.count_by_class,
            "bad_lines": [{"line": n, "error": e} for n, e in self.bad_lines],
            "integrity_errors": self.integrity_errors,
        }


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class DatasetStore:
    """Single-writer manifest plus image tree under one root directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.jsonl"
        self.header: dict = {}
        self._entries: dict[tuple, ManifestEntry] = {}
        self._handle = None

    @classmethod
    def create(cls, root: str | Path, plan_seed: int, catalog_name: str) -> "DatasetStore":
        store = cls(root)
        if store.manifest_path.exists():
            raise StoreError(f"{store.manifest_path} already exists")
        store.root.mkdir(parents=True, exist_ok=True)
        (store.root / "images").mkdir(exist_ok=True)
        store.header = {
            "format_version": FORMAT_VERSION,
            "plan_seed": plan_seed,
            "catalog_name": catalog_name,
        }
        store.manifest_path.write_text(
            json.dumps(store.header, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )
        return store

    @classmethod
    def open(cls, root: str | Path) -> "DatasetStore":
        store = cls(root)
        if not store.manifest_path.exists():
            raise StoreError(f"no manifest at {store.manifest_path}")
        store._load()
        return store

    def _load(self) -> None:
        lines = self.manifest_path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise StoreError(f"{self.manifest_path}: empty manifest")
        self.header = json.loads(lines[0])
        self._entries = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                entry = ManifestEntry.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                # Tolerated here so a torn write never bricks the store;
                # verify() reports the damaged line numbers.
                logger.warning("%s:%d: skipping unparseable manifest line (%s)",
                               self.manifest_path, lineno, exc)
                continue
            # Append-only file: a later line with the same key supersedes.
            self._entries[entry.key] = entry

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "DatasetStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def keys(self) -> set[tuple]:
        return set(self._entries)

    def entries(self) -> list[ManifestEntry]:
        return list(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def append(self, entry: ManifestEntry, overwrite: bool = False) -> None:
        """Durably append one entry; duplicate keys are rejected unless overwriting."""
        if entry.key in self._entries and not overwrite:
            raise StoreError(f"duplicate manifest key {entry.key}")
        if self._handle is None:
            self._handle = open(self.manifest_path, "a", encoding="utf-8")
        try:
            self._handle.write(json.dumps(entry.to_dict(), ensure_ascii=False, sort_keys=True,
                                          separators=(",", ":")) + "\n")
            self._handle.flush()
        except OSError as exc:
            raise StoreError(f"manifest write failed: {exc}") from exc
        self._entries[entry.key] = entry

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.file_path

    def write_image(self, rel_path: str, data: bytes) -> str:
        """Write image bytes under root, creating directories; returns sha256."""
        target = self.root / rel_path
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        except OSError as exc:
            raise StoreError(f"image write failed for {rel_path}: {exc}") from exc
        return sha256_bytes(data)

    def verify(self) -> VerifyReport:
        """Re-hash every ok entry's file and tally per-class counts."""
        report = VerifyReport()
        lines = self.manifest_path.read_text(encoding="utf-8").splitlines()
        parsed: dict[tuple, ManifestEntry] = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                parsed_entry = ManifestEntry.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                report.bad_lines.append((lineno, str(exc)))
                continue
            parsed[parsed_entry.key] = parsed_entry
        for entry in parsed.values():
            report.total += 1
            if entry.status != "ok":
                report.failed += 1
                continue
            report.ok += 1
            report.count_by_class[entry.wnid] = report.count_by_class.get(entry.wnid, 0) + 1
            path = self.root / entry.file_path
            if not path.exists():
                report.missing_files.append(entry.file_path)
            elif sha256_file(path) != entry.sha256:
                report.checksum_mismatches.append(entry.file_path)
        return report

    def view(self) -> "DatasetView":
        ok = [e for e in self._entries.values() if e.status == "ok"]
        ok.sort(key=lambda e: (e.class_index, e.wnid, e.template, e.index_in_class))
        samples = [(self.root / e.file_path, e.class_index) for e in ok]
        num_classes = max((e.class_index for e in ok), default=-1) + 1
        return DatasetView(
            name=str(self.header.get("catalog_name", self.root.name)),
            samples=samples,
            num_classes=num_classes,
        )


@dataclass
class DatasetView:
    """Flat (image path, label) list with a stable order, ready for training/eval."""

    name: str
    samples: list[tuple[Path, int]]
    num_classes: int

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[tuple[Path, int]]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> tuple[Path, int]:
        return self.samples[i]

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.samples]

    def counts_by_label(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, label in self.samples:
            counts[label] = counts.get(label, 0) + 1
        return counts


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def load_image_folder(root: str | Path, name: str = "") -> DatasetView:
    """Load a class-per-subdirectory image tree; labels follow sorted dir order."""
    root = Path(root)
    if not root.is_dir():
        raise StoreError(f"{root}: not a dataset directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise StoreError(f"{root}: no class subdirectories")
    samples = []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.rglob("*")):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                samples.append((path, label))
    return DatasetView(name=name or root.name, samples=samples, num_classes=len(class_dirs))


def load_dataset(path: str | Path) -> DatasetView:
    """Open either a generated store (has manifest.jsonl) or an image-folder tree."""
    path = Path(path)
    if (path / "manifest.jsonl").exists():
        return DatasetStore.open(path).view()
    return load_image_folder(path)
