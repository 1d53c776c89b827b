"""Class catalogs: synset ids, lemmas, hypernyms, definitions.

The catalog is loaded from a pre-extracted JSON metadata file (one object per
synset) rather than a live WordNet install; ``scripts/extract_wordnet_meta.py``
produces that file. Background scene sets are plain text, one scene per line.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

WNID_PATTERN = re.compile(r"^n\d{8}$")


class CatalogError(ValueError):
    """Malformed or inconsistent class metadata."""


@dataclass(frozen=True)
class ClassEntry:
    """One synset: id, lemmas, parent lemmas and gloss."""

    wnid: str
    class_index: int
    lemmas: tuple[str, ...]
    hypernym_lemmas: tuple[str, ...]
    definition: str

    def __post_init__(self):
        if not WNID_PATTERN.match(self.wnid):
            raise CatalogError(f"bad wnid {self.wnid!r}: expected 'n' + 8 digits")
        if self.class_index < 0:
            raise CatalogError(f"{self.wnid}: negative class_index")
        if not self.lemmas or any(not lemma.strip() for lemma in self.lemmas):
            raise CatalogError(f"{self.wnid}: lemmas must be non-empty strings")


def lemmas_string(entry: ClassEntry) -> str:
    """Class-name text: lemmas joined with ', ' (comma-separated if more than one)."""
    return ", ".join(entry.lemmas)


def hypernym_string(entry: ClassEntry) -> str:
    return ", ".join(entry.hypernym_lemmas)


def definition_string(entry: ClassEntry) -> str:
    return entry.definition.strip()


@dataclass(frozen=True)
class ClassCatalog:
    name: str
    entries: tuple[ClassEntry, ...]

    def __post_init__(self):
        wnids = [e.wnid for e in self.entries]
        if len(set(wnids)) != len(wnids):
            dupes = sorted({w for w in wnids if wnids.count(w) > 1})
            raise CatalogError(f"duplicate wnid(s) in catalog: {dupes}")
        indices = [e.class_index for e in self.entries]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise CatalogError("entries must be sorted by unique class_index")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ClassEntry]:
        return iter(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    def entry(self, wnid: str) -> ClassEntry:
        for e in self.entries:
            if e.wnid == wnid:
                return e
        raise CatalogError(f"wnid {wnid!r} not in catalog {self.name!r}")

    @property
    def wnids(self) -> tuple[str, ...]:
        return tuple(e.wnid for e in self.entries)


def _entry_from_record(record: Mapping, wnid: str, class_index: int) -> ClassEntry:
    definition = str(record.get("definition", "")).strip()
    if not definition:
        raise CatalogError(f"{wnid}: empty definition (definition prompts would be malformed)")
    return ClassEntry(
        wnid=wnid,
        class_index=class_index,
        lemmas=tuple(record["lemmas"]),
        hypernym_lemmas=tuple(record.get("hypernym_lemmas", ())),
        definition=definition,
    )


def load_wordnet_meta(path: str | Path) -> dict[str, dict]:
    """Read the extracted metadata file into a wnid-keyed mapping.

    Accepts either a JSON array of objects carrying a 'wnid' field or a JSON
    object already keyed by wnid.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, list):
        return {rec["wnid"]: rec for rec in raw}
    if isinstance(raw, dict):
        return {wnid: dict(rec, wnid=wnid) for wnid, rec in raw.items()}
    raise CatalogError(f"{path}: expected JSON array or object")


def load_catalog(
    source: str | Path | Mapping[str, Mapping],
    class_list: Sequence[str],
    name: str = "catalog",
) -> ClassCatalog:
    """Build a catalog for ``class_list`` (order defines class_index) from metadata.

    Every wnid must exist in the source and carry a non-empty definition;
    lemma and hypernym text is taken verbatim.
    """
    meta = source if isinstance(source, Mapping) else load_wordnet_meta(source)
    entries = []
    for index, wnid in enumerate(class_list):
        if wnid not in meta:
            raise CatalogError(f"wnid {wnid!r} missing from metadata source")
        entries.append(_entry_from_record(meta[wnid], wnid, index))
    return ClassCatalog(name=name, entries=tuple(entries))


def save_catalog(catalog: ClassCatalog, path: str | Path) -> None:
    """Write the catalog as a JSON array, deterministic byte-for-byte."""
    rows = [
        {
            "wnid": e.wnid,
            "class_index": e.class_index,
            "lemmas": list(e.lemmas),
            "hypernym_lemmas": list(e.hypernym_lemmas),
            "definition": e.definition,
        }
        for e in catalog.entries
    ]
    payload = {"name": catalog.name, "entries": rows}
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def read_catalog(path: str | Path) -> ClassCatalog:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = tuple(
        ClassEntry(
            wnid=row["wnid"],
            class_index=row["class_index"],
            lemmas=tuple(row["lemmas"]),
            hypernym_lemmas=tuple(row["hypernym_lemmas"]),
            definition=row["definition"],
        )
        for row in payload["entries"]
    )
    return ClassCatalog(name=payload.get("name", Path(path).stem), entries=entries)


@dataclass(frozen=True)
class BackgroundSet:
    """Ordered scene names, lowercase with underscores turned into spaces."""

    scenes: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.scenes:
            raise CatalogError("background set must be non-empty")
        if len(set(self.scenes)) != len(self.scenes):
            raise CatalogError("background set contains duplicates")
        for scene in self.scenes:
            if not scene or scene != scene.lower() or "_" in scene:
                raise CatalogError(f"bad scene name {scene!r}: use lowercase, spaces not underscores")

    def __len__(self) -> int:
        return len(self.scenes)


def normalize_scene(raw: str) -> str:
    return raw.strip().lower().replace("_", " ")


def load_backgrounds(path: str | Path) -> BackgroundSet:
    """Read a scene list (one per line), normalizing names; duplicates are an error."""
    scenes = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        scene = normalize_scene(line)
        if scene:
            scenes.append(scene)
    return BackgroundSet(scenes=tuple(scenes))
