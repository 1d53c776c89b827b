"""Prompt templates and deterministic generation plans.

A plan fully specifies a synthetic dataset before any image exists: one
record per (class, template, background, index) with a rendered prompt and a
hash-derived seed. Identical inputs always serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .catalog import (
    BackgroundSet,
    ClassCatalog,
    ClassEntry,
    definition_string,
    hypernym_string,
    lemmas_string,
)


class PlanError(ValueError):
    """Invalid plan request (unknown class, bad counts, missing backgrounds)."""


class PromptTemplate(Enum):
    NAME = "NAME"
    NAME_HYPERNYM = "NAME_HYPERNYM"
    NAME_DEFINITION = "NAME_DEFINITION"
    MULTI_HYPERNYM = "MULTI_HYPERNYM"
    MULTI_DIFFERENT_HYPERNYM = "MULTI_DIFFERENT_HYPERNYM"
    HYPERNYM_BACKGROUND = "HYPERNYM_BACKGROUND"

    @property
    def needs_background(self) -> bool:
        return self is PromptTemplate.HYPERNYM_BACKGROUND


# CLI short names, 1:1 with templates.
TEMPLATE_SHORT_NAMES = {
    "name": PromptTemplate.NAME,
    "name_hyper": PromptTemplate.NAME_HYPERNYM,
    "name_def": PromptTemplate.NAME_DEFINITION,
    "multi": PromptTemplate.MULTI_HYPERNYM,
    "multi_diff": PromptTemplate.MULTI_DIFFERENT_HYPERNYM,
    "hyper_bg": PromptTemplate.HYPERNYM_BACKGROUND,
}


def template_from_name(name: str) -> PromptTemplate:
    key = name.strip()
    if key in TEMPLATE_SHORT_NAMES:
        return TEMPLATE_SHORT_NAMES[key]
    try:
        return PromptTemplate(key.upper())
    except ValueError:
        raise PlanError(f"unknown template name {name!r}") from None


@dataclass(frozen=True)
class GenParams:
    steps: int = 50
    guidance: float = 7.5
    width: int = 512
    height: int = 384
    # Recorded for provenance only; flagged images are never dropped.
    safety_filter: bool = False

    def __post_init__(self):
        if self.steps <= 0 or self.guidance <= 0:
            raise PlanError("steps and guidance must be positive")
        if self.width <= 0 or self.height <= 0:
            raise PlanError("width and height must be positive")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "guidance": self.guidance,
            "width": self.width,
            "height": self.height,
            "safety_filter": self.safety_filter,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenParams":
        return cls(**{k: d[k] for k in ("steps", "guidance", "width", "height", "safety_filter")})


@dataclass(frozen=True)
class PromptRecord:
    wnid: str
    class_index: int
    template: PromptTemplate
    background: Optional[str]
    prompt_text: str
    seed: int
    index_in_class: int

    @property
    def key(self) -> tuple[str, str, str, int]:
        return (self.wnid, self.template.value, self.background or "", self.index_in_class)


@dataclass
class GenerationPlan:
    plan_seed: int
    records: tuple[PromptRecord, ...]
    gen_params: GenParams
    catalog_name: str
    # Metadata only; never serialized into the plan file so identical inputs
    # stay byte-identical on disk.
    created_at: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def per_class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.records:
            counts[rec.wnid] = counts.get(rec.wnid, 0) + 1
        return counts


def render_prompt(
    entry: ClassEntry,
    template: PromptTemplate,
    background: Optional[str] = None,
) -> str:
    """Render one of the six fixed templates for a class entry."""
    if template.needs_background:
        if background is None:
            raise PlanError(f"{template.value} requires a background scene")
    elif background is not None:
        raise PlanError(f"{template.value} does not take a background")

    c = lemmas_string(entry)
    h = hypernym_string(entry)
    if template is PromptTemplate.NAME:
        return c
    if template is PromptTemplate.NAME_HYPERNYM:
        return f"{c}, {h}"
    if template is PromptTemplate.NAME_DEFINITION:
        return f"{c}, {definition_string(entry)}"
    if template is PromptTemplate.MULTI_HYPERNYM:
        return f"a photo of multiple {c}, {h}"
    if template is PromptTemplate.MULTI_DIFFERENT_HYPERNYM:
        return f"a photo of multiple different {c}, {h}"
    return f"{c}, {h} inside {background}"


def derive_seed(
    plan_seed: int,
    wnid: str,
    template_id: str,
    background: str,
    index_in_class: int,
) -> int:
    """Low 64 bits (little-endian) of SHA-256 over the record's identity string."""
    message = f"{plan_seed}|{wnid}|{template_id}|{background}|{index_in_class}"
    digest = hashlib.sha256(message.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _background_order(plan_seed: int, wnid: str, backgrounds: BackgroundSet) -> list[str]:
    # Per-class permutation so scene coverage is uniform yet class-specific.
    rng = random.Random(derive_seed(plan_seed, wnid, "BG_ORDER", "", 0))
    order = list(backgrounds.scenes)
    rng.shuffle(order)
    return order


def build_plan(
    catalog: ClassCatalog,
    templates: Sequence[PromptTemplate],
    per_class_counts: Mapping[str, int],
    backgrounds: Optional[BackgroundSet] = None,
    plan_seed: int = 0,
    gen_params: GenParams = GenParams(),
) -> GenerationPlan:
    """Compile a deterministic plan preserving the requested per-class counts.

    Templates are cycled round-robin in the given order; background records
    walk a per-class shuffled permutation of the scene set.
    """
    if not templates:
        raise PlanError("at least one template is required")
    if any(t.needs_background for t in templates) and backgrounds is None:
        raise PlanError("HYPERNYM_BACKGROUND template requires a background set")
    for wnid, count in per_class_counts.items():
        if count <= 0:
            raise PlanError(f"{wnid}: count must be positive, got {count}")

    catalog_wnids = set(catalog.wnids)
    unknown = sorted(set(per_class_counts) - catalog_wnids)
    if unknown:
        raise PlanError(f"count requested for wnid(s) not in catalog: {unknown}")

    records = []
    for entry in catalog:
        count = per_class_counts.get(entry.wnid, 0)
        if count == 0:
            continue
        bg_order: list[str] = []
        bg_cursor = 0
        for index_in_class in range(count):
            template = templates[index_in_class % len(templates)]
            background = None
            if template.needs_background:
                if not bg_order:
                    bg_order = _background_order(plan_seed, entry.wnid, backgrounds)
                background = bg_order[bg_cursor % len(bg_order)]
                bg_cursor += 1
            seed = derive_seed(
                plan_seed, entry.wnid, template.value, background or "", index_in_class
            )
            records.append(
                PromptRecord(
                    wnid=entry.wnid,
                    class_index=entry.class_index,
                    template=template,
                    background=background,
                    prompt_text=render_prompt(entry, template, background),
                    seed=seed,
                    index_in_class=index_in_class,
                )
            )

    return GenerationPlan(
        plan_seed=plan_seed,
        records=tuple(records),
        gen_params=gen_params,
        catalog_name=catalog.name,
    )


def _dump_json_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_plan(plan: GenerationPlan, path: str | Path) -> None:
    """Serialize as JSON Lines: one header line, then one line per record."""
    header = {
        "catalog_name": plan.catalog_name,
        "gen_params": plan.gen_params.to_dict(),
        "plan_seed": plan.plan_seed,
    }
    lines = [_dump_json_line(header)]
    for rec in plan.records:
        lines.append(
            _dump_json_line(
                {
                    "wnid": rec.wnid,
                    "class_index": rec.class_index,
                    "template": rec.template.value,
                    "background": rec.background,
                    "prompt": rec.prompt_text,
                    "seed": rec.seed,
                    "index_in_class": rec.index_in_class,
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_plan(path: str | Path) -> GenerationPlan:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PlanError(f"{path}: empty plan file")
    header = json.loads(lines[0])
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        row = json.loads(line)
        records.append(
            PromptRecord(
                wnid=row["wnid"],
                class_index=row["class_index"],
                template=PromptTemplate(row["template"]),
                background=row["background"],
                prompt_text=row["prompt"],
                seed=row["seed"],
                index_in_class=row["index_in_class"],
            )
        )
    return GenerationPlan(
        plan_seed=header["plan_seed"],
        records=tuple(records),
        gen_params=GenParams.from_dict(header["gen_params"]),
        catalog_name=header["catalog_name"],
    )
