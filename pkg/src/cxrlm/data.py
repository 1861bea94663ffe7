"""Synthetic instruction data over structured findings.

Each example pairs a sampled findings document with an instruction and a
rule-template response. Responses are pure functions of the document (plus
the catalog's criticality flags), so gold labels are exact by construction.

The ``label_query`` task asks whether any finding is critical. Criticality is
never written into the input; it lives in the catalog and in the knowledge
graph built from it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .findings import Finding, StructuredImageRepr, parse_findings, serialize_findings, FindingsError
from .kg import Concept, KnowledgeGraph, init_embeddings

TASK_KINDS = ("report", "vqa_yesno", "vqa_factoid", "label_query", "ddx_rank")

INSTR_REPORT = "describe the findings"
INSTR_CRITICAL = "is there a critical finding ?"
INSTR_DDX = "rank the differential diagnosis"


def instr_yesno(name: str) -> str:
    return f"is there {name} ?"


def instr_where(name: str) -> str:
    return f"where is the {name} ?"


@dataclass(frozen=True)
class Pathology:
    name: str
    synonyms: tuple[str, ...] = ()
    prevalence: float = 1.0
    critical: bool = False
    category: str = "lung"

    def __post_init__(self):
        object.__setattr__(self, "synonyms", tuple(self.synonyms))


DEFAULT_PATHOLOGIES = (
    Pathology("atelectasis", ("collapse",), 0.10, False, "lung"),
    Pathology("cardiomegaly", ("enlarged_heart",), 0.12, False, "cardiac"),
    Pathology("consolidation", ("airspace_disease",), 0.08, False, "lung"),
    Pathology("edema", ("pulmonary_edema",), 0.06, True, "lung"),
    Pathology("pleural_effusion", ("effusion",), 0.14, False, "pleura"),
    Pathology("pneumonia", ("bronchopneumonia",), 0.05, True, "lung"),
    Pathology("pneumothorax", ("ptx",), 0.03, True, "pleura"),
    Pathology("lung_opacity", ("opacity",), 0.12, False, "lung"),
    Pathology("lung_lesion", ("nodule", "mass"), 0.04, True, "lung"),
    Pathology("fracture", ("rib_fracture",), 0.03, False, "bone"),
    Pathology("enlarged_cardiomediastinum", ("widened_mediastinum",), 0.03, True, "mediastinum"),
    Pathology("pleural_other", ("pleural_thickening",), 0.02, False, "pleura"),
    Pathology("support_devices", ("lines_and_tubes",), 0.10, False, "device"),
    Pathology("emphysema", ("hyperinflation",), 0.03, False, "lung"),
)

DEFAULT_LOCATIONS = {
    "lung": ("right_upper_lobe", "right_middle_lobe", "right_lower_lobe", "left_upper_lobe", "left_lower_lobe"),
    "pleura": ("left_costophrenic_angle", "right_costophrenic_angle", "left_apex", "right_apex"),
    "cardiac": ("heart",),
    "mediastinum": ("mediastinum",),
    "bone": ("left_ribs", "right_ribs"),
    "device": ("right_hemithorax", "left_hemithorax"),
}

DEFAULT_ATTRIBUTES = {"size": ("small", "moderate", "large"), "severity": ("mild", "moderate", "severe")}
DEFAULT_RELATIONS = ("adjacent_to", "obscuring")
DEFAULT_TASK_MIX = {"report": 0.3, "vqa_yesno": 0.2, "vqa_factoid": 0.15, "label_query": 0.2, "ddx_rank": 0.15}
RARE_PREVALENCE = 0.05


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_examples: int = 100
    pathologies: tuple[Pathology, ...] = DEFAULT_PATHOLOGIES
    locations: dict = field(default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_LOCATIONS.items()})
    attributes: dict = field(default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_ATTRIBUTES.items()})
    relations: tuple[str, ...] = DEFAULT_RELATIONS
    task_mix: dict = field(default_factory=lambda: dict(DEFAULT_TASK_MIX))
    max_findings: int = 3
    p_normal: float = 0.15
    p_attribute: float = 0.3
    p_relation: float = 0.2
    alias_rate: float = 0.0     # chance a finding is written with a synonym instead of its name
    n_aliases: int = 0          # extra synthetic synonyms per pathology, "<name>_alt<k>"
    d_know: int = 16

    def __post_init__(self):
        object.__setattr__(self, "pathologies", tuple(p if isinstance(p, Pathology) else Pathology(**p) for p in self.pathologies))
        object.__setattr__(self, "relations", tuple(self.relations))
        self.validate()

    def validate(self):
        if self.n_examples < 0:
            raise DataError("n_examples must be non-negative")
        if not self.pathologies:
            raise DataError("pathology catalog is empty")
        if not self.task_mix or set(self.task_mix) - set(TASK_KINDS):
            raise DataError(f"task_mix must use kinds from {TASK_KINDS}")
        if any(w < 0 for w in self.task_mix.values()) or not math.isclose(sum(self.task_mix.values()), 1.0, abs_tol=1e-9):
            raise DataError("task_mix proportions must be non-negative and sum to 1")
        if self.max_findings < 1 or self.max_findings > len(self.pathologies):
            raise DataError("max_findings must lie in [1, number of pathologies]")
        for p in self.pathologies:
            if p.prevalence <= 0:
                raise DataError(f"pathology {p.name} needs a positive prevalence")
            if not self.locations.get(p.category):
                raise DataError(f"no locations for category {p.category!r}")
        if not self.relations:
            raise DataError("relation catalog is empty")
        for name, values in self.attributes.items():
            if not values:
                raise DataError(f"attribute {name!r} has no values")
        for prob in (self.p_normal, self.p_attribute, self.p_relation, self.alias_rate):
            if not 0 <= prob <= 1:
                raise DataError("probabilities must lie in [0, 1]")
        if self.n_aliases < 0 or self.d_know < 1:
            raise DataError("n_aliases must be >= 0 and d_know >= 1")

    def surface_forms(self, p: Pathology) -> tuple[str, ...]:
        return p.synonyms + tuple(f"{p.name}_alt{k}" for k in range(1, self.n_aliases + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pathologies"] = [asdict(p) | {"synonyms": list(p.synonyms)} for p in self.pathologies]
        d["locations"] = {k: list(v) for k, v in self.locations.items()}
        d["attributes"] = {k: list(v) for k, v in self.attributes.items()}
        d["relations"] = list(self.relations)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise DataError(f"unknown generator config fields: {sorted(extra)}")
        obj = dict(obj)
        if "pathologies" in obj:
            obj["pathologies"] = tuple(Pathology(**p) for p in obj["pathologies"])
        for key in ("locations", "attributes"):
            if key in obj:
                obj[key] = {k: tuple(v) for k, v in obj[key].items()}
        try:
            return cls(**obj)
        except TypeError as exc:
            raise DataError(f"bad generator config: {exc}") from exc


@dataclass(frozen=True)
class InstructionExample:
    image_repr: StructuredImageRepr
    instruction: str
    response: str
    task_kind: str
    gold_labels: frozenset[str]
    gold_ranking: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "gold_labels", frozenset(self.gold_labels))
        if self.gold_ranking is not None:
            object.__setattr__(self, "gold_ranking", tuple(self.gold_ranking))
        if self.task_kind not in TASK_KINDS:
            raise DataError(f"unknown task kind {self.task_kind!r}")
        if not self.response:
            raise DataError("response must be non-empty")
        if (self.gold_ranking is not None) != (self.task_kind == "ddx_rank"):
            raise DataError("gold_ranking is required for ddx_rank examples and only for them")

    @property
    def image_text(self) -> str:
        return serialize_findings(self.image_repr)


# -- knowledge graph from the catalog ---------------------------------------

def build_kg(config: GeneratorConfig, seed: int | None = None) -> KnowledgeGraph:
    """Pathology, location and relation concepts; ``has_location`` edges; U(-0.1, 0.1) embeddings."""
    concepts: list[Concept] = []
    for p in config.pathologies:
        concepts.append(Concept(len(concepts), p.name, config.surface_forms(p), p.critical, p.category))
    loc_id = {}
    for cat in sorted(config.locations):
        for loc in config.locations[cat]:
            if loc not in loc_id:
                loc_id[loc] = len(concepts)
                concepts.append(Concept(len(concepts), loc, (), False, "location"))
    for rel in config.relations:
        concepts.append(Concept(len(concepts), rel, (), False, "relation"))
    edges = []
    for i, p in enumerate(config.pathologies):
        for loc in config.locations[p.category]:
            edges.append((i, "has_location", loc_id[loc]))
    emb = init_embeddings(len(concepts), config.d_know, config.seed if seed is None else seed)
    return KnowledgeGraph(concepts, edges, emb, config.d_know)


# -- responses --------------------------------------------------------------

class Catalog:
    """Surface-form lookups over a generator config."""

    def __init__(self, config: GeneratorConfig):
        self.config = config
        self.by_name = {p.name: p for p in config.pathologies}
        self.canonical = {}
        for p in config.pathologies:
            for form in (p.name, *config.surface_forms(p)):
                self.canonical[form] = p.name
        self.order = {p.name: i for i, p in enumerate(config.pathologies)}

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.config.pathologies]

    def is_critical(self, name: str) -> bool:
        return self.by_name[self.canonical[name]].critical

    def rare(self) -> set[str]:
        return {p.name for p in self.config.pathologies if p.prevalence < RARE_PREVALENCE}


def _loc_text(location: Sequence[str]) -> str:
    return " / ".join(location)


def report_response(doc: StructuredImageRepr, catalog: Catalog) -> str:
    if not doc.findings:
        return "findings : none"
    parts = [f"{catalog.canonical[f.entity]} @ {_loc_text(f.location)}" if f.location else catalog.canonical[f.entity] for f in doc.findings]
    return "findings : " + " ; ".join(parts)


def ddx_ranking(doc: StructuredImageRepr, catalog: Catalog) -> tuple[str, ...]:
    names = {catalog.canonical[f.entity] for f in doc.findings}
    return tuple(sorted(names, key=lambda n: (not catalog.by_name[n].critical, catalog.order[n])))


def respond(doc: StructuredImageRepr, task_kind: str, catalog: Catalog, subject: str | None = None) -> str:
    """Template response for ``task_kind``; ``subject`` is the pathology a VQA question asks about."""
    present = {catalog.canonical[f.entity] for f in doc.findings}
    if task_kind == "report":
        return report_response(doc, catalog)
    if task_kind == "vqa_yesno":
        return f"yes {subject}" if subject in present else f"no {subject}"
    if task_kind == "vqa_factoid":
        f = next(f for f in doc.findings if catalog.canonical[f.entity] == subject)
        return _loc_text(f.location) if f.location else "unspecified"
    if task_kind == "label_query":
        return "yes" if any(catalog.is_critical(n) for n in present) else "no"
    if task_kind == "ddx_rank":
        return "ddx : " + " , ".join(ddx_ranking(doc, catalog))
    raise DataError(f"unknown task kind {task_kind!r}")


# -- generation -------------------------------------------------------------

def _sample_document(rng: np.random.Generator, config: GeneratorConfig, min_findings: int) -> StructuredImageRepr:
    paths = config.pathologies
    if min_findings == 0 and rng.random() < config.p_normal:
        n = 0
    else:
        n = int(rng.integers(max(1, min_findings), config.max_findings + 1))
    weights = np.array([p.prevalence for p in paths])
    chosen = rng.choice(len(paths), size=n, replace=False, p=weights / weights.sum()) if n else []
    findings = []
    for fid, idx in enumerate(chosen, start=1):
        p = paths[int(idx)]
        forms = config.surface_forms(p)
        entity = p.name
        if forms and rng.random() < config.alias_rate:
            entity = forms[int(rng.integers(len(forms)))]
        locs = config.locations[p.category]
        location = (locs[int(rng.integers(len(locs)))],)
        attrs = tuple((k, vals[int(rng.integers(len(vals)))]) for k, vals in config.attributes.items() if rng.random() < config.p_attribute)
        rels = ()
        if n > 1 and rng.random() < config.p_relation:
            target = int(rng.choice([t for t in range(1, n + 1) if t != fid]))
            rels = ((config.relations[int(rng.integers(len(config.relations)))], target),)
        findings.append(Finding(fid, entity, location, attrs, rels))
    return StructuredImageRepr(tuple(findings))


def generate_example(config: GeneratorConfig, index: int, catalog: Catalog | None = None) -> InstructionExample:
    catalog = catalog or Catalog(config)
    rng = np.random.default_rng([config.seed, index])
    kinds = [k for k in TASK_KINDS if k in config.task_mix]
    probs = np.array([config.task_mix[k] for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    doc = _sample_document(rng, config, 1 if kind in ("vqa_factoid", "ddx_rank") else 0)
    present = [catalog.canonical[f.entity] for f in doc.findings]

    subject = None
    if kind == "vqa_yesno":
        absent = [n for n in catalog.names if n not in present]
        if present and (not absent or rng.random() < 0.5):
            subject = present[int(rng.integers(len(present)))]
        else:
            w = np.array([catalog.by_name[n].prevalence for n in absent])
            subject = absent[int(rng.choice(len(absent), p=w / w.sum()))]
        instruction = instr_yesno(subject)
    elif kind == "vqa_factoid":
        subject = present[int(rng.integers(len(present)))]
        instruction = instr_where(subject)
    elif kind == "report":
        instruction = INSTR_REPORT
    elif kind == "label_query":
        instruction = INSTR_CRITICAL
    else:
        instruction = INSTR_DDX

    return InstructionExample(
        image_repr=doc,
        instruction=instruction,
        response=respond(doc, kind, catalog, subject),
        task_kind=kind,
        gold_labels=frozenset(present),
        gold_ranking=ddx_ranking(doc, catalog) if kind == "ddx_rank" else None,
    )


def generate_dataset(config: GeneratorConfig, start: int = 0, stop: int | None = None) -> list[InstructionExample]:
    """Examples ``start..stop`` (default: all). Each index has its own derived seed,
    so concatenating shards in index order reproduces the unsharded dataset."""
    stop = config.n_examples if stop is None else min(stop, config.n_examples)
    catalog = Catalog(config)
    return [generate_example(config, i, catalog) for i in range(start, stop)]


def vocab_corpus(dataset: Iterable[InstructionExample], kg: KnowledgeGraph | None = None) -> list[str]:
    corpus = []
    for ex in dataset:
        corpus.extend([ex.image_text, ex.instruction, ex.response])
    if kg is not None:
        corpus.extend(form for c in kg.concepts for form in c.surface_forms)
    return corpus


# -- JSONL I/O --------------------------------------------------------------

class DatasetFormatError(DataError):
    pass


_RECORD_KEYS = ("image_repr", "instruction", "response", "task_kind", "gold_labels", "gold_ranking")


def example_to_record(ex: InstructionExample) -> dict:
    return {
        "image_repr": ex.image_text,
        "instruction": ex.instruction,
        "response": ex.response,
        "task_kind": ex.task_kind,
        "gold_labels": sorted(ex.gold_labels),
        "gold_ranking": list(ex.gold_ranking) if ex.gold_ranking is not None else None,
    }


def example_from_record(rec) -> InstructionExample:
    if not isinstance(rec, dict) or set(rec) != set(_RECORD_KEYS):
        raise DataError(f"record must have exactly the fields {list(_RECORD_KEYS)}")
    return InstructionExample(
        image_repr=parse_findings(rec["image_repr"]),
        instruction=rec["instruction"],
        response=rec["response"],
        task_kind=rec["task_kind"],
        gold_labels=frozenset(rec["gold_labels"]),
        gold_ranking=tuple(rec["gold_ranking"]) if rec["gold_ranking"] is not None else None,
    )


def dumps_jsonl(dataset: Iterable[InstructionExample]) -> str:
    return "".join(json.dumps(example_to_record(ex)) + "\n" for ex in dataset)


def write_jsonl(dataset: Iterable[InstructionExample], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_jsonl(dataset))
    os.replace(tmp, path)


def read_jsonl(path) -> list[InstructionExample]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise DatasetFormatError(f"{path}:{lineno}: truncated line (missing newline)")
            try:
                out.append(example_from_record(json.loads(line)))
            except (json.JSONDecodeError, DataError, FindingsError, TypeError, KeyError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


# -- splitting --------------------------------------------------------------

def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier part."""
    fr = np.asarray(fractions, dtype=float)
    if len(fr) == 0 or np.any(fr < 0) or fr.sum() <= 0:
        raise DataError("split fractions must be non-negative with a positive sum")
    quotas = fr / fr.sum() * n
    sizes = np.floor(quotas).astype(int)
    remainder = n - sizes.sum()
    order = sorted(range(len(fr)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes.tolist()


def split(dataset: Sequence, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, ...]:
    sizes = split_sizes(len(dataset), fractions)
    perm = np.random.default_rng(seed).permutation(len(dataset))
    parts, start = [], 0
    for size in sizes:
        parts.append([dataset[int(i)] for i in perm[start : start + size]])
        start += size
    return tuple(parts)
