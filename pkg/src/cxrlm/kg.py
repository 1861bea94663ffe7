"""Radiology knowledge graph: concepts, typed edges, per-concept embeddings.

Concepts are looked up by exact surface form (name or synonym) and the
embeddings of the matched concepts are averaged into one knowledge vector
per input sequence.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

KG_FORMAT_VERSION = 1


class KGError(DataError):
    pass


class KGFormatError(KGError):
    pass


class DuplicateSurfaceFormError(KGError):
    pass


class BadEdgeError(KGError):
    pass


@dataclass(frozen=True)
class Concept:
    concept_id: int
    name: str
    synonyms: tuple[str, ...] = ()
    is_critical: bool = False
    category: str = "pathology"

    def __post_init__(self):
        object.__setattr__(self, "synonyms", tuple(self.synonyms))

    @property
    def surface_forms(self) -> tuple[str, ...]:
        return (self.name, *self.synonyms)


@dataclass(frozen=True)
class ConceptMatchSet:
    concept_ids: tuple[int, ...] = ()

    def __post_init__(self):
        ids = tuple(self.concept_ids)
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("concept ids must be sorted ascending without duplicates")
        object.__setattr__(self, "concept_ids", ids)

    @classmethod
    def of(cls, ids: Iterable[int]) -> "ConceptMatchSet":
        return cls(tuple(sorted(set(int(i) for i in ids))))

    def __len__(self) -> int:
        return len(self.concept_ids)

    def __iter__(self):
        return iter(self.concept_ids)


class KnowledgeGraph:
    def __init__(self, concepts: Sequence[Concept], edges: Sequence[tuple[int, str, int]], embeddings, d_know: int | None = None):
        self.concepts = tuple(concepts)
        self.edges = tuple((int(s), str(r), int(d)) for s, r, d in edges)
        emb = np.array(embeddings, dtype=np.float64)
        if emb.size == 0 and d_know is not None:
            emb = emb.reshape(0, d_know)
        self.embeddings = emb
        self.d_know = int(d_know if d_know is not None else emb.shape[-1])
        self._validate()

    def _validate(self):
        if self.d_know <= 0:
            raise KGError(f"d_know must be positive, got {self.d_know}")
        if self.embeddings.shape != (len(self.concepts), self.d_know):
            raise KGError(f"embedding matrix has shape {self.embeddings.shape}, expected {(len(self.concepts), self.d_know)}")
        if not np.all(np.isfinite(self.embeddings)):
            raise KGError("embeddings contain non-finite values")
        for i, c in enumerate(self.concepts):
            if c.concept_id != i:
                raise KGError(f"concept {c.name!r} has id {c.concept_id}, expected {i}")
        seen: dict[str, int] = {}
        for c in self.concepts:
            for form in c.surface_forms:
                if form in seen:
                    raise DuplicateSurfaceFormError(f"surface form {form!r} used by concepts {seen[form]} and {c.concept_id}")
                seen[form] = c.concept_id
        n = len(self.concepts)
        for src, rel, dst in self.edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise BadEdgeError(f"edge ({src}, {rel!r}, {dst}) references a concept outside [0, {n})")

    @cached_property
    def surface_index(self) -> dict[str, int]:
        return {form: c.concept_id for c in self.concepts for form in c.surface_forms}

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def concept(self, surface: str) -> Concept:
        return self.concepts[self.surface_index[surface]]

    def with_embeddings(self, embeddings) -> "KnowledgeGraph":
        return KnowledgeGraph(self.concepts, self.edges, np.array(embeddings, dtype=np.float64), self.d_know)

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.concepts == other.concepts
            and self.edges == other.edges
            and self.d_know == other.d_know
            and self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )

    def __repr__(self):
        return f"KnowledgeGraph({self.n_concepts} concepts, {len(self.edges)} edges, d_know={self.d_know})"


def init_embeddings(n_concepts: int, d_know: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.1, 0.1, size=(n_concepts, d_know))


def match_concepts(tokens: Sequence[str], kg: KnowledgeGraph) -> ConceptMatchSet:
    index = kg.surface_index
    return ConceptMatchSet.of(index[t] for t in set(tokens) if t in index)


def aggregate_knowledge(matches: ConceptMatchSet, kg: KnowledgeGraph | None = None, embeddings: np.ndarray | None = None) -> np.ndarray:
    """Mean of the matched concept embeddings; zero vector when nothing matched.

    ``embeddings`` overrides the graph's own table (used when the table is a
    trained model parameter).
    """
    table = kg.embeddings if embeddings is None else embeddings
    if len(matches) == 0:
        return np.zeros(table.shape[1])
    return table[list(matches.concept_ids)].mean(axis=0)


# -- file I/O ---------------------------------------------------------------

_TOP_KEYS = {"version", "d_know", "concepts", "edges", "embeddings"}
_CONCEPT_KEYS = {"id", "name", "synonyms", "category", "is_critical"}
_EDGE_KEYS = {"src", "rel", "dst"}


def kg_to_dict(kg: KnowledgeGraph) -> dict:
    return {
        "version": KG_FORMAT_VERSION,
        "d_know": kg.d_know,
        "concepts": [
            {"id": c.concept_id, "name": c.name, "synonyms": list(c.synonyms), "category": c.category, "is_critical": c.is_critical}
            for c in kg.concepts
        ],
        "edges": [{"src": s, "rel": r, "dst": d} for s, r, d in kg.edges],
        "embeddings": [[float(x) for x in row] for row in kg.embeddings],
    }


def _require_keys(obj, keys: set, what: str):
    if not isinstance(obj, dict):
        raise KGFormatError(f"{what} must be an object")
    if set(obj) != keys:
        missing, extra = keys - set(obj), set(obj) - keys
        raise KGFormatError(f"{what}: missing fields {sorted(missing)}, unexpected fields {sorted(extra)}")


def kg_from_dict(obj) -> KnowledgeGraph:
    _require_keys(obj, _TOP_KEYS, "knowledge graph")
    if obj["version"] != KG_FORMAT_VERSION:
        raise KGFormatError(f"unsupported KG version {obj['version']!r}")
    d_know = obj["d_know"]
    if not isinstance(d_know, int) or isinstance(d_know, bool):
        raise KGFormatError("d_know must be an integer")
    concepts = []
    for i, c in enumerate(obj["concepts"]):
        _require_keys(c, _CONCEPT_KEYS, f"concept #{i}")
        if not isinstance(c["synonyms"], list) or not isinstance(c["is_critical"], bool):
            raise KGFormatError(f"concept #{i}: bad synonyms or is_critical field")
        concepts.append(Concept(c["id"], c["name"], tuple(c["synonyms"]), c["is_critical"], c["category"]))
    edges = []
    for i, e in enumerate(obj["edges"]):
        _require_keys(e, _EDGE_KEYS, f"edge #{i}")
        edges.append((e["src"], e["rel"], e["dst"]))
    rows = obj["embeddings"]
    if not isinstance(rows, list) or len(rows) != len(concepts) or any(not isinstance(r, list) or len(r) != d_know for r in rows):
        raise KGFormatError(f"embeddings must be {len(concepts)} rows of {d_know} numbers")
    for r in rows:
        for x in r:
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                raise KGFormatError(f"embedding entry {x!r} is not a finite number")
    emb = np.array(rows, dtype=np.float64).reshape(len(concepts), d_know)
    return KnowledgeGraph(concepts, edges, emb, d_know)


def save_kg(kg: KnowledgeGraph, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(kg_to_dict(kg), fh, indent=1, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def load_kg(path) -> KnowledgeGraph:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise KGFormatError(f"{path}: not valid JSON ({exc})") from exc
    return kg_from_dict(obj)


class ConceptIndex:
    """Token-id level matcher: maps a vocabulary onto knowledge-graph concepts."""

    def __init__(self, kg: KnowledgeGraph, vocab):
        self.kg = kg
        self.table = np.full(len(vocab), -1, dtype=np.int64)
        for form, cid in kg.surface_index.items():
            if form in vocab:
                self.table[vocab.token_to_id[form]] = cid

    def match(self, ids: Sequence[int]) -> ConceptMatchSet:
        if len(ids) == 0:
            return ConceptMatchSet()
        hits = np.unique(self.table[np.asarray(ids, dtype=np.int64)])
        return ConceptMatchSet(tuple(int(c) for c in hits if c >= 0))
