"""Structured findings documents: the textual stand-in for image content.

One finding per line::

    1: consolidation @right_lower_lobe {size=large} ->adjacent_to#2
    2: pleural_effusion @left_costophrenic_angle

Grammar::

    finding  := INT ':' IDENT [ '@' IDENT ('/' IDENT)* ] [ '{' pair (',' pair)* '}' ]
                ( '->' IDENT '#' INT )* NEWLINE
    pair     := IDENT '=' IDENT
    IDENT    := [a-z_][a-z0-9_]*
    INT      := [1-9][0-9]*

Spaces and tabs between tokens are ignored by the parser. The serializer emits
the canonical form shown above.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator

from .errors import DataError

if TYPE_CHECKING:
    from .kg import KnowledgeGraph

IDENT_RE = re.compile(r"[a-z_][a-z0-9_]*\Z")
INT_RE = re.compile(r"[1-9][0-9]*\Z")


class FindingsError(DataError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class FindingsSyntaxError(FindingsError):
    pass


class DanglingRelationError(FindingsError):
    pass


class DuplicateIdError(FindingsError):
    pass


class IdOrderError(FindingsError):
    pass


class DuplicateAttributeError(FindingsError):
    pass


@dataclass(frozen=True)
class Finding:
    id: int
    entity: str
    location: tuple[str, ...] = ()
    attributes: tuple[tuple[str, str], ...] = ()
    relations: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        # accept lists from callers, store tuples so the value stays hashable
        object.__setattr__(self, "location", tuple(self.location))
        object.__setattr__(self, "attributes", tuple(tuple(p) for p in self.attributes))
        object.__setattr__(self, "relations", tuple(tuple(r) for r in self.relations))


@dataclass(frozen=True)
class StructuredImageRepr:
    findings: tuple[Finding, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "findings", tuple(self.findings))

    def __len__(self) -> int:
        return len(self.findings)

    def __iter__(self) -> Iterator[Finding]:
        return iter(self.findings)

    @property
    def entities(self) -> list[str]:
        return [f.entity for f in self.findings]

    def identifiers(self) -> dict[str, set[str]]:
        """Entity, location and relation identifiers used by the document."""
        out: dict[str, set[str]] = {"entity": set(), "location": set(), "relation": set()}
        for f in self.findings:
            out["entity"].add(f.entity)
            out["location"].update(f.location)
            out["relation"].update(rel for rel, _ in f.relations)
        return out


# -- lexing -----------------------------------------------------------------

_TOKEN_RE = re.compile(r"->|[:@/{}=,#]|[0-9]+|[a-z_][a-z0-9_]*")
_BLANK = " \t"


def _lex_line(line: str, lineno: int) -> list[tuple[str, str, int]]:
    """Returns (kind, text, column) triples; kind is INT, IDENT or the punctuation itself."""
    tokens = []
    pos = 0
    while pos < len(line):
        ch = line[pos]
        if ch in _BLANK:
            pos += 1
            continue
        m = _TOKEN_RE.match(line, pos)
        if m is None:
            raise FindingsSyntaxError(f"unexpected character {ch!r}", lineno, pos + 1)
        text = m.group()
        if text[0].isdigit():
            if not INT_RE.match(text):
                raise FindingsSyntaxError(f"invalid integer {text!r}", lineno, pos + 1)
            kind = "INT"
        elif text[0] == "_" or text[0].isalpha():
            kind = "IDENT"
        else:
            kind = text
        tokens.append((kind, text, pos + 1))
        pos = m.end()
    return tokens


class _LineParser:
    def __init__(self, line: str, lineno: int):
        self.lineno = lineno
        self.tokens = _lex_line(line, lineno)
        self.pos = 0
        self.end_col = len(line) + 1

    def peek(self) -> str | None:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def expect(self, kind: str) -> str:
        if self.pos >= len(self.tokens):
            raise FindingsSyntaxError(f"expected {kind}, found end of line", self.lineno, self.end_col)
        got, text, col = self.tokens[self.pos]
        if got != kind:
            raise FindingsSyntaxError(f"expected {kind}, found {text!r}", self.lineno, col)
        self.pos += 1
        return text

    def column(self) -> int:
        return self.tokens[self.pos][2] if self.pos < len(self.tokens) else self.end_col

    def parse(self) -> Finding:
        fid = int(self.expect("INT"))
        self.expect(":")
        entity = self.expect("IDENT")

        location: list[str] = []
        if self.peek() == "@":
            self.pos += 1
            location.append(self.expect("IDENT"))
            while self.peek() == "/":
                self.pos += 1
                location.append(self.expect("IDENT"))

        attributes: list[tuple[str, str]] = []
        if self.peek() == "{":
            self.pos += 1
            seen = set()
            while True:
                col = self.column()
                key = self.expect("IDENT")
                self.expect("=")
                value = self.expect("IDENT")
                if key in seen:
                    raise DuplicateAttributeError(f"duplicate attribute key {key!r}", self.lineno, col)
                seen.add(key)
                attributes.append((key, value))
                if self.peek() == ",":
                    self.pos += 1
                    continue
                self.expect("}")
                break

        relations: list[tuple[str, int]] = []
        while self.peek() == "->":
            self.pos += 1
            rel = self.expect("IDENT")
            self.expect("#")
            relations.append((rel, int(self.expect("INT"))))

        if self.pos != len(self.tokens):
            _, text, col = self.tokens[self.pos]
            raise FindingsSyntaxError(f"unexpected token {text!r}", self.lineno, col)
        return Finding(fid, entity, tuple(location), tuple(attributes), tuple(relations))


def parse_findings(text: str) -> StructuredImageRepr:
    """Parses a findings document, raising a ``FindingsError`` subclass on failure."""
    if text == "":
        return StructuredImageRepr(())
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()  # newline-terminated final line

    findings: list[Finding] = []
    line_of: dict[int, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if line.strip(_BLANK) == "":
            raise FindingsSyntaxError("empty line", lineno, 1)
        finding = _LineParser(line, lineno).parse()
        if finding.id in line_of:
            raise DuplicateIdError(
                f"duplicate finding id {finding.id} (first defined on line {line_of[finding.id]})", lineno, 1
            )
        if findings and finding.id < findings[-1].id:
            raise IdOrderError(f"finding id {finding.id} follows id {findings[-1].id}", lineno, 1)
        line_of[finding.id] = lineno
        findings.append(finding)

    for f in findings:
        for rel, target in f.relations:
            if target not in line_of:
                raise DanglingRelationError(
                    f"relation {rel!r} of finding {f.id} targets missing finding {target}", line_of[f.id]
                )
    return StructuredImageRepr(tuple(findings))


def serialize_findings(doc: StructuredImageRepr) -> str:
    lines = []
    for f in sorted(doc.findings, key=lambda f: f.id):
        parts = [f"{f.id}:", f.entity]
        if f.location:
            parts.append("@" + "/".join(f.location))
        if f.attributes:
            parts.append("{" + ",".join(f"{k}={v}" for k, v in f.attributes) + "}")
        parts.extend(f"->{rel}#{target}" for rel, target in f.relations)
        lines.append(" ".join(parts) + "\n")
    return "".join(lines)


def check_document(doc: StructuredImageRepr) -> None:
    """Raises if ``doc`` violates a Finding invariant or uses a malformed identifier."""
    seen: set[int] = set()
    prev = 0
    for f in doc.findings:
        if not isinstance(f.id, int) or f.id < 1:
            raise FindingsSyntaxError(f"finding id must be a positive integer, got {f.id!r}")
        if f.id in seen:
            raise DuplicateIdError(f"duplicate finding id {f.id}")
        if f.id < prev:
            raise IdOrderError(f"finding id {f.id} follows id {prev}")
        seen.add(f.id)
        prev = f.id
        for ident in (f.entity, *f.location, *(x for pair in f.attributes for x in pair), *(r for r, _ in f.relations)):
            if not IDENT_RE.match(ident):
                raise FindingsSyntaxError(f"malformed identifier {ident!r} in finding {f.id}")
        keys = [k for k, _ in f.attributes]
        if len(set(keys)) != len(keys):
            raise DuplicateAttributeError(f"duplicate attribute key in finding {f.id}")
    for f in doc.findings:
        for rel, target in f.relations:
            if target not in seen:
                raise DanglingRelationError(f"relation {rel!r} of finding {f.id} targets missing finding {target}")


def validate_against_kg(doc: StructuredImageRepr, kg: "KnowledgeGraph") -> list[str]:
    """One warning per entity/location/relation identifier missing from the KG surface-form index."""
    warnings = []
    index = kg.surface_index
    seen: set[str] = set()
    for f in doc.findings:
        used = [("entity", f.entity)] + [("location", x) for x in f.location] + [("relation", r) for r, _ in f.relations]
        for kind, ident in used:
            if ident in index or ident in seen:
                continue
            seen.add(ident)
            warnings.append(f"{kind} {ident!r} (finding {f.id}) is not a knowledge-graph concept")
    return warnings
